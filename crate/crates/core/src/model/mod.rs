//! Probabilistic U-Net assembly: backbone, prior/posterior encoders, the
//! latent-sample combination head, the training objective, and prediction.
//!
//! Two network kinds exist. The probabilistic one pairs a U-Net with a prior
//! encoder (consuming the image) and a posterior encoder (consuming image and
//! mask); training samples the latent from the posterior and penalizes its KL
//! divergence from the prior, inference samples from the prior only. The
//! deterministic one is a plain U-Net used by the baseline, MC-dropout, and
//! ensemble configurations.

pub mod train;

use std::cell::Cell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Phase};
use crate::distributions::{kl_closed_form, kl_monte_carlo, Gaussian, LatentDistribution, Mixture};
use crate::error::{Error, Result};
use crate::params::{Graph, ParamId, ParamStore};
use crate::rng::{normal_vec, stream};
use crate::tensor::Tensor;

/// Covariance structure of each Gaussian component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovKind {
    /// Diagonal covariance (axis-aligned).
    Diag,
    /// Dense covariance via an unconstrained Cholesky parameterization.
    Full,
    /// `P Pᵀ + diag(D)` with a rank-`rank` factor `P`.
    LowRank { rank: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub components: usize,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub dim: usize,
    pub cov: CovKind,
    pub mixture: Option<MixtureSpec>,
}

impl LatentSpec {
    pub fn n_components(&self) -> usize {
        self.mixture.map_or(1, |m| m.components)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("latent dimension must be positive".to_string()));
        }
        if let CovKind::LowRank { rank } = self.cov {
            if rank == 0 || rank >= self.dim {
                return Err(Error::config(format!(
                    "low-rank rank must satisfy 1 <= rank <= {}, got {rank}",
                    self.dim.saturating_sub(1)
                )));
            }
        }
        if let Some(m) = self.mixture {
            if m.components == 0 {
                return Err(Error::config("mixture needs at least one component".to_string()));
            }
            if !(m.temperature > 0.0) {
                return Err(Error::config(format!(
                    "mixture temperature must be positive, got {}",
                    m.temperature
                )));
            }
        }
        Ok(())
    }
}

/// Everything needed to rebuild a network with the same parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub in_channels: usize,
    /// Input edge length; must be divisible by 8 (three pooling stages).
    pub image_size: usize,
    /// Encoder filter depths, shallow to deep; exactly three stages.
    pub filters: Vec<usize>,
    pub bottleneck: usize,
    /// `None` builds the deterministic U-Net.
    pub latent: Option<LatentSpec>,
    /// Dropout rate after every encoder/decoder block; 0 disables.
    pub dropout: f64,
    /// KL weight in the training objective; unused by deterministic nets.
    pub beta: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("input needs at least one channel".to_string()));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return Err(Error::config(format!(
                "image size must be a positive multiple of 8, got {}",
                self.image_size
            )));
        }
        if self.filters.len() != 3 || self.filters.contains(&0) {
            return Err(Error::config(format!(
                "expected three positive encoder filter depths, got {:?}",
                self.filters
            )));
        }
        if self.bottleneck == 0 {
            return Err(Error::config("bottleneck depth must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if let Some(latent) = &self.latent {
            latent.validate()?;
        }
        Ok(())
    }
}

/// How the KL term of the objective is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KlMode {
    /// Analytic Gaussian-to-Gaussian divergence; rejected for mixtures.
    ClosedForm,
    /// Average of `log q(z) - log p(z)` over fresh posterior samples.
    MonteCarlo { samples: usize },
}

/// Objective value with its two parts, as live tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub loss: NodeId,
    pub ce: NodeId,
    pub kl: NodeId,
}

/// One prediction: hard mask plus the class logits it came from.
#[derive(Debug, Clone)]
pub struct PredictedMask {
    pub mask: Vec<bool>,
    /// `[2, H, W]` flattened, class-major.
    pub logits: Vec<f64>,
}

// ----- layers -----

/// 3x3 convolution, ReLU, then batch normalization.
#[derive(Debug, Clone)]
struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stats: ParamId,
}

impl ConvBlock {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, ksize: usize, rng: &mut R) -> Self {
        let fan_in = (cin * ksize * ksize) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w: Vec<f64> = normal_vec(rng, cout * cin * ksize * ksize)
            .into_iter()
            .map(|e| e * std)
            .collect();
        let weight = store.add(format!("{name}.weight"), Tensor::new(vec![cout, cin, ksize, ksize], w).expect("sized above"));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        let gamma = store.add(format!("{name}.bn.gamma"), Tensor::filled(&[cout], 1.0));
        let beta = store.add(format!("{name}.bn.beta"), Tensor::zeros(&[cout]));
        // running mean (zeros) then running variance (ones)
        let mut stats_init = vec![0.0; 2 * cout];
        stats_init[cout..].fill(1.0);
        let stats = store.add_buffer(format!("{name}.bn.stats"), Tensor::new(vec![2 * cout], stats_init).expect("sized above"));
        ConvBlock { weight, bias, gamma, beta, stats }
    }

    fn forward(&self, g: &mut Graph, x: NodeId, phase: Phase) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.tape.conv2d(x, w, b)?;
        let y = g.tape.relu(y)?;
        g.batchnorm(y, self.gamma, self.beta, self.stats, phase)
    }
}

/// Fully connected layer on `[B, F]` features.
#[derive(Debug, Clone)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

impl Dense {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        weight_std: f64,
        bias_std: f64,
        rng: &mut R,
    ) -> Self {
        let w: Vec<f64> = normal_vec(rng, cin * cout).into_iter().map(|e| e * weight_std).collect();
        let b: Vec<f64> = normal_vec(rng, cout).into_iter().map(|e| e * bias_std).collect();
        Dense {
            weight: store.add(format!("{name}.weight"), Tensor::new(vec![cin, cout], w).expect("sized above")),
            bias: store.add(format!("{name}.bias"), Tensor::new(vec![cout], b).expect("sized above")),
        }
    }

    fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.tape.matmul(x, w)?;
        g.tape.add(y, b)
    }
}

// ----- backbone -----

/// Three-stage encoder/decoder with skip connections; output keeps the
/// input resolution with `filters[0]` channels.
pub struct UNetBackbone {
    enc: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    dec: Vec<ConvBlock>,
    dropout: f64,
}

impl UNetBackbone {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        filters: &[usize],
        bottleneck: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let enc = vec![
            ConvBlock::new(store, &format!("{name}.enc0"), in_channels, filters[0], 3, rng),
            ConvBlock::new(store, &format!("{name}.enc1"), filters[0], filters[1], 3, rng),
            ConvBlock::new(store, &format!("{name}.enc2"), filters[1], filters[2], 3, rng),
        ];
        let bottleneck_block = ConvBlock::new(store, &format!("{name}.bottleneck"), filters[2], bottleneck, 3, rng);
        // decoders consume the upsampled feature concatenated with the skip
        let dec = vec![
            ConvBlock::new(store, &format!("{name}.dec0"), bottleneck + filters[2], filters[2], 3, rng),
            ConvBlock::new(store, &format!("{name}.dec1"), filters[2] + filters[1], filters[1], 3, rng),
            ConvBlock::new(store, &format!("{name}.dec2"), filters[1] + filters[0], filters[0], 3, rng),
        ];
        UNetBackbone { enc, bottleneck: bottleneck_block, dec, dropout }
    }

    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        x: NodeId,
        phase: Phase,
        dropout_active: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        let e0 = self.enc[0].forward(g, x, phase)?;
        let e0 = g.tape.dropout(e0, self.dropout, dropout_active, rng)?;
        let p0 = g.tape.avg_pool2(e0)?;
        let e1 = self.enc[1].forward(g, p0, phase)?;
        let e1 = g.tape.dropout(e1, self.dropout, dropout_active, rng)?;
        let p1 = g.tape.avg_pool2(e1)?;
        let e2 = self.enc[2].forward(g, p1, phase)?;
        let e2 = g.tape.dropout(e2, self.dropout, dropout_active, rng)?;
        let p2 = g.tape.avg_pool2(e2)?;
        let mut h = self.bottleneck.forward(g, p2, phase)?;
        h = g.tape.dropout(h, self.dropout, dropout_active, rng)?;
        for (block, skip) in self.dec.iter().zip([e2, e1, e0]) {
            let up = g.tape.upsample_bilinear2(h)?;
            let cat = g.tape.concat_channels(&[up, skip])?;
            h = block.forward(g, cat, phase)?;
            h = g.tape.dropout(h, self.dropout, dropout_active, rng)?;
        }
        Ok(h)
    }
}

// ----- distribution encoders -----

/// Encoder emitting per-item latent distribution parameters. The prior
/// instance sees the image; the posterior instance sees image plus mask.
pub struct DistEncoder {
    enc: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    mu: Dense,
    cov: CovHeads,
    mix_logits: Option<Dense>,
    spec: LatentSpec,
    calls: Cell<usize>,
}

enum CovHeads {
    Diag { log_sigma: Dense },
    Full { scale: Dense },
    LowRank { factor: Dense, log_diag: Dense },
}

impl DistEncoder {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        filters: &[usize],
        bottleneck: usize,
        spec: LatentSpec,
        rng: &mut R,
    ) -> Self {
        let enc = vec![
            ConvBlock::new(store, &format!("{name}.enc0"), in_channels, filters[0], 3, rng),
            ConvBlock::new(store, &format!("{name}.enc1"), filters[0], filters[1], 3, rng),
            ConvBlock::new(store, &format!("{name}.enc2"), filters[1], filters[2], 3, rng),
        ];
        let bottleneck_block = ConvBlock::new(store, &format!("{name}.bottleneck"), filters[2], bottleneck, 3, rng);
        let (n, z) = (spec.n_components(), spec.dim);
        // near-zero heads start the latent space close to standard normal;
        // the mean bias gets a small spread so mixture components differ
        let mu = Dense::new(store, &format!("{name}.mu"), bottleneck, n * z, 0.01, 0.1, rng);
        let cov = match spec.cov {
            CovKind::Diag => CovHeads::Diag {
                log_sigma: Dense::new(store, &format!("{name}.log_sigma"), bottleneck, n * z, 0.01, 0.0, rng),
            },
            CovKind::Full => CovHeads::Full {
                scale: Dense::new(store, &format!("{name}.scale"), bottleneck, n * z * z, 0.01, 0.0, rng),
            },
            CovKind::LowRank { rank } => CovHeads::LowRank {
                factor: Dense::new(store, &format!("{name}.factor"), bottleneck, n * z * rank, 0.01, 0.0, rng),
                log_diag: Dense::new(store, &format!("{name}.log_diag"), bottleneck, n * z, 0.01, 0.0, rng),
            },
        };
        let mix_logits = spec
            .mixture
            .map(|_| Dense::new(store, &format!("{name}.mix_logits"), bottleneck, n, 0.01, 0.0, rng));
        DistEncoder {
            enc,
            bottleneck: bottleneck_block,
            mu,
            cov,
            mix_logits,
            spec,
            calls: Cell::new(0),
        }
    }

    /// How many forward passes this encoder has run.
    pub fn call_count(&self) -> usize {
        self.calls.get()
    }

    /// One latent distribution per batch item.
    pub fn forward(&self, g: &mut Graph, x: NodeId, phase: Phase) -> Result<Vec<LatentDistribution>> {
        self.calls.set(self.calls.get() + 1);
        let mut h = x;
        for block in &self.enc {
            h = block.forward(g, h, phase)?;
            h = g.tape.avg_pool2(h)?;
        }
        h = self.bottleneck.forward(g, h, phase)?;
        let feat = g.tape.global_avg_pool(h)?;
        let batch = g.tape.shape(feat)[0];
        let (n, z) = (self.spec.n_components(), self.spec.dim);

        let mu_all = self.mu.forward(g, feat)?;
        let cov_all = match &self.cov {
            CovHeads::Diag { log_sigma } => vec![log_sigma.forward(g, feat)?],
            CovHeads::Full { scale } => vec![scale.forward(g, feat)?],
            CovHeads::LowRank { factor, log_diag } => {
                vec![factor.forward(g, feat)?, log_diag.forward(g, feat)?]
            }
        };
        let logits_all = match &self.mix_logits {
            Some(head) => Some(head.forward(g, feat)?),
            None => None,
        };

        let mut out = Vec::with_capacity(batch);
        for b in 0..batch {
            let mu_row = g.tape.select_row(mu_all, b)?;
            let cov_rows: Vec<NodeId> = cov_all
                .iter()
                .map(|&c| g.tape.select_row(c, b))
                .collect::<Result<_>>()?;
            let mut components = Vec::with_capacity(n);
            for i in 0..n {
                let mu = g.tape.slice_1d(mu_row, i * z, z)?;
                let gaussian = match self.spec.cov {
                    CovKind::Diag => {
                        let log_sigma = g.tape.slice_1d(cov_rows[0], i * z, z)?;
                        Gaussian::diag(&mut g.tape, mu, log_sigma)?
                    }
                    CovKind::Full => {
                        let raw = g.tape.slice_1d(cov_rows[0], i * z * z, z * z)?;
                        let raw = g.tape.reshape(raw, vec![z, z])?;
                        Gaussian::full(&mut g.tape, mu, raw)?
                    }
                    CovKind::LowRank { rank } => {
                        let factor = g.tape.slice_1d(cov_rows[0], i * z * rank, z * rank)?;
                        let factor = g.tape.reshape(factor, vec![z, rank])?;
                        let log_diag = g.tape.slice_1d(cov_rows[1], i * z, z)?;
                        Gaussian::low_rank(&mut g.tape, mu, factor, log_diag)?
                    }
                };
                components.push(gaussian);
            }
            let dist = match (&logits_all, self.spec.mixture) {
                (Some(all), Some(mix)) => {
                    let logits = g.tape.select_row(*all, b)?;
                    LatentDistribution::Mixture(Mixture::new(&g.tape, logits, components, mix.temperature)?)
                }
                _ => LatentDistribution::Gaussian(components.pop().expect("one component")),
            };
            out.push(dist);
        }
        Ok(out)
    }
}

// ----- combination head -----

/// Three 1x1 convolutions mapping backbone features (optionally concatenated
/// with a spatially broadcast latent sample) to 2-class logits.
pub struct SegHead {
    convs: Vec<(ParamId, ParamId)>,
    z_dim: usize,
}

impl SegHead {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, channels: usize, z_dim: usize, rng: &mut R) -> Self {
        let widths = [(channels + z_dim, channels), (channels, channels), (channels, 2)];
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| {
                // final layer starts near zero for near-uniform initial logits
                let std = if i == 2 { 0.01 } else { (2.0 / cin as f64).sqrt() };
                let w: Vec<f64> = normal_vec(rng, cout * cin).into_iter().map(|e| e * std).collect();
                let weight = store.add(format!("{name}.conv{i}.weight"), Tensor::new(vec![cout, cin, 1, 1], w).expect("sized above"));
                let bias = store.add(format!("{name}.conv{i}.bias"), Tensor::zeros(&[cout]));
                (weight, bias)
            })
            .collect();
        SegHead { convs, z_dim }
    }

    /// `features` is `[B, C, H, W]`; `z` is `[B, z_dim]` when the head was
    /// built with a latent input.
    pub fn forward(&self, g: &mut Graph, features: NodeId, z: Option<NodeId>) -> Result<NodeId> {
        let shape = g.tape.shape(features).to_vec();
        let (h, w) = (shape[2], shape[3]);
        let mut x = match (self.z_dim, z) {
            (0, None) => features,
            (0, Some(_)) => {
                return Err(Error::shape("this head takes no latent input".to_string()));
            }
            (_, None) => {
                return Err(Error::shape("this head requires a latent input".to_string()));
            }
            (d, Some(zb)) => {
                let zsh = g.tape.shape(zb);
                if zsh != [shape[0], d] {
                    return Err(Error::shape(format!(
                        "latent batch must be [{}, {d}], got {zsh:?}",
                        shape[0]
                    )));
                }
                let zmap = g.tape.broadcast_spatial(zb, h, w)?;
                g.tape.concat_channels(&[features, zmap])?
            }
        };
        for (i, &(weight, bias)) in self.convs.iter().enumerate() {
            let wn = g.param(weight);
            let bn = g.param(bias);
            x = g.tape.conv2d(x, wn, bn)?;
            if i + 1 < self.convs.len() {
                x = g.tape.relu(x)?;
            }
        }
        Ok(x)
    }
}

// ----- networks -----

pub struct ProbUNet {
    pub backbone: UNetBackbone,
    pub prior: DistEncoder,
    pub posterior: DistEncoder,
    pub head: SegHead,
    pub latent: LatentSpec,
    pub beta: f64,
}

pub struct DeterministicUNet {
    pub backbone: UNetBackbone,
    pub head: SegHead,
    pub dropout: f64,
}

// one long-lived value per model, so the size gap between variants is moot
#[allow(clippy::large_enum_variant)]
pub enum Network {
    Prob(ProbUNet),
    Det(DeterministicUNet),
}

/// A network together with its parameters and the spec that built it.
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub net: Network,
}

/// Builds a freshly initialized model; identical `(spec, seed)` pairs yield
/// identical parameters.
pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = stream(seed, "model/init");
    let mut store = ParamStore::new();
    let net = match spec.latent {
        Some(latent) => {
            let backbone = UNetBackbone::new(
                &mut store,
                "backbone",
                spec.in_channels,
                &spec.filters,
                spec.bottleneck,
                spec.dropout,
                &mut rng,
            );
            let prior = DistEncoder::new(
                &mut store,
                "prior",
                spec.in_channels,
                &spec.filters,
                spec.bottleneck,
                latent,
                &mut rng,
            );
            let posterior = DistEncoder::new(
                &mut store,
                "posterior",
                spec.in_channels + 1,
                &spec.filters,
                spec.bottleneck,
                latent,
                &mut rng,
            );
            let head = SegHead::new(&mut store, "head", spec.filters[0], latent.dim, &mut rng);
            Network::Prob(ProbUNet {
                backbone,
                prior,
                posterior,
                head,
                latent,
                beta: spec.beta,
            })
        }
        None => {
            let backbone = UNetBackbone::new(
                &mut store,
                "backbone",
                spec.in_channels,
                &spec.filters,
                spec.bottleneck,
                spec.dropout,
                &mut rng,
            );
            let head = SegHead::new(&mut store, "head", spec.filters[0], 0, &mut rng);
            Network::Det(DeterministicUNet {
                backbone,
                head,
                dropout: spec.dropout,
            })
        }
    };
    Ok(Model { spec: spec.clone(), store, net })
}

impl ProbUNet {
    /// Objective on one batch: cross-entropy under a single posterior sample
    /// plus `beta` times the posterior-to-prior KL, averaged over the batch.
    pub fn elbo_loss<R: Rng>(
        &self,
        g: &mut Graph,
        images: &Tensor,
        targets: &[f64],
        phase: Phase,
        kl_mode: KlMode,
        rng: &mut R,
    ) -> Result<LossTerms> {
        if kl_mode == KlMode::ClosedForm && self.latent.mixture.is_some() {
            return Err(Error::config(
                "closed-form KL is undefined for mixtures; use monte-carlo".to_string(),
            ));
        }
        let batch = images.shape()[0];
        let (h, w) = (images.shape()[2], images.shape()[3]);
        if targets.len() != batch * h * w {
            return Err(Error::shape(format!(
                "expected {} target pixels, got {}",
                batch * h * w,
                targets.len()
            )));
        }
        let x = g.tape.constant(images);
        let y = g.tape.constant_values(vec![batch, 1, h, w], targets.to_vec());
        let xy = g.tape.concat_channels(&[x, y])?;

        let features = self.backbone.forward(g, x, phase, phase == Phase::Train, rng)?;
        let posteriors = self.posterior.forward(g, xy, phase)?;
        let priors = self.prior.forward(g, x, phase)?;

        let mut samples = Vec::with_capacity(batch);
        let mut kls = Vec::with_capacity(batch);
        for (q, p) in posteriors.iter().zip(&priors) {
            samples.push(q.sample(&mut g.tape, rng)?);
            let kl_item = match kl_mode {
                KlMode::ClosedForm => match (q, p) {
                    (LatentDistribution::Gaussian(q), LatentDistribution::Gaussian(p)) => {
                        kl_closed_form(&mut g.tape, q, p)?
                    }
                    _ => unreachable!("mixtures rejected above"),
                },
                KlMode::MonteCarlo { samples } => kl_monte_carlo(&mut g.tape, q, p, samples, rng)?,
            };
            kls.push(kl_item);
        }
        let z_batch = g.tape.stack_rows(&samples)?;
        let logits = self.head.forward(g, features, Some(z_batch))?;
        let ce = g.tape.softmax_cross_entropy(logits, targets)?;
        let kl_stack = g.tape.stack_rows(&kls)?;
        let kl = g.tape.mean(kl_stack)?;
        let weighted = g.tape.mul_scalar(kl, self.beta)?;
        let loss = g.tape.add(ce, weighted)?;
        Ok(LossTerms { loss, ce, kl })
    }

    /// Number of posterior-encoder forward passes so far.
    pub fn posterior_evaluations(&self) -> usize {
        self.posterior.call_count()
    }
}

impl DeterministicUNet {
    /// Plain cross-entropy objective; the returned KL node is a constant 0.
    pub fn ce_loss<R: Rng>(
        &self,
        g: &mut Graph,
        images: &Tensor,
        targets: &[f64],
        phase: Phase,
        dropout_active: bool,
        rng: &mut R,
    ) -> Result<LossTerms> {
        let x = g.tape.constant(images);
        let features = self.backbone.forward(g, x, phase, dropout_active, rng)?;
        let logits = self.head.forward(g, features, None)?;
        let ce = g.tape.softmax_cross_entropy(logits, targets)?;
        let kl = g.tape.constant_scalar(0.0);
        Ok(LossTerms { loss: ce, ce, kl })
    }
}

impl Network {
    /// Dispatches to the objective of the underlying network kind.
    pub fn loss<R: Rng>(
        &self,
        g: &mut Graph,
        images: &Tensor,
        targets: &[f64],
        phase: Phase,
        kl_mode: KlMode,
        rng: &mut R,
    ) -> Result<LossTerms> {
        match self {
            Network::Prob(net) => net.elbo_loss(g, images, targets, phase, kl_mode, rng),
            Network::Det(net) => net.ce_loss(g, images, targets, phase, phase == Phase::Train, rng),
        }
    }

    pub fn as_prob(&self) -> Option<&ProbUNet> {
        match self {
            Network::Prob(net) => Some(net),
            Network::Det(_) => None,
        }
    }

    pub fn as_det(&self) -> Option<&DeterministicUNet> {
        match self {
            Network::Det(net) => Some(net),
            Network::Prob(_) => None,
        }
    }
}

fn check_single_image(images: &Tensor) -> Result<(usize, usize)> {
    if images.shape().len() != 4 || images.shape()[0] != 1 {
        return Err(Error::shape(format!(
            "prediction expects one [1, C, H, W] image, got {:?}",
            images.shape()
        )));
    }
    Ok((images.shape()[2], images.shape()[3]))
}

fn extract_mask(tape: &crate::autodiff::Tape, logits: NodeId) -> PredictedMask {
    let values = tape.values(logits).to_vec();
    let hw = values.len() / 2;
    let mask = (0..hw).map(|p| values[hw + p] > values[p]).collect();
    PredictedMask { mask, logits: values }
}

/// Draws `n` segmentation samples for one image: the backbone runs once, and
/// each prior sample passes through the combination head.
pub fn predict_samples<R: Rng>(
    model: &ProbUNet,
    store: &mut ParamStore,
    image: &Tensor,
    n: usize,
    rng: &mut R,
) -> Result<Vec<PredictedMask>> {
    if n == 0 {
        return Err(Error::config("need at least one prediction sample".to_string()));
    }
    check_single_image(image)?;
    let mut g = Graph::new(store);
    let x = g.tape.constant(image);
    let features = model.backbone.forward(&mut g, x, Phase::Eval, false, rng)?;
    let prior = model
        .prior
        .forward(&mut g, x, Phase::Eval)?
        .pop()
        .expect("one batch item");
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let z = prior.sample(&mut g.tape, rng)?;
        let z_batch = g.tape.stack_rows(&[z])?;
        let logits = model.head.forward(&mut g, features, Some(z_batch))?;
        out.push(extract_mask(&g.tape, logits));
    }
    Ok(out)
}

/// One deterministic forward pass (dropout off).
pub fn predict_deterministic(
    model: &DeterministicUNet,
    store: &mut ParamStore,
    image: &Tensor,
) -> Result<PredictedMask> {
    check_single_image(image)?;
    let mut g = Graph::new(store);
    let x = g.tape.constant(image);
    // dropout is inactive; no randomness is consumed
    let mut rng = stream(0, "predict/deterministic");
    let features = model.backbone.forward(&mut g, x, Phase::Eval, false, &mut rng)?;
    let logits = model.head.forward(&mut g, features, None)?;
    Ok(extract_mask(&g.tape, logits))
}

/// `n` stochastic forward passes with dropout kept active.
pub fn mc_dropout_predict<R: Rng>(
    model: &DeterministicUNet,
    store: &mut ParamStore,
    image: &Tensor,
    n: usize,
    rng: &mut R,
) -> Result<Vec<PredictedMask>> {
    if n == 0 {
        return Err(Error::config("need at least one prediction sample".to_string()));
    }
    check_single_image(image)?;
    let mut g = Graph::new(store);
    let x = g.tape.constant(image);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let features = model.backbone.forward(&mut g, x, Phase::Eval, true, rng)?;
        let logits = model.head.forward(&mut g, features, None)?;
        out.push(extract_mask(&g.tape, logits));
    }
    Ok(out)
}

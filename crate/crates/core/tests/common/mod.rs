//! Shared oracles for the integration suites: a central-difference gradient
//! harness, empirical moment checks, and brute-force reference
//! implementations of GED² and the signed-rank test. The acceptance gate
//! reuses the `criterion_*` entry points; the focused suites call the same
//! helpers with extra fixtures.

#![allow(dead_code)]

use punet::autodiff::{NodeId, Phase};
use punet::distributions::{
    gumbel_vec, kl_closed_form, kl_monte_carlo, Gaussian, LatentDistribution, Mixture,
};
use punet::model::{self, CovKind, KlMode, LatentSpec, Model, ModelSpec};
use punet::params::{Graph, ParamId, ParamStore};
use punet::rng::{normal_vec, stream};
use punet::tensor::Tensor;
use rand::Rng;

/// Central-difference steps, widest first. A probe passes if any step
/// agrees with the analytic value: a real gradient bug disagrees at every
/// width, while a relu kink inside the widest window resolves as the window
/// shrinks past it.
const FD_STEPS: [f64; 3] = [1e-5, 1e-6, 5e-7];
/// Relative tolerance for pointwise ops.
pub const POINTWISE_REL: f64 = 1e-4;
/// Relative tolerance for composite graphs (conv stacks, losses).
pub const COMPOSITE_REL: f64 = 1e-3;
/// Absolute floor so zero gradients compare cleanly.
const FD_ABS: f64 = 1e-7;

type BuildFn<'c> = dyn FnMut(&mut Graph) -> punet::Result<NodeId> + 'c;

/// Checks every trainable parameter of `store` against central differences
/// of the scalar produced by `build`. `build` must be a pure function of the
/// store values: any noise it needs has to come from its own fixed-seed
/// streams so both sides of each difference see identical draws.
pub fn fd_check(
    store: &mut ParamStore,
    build: &mut BuildFn,
    probes_per_param: usize,
    seed: u64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<(), String> {
    let analytic: Vec<(ParamId, Vec<f64>)> = {
        let mut g = Graph::new(store);
        let root = build(&mut g).map_err(|e| format!("build failed: {e}"))?;
        if g.tape.values(root).len() != 1 {
            return Err(format!(
                "fd_check needs a scalar root, got shape {:?}",
                g.tape.shape(root)
            ));
        }
        g.tape.backward(root).map_err(|e| format!("backward failed: {e}"))?;
        g.gradients()
    };
    let mut rng = stream(seed, "fd/probes");
    for (pid, grad) in &analytic {
        let len = store.tensor(*pid).len();
        let coords: Vec<usize> = if probes_per_param >= len {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, probes_per_param).into_vec()
        };
        for c in coords {
            let orig = store.tensor(*pid).values()[c];
            let a = grad[c];
            let mut last = String::new();
            let mut ok = false;
            for h in FD_STEPS {
                store.values_mut(*pid)[c] = orig + h;
                let f_plus = eval_scalar(store, build)?;
                store.values_mut(*pid)[c] = orig - h;
                let f_minus = eval_scalar(store, build)?;
                store.values_mut(*pid)[c] = orig;
                let fd = (f_plus - f_minus) / (2.0 * h);
                let err = (a - fd).abs();
                let tol = abs_tol + rel_tol * a.abs().max(fd.abs());
                if err <= tol {
                    ok = true;
                    break;
                }
                last = format!(
                    "{}[{c}]: analytic {a:.8e} vs finite-diff {fd:.8e} at h={h:e} (err {err:.2e} > tol {tol:.2e})",
                    store.name(*pid)
                );
            }
            if !ok {
                return Err(last);
            }
        }
    }
    Ok(())
}

fn eval_scalar(store: &mut ParamStore, build: &mut BuildFn) -> Result<f64, String> {
    let mut g = Graph::new(store);
    let root = build(&mut g).map_err(|e| format!("re-eval failed: {e}"))?;
    Ok(g.tape.values(root)[0])
}

/// Dots `out` with a fixed positive random vector and sums, so upstream
/// gradients are non-uniform (a plain sum hides transposition bugs).
pub fn weighted_sum(g: &mut Graph, out: NodeId, tag: u64) -> punet::Result<NodeId> {
    let sh = g.tape.shape(out).to_vec();
    let n: usize = sh.iter().product();
    let mut r = stream(tag, "fd/weights");
    let w: Vec<f64> = (0..n).map(|_| r.random_range(0.25..1.75)).collect();
    let c = g.tape.constant_values(sh, w);
    let prod = g.tape.mul(out, c)?;
    g.tape.sum(prod)
}

fn named(name: &str, r: Result<(), String>) -> Result<(), String> {
    r.map_err(|e| format!("{name}: {e}"))
}

// ----- criterion 1: gradients -----

/// Finite-difference validation of every tape operation, five random
/// parameter draws each.
pub fn criterion_gradients_ops() -> Result<(), String> {
    for seed in 0..5 {
        op_checks_for_seed(seed)?;
    }
    Ok(())
}

fn op_checks_for_seed(seed: u64) -> Result<(), String> {
    let mut init = stream(seed, "fd/init");

    // pointwise
    {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::vector(normal_vec(&mut init, 6)));
        let b = s.add("b", Tensor::vector(normal_vec(&mut init, 6)));
        named("add", fd_check(&mut s, &mut |g| {
            let (an, bn) = (g.param(a), g.param(b));
            let o = g.tape.add(an, bn)?;
            weighted_sum(g, o, seed)
        }, 8, seed, POINTWISE_REL, FD_ABS))?;
        named("sub", fd_check(&mut s, &mut |g| {
            let (an, bn) = (g.param(a), g.param(b));
            let o = g.tape.sub(an, bn)?;
            weighted_sum(g, o, seed)
        }, 8, seed, POINTWISE_REL, FD_ABS))?;
        named("mul", fd_check(&mut s, &mut |g| {
            let (an, bn) = (g.param(a), g.param(b));
            let o = g.tape.mul(an, bn)?;
            weighted_sum(g, o, seed)
        }, 8, seed, POINTWISE_REL, FD_ABS))?;
        named("neg", fd_check(&mut s, &mut |g| {
            let an = g.param(a);
            let o = g.tape.neg(an)?;
            weighted_sum(g, o, seed)
        }, 8, seed, POINTWISE_REL, FD_ABS))?;
        named("exp", fd_check(&mut s, &mut |g| {
            let an = g.param(a);
            let o = g.tape.exp(an)?;
            weighted_sum(g, o, seed)
        }, 8, seed, POINTWISE_REL, FD_ABS))?;
        named("relu", fd_check(&mut s, &mut |g| {
            let an = g.param(a);
            let o = g.tape.relu(an)?;
            weighted_sum(g, o, seed)
        }, 8, seed, POINTWISE_REL, FD_ABS))?;
        named("sigmoid", fd_check(&mut s, &mut |g| {
            let an = g.param(a);
            let o = g.tape.sigmoid(an)?;
            weighted_sum(g, o, seed)
        }, 8, seed, POINTWISE_REL, FD_ABS))?;
        named("add_scalar", fd_check(&mut s, &mut |g| {
            let an = g.param(a);
            let o = g.tape.add_scalar(an, 0.7)?;
            weighted_sum(g, o, seed)
        }, 8, seed, POINTWISE_REL, FD_ABS))?;
        named("mul_scalar", fd_check(&mut s, &mut |g| {
            let an = g.param(a);
            let o = g.tape.mul_scalar(an, -1.3)?;
            weighted_sum(g, o, seed)
        }, 8, seed, POINTWISE_REL, FD_ABS))?;
    }
    // div and log want inputs away from zero
    {
        let mut s = ParamStore::new();
        let pos: Vec<f64> = (0..6).map(|_| init.random_range(0.5..2.0)).collect();
        let a = s.add("a", Tensor::vector(normal_vec(&mut init, 6)));
        let b = s.add("b", Tensor::vector(pos));
        named("div", fd_check(&mut s, &mut |g| {
            let (an, bn) = (g.param(a), g.param(b));
            let o = g.tape.div(an, bn)?;
            weighted_sum(g, o, seed)
        }, 8, seed, POINTWISE_REL, FD_ABS))?;
        named("log", fd_check(&mut s, &mut |g| {
            let bn = g.param(b);
            let o = g.tape.log(bn)?;
            weighted_sum(g, o, seed)
        }, 8, seed, POINTWISE_REL, FD_ABS))?;
    }

    // reductions and shaping
    {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::vector(normal_vec(&mut init, 6)));
        let m = s.add("m", Tensor::new(vec![3, 4], normal_vec(&mut init, 12)).unwrap());
        let r0 = s.add("r0", Tensor::vector(normal_vec(&mut init, 4)));
        let r1 = s.add("r1", Tensor::vector(normal_vec(&mut init, 4)));
        named("sum", fd_check(&mut s, &mut |g| {
            let an = g.param(a);
            g.tape.sum(an)
        }, 8, seed, POINTWISE_REL, FD_ABS))?;
        named("mean", fd_check(&mut s, &mut |g| {
            let an = g.param(a);
            g.tape.mean(an)
        }, 8, seed, POINTWISE_REL, FD_ABS))?;
        named("reshape", fd_check(&mut s, &mut |g| {
            let an = g.param(a);
            let o = g.tape.reshape(an, vec![2, 3])?;
            weighted_sum(g, o, seed)
        }, 8, seed, POINTWISE_REL, FD_ABS))?;
        named("select_row", fd_check(&mut s, &mut |g| {
            let mn = g.param(m);
            let o = g.tape.select_row(mn, 1)?;
            weighted_sum(g, o, seed)
        }, 16, seed, POINTWISE_REL, FD_ABS))?;
        named("stack_rows", fd_check(&mut s, &mut |g| {
            let (x, y) = (g.param(r0), g.param(r1));
            let o = g.tape.stack_rows(&[x, y])?;
            weighted_sum(g, o, seed)
        }, 8, seed, POINTWISE_REL, FD_ABS))?;
        named("slice_1d", fd_check(&mut s, &mut |g| {
            let an = g.param(a);
            let o = g.tape.slice_1d(an, 1, 3)?;
            weighted_sum(g, o, seed)
        }, 8, seed, POINTWISE_REL, FD_ABS))?;
    }

    // linear algebra
    {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::new(vec![2, 3], normal_vec(&mut init, 6)).unwrap());
        let b = s.add("b", Tensor::new(vec![3, 2], normal_vec(&mut init, 6)).unwrap());
        let v = s.add("v", Tensor::vector(normal_vec(&mut init, 3)));
        let sq = s.add("sq", Tensor::new(vec![3, 3], normal_vec(&mut init, 9)).unwrap());
        let rhs = s.add("rhs", Tensor::new(vec![3, 2], normal_vec(&mut init, 6)).unwrap());
        named("matmul", fd_check(&mut s, &mut |g| {
            let (an, bn) = (g.param(a), g.param(b));
            let o = g.tape.matmul(an, bn)?;
            weighted_sum(g, o, seed)
        }, 16, seed, POINTWISE_REL, FD_ABS))?;
        named("transpose", fd_check(&mut s, &mut |g| {
            let an = g.param(a);
            let o = g.tape.transpose(an)?;
            weighted_sum(g, o, seed)
        }, 16, seed, POINTWISE_REL, FD_ABS))?;
        named("diag_embed", fd_check(&mut s, &mut |g| {
            let vn = g.param(v);
            let o = g.tape.diag_embed(vn)?;
            weighted_sum(g, o, seed)
        }, 8, seed, POINTWISE_REL, FD_ABS))?;
        named("diag_part", fd_check(&mut s, &mut |g| {
            let qn = g.param(sq);
            let o = g.tape.diag_part(qn)?;
            weighted_sum(g, o, seed)
        }, 16, seed, POINTWISE_REL, FD_ABS))?;
        named("lower_tri_exp_diag", fd_check(&mut s, &mut |g| {
            let qn = g.param(sq);
            let o = g.tape.lower_tri_exp_diag(qn)?;
            weighted_sum(g, o, seed)
        }, 16, seed, POINTWISE_REL, FD_ABS))?;
        // SPD input built as M Mᵀ + I/2 so perturbations stay in the cone
        named("cholesky_factor", fd_check(&mut s, &mut |g| {
            let qn = g.param(sq);
            let qt = g.tape.transpose(qn)?;
            let prod = g.tape.matmul(qn, qt)?;
            let eye = g.tape.constant_values(
                vec![3, 3],
                vec![0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.5],
            );
            let spd = g.tape.add(prod, eye)?;
            let l = g.tape.cholesky_factor(spd)?;
            weighted_sum(g, l, seed)
        }, 16, seed, COMPOSITE_REL, FD_ABS))?;
        named("tri_solve_lower", fd_check(&mut s, &mut |g| {
            let (qn, bn) = (g.param(sq), g.param(rhs));
            let l = g.tape.lower_tri_exp_diag(qn)?;
            let o = g.tape.tri_solve_lower(l, bn)?;
            weighted_sum(g, o, seed)
        }, 16, seed, COMPOSITE_REL, FD_ABS))?;
    }

    // image ops
    {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::new(vec![1, 2, 4, 4], normal_vec(&mut init, 32)).unwrap());
        let w3 = s.add("w3", Tensor::new(vec![2, 2, 3, 3], normal_vec(&mut init, 36)).unwrap());
        let w1 = s.add("w1", Tensor::new(vec![3, 2, 1, 1], normal_vec(&mut init, 6)).unwrap());
        let bias3 = s.add("bias3", Tensor::vector(normal_vec(&mut init, 2)));
        let bias1 = s.add("bias1", Tensor::vector(normal_vec(&mut init, 3)));
        named("conv2d 3x3", fd_check(&mut s, &mut |g| {
            let (xn, wn, bn) = (g.param(x), g.param(w3), g.param(bias3));
            let o = g.tape.conv2d(xn, wn, bn)?;
            weighted_sum(g, o, seed)
        }, 12, seed, COMPOSITE_REL, FD_ABS))?;
        named("conv2d 1x1", fd_check(&mut s, &mut |g| {
            let (xn, wn, bn) = (g.param(x), g.param(w1), g.param(bias1));
            let o = g.tape.conv2d(xn, wn, bn)?;
            weighted_sum(g, o, seed)
        }, 12, seed, COMPOSITE_REL, FD_ABS))?;
        named("avg_pool2", fd_check(&mut s, &mut |g| {
            let xn = g.param(x);
            let o = g.tape.avg_pool2(xn)?;
            weighted_sum(g, o, seed)
        }, 16, seed, POINTWISE_REL, FD_ABS))?;
        named("upsample_bilinear2", fd_check(&mut s, &mut |g| {
            let xn = g.param(x);
            let o = g.tape.upsample_bilinear2(xn)?;
            weighted_sum(g, o, seed)
        }, 16, seed, POINTWISE_REL, FD_ABS))?;
        named("global_avg_pool", fd_check(&mut s, &mut |g| {
            let xn = g.param(x);
            let o = g.tape.global_avg_pool(xn)?;
            weighted_sum(g, o, seed)
        }, 16, seed, POINTWISE_REL, FD_ABS))?;
        named("dropout", fd_check(&mut s, &mut |g| {
            let xn = g.param(x);
            let mut mask_rng = stream(seed, "fd/dropout-mask");
            let o = g.tape.dropout(xn, 0.3, true, &mut mask_rng)?;
            weighted_sum(g, o, seed)
        }, 16, seed, POINTWISE_REL, FD_ABS))?;
        named("concat_channels", fd_check(&mut s, &mut |g| {
            let xn = g.param(x);
            let other = {
                let mut r = stream(seed, "fd/concat");
                let vals = normal_vec(&mut r, 16);
                g.tape.constant_values(vec![1, 1, 4, 4], vals)
            };
            let o = g.tape.concat_channels(&[xn, other])?;
            weighted_sum(g, o, seed)
        }, 16, seed, POINTWISE_REL, FD_ABS))?;
        let targets: Vec<f64> = {
            let mut r = stream(seed, "fd/targets");
            (0..16).map(|_| f64::from(r.random::<bool>())).collect()
        };
        named("softmax_cross_entropy", fd_check(&mut s, &mut |g| {
            let xn = g.param(x);
            g.tape.softmax_cross_entropy(xn, &targets)
        }, 16, seed, COMPOSITE_REL, FD_ABS))?;
    }

    // batch norm, both phases; gamma away from zero
    {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::new(vec![2, 3, 4, 4], normal_vec(&mut init, 96)).unwrap());
        let gammas: Vec<f64> = (0..3).map(|_| init.random_range(0.5..1.5)).collect();
        let gamma = s.add("gamma", Tensor::vector(gammas));
        let beta = s.add("beta", Tensor::vector(normal_vec(&mut init, 3)));
        named("batchnorm2d train", fd_check(&mut s, &mut |g| {
            let (xn, gn, bn) = (g.param(x), g.param(gamma), g.param(beta));
            let mut stats = vec![0.0; 6];
            let o = g.tape.batchnorm2d(xn, gn, bn, &mut stats, Phase::Train)?;
            weighted_sum(g, o, seed)
        }, 12, seed, COMPOSITE_REL, FD_ABS))?;
        named("batchnorm2d eval", fd_check(&mut s, &mut |g| {
            let (xn, gn, bn) = (g.param(x), g.param(gamma), g.param(beta));
            let mut stats = vec![0.1, -0.2, 0.3, 0.8, 1.2, 0.9];
            let o = g.tape.batchnorm2d(xn, gn, bn, &mut stats, Phase::Eval)?;
            weighted_sum(g, o, seed)
        }, 12, seed, COMPOSITE_REL, FD_ABS))?;
        named("broadcast_spatial", fd_check(&mut s, &mut |g| {
            let gn = g.param(gamma);
            let flat = g.tape.reshape(gn, vec![1, 3])?;
            let o = g.tape.broadcast_spatial(flat, 4, 4)?;
            weighted_sum(g, o, seed)
        }, 8, seed, POINTWISE_REL, FD_ABS))?;
    }

    distribution_grad_checks(seed)
}

/// Gradient checks through the distribution graphs: reparameterized samples,
/// log densities, closed-form and Monte-Carlo KL, and the soft mixture path.
/// The straight-through path is checked by exact equality elsewhere — its
/// forward is intentionally not the function its gradient estimates.
fn distribution_grad_checks(seed: u64) -> Result<(), String> {
    let mut init = stream(seed, "fd/dist-init");
    let d = 3;

    let mut s = ParamStore::new();
    let mu = s.add("mu", Tensor::vector(normal_vec(&mut init, d)));
    let log_sigma = s.add("log_sigma", Tensor::vector(normal_vec(&mut init, d)));
    let raw = s.add("raw", Tensor::new(vec![d, d], normal_vec(&mut init, d * d)).unwrap());
    let factor = s.add("factor", Tensor::new(vec![d, 2], normal_vec(&mut init, d * 2)).unwrap());
    let log_diag = s.add("log_diag", Tensor::vector(normal_vec(&mut init, d)));
    let p_mu = s.add("p_mu", Tensor::vector(normal_vec(&mut init, d)));
    let p_log_sigma = s.add("p_log_sigma", Tensor::vector(normal_vec(&mut init, d)));
    let p_raw = s.add("p_raw", Tensor::new(vec![d, d], normal_vec(&mut init, d * d)).unwrap());
    let logits = s.add("logits", Tensor::vector(normal_vec(&mut init, 2)));

    let eps: Vec<f64> = {
        let mut r = stream(seed, "fd/eps");
        normal_vec(&mut r, d)
    };
    let z_obs: Vec<f64> = {
        let mut r = stream(seed, "fd/z-obs");
        normal_vec(&mut r, d)
    };

    named("diag sample+log_prob", fd_check(&mut s, &mut |g| {
        let (m, ls) = (g.param(mu), g.param(log_sigma));
        let q = Gaussian::diag(&mut g.tape, m, ls)?;
        let z = q.sample_with_noise(&mut g.tape, &eps)?;
        let zc = g.tape.constant_values(vec![d], z_obs.clone());
        let lp = q.log_prob(&mut g.tape, zc)?;
        let zsum = weighted_sum(g, z, seed)?;
        g.tape.add(zsum, lp)
    }, 8, seed, COMPOSITE_REL, FD_ABS))?;

    named("full sample+log_prob", fd_check(&mut s, &mut |g| {
        let (m, r) = (g.param(mu), g.param(raw));
        let q = Gaussian::full(&mut g.tape, m, r)?;
        let z = q.sample_with_noise(&mut g.tape, &eps)?;
        let zc = g.tape.constant_values(vec![d], z_obs.clone());
        let lp = q.log_prob(&mut g.tape, zc)?;
        let zsum = weighted_sum(g, z, seed)?;
        g.tape.add(zsum, lp)
    }, 12, seed, COMPOSITE_REL, FD_ABS))?;

    named("low-rank sample+log_prob", fd_check(&mut s, &mut |g| {
        let (m, f, ld) = (g.param(mu), g.param(factor), g.param(log_diag));
        let q = Gaussian::low_rank(&mut g.tape, m, f, ld)?;
        let z = q.sample_with_noise(&mut g.tape, &eps)?;
        let zc = g.tape.constant_values(vec![d], z_obs.clone());
        let lp = q.log_prob(&mut g.tape, zc)?;
        let zsum = weighted_sum(g, z, seed)?;
        g.tape.add(zsum, lp)
    }, 12, seed, COMPOSITE_REL, FD_ABS))?;

    named("kl closed form diag-full", fd_check(&mut s, &mut |g| {
        let (m, ls) = (g.param(mu), g.param(log_sigma));
        let (pm, pr) = (g.param(p_mu), g.param(p_raw));
        let q = Gaussian::diag(&mut g.tape, m, ls)?;
        let p = Gaussian::full(&mut g.tape, pm, pr)?;
        kl_closed_form(&mut g.tape, &q, &p)
    }, 12, seed, COMPOSITE_REL, FD_ABS))?;

    named("kl monte carlo", fd_check(&mut s, &mut |g| {
        let (m, ls) = (g.param(mu), g.param(log_sigma));
        let (pm, pls) = (g.param(p_mu), g.param(p_log_sigma));
        let q = LatentDistribution::Gaussian(Gaussian::diag(&mut g.tape, m, ls)?);
        let p = LatentDistribution::Gaussian(Gaussian::diag(&mut g.tape, pm, pls)?);
        let mut r = stream(seed, "fd/mc-kl");
        kl_monte_carlo(&mut g.tape, &q, &p, 3, &mut r)
    }, 8, seed, COMPOSITE_REL, FD_ABS))?;

    // soft relaxation: smooth in the logits, unlike the hard path
    let gumbels: Vec<f64> = {
        let mut r = stream(seed, "fd/gumbels");
        gumbel_vec(&mut r, 2)
    };
    let eps2: Vec<f64> = {
        let mut r = stream(seed, "fd/eps2");
        normal_vec(&mut r, 2 * d)
    };
    named("mixture soft sample+log_prob", fd_check(&mut s, &mut |g| {
        let (m, ls) = (g.param(mu), g.param(log_sigma));
        let (pm, pls) = (g.param(p_mu), g.param(p_log_sigma));
        let lg = g.param(logits);
        let c0 = Gaussian::diag(&mut g.tape, m, ls)?;
        let c1 = Gaussian::diag(&mut g.tape, pm, pls)?;
        let mix = Mixture::new(&g.tape, lg, vec![c0, c1], 0.6)?;
        let z = mix.sample_with_noise(&mut g.tape, &gumbels, &eps2, false)?;
        let zc = g.tape.constant_values(vec![d], z_obs.clone());
        let lp = mix.log_prob(&mut g.tape, zc)?;
        let zsum = weighted_sum(g, z, seed)?;
        g.tape.add(zsum, lp)
    }, 8, seed, COMPOSITE_REL, FD_ABS))?;

    Ok(())
}

/// Finite-difference validation of the training objectives end to end, one
/// random probe per parameter tensor. Mixture families are excluded: their
/// sampler is straight-through, so the true objective gradient is not the
/// derivative of the forward value; the mixture pieces are covered by the
/// soft-path check above and the hard/soft equality test.
pub fn criterion_gradients_losses() -> Result<(), String> {
    let gaussian = |cov: CovKind| {
        Some(LatentSpec { dim: 3, cov, mixture: None })
    };
    let cases: [(&str, Option<LatentSpec>, f64, KlMode); 5] = [
        ("elbo diag", gaussian(CovKind::Diag), 0.0, KlMode::ClosedForm),
        ("elbo full", gaussian(CovKind::Full), 0.0, KlMode::ClosedForm),
        ("elbo low-rank", gaussian(CovKind::LowRank { rank: 1 }), 0.0, KlMode::ClosedForm),
        ("cross-entropy", None, 0.0, KlMode::ClosedForm),
        ("cross-entropy dropout", None, 0.2, KlMode::ClosedForm),
    ];
    for (name, latent, dropout, kl_mode) in cases {
        let spec = ModelSpec {
            in_channels: 1,
            image_size: 16,
            filters: vec![2, 3, 4],
            bottleneck: 6,
            latent,
            dropout,
            beta: 0.7,
        };
        let Model { mut store, net, .. } = model::build(&spec, 17).map_err(|e| e.to_string())?;
        // jitter away from the zero-initialized biases: relu-dead patches put
        // pre-activations at exactly 0.0 there, where the loss has a kink and
        // central differences measure the average of the two one-sided slopes
        let mut jitter = stream(29, "fd/jitter");
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        for id in ids {
            for v in store.values_mut(id) {
                *v += 0.03 * punet::rng::standard_normal(&mut jitter);
            }
        }
        let mut data_rng = stream(23, "fd/batch");
        let images = Tensor::new(vec![2, 1, 16, 16], normal_vec(&mut data_rng, 2 * 256)).unwrap();
        let targets: Vec<f64> = (0..2 * 256).map(|_| f64::from(data_rng.random::<bool>())).collect();
        named(name, fd_check(&mut store, &mut |g| {
            let mut r = stream(31, "fd/loss-noise");
            let terms = net.loss(g, &images, &targets, Phase::Train, kl_mode, &mut r)?;
            Ok(terms.loss)
        }, 1, 41, COMPOSITE_REL, 1e-6))?;
    }
    Ok(())
}

// ----- criterion 2: sampling moments -----

/// Draws `n` latent samples, chunking the tape so memory stays bounded.
/// `build` reconstructs the distribution on each fresh tape.
pub fn draw_samples<F>(n: usize, seed: u64, mut build: F) -> Vec<Vec<f64>>
where
    F: FnMut(&mut punet::autodiff::Tape) -> LatentDistribution,
{
    let mut rng = stream(seed, "moments/draws");
    let mut out = Vec::with_capacity(n);
    let chunk = 500;
    let mut remaining = n;
    while remaining > 0 {
        let take = chunk.min(remaining);
        let mut tape = punet::autodiff::Tape::new();
        let dist = build(&mut tape);
        for _ in 0..take {
            let z = dist.sample(&mut tape, &mut rng).expect("sampling fixture");
            out.push(tape.values(z).to_vec());
        }
        remaining -= take;
    }
    out
}

pub fn sample_mean_cov(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = samples.len();
    let d = samples[0].len();
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]);
            }
        }
    }
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= (n - 1) as f64;
        }
    }
    (mean, cov)
}

/// Mean and covariance against expectations, within 4 standard errors of
/// the Gaussian estimators.
pub fn check_gaussian_moments(
    name: &str,
    samples: &[Vec<f64>],
    mu: &[f64],
    sigma: &[Vec<f64>],
) -> Result<(), String> {
    let n = samples.len() as f64;
    let (mean, cov) = sample_mean_cov(samples);
    for i in 0..mu.len() {
        let se = (sigma[i][i] / n).sqrt();
        let err = (mean[i] - mu[i]).abs();
        if err > 4.0 * se {
            return Err(format!(
                "{name}: mean[{i}] = {:.4} vs {:.4}, off by {:.2} SE",
                mean[i], mu[i], err / se
            ));
        }
        for j in 0..mu.len() {
            let var_cov = sigma[i][i] * sigma[j][j] + sigma[i][j] * sigma[i][j];
            let se = (var_cov / n).sqrt();
            let err = (cov[i][j] - sigma[i][j]).abs();
            if err > 4.0 * se {
                return Err(format!(
                    "{name}: cov[{i}][{j}] = {:.4} vs {:.4}, off by {:.2} SE",
                    cov[i][j], sigma[i][j], err / se
                ));
            }
        }
    }
    Ok(())
}

const MOMENT_DRAWS: usize = 100_000;

/// Empirical moments of every sampler against its construction: diagonal,
/// full (via the Cholesky parameterization), low-rank with and without an
/// active factor, and a two-component mixture checked by the law of total
/// variance.
pub fn criterion_sampling_moments() -> Result<(), String> {
    // diag: sigma = (0.5, 2)
    {
        let samples = draw_samples(MOMENT_DRAWS, 1001, |tape| {
            let mu = tape.constant_values(vec![2], vec![1.0, -2.0]);
            let ls = tape.constant_values(vec![2], vec![0.5f64.ln(), 2.0f64.ln()]);
            LatentDistribution::Gaussian(Gaussian::diag(tape, mu, ls).unwrap())
        });
        check_gaussian_moments(
            "diag",
            &samples,
            &[1.0, -2.0],
            &[vec![0.25, 0.0], vec![0.0, 4.0]],
        )?;
    }
    // full: raw [[ln 2, 9], [1, ln 2]] -> L = [[2, 0], [1, 2]], Sigma = [[4, 2], [2, 5]];
    // the 9 sits above the diagonal to prove it is masked out
    {
        let samples = draw_samples(MOMENT_DRAWS, 1002, |tape| {
            let mu = tape.constant_values(vec![2], vec![-1.0, 3.0]);
            let raw = tape.constant_values(vec![2, 2], vec![2.0f64.ln(), 9.0, 1.0, 2.0f64.ln()]);
            LatentDistribution::Gaussian(Gaussian::full(tape, mu, raw).unwrap())
        });
        check_gaussian_moments(
            "full",
            &samples,
            &[-1.0, 3.0],
            &[vec![4.0, 2.0], vec![2.0, 5.0]],
        )?;
    }
    // low-rank, factor zero, unit diag: standard normal
    {
        let samples = draw_samples(MOMENT_DRAWS, 1003, |tape| {
            let mu = tape.constant_values(vec![3], vec![0.0; 3]);
            let f = tape.constant_values(vec![3, 1], vec![0.0; 3]);
            let ld = tape.constant_values(vec![3], vec![0.0; 3]);
            LatentDistribution::Gaussian(Gaussian::low_rank(tape, mu, f, ld).unwrap())
        });
        let eye = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        check_gaussian_moments("low-rank zero factor", &samples, &[0.0; 3], &eye)?;
    }
    // low-rank: P = (1, 1, 0)ᵀ, D = (1/4, 1/4, 1) -> Sigma = P Pᵀ + diag(D)
    {
        let samples = draw_samples(MOMENT_DRAWS, 1004, |tape| {
            let mu = tape.constant_values(vec![3], vec![0.5, 0.0, -0.5]);
            let f = tape.constant_values(vec![3, 1], vec![1.0, 1.0, 0.0]);
            let ld = tape.constant_values(vec![3], vec![0.25f64.ln(), 0.25f64.ln(), 0.0]);
            LatentDistribution::Gaussian(Gaussian::low_rank(tape, mu, f, ld).unwrap())
        });
        let sigma = vec![
            vec![1.25, 1.0, 0.0],
            vec![1.0, 1.25, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        check_gaussian_moments("low-rank", &samples, &[0.5, 0.0, -0.5], &sigma)?;
    }
    // mixture: weights (0.7, 0.3) on N(10, 1) and N(-10, 1).
    // mean 4; total variance E[Var] + Var[E] = 1 + 84 = 85.
    {
        let samples = draw_samples(MOMENT_DRAWS, 1005, |tape| {
            let logits = tape.constant_values(vec![2], vec![0.7f64.ln(), 0.3f64.ln()]);
            let mu0 = tape.constant_values(vec![1], vec![10.0]);
            let mu1 = tape.constant_values(vec![1], vec![-10.0]);
            let ls = tape.constant_values(vec![1], vec![0.0]);
            let c0 = Gaussian::diag(tape, mu0, ls).unwrap();
            let c1 = Gaussian::diag(tape, mu1, ls).unwrap();
            LatentDistribution::Mixture(Mixture::new(tape, logits, vec![c0, c1], 0.2).unwrap())
        });
        let n = samples.len() as f64;
        let mean = samples.iter().map(|s| s[0]).sum::<f64>() / n;
        let var = samples.iter().map(|s| (s[0] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // fourth central moment of the mixture about its true mean: 12939
        let se_mean = (85.0 / n).sqrt();
        let se_var = ((12939.0 - 85.0 * 85.0) / n).sqrt();
        if (mean - 4.0).abs() > 4.0 * se_mean {
            return Err(format!("mixture mean {mean:.3} vs 4.0"));
        }
        if (var - 85.0).abs() > 4.0 * se_var {
            return Err(format!("mixture variance {var:.3} vs 85.0"));
        }
    }
    Ok(())
}

// ----- criterion 3: Monte-Carlo KL vs closed form -----

/// A random Gaussian of the given covariance kind on `tape`.
pub fn random_gaussian<R: Rng>(
    tape: &mut punet::autodiff::Tape,
    rng: &mut R,
    dim: usize,
    kind: CovKind,
) -> Gaussian {
    let mu_vals: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
    let mu = tape.constant_values(vec![dim], mu_vals);
    match kind {
        CovKind::Diag => {
            let ls: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.7..0.7)).collect();
            let ls = tape.constant_values(vec![dim], ls);
            Gaussian::diag(tape, mu, ls).unwrap()
        }
        CovKind::Full => {
            let raw: Vec<f64> = (0..dim * dim).map(|_| rng.random_range(-0.5..0.5)).collect();
            let raw = tape.constant_values(vec![dim, dim], raw);
            Gaussian::full(tape, mu, raw).unwrap()
        }
        CovKind::LowRank { rank } => {
            let f: Vec<f64> = (0..dim * rank).map(|_| rng.random_range(-0.8..0.8)).collect();
            let f = tape.constant_values(vec![dim, rank], f);
            let ld: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.7..0.7)).collect();
            let ld = tape.constant_values(vec![dim], ld);
            Gaussian::low_rank(tape, mu, f, ld).unwrap()
        }
    }
}

const KL_MC_SAMPLES: usize = 10_000;

/// Builds the pair on a fresh tape via `make`, evaluates the closed form,
/// a manual per-sample Monte-Carlo estimate (for the standard error), and
/// the `kl_monte_carlo` node; both estimates must sit within 3 SE.
pub fn check_kl_pair<F>(name: &str, mut make: F, seed: u64) -> Result<(), String>
where
    F: FnMut(&mut punet::autodiff::Tape) -> (Gaussian, Gaussian),
{
    let closed = {
        let mut tape = punet::autodiff::Tape::new();
        let (q, p) = make(&mut tape);
        let node = kl_closed_form(&mut tape, &q, &p).map_err(|e| format!("{name}: {e}"))?;
        tape.values(node)[0]
    };
    // manual estimate, chunked tapes
    let mut rng = stream(seed, "kl/manual");
    let mut terms = Vec::with_capacity(KL_MC_SAMPLES);
    let chunk = 250;
    while terms.len() < KL_MC_SAMPLES {
        let mut tape = punet::autodiff::Tape::new();
        let (q, p) = make(&mut tape);
        for _ in 0..chunk.min(KL_MC_SAMPLES - terms.len()) {
            let z = q.sample(&mut tape, &mut rng).unwrap();
            let lq = q.log_prob(&mut tape, z).unwrap();
            let lp = p.log_prob(&mut tape, z).unwrap();
            terms.push(tape.values(lq)[0] - tape.values(lp)[0]);
        }
    }
    let n = terms.len() as f64;
    let mean = terms.iter().sum::<f64>() / n;
    let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    if (mean - closed).abs() > 3.0 * se {
        return Err(format!(
            "{name}: manual MC {mean:.4} vs closed {closed:.4} ({:.2} SE)",
            (mean - closed).abs() / se
        ));
    }
    // the API under test, a fresh estimate of the same quantity
    let mc = {
        let mut tape = punet::autodiff::Tape::new();
        let (q, p) = make(&mut tape);
        let q = LatentDistribution::Gaussian(q);
        let p = LatentDistribution::Gaussian(p);
        let mut r = stream(seed, "kl/node");
        let node = kl_monte_carlo(&mut tape, &q, &p, KL_MC_SAMPLES, &mut r)
            .map_err(|e| format!("{name}: {e}"))?;
        tape.values(node)[0]
    };
    if (mc - closed).abs() > 3.0 * se {
        return Err(format!(
            "{name}: kl_monte_carlo {mc:.4} vs closed {closed:.4} ({:.2} SE)",
            (mc - closed).abs() / se
        ));
    }
    Ok(())
}

/// Twenty random Gaussian pairs across dims 2–8 and all covariance kinds,
/// plus the exact self-KL identity.
pub fn criterion_kl_agreement() -> Result<(), String> {
    let kinds = [
        CovKind::Diag,
        CovKind::Full,
        CovKind::LowRank { rank: 1 },
    ];
    for i in 0..20u64 {
        let dim = 2 + (i as usize) % 7;
        let kind_q = kinds[(i as usize) % 3];
        let kind_p = kinds[(i as usize + 1) % 3];
        let kind_p = match kind_p {
            CovKind::LowRank { .. } if dim > 3 => CovKind::LowRank { rank: 2 },
            k => k,
        };
        let name = format!("pair {i} (dim {dim})");
        check_kl_pair(
            &name,
            |tape| {
                let mut r = stream(7000 + i, "kl/pair");
                let q = random_gaussian(tape, &mut r, dim, kind_q);
                let p = random_gaussian(tape, &mut r, dim, kind_p);
                (q, p)
            },
            9000 + i,
        )?;
    }
    // KL(q ‖ q) is exactly zero per sample: identical log-prob graphs
    for (i, kind) in kinds.iter().enumerate() {
        let mut tape = punet::autodiff::Tape::new();
        let mut r = stream(7700 + i as u64, "kl/self");
        let q = LatentDistribution::Gaussian(random_gaussian(&mut tape, &mut r, 4, *kind));
        let node = kl_monte_carlo(&mut tape, &q, &q.clone(), 64, &mut r).unwrap();
        let v = tape.values(node)[0];
        if v != 0.0 {
            return Err(format!("self-KL ({kind:?}) = {v:e}, expected exact zero"));
        }
    }
    Ok(())
}

// ----- criterion 4: straight-through Gumbel-softmax -----

pub fn criterion_gumbel_softmax() -> Result<(), String> {
    // hard draws are exact one-hots matching the returned index
    {
        let mut rng = stream(1301, "gumbel/onehot");
        for _ in 0..200 {
            let mut tape = punet::autodiff::Tape::new();
            let logits_vals: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let logits = tape.constant_values(vec![5], logits_vals);
            let mu = tape.constant_values(vec![1], vec![0.0]);
            let ls = tape.constant_values(vec![1], vec![0.0]);
            let comps: Vec<Gaussian> = (0..5)
                .map(|_| Gaussian::diag(&mut tape, mu, ls).unwrap())
                .collect();
            let mix = Mixture::new(&tape, logits, comps, 0.4).unwrap();
            let g = gumbel_vec(&mut rng, 5);
            let (w, selected) = mix.gumbel_softmax_with_noise(&mut tape, &g, true).unwrap();
            let vals = tape.values(w);
            for (k, &v) in vals.iter().enumerate() {
                let want = if k == selected { 1.0 } else { 0.0 };
                if v != want {
                    return Err(format!("hard weight[{k}] = {v}, selected {selected}"));
                }
            }
        }
    }
    // selection frequencies: uniform logits within 0.01, dominated > 0.999
    {
        let mut tape = punet::autodiff::Tape::new();
        let logits = tape.constant_values(vec![4], vec![0.3; 4]);
        let mu = tape.constant_values(vec![1], vec![0.0]);
        let ls = tape.constant_values(vec![1], vec![0.0]);
        let comps: Vec<Gaussian> = (0..4)
            .map(|_| Gaussian::diag(&mut tape, mu, ls).unwrap())
            .collect();
        let mix = Mixture::new(&tape, logits, comps, 0.7).unwrap();
        let mut rng = stream(1302, "gumbel/uniform");
        let mut counts = [0usize; 4];
        for _ in 0..100_000 {
            let g = gumbel_vec(&mut rng, 4);
            let (_, selected) = mix.gumbel_softmax_with_noise(&mut tape, &g, true).unwrap();
            counts[selected] += 1;
        }
        for (k, &c) in counts.iter().enumerate() {
            let freq = c as f64 / 100_000.0;
            if (freq - 0.25).abs() > 0.01 {
                return Err(format!("uniform logits: component {k} frequency {freq:.4}"));
            }
        }
    }
    {
        let mut tape = punet::autodiff::Tape::new();
        let logits = tape.constant_values(vec![4], vec![10.0, 0.0, 0.0, 0.0]);
        let mu = tape.constant_values(vec![1], vec![0.0]);
        let ls = tape.constant_values(vec![1], vec![0.0]);
        let comps: Vec<Gaussian> = (0..4)
            .map(|_| Gaussian::diag(&mut tape, mu, ls).unwrap())
            .collect();
        let mix = Mixture::new(&tape, logits, comps, 0.7).unwrap();
        let mut rng = stream(1303, "gumbel/dominated");
        let mut hits = 0usize;
        for _ in 0..100_000 {
            let g = gumbel_vec(&mut rng, 4);
            let (_, selected) = mix.gumbel_softmax_with_noise(&mut tape, &g, true).unwrap();
            hits += usize::from(selected == 0);
        }
        let freq = hits as f64 / 100_000.0;
        if freq <= 0.999 {
            return Err(format!("dominated logits selected {freq:.5} of the time"));
        }
    }
    // straight-through backward equals the soft backward on a linear loss
    {
        for seed in 0..5u64 {
            let grads = |hard: bool| -> Vec<f64> {
                let mut s = ParamStore::new();
                let mut init = stream(seed, "gumbel/st-init");
                let logits = s.add("logits", Tensor::vector(normal_vec(&mut init, 3)));
                let mut g = Graph::new(&mut s);
                let lg = g.param(logits);
                let mu_vals = [[1.0, -1.0], [0.0, 2.0], [-2.0, 0.5]];
                let comps: Vec<Gaussian> = mu_vals
                    .iter()
                    .map(|mv| {
                        let mu = g.tape.constant_values(vec![2], mv.to_vec());
                        let ls = g.tape.constant_values(vec![2], vec![0.3, -0.4]);
                        Gaussian::diag(&mut g.tape, mu, ls).unwrap()
                    })
                    .collect();
                let mix = Mixture::new(&g.tape, lg, comps, 0.5).unwrap();
                let mut noise = stream(seed, "gumbel/st-noise");
                let gum = gumbel_vec(&mut noise, 3);
                let eps = normal_vec(&mut noise, 6);
                let z = mix.sample_with_noise(&mut g.tape, &gum, &eps, hard).unwrap();
                let loss = weighted_sum(&mut g, z, seed).unwrap();
                g.tape.backward(loss).unwrap();
                g.gradients().remove(0).1
            };
            let hard = grads(true);
            let soft = grads(false);
            if hard != soft {
                return Err(format!(
                    "straight-through gradient {hard:?} differs from soft {soft:?} (seed {seed})"
                ));
            }
        }
    }
    Ok(())
}

// ----- criterion 5: GED² against brute force -----

fn iou_oracle(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(&x, &y)| x && y).count();
    let union = a.iter().zip(b).filter(|(&x, &y)| x || y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Direct loop evaluation of GED² and its parts: cross term over all pairs,
/// diversities over ordered distinct pairs.
pub fn ged_brute_force(preds: &[Vec<bool>], labels: &[Vec<bool>]) -> (f64, f64, f64, f64) {
    let mut cross = 0.0;
    for p in preds {
        for l in labels {
            cross += 1.0 - iou_oracle(p, l);
        }
    }
    cross = 2.0 * cross / (preds.len() * labels.len()) as f64;
    let diversity = |set: &[Vec<bool>]| {
        let n = set.len();
        if n < 2 {
            return 0.0;
        }
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sum += 1.0 - iou_oracle(&set[i], &set[j]);
                }
            }
        }
        sum / (n * (n - 1)) as f64
    };
    let pd = diversity(preds);
    let ld = diversity(labels);
    (cross - pd - ld, cross, pd, ld)
}

pub fn random_masks<R: Rng>(rng: &mut R, count: usize, pixels: usize) -> Vec<Vec<bool>> {
    (0..count)
        .map(|_| (0..pixels).map(|_| rng.random::<f64>() < 0.4).collect())
        .collect()
}

pub fn criterion_ged_oracle() -> Result<(), String> {
    let mut rng = stream(501, "ged/fixtures");
    for case in 0..25 {
        let n_pred = rng.random_range(2..=5);
        let n_label = rng.random_range(1..=4);
        let preds = random_masks(&mut rng, n_pred, 16);
        let labels = random_masks(&mut rng, n_label, 16);
        let got = punet::metrics::ged(&preds, &labels).map_err(|e| e.to_string())?;
        let (ged2, cross, pd, ld) = ged_brute_force(&preds, &labels);
        for (name, a, b) in [
            ("ged²", got.ged_squared, ged2),
            ("cross", got.cross, cross),
            ("pred diversity", got.pred_diversity, pd),
            ("label diversity", got.label_diversity, ld),
        ] {
            if (a - b).abs() > 1e-12 {
                return Err(format!("case {case}: {name} {a} vs brute force {b}"));
            }
        }
        // the decomposition identity holds as stated
        let resid = got.ged_squared - (got.cross - got.pred_diversity - got.label_diversity);
        if resid != 0.0 {
            return Err(format!("case {case}: decomposition residual {resid:e}"));
        }
    }
    // identical degenerate multisets on both sides: every term is zero
    let mask: Vec<bool> = (0..16).map(|i| i % 3 == 0).collect();
    let set = vec![mask.clone(), mask.clone(), mask.clone()];
    let got = punet::metrics::ged(&set, &set).map_err(|e| e.to_string())?;
    if got.ged_squared != 0.0 || got.cross != 0.0 || got.pred_diversity != 0.0 {
        return Err(format!("degenerate multiset: {got:?}"));
    }
    Ok(())
}

// ----- criterion 6: Wilcoxon signed-rank against enumeration -----

/// Independent signed-rank test: ranks by insertion into a sorted list,
/// p by enumerating every sign assignment.
pub fn wilcoxon_brute_force(a: &[f64], b: &[f64]) -> Option<(f64, f64, usize)> {
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Some((0.0, 1.0, 0));
    }
    if n < 5 {
        return None;
    }
    // average ranks of |d|
    let mut mags: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    mags.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let rank_of = |m: f64| {
        let below = mags.iter().filter(|&&x| x < m).count();
        let equal = mags.iter().filter(|&&x| x == m).count();
        below as f64 + (equal as f64 + 1.0) / 2.0
    };
    let w_plus: f64 = diffs
        .iter()
        .filter(|d| **d > 0.0)
        .map(|d| rank_of(d.abs()))
        .sum();
    let ranks: Vec<f64> = diffs.iter().map(|d| rank_of(d.abs())).collect();
    let total = 1u64 << n;
    let (mut le, mut ge) = (0u64, 0u64);
    for assignment in 0..total {
        let w: f64 = ranks
            .iter()
            .enumerate()
            .filter(|(bit, _)| assignment >> bit & 1 == 1)
            .map(|(_, r)| *r)
            .sum();
        le += u64::from(w <= w_plus + 1e-9);
        ge += u64::from(w >= w_plus - 1e-9);
    }
    let p = (2.0 * le.min(ge) as f64 / total as f64).min(1.0);
    Some((w_plus, p, n))
}

pub fn criterion_wilcoxon_oracle() -> Result<(), String> {
    use punet::metrics::{wilcoxon_signed_rank, PairedMetricSeries, WilcoxonMethod};
    let mut rng = stream(601, "wilcoxon/fixtures");
    for n in 5..=10usize {
        for case in 0..20 {
            // half the cases quantized to force tied magnitudes
            let quantize = case % 2 == 0;
            let a: Vec<f64> = (0..n)
                .map(|_| {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    if quantize { (v * 4.0).round() / 4.0 } else { v }
                })
                .collect();
            let b: Vec<f64> = (0..n)
                .map(|_| {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    if quantize { (v * 4.0).round() / 4.0 } else { v }
                })
                .collect();
            let Some((w_ref, p_ref, n_ref)) = wilcoxon_brute_force(&a, &b) else {
                continue;
            };
            let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
            let series = PairedMetricSeries::new(ids, a, b).map_err(|e| e.to_string())?;
            let got = wilcoxon_signed_rank(&series).map_err(|e| e.to_string())?;
            if got.method != WilcoxonMethod::Exact {
                return Err(format!("n {n} case {case}: expected the exact method"));
            }
            if got.n_used != n_ref {
                return Err(format!("n {n} case {case}: n_used {} vs {n_ref}", got.n_used));
            }
            if (got.statistic - w_ref).abs() > 1e-12 {
                return Err(format!(
                    "n {n} case {case}: W+ {} vs {w_ref}",
                    got.statistic
                ));
            }
            if (got.p_value - p_ref).abs() > 1e-12 {
                return Err(format!(
                    "n {n} case {case}: p {} vs {p_ref}",
                    got.p_value
                ));
            }
        }
    }
    // six uniformly positive differences: W+ = 21, two-sided p = 2/64
    let a = vec![1.3, 2.1, 0.9, 1.7, 2.4, 1.1];
    let b = vec![0.3, 0.2, 0.1, 0.4, 0.6, 0.5];
    let ids: Vec<String> = (0..6).map(|i| format!("s{i}")).collect();
    let series = PairedMetricSeries::new(ids, a, b).map_err(|e| e.to_string())?;
    let got = punet::metrics::wilcoxon_signed_rank(&series).map_err(|e| e.to_string())?;
    if got.statistic != 21.0 {
        return Err(format!("all-positive n=6: W+ {}", got.statistic));
    }
    if (got.p_value - 0.03125).abs() > 1e-15 {
        return Err(format!("all-positive n=6: p {}", got.p_value));
    }
    Ok(())
}

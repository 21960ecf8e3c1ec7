//! The operations behind the CLI subcommands, written as library functions so
//! tests can drive whole experiments in-process. Each experiment lives in a
//! run directory:
//!
//! ```text
//! run/
//!   config.resolved      experiment config with every default filled in
//!   checkpoint.ckpt      parameters + metadata (per member for ensembles)
//!   train_log.csv        per-epoch losses
//!   eval.csv             per-test-sample metric rows
//!   summary.json         aggregate metrics
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{ExperimentConfig, Family};
use crate::data::{self, normalize, Dataset, MultiRaterSample, NormStats, SyntheticConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    ged, mask_set_diversity, mean_distance, summarize, summarize_grouped, wilcoxon_signed_rank,
    PairedMetricSeries, Summary, WilcoxonMethod,
};
use crate::model::train::{train_with_progress, TrainSchedule};
use crate::model::{
    build, mc_dropout_predict, predict_deterministic, predict_samples, Model, ModelSpec,
};
use crate::rng::{derive_seed, stream};
use crate::tensor::Tensor;

pub const CONFIG_RESOLVED: &str = "config.resolved";
pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SWEEP_CSV: &str = "sweep.csv";

pub fn member_checkpoint(index: usize) -> String {
    format!("checkpoint_member_{index}.ckpt")
}

pub fn member_log(index: usize) -> String {
    format!("train_log_member_{index}.csv")
}

// ----- gen-data -----

#[derive(Debug, Clone)]
pub struct SplitReport {
    pub name: &'static str,
    pub count: usize,
    pub mean_label_diversity: f64,
    /// `(non-empty rater masks, sample count)` pairs, buckets 1..=raters.
    pub bucket_histogram: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct DataReport {
    pub out_dir: PathBuf,
    pub splits: Vec<SplitReport>,
}

/// Generates a dataset from a TOML settings file (defaults when omitted) and
/// writes it under `out_dir`.
pub fn gen_data(
    config_path: Option<&Path>,
    out_dir: &Path,
    seed_override: Option<u64>,
) -> Result<DataReport> {
    let mut config = match config_path {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            toml::from_str::<SyntheticConfig>(&text)
                .map_err(|e| Error::format(path, format!("bad dataset settings: {e}")))?
        }
        None => SyntheticConfig::default(),
    };
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    let dataset = data::generate(&config)?;
    data::save(&dataset, out_dir)?;

    let splits: [(&'static str, &[MultiRaterSample]); 3] = [
        ("train", &dataset.train),
        ("val", &dataset.val),
        ("test", &dataset.test),
    ];
    let mut reports = Vec::with_capacity(3);
    for (name, samples) in splits {
        let mut diversity_sum = 0.0;
        let mut histogram = vec![0usize; config.raters + 1];
        for sample in samples {
            diversity_sum += mask_set_diversity(&sample.masks)?;
            histogram[sample.agreement_bucket()] += 1;
        }
        reports.push(SplitReport {
            name,
            count: samples.len(),
            mean_label_diversity: diversity_sum / samples.len() as f64,
            bucket_histogram: (1..=config.raters).map(|b| (b, histogram[b])).collect(),
        });
    }
    Ok(DataReport {
        out_dir: out_dir.to_path_buf(),
        splits: reports,
    })
}

// ----- train -----

/// Checkpoint metadata: everything needed to rebuild the network and feed it
/// inputs the way training did.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMeta {
    pub family: Family,
    pub spec: ModelSpec,
    pub norm: NormStats,
    pub seed: u64,
    pub raters_used: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct MemberOutcome {
    pub label: String,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub run_dir: PathBuf,
    pub members: Vec<MemberOutcome>,
}

/// Trains a run from a config file into `run_dir`.
pub fn train_cmd(
    config_path: &Path,
    run_dir: &Path,
    seed_override: Option<u64>,
    verbose: bool,
) -> Result<TrainedRun> {
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    let dataset = data::load(&config.dataset)?;
    run_training(&config, &dataset, run_dir, verbose)
}

/// Trains every member the config asks for (one model, or `ensemble_size`
/// independently seeded models) and writes checkpoints, logs, and the
/// resolved config into `run_dir`.
pub fn run_training(
    config: &ExperimentConfig,
    dataset: &Dataset,
    run_dir: &Path,
    verbose: bool,
) -> Result<TrainedRun> {
    config.validate()?;
    let raters = dataset.config.raters;
    let raters_used = config.schedule.raters_used.unwrap_or(raters);
    if raters_used > raters {
        return Err(Error::config(format!(
            "schedule.raters_used = {raters_used} but the dataset has {raters} raters"
        )));
    }
    let spec = config.to_model_spec(dataset.config.size);
    spec.validate()?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let resolved_path = run_dir.join(CONFIG_RESOLVED);
    fs::write(&resolved_path, config.to_toml()?).map_err(|e| Error::io(&resolved_path, e))?;

    let member_count = if config.family == Family::Ensemble {
        config.ensemble_size()
    } else {
        1
    };
    let mut members = Vec::with_capacity(member_count);
    for index in 0..member_count {
        let (label, seed, ckpt_name, log_name) = if member_count == 1 {
            (config.family.tag().to_string(), config.seed, CHECKPOINT.to_string(), TRAIN_LOG.to_string())
        } else {
            (
                format!("member {index}"),
                derive_seed(config.seed, &format!("ensemble/{index}")),
                member_checkpoint(index),
                member_log(index),
            )
        };
        let mut model = build(&spec, seed)?;
        let schedule = TrainSchedule { seed, ..config.to_schedule() };
        let outcome = train_with_progress(
            &mut model,
            &dataset.train,
            &dataset.val,
            raters_used,
            &schedule,
            &mut |row| {
                if verbose {
                    eprintln!(
                        "[{label}] epoch {:>3}  train {:.4}  val {:.4}  (ce {:.4}, kl {:.4})",
                        row.epoch, row.train_loss, row.val_loss, row.ce, row.kl
                    );
                }
            },
        )?;
        let meta = TrainMeta {
            family: config.family,
            spec: spec.clone(),
            norm: outcome.norm,
            seed,
            raters_used,
            best_epoch: outcome.best_epoch,
            best_val_loss: outcome.best_val_loss,
        };
        let ckpt_path = run_dir.join(&ckpt_name);
        checkpoint::save(&ckpt_path, &meta, &model.store)?;
        let log_path = run_dir.join(&log_name);
        fs::write(&log_path, outcome.to_csv()).map_err(|e| Error::io(&log_path, e))?;
        if verbose {
            eprintln!(
                "[{label}] done: best epoch {} (val loss {:.4}) -> {}",
                outcome.best_epoch,
                outcome.best_val_loss,
                ckpt_path.display()
            );
        }
        members.push(MemberOutcome {
            label,
            seed,
            best_epoch: outcome.best_epoch,
            best_val_loss: outcome.best_val_loss,
            epochs_run: outcome.log.len(),
            checkpoint: ckpt_path,
        });
    }
    Ok(TrainedRun {
        run_dir: run_dir.to_path_buf(),
        members,
    })
}

// ----- eval -----

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub id: String,
    /// Number of raters that marked anything in this sample.
    pub bucket: usize,
    /// GED² for sampling families; the cross term for the plain U-Net.
    pub score: f64,
    pub cross: f64,
    pub pred_diversity: f64,
    pub label_diversity: f64,
    pub n_pred: usize,
    pub n_label: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BucketSummary {
    pub bucket: String,
    pub score: Summary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub family: String,
    pub n_samples: usize,
    pub self_check: bool,
    pub score: Summary,
    pub cross: Summary,
    pub pred_diversity: Summary,
    pub label_diversity: Summary,
    pub by_bucket: Vec<BucketSummary>,
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub rows: Vec<EvalRow>,
    pub summary: EvalSummary,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Evaluate on a different dataset directory than the config names.
    pub dataset: Option<PathBuf>,
    pub n_samples: Option<usize>,
    pub seed: Option<u64>,
    /// Score the label set against itself instead of running the model.
    pub self_check: bool,
}

/// Evaluates a trained run on the test split and writes `eval.csv` and
/// `summary.json` into the run directory.
pub fn eval_cmd(run_dir: &Path, options: &EvalOptions) -> Result<EvalOutput> {
    let config = ExperimentConfig::load(&run_dir.join(CONFIG_RESOLVED))?;
    let data_dir = options.dataset.as_deref().unwrap_or(&config.dataset);
    let dataset = data::load(data_dir)?;
    run_eval(&config, &dataset, run_dir, options)
}

/// [`eval_cmd`] with the config and dataset already in memory.
pub fn run_eval(
    config: &ExperimentConfig,
    dataset: &Dataset,
    run_dir: &Path,
    options: &EvalOptions,
) -> Result<EvalOutput> {
    let n_samples = options.n_samples.unwrap_or(config.eval.n_samples);
    if n_samples == 0 {
        return Err(Error::config("eval needs at least one prediction sample".to_string()));
    }
    let seed = options.seed.unwrap_or(config.seed);
    let rows = if options.self_check {
        self_check_rows(&dataset.test)?
    } else {
        let mut members = load_members(config, run_dir)?;
        model_rows(config, &mut members, &dataset.test, n_samples, seed)?
    };
    let summary = summarize_rows(&rows, config.family, n_samples, options.self_check)?;
    let csv_path = run_dir.join(EVAL_CSV);
    fs::write(&csv_path, eval_csv_text(&rows)).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = run_dir.join(SUMMARY_JSON);
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::config(format!("summary does not serialize: {e}")))?;
    fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok(EvalOutput { rows, summary })
}

fn load_members(config: &ExperimentConfig, run_dir: &Path) -> Result<Vec<(Model, TrainMeta)>> {
    let names: Vec<String> = if config.family == Family::Ensemble {
        (0..config.ensemble_size()).map(member_checkpoint).collect()
    } else {
        vec![CHECKPOINT.to_string()]
    };
    let mut members = Vec::with_capacity(names.len());
    for name in names {
        let path = run_dir.join(&name);
        let loaded = checkpoint::load::<TrainMeta>(&path)?;
        if loaded.meta.family != config.family {
            return Err(Error::config(format!(
                "{} was trained as family {} but the config says {}",
                path.display(),
                loaded.meta.family,
                config.family
            )));
        }
        let mut model = build(&loaded.meta.spec, loaded.meta.seed)?;
        checkpoint::restore_into(&loaded, &mut model.store, &path)?;
        members.push((model, loaded.meta));
    }
    Ok(members)
}

fn normalized_input(sample: &MultiRaterSample, norm: &NormStats) -> Tensor {
    Tensor::new(
        vec![1, 1, sample.size, sample.size],
        normalize(&sample.image, norm),
    )
    .expect("sized above")
}

/// One set of prediction masks for a single normalized image, dispatched by
/// family: latent samples, dropout samples, ensemble members, or the single
/// deterministic output.
fn member_predictions<R: rand::Rng>(
    family: Family,
    members: &mut [(Model, TrainMeta)],
    image: &Tensor,
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<Vec<bool>>> {
    if family.is_probabilistic() {
        let Model { store, net, .. } = &mut members[0].0;
        let prob = net
            .as_prob()
            .ok_or_else(|| Error::config(format!("{family} checkpoint holds no latent model")))?;
        Ok(predict_samples(prob, store, image, n_samples, rng)?
            .into_iter()
            .map(|p| p.mask)
            .collect())
    } else if family == Family::McDropout {
        let Model { store, net, .. } = &mut members[0].0;
        let det = net.as_det().expect("mc-dropout builds a deterministic net");
        Ok(mc_dropout_predict(det, store, image, n_samples, rng)?
            .into_iter()
            .map(|p| p.mask)
            .collect())
    } else if family == Family::Ensemble {
        let mut masks = Vec::with_capacity(members.len());
        for (model, _) in members.iter_mut() {
            let Model { store, net, .. } = model;
            let det = net.as_det().expect("ensemble members are deterministic");
            masks.push(predict_deterministic(det, store, image)?.mask);
        }
        Ok(masks)
    } else {
        let Model { store, net, .. } = &mut members[0].0;
        let det = net.as_det().expect("unet is deterministic");
        Ok(vec![predict_deterministic(det, store, image)?.mask])
    }
}

/// A trained run loaded back from disk, ready to predict.
pub struct LoadedRun {
    config: ExperimentConfig,
    members: Vec<(Model, TrainMeta)>,
}

/// Reads the resolved config and checkpoint(s) back out of a run directory.
pub fn load_run(run_dir: &Path) -> Result<LoadedRun> {
    let config = ExperimentConfig::load(&run_dir.join(CONFIG_RESOLVED))?;
    let members = load_members(&config, run_dir)?;
    Ok(LoadedRun { config, members })
}

impl LoadedRun {
    pub fn family(&self) -> Family {
        self.config.family
    }

    /// Square image edge the checkpoint was trained on.
    pub fn image_size(&self) -> usize {
        self.members[0].1.spec.image_size
    }

    /// Number of masks [`Self::predict`] returns for a request of `n_samples`.
    pub fn mask_count(&self, n_samples: usize) -> usize {
        match self.config.family {
            Family::Ensemble => self.members.len(),
            Family::Unet => 1,
            _ => n_samples,
        }
    }

    /// Draws prediction masks for one raw image (row-major `size * size`
    /// pixels in `[0, 1]`; normalization is applied internally). Sampling
    /// families return `n_samples` masks; the plain U-Net returns one and an
    /// ensemble returns one per member.
    pub fn predict(&mut self, image: &[f64], n_samples: usize, seed: u64) -> Result<Vec<Vec<bool>>> {
        let meta = &self.members[0].1;
        let size = meta.spec.image_size;
        if image.len() != size * size {
            return Err(Error::shape(format!(
                "image has {} pixels but the checkpoint expects {size}x{size}",
                image.len()
            )));
        }
        let input = Tensor::new(vec![1, 1, size, size], normalize(image, &meta.norm))?;
        let mut rng = stream(seed, "predict");
        member_predictions(self.config.family, &mut self.members, &input, n_samples, &mut rng)
    }
}

fn model_rows(
    config: &ExperimentConfig,
    members: &mut [(Model, TrainMeta)],
    test: &[MultiRaterSample],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let family = config.family;
    let norm = members[0].1.norm;
    let mut rows = Vec::with_capacity(test.len());
    for sample in test {
        let image = normalized_input(sample, &norm);
        // a stream per sample keeps results independent of evaluation order
        let mut rng = stream(seed, &format!("eval/{}", sample.id));
        let preds = member_predictions(family, members, &image, n_samples, &mut rng)?;

        let labels = &sample.masks;
        let row = if family == Family::Unet {
            // one sample has no diversity term, so the score is the overlap
            // (cross) term alone
            let cross = 2.0 * mean_distance(&preds, labels)?;
            EvalRow {
                id: sample.id.clone(),
                bucket: sample.agreement_bucket(),
                score: cross,
                cross,
                pred_diversity: 0.0,
                label_diversity: mask_set_diversity(labels)?,
                n_pred: preds.len(),
                n_label: labels.len(),
            }
        } else {
            let report = ged(&preds, labels)?;
            EvalRow {
                id: sample.id.clone(),
                bucket: sample.agreement_bucket(),
                score: report.ged_squared,
                cross: report.cross,
                pred_diversity: report.pred_diversity,
                label_diversity: report.label_diversity,
                n_pred: report.n_pred,
                n_label: report.n_label,
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

fn self_check_rows(test: &[MultiRaterSample]) -> Result<Vec<EvalRow>> {
    test.iter()
        .map(|sample| {
            let report = ged(&sample.masks, &sample.masks)?;
            Ok(EvalRow {
                id: sample.id.clone(),
                bucket: sample.agreement_bucket(),
                score: report.ged_squared,
                cross: report.cross,
                pred_diversity: report.pred_diversity,
                label_diversity: report.label_diversity,
                n_pred: report.n_pred,
                n_label: report.n_label,
            })
        })
        .collect()
}

fn summarize_rows(
    rows: &[EvalRow],
    family: Family,
    n_samples: usize,
    self_check: bool,
) -> Result<EvalSummary> {
    let pick = |f: fn(&EvalRow) -> f64| -> Vec<f64> { rows.iter().map(f).collect() };
    let by_bucket = summarize_grouped(
        &rows
            .iter()
            .map(|r| (r.bucket.to_string(), r.score))
            .collect::<Vec<_>>(),
    )
    .into_iter()
    .map(|(bucket, score)| BucketSummary { bucket, score })
    .collect();
    Ok(EvalSummary {
        family: family.tag().to_string(),
        n_samples,
        self_check,
        score: summarize(&pick(|r| r.score))?,
        cross: summarize(&pick(|r| r.cross))?,
        pred_diversity: summarize(&pick(|r| r.pred_diversity))?,
        label_diversity: summarize(&pick(|r| r.label_diversity))?,
        by_bucket,
    })
}

fn eval_csv_text(rows: &[EvalRow]) -> String {
    let mut out = String::from("id,bucket,score,cross,pred_diversity,label_diversity,n_pred,n_label\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.id, r.bucket, r.score, r.cross, r.pred_diversity, r.label_diversity, r.n_pred, r.n_label
        )
        .expect("writing to a string cannot fail");
    }
    out
}

// ----- compare -----

#[derive(Debug, Clone, Serialize)]
pub struct RunScores {
    pub label: String,
    pub family: String,
    pub median: f64,
    pub count: usize,
    #[serde(skip)]
    scores: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairwiseTest {
    pub a: String,
    pub b: String,
    /// Rank sum of positive differences (W+).
    pub statistic: f64,
    pub p_value: f64,
    pub n_used: usize,
    pub method: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub alpha: f64,
    pub runs: Vec<RunScores>,
    pub pairs: Vec<PairwiseTest>,
    /// Run with the lowest median score.
    pub best: String,
    /// Other runs whose paired test against the best is not significant.
    pub tied_with_best: Vec<String>,
}

/// Compares evaluated runs on their per-sample scores with paired Wilcoxon
/// signed-rank tests; lower scores are better.
pub fn compare_cmd(
    run_dirs: &[PathBuf],
    alpha: f64,
    json_out: Option<&Path>,
) -> Result<ComparisonReport> {
    if run_dirs.len() < 2 {
        return Err(Error::config("compare needs at least two run directories".to_string()));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::config(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let mut runs = Vec::with_capacity(run_dirs.len());
    for (index, dir) in run_dirs.iter().enumerate() {
        let (family, scores) = read_scores(dir)?;
        let duplicate = run_dirs[..index].contains(dir);
        let label = if duplicate {
            format!("{}#{}", dir.display(), index + 1)
        } else {
            dir.display().to_string()
        };
        let median = summarize(&scores.iter().map(|(_, v)| *v).collect::<Vec<_>>())?.median;
        runs.push(RunScores {
            label,
            family,
            median,
            count: scores.len(),
            scores,
        });
    }

    let mut pairs = Vec::new();
    for i in 0..runs.len() {
        for j in (i + 1)..runs.len() {
            let series = PairedMetricSeries::from_runs(&runs[i].scores, &runs[j].scores)?;
            let test = wilcoxon_signed_rank(&series)?;
            pairs.push(PairwiseTest {
                a: runs[i].label.clone(),
                b: runs[j].label.clone(),
                statistic: test.statistic,
                p_value: test.p_value,
                n_used: test.n_used,
                method: match test.method {
                    WilcoxonMethod::Exact => "exact".to_string(),
                    WilcoxonMethod::NormalApprox => "normal-approx".to_string(),
                },
            });
        }
    }

    let best_index = (0..runs.len())
        .min_by(|&a, &b| {
            runs[a]
                .median
                .partial_cmp(&runs[b].median)
                .expect("medians are finite")
        })
        .expect("at least two runs");
    let best = runs[best_index].label.clone();
    let tied_with_best = runs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best_index)
        .filter(|(_, run)| {
            pairs
                .iter()
                .find(|p| {
                    (p.a == best && p.b == run.label) || (p.a == run.label && p.b == best)
                })
                .is_some_and(|p| p.p_value >= alpha)
        })
        .map(|(_, run)| run.label.clone())
        .collect();

    let report = ComparisonReport { alpha, runs, pairs, best, tied_with_best };
    if let Some(path) = json_out {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::config(format!("report does not serialize: {e}")))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}

/// Reads per-sample scores and the family tag back out of a run directory.
fn read_scores(run_dir: &Path) -> Result<(String, Vec<(String, f64)>)> {
    let json_path = run_dir.join(SUMMARY_JSON);
    let json = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let summary: EvalSummary = serde_json::from_str(&json)
        .map_err(|e| Error::format(&json_path, format!("bad summary: {e}")))?;

    let csv_path = run_dir.join(EVAL_CSV);
    let text = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(&csv_path, "empty eval csv"))?;
    let columns: Vec<&str> = header.split(',').collect();
    let column = |name: &str| -> Result<usize> {
        columns
            .iter()
            .position(|&c| c == name)
            .ok_or_else(|| Error::format(&csv_path, format!("missing column {name}")))
    };
    let id_col = column("id")?;
    let score_col = column("score")?;
    let mut scores = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(Error::format(
                &csv_path,
                format!("row {} has {} fields, expected {}", lineno + 2, fields.len(), columns.len()),
            ));
        }
        let value: f64 = fields[score_col].parse().map_err(|_| {
            Error::format(&csv_path, format!("row {}: bad score {:?}", lineno + 2, fields[score_col]))
        })?;
        scores.push((fields[id_col].to_string(), value));
    }
    if scores.is_empty() {
        return Err(Error::format(&csv_path, "eval csv has no rows"));
    }
    Ok((summary.family, scores))
}

// ----- sweep -----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    /// Covariance factor rank 1..=latent_dim-1 for a low-rank family.
    Rank,
    /// Train with the first k raters for k = 1..=raters; evaluate on all.
    Raters,
}

impl SweepKind {
    pub fn knob(self) -> &'static str {
        match self {
            SweepKind::Rank => "rank",
            SweepKind::Raters => "raters_used",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub value: usize,
    pub run_dir: String,
    pub best_val_loss: f64,
    pub score: Summary,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub knob: String,
    pub points: Vec<SweepPoint>,
}

/// Trains and evaluates one run per swept value, each in its own directory
/// under `out_root`, and writes a combined `sweep.csv`.
pub fn sweep_cmd(
    kind: SweepKind,
    config_path: &Path,
    out_root: &Path,
    seed_override: Option<u64>,
    verbose: bool,
) -> Result<SweepReport> {
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(seed) = seed_override {
        config.seed = seed;
    }
    let dataset = data::load(&config.dataset)?;

    let values: Vec<usize> = match kind {
        SweepKind::Rank => {
            if !config.family.has_rank() {
                return Err(Error::config(format!(
                    "rank sweep needs a low-rank family, not {}",
                    config.family
                )));
            }
            let dim = config.model.latent_dim.expect("validated");
            (1..dim).collect()
        }
        SweepKind::Raters => (1..=dataset.config.raters).collect(),
    };

    let mut points = Vec::with_capacity(values.len());
    for value in values {
        let mut sub = config.clone();
        match kind {
            SweepKind::Rank => sub.model.rank = Some(value),
            SweepKind::Raters => sub.schedule.raters_used = Some(value),
        }
        let run_dir = out_root.join(format!("{}_{value}", kind.knob()));
        if verbose {
            eprintln!("sweep {} = {value} -> {}", kind.knob(), run_dir.display());
        }
        let trained = run_training(&sub, &dataset, &run_dir, verbose)?;
        let output = run_eval(&sub, &dataset, &run_dir, &EvalOptions::default())?;
        let best_val_loss = trained
            .members
            .iter()
            .map(|m| m.best_val_loss)
            .fold(f64::INFINITY, f64::min);
        points.push(SweepPoint {
            value,
            run_dir: run_dir.display().to_string(),
            best_val_loss,
            score: output.summary.score,
        });
    }

    let mut csv = format!("{},count,median,q1,q3,mean,best_val_loss\n", kind.knob());
    for p in &points {
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            p.value, p.score.count, p.score.median, p.score.q1, p.score.q3, p.score.mean, p.best_val_loss
        )
        .expect("writing to a string cannot fail");
    }
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    let csv_path = out_root.join(SWEEP_CSV);
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    Ok(SweepReport {
        knob: kind.knob().to_string(),
        points,
    })
}

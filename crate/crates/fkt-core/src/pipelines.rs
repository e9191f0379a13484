//! End-to-end training regimes.
//!
//! Two paths to the same classifier: the sequential one (contrastive
//! pretraining, then supervised training from the transferred encoder) and the
//! single-stage one (joint optimization of both objectives on a shared
//! encoder). Plus the two ablation regimes each path degenerates to.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, make_view_pair, AugmentPolicy};
use crate::data::{batch_iterator, load_dataset, DatasetSpec, Split};
use crate::error::{FktError, Result};
use crate::eval::{argmax_row, evaluate, mean_std, MetricsReport};
use crate::losses::{
    cross_entropy_with_grad, fkt_loss, nt_xent_with_grad, ContrastiveConfig, Reduction,
};
use crate::model::{build_model, export_parameters, load_encoder, Checkpoint, ModelConfig};
use crate::nn::Params;
use crate::optim::{Optimizer, OptimizerSettings};
use crate::rng::{fnv1a, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Representational,
    Functional,
    SupervisedOnly,
    SslOnly,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Regime::Representational => "representational",
            Regime::Functional => "functional",
            Regime::SupervisedOnly => "supervised_only",
            Regime::SslOnly => "ssl_only",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub regime: Regime,
    pub epochs: usize,
    /// Per-stage overrides for the sequential regime; default to `epochs`.
    #[serde(default)]
    pub pretrain_epochs: Option<usize>,
    #[serde(default)]
    pub downstream_epochs: Option<usize>,
    pub batch_size: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub reduction: Reduction,
    #[serde(default = "OptimizerSettings::lars_default")]
    pub ssl_optimizer: OptimizerSettings,
    #[serde(default = "OptimizerSettings::sgd_default")]
    pub supervised_optimizer: OptimizerSettings,
    /// Optimizer for the joint stage; defaults to `supervised_optimizer`.
    #[serde(default)]
    pub joint_optimizer: Option<OptimizerSettings>,
    pub trials: usize,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub augment: AugmentPolicy,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Downstream stage trains the head only.
    #[serde(default)]
    pub freeze_encoder: bool,
    /// Suppress wall-clock values in CSV logs so reruns are byte-identical.
    #[serde(default)]
    pub determinism: bool,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

fn default_lambda() -> f64 {
    1.0
}

fn default_temperature() -> f64 {
    0.5
}

fn default_eval_batch() -> usize {
    256
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(FktError::InvalidConfig(format!(
                "epochs: must be >= 1, got {}",
                self.epochs
            )));
        }
        if self.batch_size < 1 {
            return Err(FktError::InvalidConfig(format!(
                "batch_size: must be >= 1, got {}",
                self.batch_size
            )));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(FktError::InvalidConfig(format!(
                "lambda: must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(FktError::InvalidConfig(format!(
                "temperature: must be positive, got {}",
                self.temperature
            )));
        }
        if self.trials == 0 || self.trials != self.seeds.len() {
            return Err(FktError::InvalidConfig(format!(
                "trials: must be positive and equal seeds length ({} trials, {} seeds)",
                self.trials,
                self.seeds.len()
            )));
        }
        if self.eval_batch_size < 1 {
            return Err(FktError::InvalidConfig(
                "eval_batch_size: must be >= 1".into(),
            ));
        }
        self.ssl_optimizer.validate("ssl_optimizer")?;
        self.supervised_optimizer.validate("supervised_optimizer")?;
        if let Some(j) = &self.joint_optimizer {
            j.validate("joint_optimizer")?;
        }
        self.dataset.validate()?;
        self.model.validate()?;
        self.augment.validate()?;
        if self.model.num_classes != self.dataset.num_classes {
            return Err(FktError::InvalidConfig(format!(
                "model.num_classes: {} does not match dataset.num_classes {}",
                self.model.num_classes, self.dataset.num_classes
            )));
        }
        Ok(())
    }

    pub fn pretrain_epochs(&self) -> usize {
        self.pretrain_epochs.unwrap_or(self.epochs)
    }

    pub fn downstream_epochs(&self) -> usize {
        self.downstream_epochs.unwrap_or(self.epochs)
    }

    /// Total epochs one trial of this regime consumes.
    pub fn epochs_total(&self) -> usize {
        match self.regime {
            Regime::Representational => self.pretrain_epochs() + self.downstream_epochs(),
            _ => self.epochs,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_ssl_loss: f64,
    pub mean_ce_loss: f64,
    /// Mean total objective for the stage; for the joint stage this is
    /// exactly mean_ce + lambda * mean_ssl.
    pub mean_fkt_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageRecords {
    pub stage: String,
    pub trial: usize,
    pub records: Vec<EpochRecord>,
}

/// CSV with the fixed column set. With `determinism` the wall column is
/// zeroed so identical runs produce identical bytes.
pub fn epoch_csv_string(records: &[EpochRecord], determinism: bool) -> String {
    let mut out = String::from("epoch,ssl_loss,ce_loss,fkt_loss,train_acc,test_acc,wall_seconds\n");
    for r in records {
        let wall = if determinism { 0.0 } else { r.wall_seconds };
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
            r.epoch,
            r.mean_ssl_loss,
            r.mean_ce_loss,
            r.mean_fkt_loss,
            r.train_accuracy,
            r.test_accuracy,
            wall
        ));
    }
    out
}

pub fn write_epoch_csv(path: &Path, records: &[EpochRecord], determinism: bool) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| FktError::Persistence(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, epoch_csv_string(records, determinism))
        .map_err(|e| FktError::Persistence(format!("{}: {e}", path.display())))
}

fn key(parts: &[u64]) -> u64 {
    StreamRng::from_key(parts).next_u64()
}

fn stage_model_seed(seed: u64, stage: &str) -> u64 {
    key(&[seed, fnv1a("model"), fnv1a(stage)])
}

fn stage_shuffle_seed(seed: u64, stage: &str) -> u64 {
    key(&[seed, fnv1a("shuffle"), fnv1a(stage)])
}

fn batch_augment_seed(seed: u64, stage: &str, epoch: usize, batch: usize) -> u64 {
    key(&[seed, fnv1a("augment"), fnv1a(stage), epoch as u64, batch as u64])
}

fn divergence_context(e: FktError, epoch: usize, batch: usize) -> FktError {
    match e {
        FktError::Divergence(msg) => {
            FktError::Divergence(format!("{msg} at epoch {epoch} batch {batch}"))
        }
        other => other,
    }
}

fn checkpoint_path(artifacts: &Path, label: &str, trial: usize, epoch: usize) -> PathBuf {
    artifacts
        .join("checkpoints")
        .join(format!("{label}_{trial}_{epoch}.ckpt"))
}

fn maybe_checkpoint(
    artifacts: Option<&Path>,
    cfg: &RunConfig,
    label: &str,
    trial: usize,
    epoch: usize,
    last: bool,
    ckpt: impl FnOnce() -> Checkpoint,
) -> Result<()> {
    let Some(dir) = artifacts else { return Ok(()) };
    let interval_hit = cfg
        .checkpoint_every
        .map(|every| every > 0 && (epoch + 1).is_multiple_of(every))
        .unwrap_or(false);
    if last || interval_hit {
        ckpt().save(&checkpoint_path(dir, label, trial, epoch))?;
    }
    Ok(())
}

/// Contrastive pretraining: optimizes the contrastive objective only; labels
/// are never read. Returns the encoder checkpoint and per-epoch records.
pub fn run_ssl_pretrain(
    cfg: &RunConfig,
    trial: usize,
    artifacts: Option<&Path>,
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    cfg.validate()?;
    let (train, _test) = load_dataset(&cfg.dataset)?;
    ssl_stage(cfg, &train, trial, cfg.pretrain_epochs(), "ssl_pretrain", artifacts)
}

fn ssl_stage(
    cfg: &RunConfig,
    train: &Split,
    trial: usize,
    epochs: usize,
    label: &str,
    artifacts: Option<&Path>,
) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    let seed = cfg.seeds[trial];
    let mut model = build_model(&cfg.model, stage_model_seed(seed, "ssl"))?;
    let mut opt = Optimizer::new(cfg.ssl_optimizer);
    let ntx = ContrastiveConfig {
        temperature: cfg.temperature,
        reduction: cfg.reduction,
    };
    let shuffle_seed = stage_shuffle_seed(seed, "ssl");
    let mut records = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        let t0 = Instant::now();
        let mut ssl_sum = 0.0;
        let mut batches = 0usize;
        for (b, batch) in batch_iterator(train, cfg.batch_size, shuffle_seed, epoch, true)?
            .enumerate()
        {
            let pair = make_view_pair(
                &batch,
                &cfg.augment,
                batch_augment_seed(seed, "ssl", epoch, b),
            )?;
            let n = pair.labels.len();
            let x = concatenate(Axis(0), &[pair.view_a.view(), pair.view_b.view()])
                .expect("views share a shape");
            let feats = model.encode(&x, true);
            let proj = model.project(&feats, true);
            let proj_a = proj.slice(ndarray::s![..n, ..]).to_owned();
            let proj_b = proj.slice(ndarray::s![n.., ..]).to_owned();
            let (ssl, ga, gb) =
                nt_xent_with_grad(&proj_a, &proj_b, &ntx).map_err(|e| divergence_context(e, epoch, b))?;
            if !ssl.is_finite() {
                return Err(FktError::Divergence(format!(
                    "contrastive loss non-finite at epoch {epoch} batch {b}"
                )));
            }
            let d_proj = concatenate(Axis(0), &[ga.view(), gb.view()]).unwrap();
            model.zero_grads();
            model.backward_heads(Some(&d_proj), None);
            opt.step_filtered(&mut model, |name| {
                name.starts_with("encoder.") || name.starts_with("projector.")
            })
            .map_err(|e| divergence_context(e, epoch, b))?;
            ssl_sum += ssl;
            batches += 1;
        }
        let mean_ssl = ssl_sum / batches as f64;
        records.push(EpochRecord {
            epoch,
            mean_ssl_loss: mean_ssl,
            mean_ce_loss: 0.0,
            mean_fkt_loss: mean_ssl,
            train_accuracy: 0.0,
            test_accuracy: 0.0,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });
        maybe_checkpoint(artifacts, cfg, label, trial, epoch, epoch + 1 == epochs, || {
            export_parameters(&mut model)
        })?;
    }
    Ok((export_parameters(&mut model), records))
}

/// Supervised stage of the sequential regime: encoder weights come from the
/// checkpoint, heads start fresh, training uses the supervised optimizer and
/// the cross-entropy objective only.
pub fn run_downstream(
    cfg: &RunConfig,
    encoder_ckpt: &Checkpoint,
    trial: usize,
    artifacts: Option<&Path>,
) -> Result<(MetricsReport, Vec<EpochRecord>, Checkpoint)> {
    cfg.validate()?;
    let (train, test) = load_dataset(&cfg.dataset)?;
    downstream_stage(
        cfg,
        &train,
        &test,
        encoder_ckpt,
        trial,
        cfg.downstream_epochs(),
        "downstream",
        artifacts,
    )
}

#[allow(clippy::too_many_arguments)]
fn downstream_stage(
    cfg: &RunConfig,
    train: &Split,
    test: &Split,
    encoder_ckpt: &Checkpoint,
    trial: usize,
    epochs: usize,
    label: &str,
    artifacts: Option<&Path>,
) -> Result<(MetricsReport, Vec<EpochRecord>, Checkpoint)> {
    let seed = cfg.seeds[trial];
    let mut model = build_model(&cfg.model, stage_model_seed(seed, "downstream"))?;
    load_encoder(&mut model, encoder_ckpt)?;
    let mut opt = Optimizer::new(cfg.supervised_optimizer);
    let light_policy = cfg.augment.to_light();
    let shuffle_seed = stage_shuffle_seed(seed, "downstream");
    let freeze = cfg.freeze_encoder;
    let mut records = Vec::with_capacity(epochs);
    let mut last_metrics = None;

    for epoch in 0..epochs {
        let t0 = Instant::now();
        let mut ce_sum = 0.0;
        let mut batches = 0usize;
        let mut correct = 0usize;
        let mut total = 0usize;
        for (b, batch) in batch_iterator(train, cfg.batch_size, shuffle_seed, epoch, true)?
            .enumerate()
        {
            let view = augment_batch(
                &batch,
                &light_policy,
                batch_augment_seed(seed, "downstream", epoch, b),
            )?;
            let feats = model.encode(&view.pixels, true);
            let logits = model.classify_features(&feats, true);
            let (ce, d_logits) = cross_entropy_with_grad(&logits, &view.labels)
                .map_err(|e| divergence_context(e, epoch, b))?;
            if !ce.is_finite() {
                return Err(FktError::Divergence(format!(
                    "cross-entropy non-finite at epoch {epoch} batch {b}"
                )));
            }
            model.zero_grads();
            model.backward_heads(None, Some(&d_logits));
            opt.step_filtered(&mut model, |name| {
                if freeze {
                    name.starts_with("classifier.")
                } else {
                    name.starts_with("encoder.") || name.starts_with("classifier.")
                }
            })
            .map_err(|e| divergence_context(e, epoch, b))?;
            for (i, &lab) in view.labels.iter().enumerate() {
                if argmax_row(logits.row(i).as_slice().unwrap()) == lab {
                    correct += 1;
                }
            }
            total += view.labels.len();
            ce_sum += ce;
            batches += 1;
        }
        let metrics = evaluate(&mut model, test, &cfg.augment, cfg.eval_batch_size)?;
        let mean_ce = ce_sum / batches as f64;
        records.push(EpochRecord {
            epoch,
            mean_ssl_loss: 0.0,
            mean_ce_loss: mean_ce,
            mean_fkt_loss: mean_ce,
            train_accuracy: correct as f64 / total as f64,
            test_accuracy: metrics.accuracy,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });
        maybe_checkpoint(artifacts, cfg, label, trial, epoch, epoch + 1 == epochs, || {
            export_parameters(&mut model)
        })?;
        last_metrics = Some(metrics);
    }
    Ok((
        last_metrics.expect("at least one epoch"),
        records,
        export_parameters(&mut model),
    ))
}

/// Single-stage joint regime: both objectives on every batch, one optimizer
/// step over all parameters.
pub fn run_functional(
    cfg: &RunConfig,
    trial: usize,
    artifacts: Option<&Path>,
) -> Result<(MetricsReport, Vec<EpochRecord>, Checkpoint)> {
    cfg.validate()?;
    let (train, test) = load_dataset(&cfg.dataset)?;
    joint_stage(cfg, &train, &test, trial, true, "functional", artifacts)
}

/// The joint loop with the contrastive branch disabled and the projector left
/// out of the optimizer. Shares augmentation and shuffle streams with the
/// joint regime so a lambda=0 joint run reproduces it exactly.
pub fn run_supervised_only(
    cfg: &RunConfig,
    trial: usize,
    artifacts: Option<&Path>,
) -> Result<(MetricsReport, Vec<EpochRecord>, Checkpoint)> {
    cfg.validate()?;
    let (train, test) = load_dataset(&cfg.dataset)?;
    joint_stage(cfg, &train, &test, trial, false, "supervised_only", artifacts)
}

#[allow(clippy::too_many_arguments)]
fn joint_stage(
    cfg: &RunConfig,
    train: &Split,
    test: &Split,
    trial: usize,
    ssl_enabled: bool,
    label: &str,
    artifacts: Option<&Path>,
) -> Result<(MetricsReport, Vec<EpochRecord>, Checkpoint)> {
    let seed = cfg.seeds[trial];
    let lambda = if ssl_enabled { cfg.lambda } else { 0.0 };
    let mut model = build_model(&cfg.model, stage_model_seed(seed, "train"))?;
    let opt_settings = if ssl_enabled {
        cfg.joint_optimizer.unwrap_or(cfg.supervised_optimizer)
    } else {
        cfg.supervised_optimizer
    };
    let mut opt = Optimizer::new(opt_settings);
    let ntx = ContrastiveConfig {
        temperature: cfg.temperature,
        reduction: cfg.reduction,
    };
    let shuffle_seed = stage_shuffle_seed(seed, "train");
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut last_metrics = None;

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let (mut ssl_sum, mut ce_sum, mut fkt_sum) = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        let mut correct = 0usize;
        let mut total = 0usize;
        for (b, batch) in batch_iterator(train, cfg.batch_size, shuffle_seed, epoch, true)?
            .enumerate()
        {
            let pair = make_view_pair(
                &batch,
                &cfg.augment,
                batch_augment_seed(seed, "train", epoch, b),
            )?;
            let n = pair.labels.len();
            let x = concatenate(Axis(0), &[pair.view_a.view(), pair.view_b.view()])
                .expect("views share a shape");
            let feats = model.encode(&x, true);
            let logits = model.classify_features(&feats, true);
            let mut both_labels = pair.labels.clone();
            both_labels.extend_from_slice(&pair.labels);
            let (ce, d_logits) = cross_entropy_with_grad(&logits, &both_labels)
                .map_err(|e| divergence_context(e, epoch, b))?;

            // The contrastive branch is skipped entirely at lambda = 0; its
            // gradient contribution would be exactly zero.
            let (ssl, d_proj) = if lambda > 0.0 {
                let proj = model.project(&feats, true);
                let proj_a = proj.slice(ndarray::s![..n, ..]).to_owned();
                let proj_b = proj.slice(ndarray::s![n.., ..]).to_owned();
                let (ssl, ga, gb) = nt_xent_with_grad(&proj_a, &proj_b, &ntx)
                    .map_err(|e| divergence_context(e, epoch, b))?;
                let mut d: Array2<f64> =
                    concatenate(Axis(0), &[ga.view(), gb.view()]).unwrap();
                d.mapv_inplace(|v| v * lambda);
                (ssl, Some(d))
            } else {
                (0.0, None)
            };

            let breakdown = fkt_loss(ssl, ce, lambda)?;
            if !breakdown.fkt_loss.is_finite() {
                return Err(FktError::Divergence(format!(
                    "joint loss non-finite at epoch {epoch} batch {b}"
                )));
            }
            model.zero_grads();
            model.backward_heads(d_proj.as_ref(), Some(&d_logits));
            opt.step_filtered(&mut model, |name| {
                if ssl_enabled {
                    true
                } else {
                    name.starts_with("encoder.") || name.starts_with("classifier.")
                }
            })
            .map_err(|e| divergence_context(e, epoch, b))?;

            for (i, &lab) in both_labels.iter().enumerate() {
                if argmax_row(logits.row(i).as_slice().unwrap()) == lab {
                    correct += 1;
                }
            }
            total += both_labels.len();
            ssl_sum += breakdown.ssl_loss;
            ce_sum += breakdown.ce_loss;
            fkt_sum += breakdown.fkt_loss;
            batches += 1;
        }
        let metrics = evaluate(&mut model, test, &cfg.augment, cfg.eval_batch_size)?;
        records.push(EpochRecord {
            epoch,
            mean_ssl_loss: ssl_sum / batches as f64,
            mean_ce_loss: ce_sum / batches as f64,
            mean_fkt_loss: fkt_sum / batches as f64,
            train_accuracy: correct as f64 / total as f64,
            test_accuracy: metrics.accuracy,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });
        maybe_checkpoint(artifacts, cfg, label, trial, epoch, epoch + 1 == cfg.epochs, || {
            export_parameters(&mut model)
        })?;
        last_metrics = Some(metrics);
    }
    Ok((
        last_metrics.expect("at least one epoch"),
        records,
        export_parameters(&mut model),
    ))
}

// ---------------------------------------------------------------------------
// Multi-trial orchestration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct MetricTriple {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegimeOutput {
    pub regime: Regime,
    pub dataset: String,
    pub stages: Vec<StageRecords>,
    pub trial_metrics: Vec<MetricsReport>,
    /// Epochs one trial consumes (pretrain + downstream for the sequential
    /// regime).
    pub epochs_total: usize,
}

impl RegimeOutput {
    pub fn mean(&self) -> MetricTriple {
        MetricTriple {
            accuracy: mean_std(&self.collect(|m| m.accuracy)).0,
            precision: mean_std(&self.collect(|m| m.macro_precision)).0,
            recall: mean_std(&self.collect(|m| m.macro_recall)).0,
        }
    }

    pub fn std(&self) -> MetricTriple {
        MetricTriple {
            accuracy: mean_std(&self.collect(|m| m.accuracy)).1,
            precision: mean_std(&self.collect(|m| m.macro_precision)).1,
            recall: mean_std(&self.collect(|m| m.macro_recall)).1,
        }
    }

    fn collect(&self, f: impl Fn(&MetricsReport) -> f64) -> Vec<f64> {
        self.trial_metrics.iter().map(f).collect()
    }
}

/// Run every trial of the configured regime. With an artifact directory,
/// per-stage CSVs and checkpoints are written as each trial completes, so
/// partial results survive a failed later trial.
pub fn run_regime(cfg: &RunConfig, artifacts: Option<&Path>) -> Result<RegimeOutput> {
    cfg.validate()?;
    let (train, test) = load_dataset(&cfg.dataset)?;
    let mut stages: Vec<StageRecords> = Vec::new();
    let mut trial_metrics: Vec<MetricsReport> = Vec::new();

    let persist = |stage: &str, trial: usize, records: &[EpochRecord]| -> Result<()> {
        if let Some(dir) = artifacts {
            let single = cfg.trials == 1 && cfg.regime != Regime::Representational;
            let name = if single {
                "epochs.csv".to_string()
            } else {
                format!("epochs_{stage}_trial{trial}.csv")
            };
            write_epoch_csv(&dir.join(name), records, cfg.determinism)?;
        }
        Ok(())
    };

    for trial in 0..cfg.trials {
        match cfg.regime {
            Regime::SslOnly => {
                let (_ckpt, records) =
                    ssl_stage(cfg, &train, trial, cfg.epochs, "ssl_only", artifacts)?;
                persist("ssl", trial, &records)?;
                stages.push(StageRecords {
                    stage: "ssl".into(),
                    trial,
                    records,
                });
            }
            Regime::Representational => {
                let (ckpt, pre_records) = ssl_stage(
                    cfg,
                    &train,
                    trial,
                    cfg.pretrain_epochs(),
                    "representational_pretrain",
                    artifacts,
                )?;
                persist("pretrain", trial, &pre_records)?;
                stages.push(StageRecords {
                    stage: "pretrain".into(),
                    trial,
                    records: pre_records,
                });
                let (metrics, down_records, _final) = downstream_stage(
                    cfg,
                    &train,
                    &test,
                    &ckpt,
                    trial,
                    cfg.downstream_epochs(),
                    "representational_downstream",
                    artifacts,
                )?;
                persist("downstream", trial, &down_records)?;
                stages.push(StageRecords {
                    stage: "downstream".into(),
                    trial,
                    records: down_records,
                });
                trial_metrics.push(metrics);
            }
            Regime::Functional => {
                let (metrics, records, _final) =
                    joint_stage(cfg, &train, &test, trial, true, "functional", artifacts)?;
                persist("functional", trial, &records)?;
                stages.push(StageRecords {
                    stage: "functional".into(),
                    trial,
                    records,
                });
                trial_metrics.push(metrics);
            }
            Regime::SupervisedOnly => {
                let (metrics, records, _final) = joint_stage(
                    cfg,
                    &train,
                    &test,
                    trial,
                    false,
                    "supervised_only",
                    artifacts,
                )?;
                persist("supervised", trial, &records)?;
                stages.push(StageRecords {
                    stage: "supervised".into(),
                    trial,
                    records,
                });
                trial_metrics.push(metrics);
            }
        }
    }

    Ok(RegimeOutput {
        regime: cfg.regime,
        dataset: cfg.dataset.name.to_string(),
        stages,
        trial_metrics,
        epochs_total: cfg.epochs_total(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub dataset: String,
    pub representational: RegimeSummary,
    pub functional: RegimeSummary,
    /// functional epochs / representational epochs (0.5 at the standard
    /// protocol: joint training replaces pretrain + downstream).
    pub epoch_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegimeSummary {
    pub regime: String,
    pub trials: Vec<MetricTriple>,
    pub mean: MetricTriple,
    pub std: MetricTriple,
    pub epochs_total: usize,
}

fn summarize(output: &RegimeOutput, label: &str) -> RegimeSummary {
    RegimeSummary {
        regime: label.to_string(),
        trials: output
            .trial_metrics
            .iter()
            .map(|m| MetricTriple {
                accuracy: m.accuracy,
                precision: m.macro_precision,
                recall: m.macro_recall,
            })
            .collect(),
        mean: output.mean(),
        std: output.std(),
        epochs_total: output.epochs_total,
    }
}

impl ComparisonReport {
    /// Plain-text table mirroring the two-regime comparison layout.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("Dataset: {}\n", self.dataset));
        out.push_str(&format!(
            "{:<28}{:>16}{:>16}{:>16}{:>10}\n",
            "Method", "Accuracy", "Precision", "Recall", "Epochs"
        ));
        for row in [&self.representational, &self.functional] {
            out.push_str(&format!(
                "{:<28}{:>16}{:>16}{:>16}{:>10}\n",
                row.regime,
                format!("{:.2}±{:.2}", row.mean.accuracy * 100.0, row.std.accuracy * 100.0),
                format!(
                    "{:.2}±{:.2}",
                    row.mean.precision * 100.0,
                    row.std.precision * 100.0
                ),
                format!("{:.2}±{:.2}", row.mean.recall * 100.0, row.std.recall * 100.0),
                row.epochs_total
            ));
        }
        out.push_str(&format!(
            "Epoch ratio (functional / representational): {:.2}\n",
            self.epoch_ratio
        ));
        out
    }
}

/// Run both regimes over the shared seeds and aggregate their metrics.
/// The configs must agree on dataset, model, and seeds.
pub fn run_comparison(
    cfg_rep: &RunConfig,
    cfg_fun: &RunConfig,
    artifacts_rep: Option<&Path>,
    artifacts_fun: Option<&Path>,
) -> Result<ComparisonReport> {
    if cfg_rep.regime != Regime::Representational {
        return Err(FktError::InvalidConfig(format!(
            "regime: comparison baseline must be representational, got {}",
            cfg_rep.regime
        )));
    }
    if cfg_fun.regime != Regime::Functional {
        return Err(FktError::InvalidConfig(format!(
            "regime: comparison subject must be functional, got {}",
            cfg_fun.regime
        )));
    }
    if cfg_rep.seeds != cfg_fun.seeds {
        return Err(FktError::InvalidConfig(
            "seeds: configs must share the same seed list".into(),
        ));
    }
    if cfg_rep.dataset != cfg_fun.dataset {
        return Err(FktError::InvalidConfig(
            "dataset: configs must share the same dataset spec".into(),
        ));
    }
    if cfg_rep.model != cfg_fun.model {
        return Err(FktError::InvalidConfig(
            "model: configs must share the same model config".into(),
        ));
    }
    let rep = run_regime(cfg_rep, artifacts_rep)?;
    let fun = run_regime(cfg_fun, artifacts_fun)?;
    let epoch_ratio = fun.epochs_total as f64 / rep.epochs_total as f64;
    Ok(ComparisonReport {
        dataset: rep.dataset.clone(),
        representational: summarize(&rep, "representational"),
        functional: summarize(&fun, "functional"),
        epoch_ratio,
    })
}

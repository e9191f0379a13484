//! `fkt` — config-driven training runs, regime comparison, evaluation, and
//! activation-map export. All outputs are files under a timestamped run
//! directory; exit codes: 0 ok, 2 config, 3 divergence, 4 checkpoint, 5 I/O.

mod config;
mod output;
mod plot;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use fkt_core::augment::eval_transform;
use fkt_core::data::load_dataset;
use fkt_core::eval::{cam_suppressed, evaluate, grad_cam, render_cam_overlay};
use fkt_core::model::{build_model, load_all, Checkpoint};
use fkt_core::pipelines::{run_comparison, run_regime, RegimeOutput, RunConfig, StageRecords};

use config::{load_run_config, CliError};
use output::{create_run_dir, list_artifacts, manifest, metrics_json, now_iso, write_json};
use plot::{bar_chart, line_chart, Series, PALETTE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Device {
    Cpu,
    Gpu,
}

#[derive(Parser)]
#[command(name = "fkt", version, about = "Joint vs sequential transfer training for contrastive self-supervision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct CommonFlags {
    /// Dot-path config overrides, e.g. --override epochs=5 (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Compute device. Only cpu is available in this build; gpu warns and
    /// falls back.
    #[arg(long, value_enum, default_value_t = Device::Cpu)]
    device: Device,
    /// Zero out wall-clock columns so reruns are byte-identical.
    #[arg(long)]
    determinism: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the configured regime and write manifest, epoch CSVs, metrics
    /// JSON, checkpoints, and plots into a fresh run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Run the sequential and joint regimes over shared seeds and emit the
    /// side-by-side report.
    Compare {
        /// Config with regime = representational.
        rep_config: PathBuf,
        /// Config with regime = functional.
        fun_config: PathBuf,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Render activation-map overlays for test samples of a dataset.
    Cam {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config supplying the dataset and preprocessing.
        #[arg(long)]
        config: PathBuf,
        /// Test-split sample ids (comma separated or repeated).
        #[arg(long, value_delimiter = ',', required = true)]
        samples: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Render even for inputs below the 64 px suppression threshold.
        #[arg(long)]
        allow_small: bool,
        /// Tag appended to output file names (e.g. the regime).
        #[arg(long, default_value = "model")]
        label: String,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Evaluate a checkpoint on the config's test split and print metrics
    /// JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Also write the metrics JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: CommonFlags,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, common } => cmd_run(&config, &common),
        Command::Compare {
            rep_config,
            fun_config,
            common,
        } => cmd_compare(&rep_config, &fun_config, &common),
        Command::Cam {
            checkpoint,
            config,
            samples,
            out_dir,
            allow_small,
            label,
            common,
        } => cmd_cam(&checkpoint, &config, &samples, &out_dir, allow_small, &label, &common),
        Command::Eval {
            checkpoint,
            config,
            out,
            common,
        } => cmd_eval(&checkpoint, &config, out.as_deref(), &common),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}

fn load_with_flags(path: &Path, common: &CommonFlags) -> Result<RunConfig, CliError> {
    if common.device == Device::Gpu {
        eprintln!("warning: gpu backend not available in this build; falling back to cpu");
    }
    let mut cfg = load_run_config(path, &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
        cfg.trials = 1;
    }
    if common.determinism {
        cfg.determinism = true;
    }
    // FKT_DATA_ROOT supplies the dataset root when the config leaves it empty.
    if cfg.dataset.root_path.as_os_str().is_empty()
        && cfg.dataset.name != fkt_core::data::DatasetName::SyntheticBlobs
    {
        match std::env::var_os("FKT_DATA_ROOT") {
            Some(root) => {
                cfg.dataset.root_path =
                    PathBuf::from(root).join(cfg.dataset.name.to_string());
            }
            None => {
                return Err(CliError::config(format!(
                    "dataset.root_path: empty and FKT_DATA_ROOT is unset ({} needs data on disk)",
                    cfg.dataset.name
                )));
            }
        }
    }
    Ok(cfg)
}

/// Per-stage series for trial 0, used by the curve plots.
fn trial0_series(stages: &[StageRecords], pick: impl Fn(&fkt_core::EpochRecord) -> f64) -> Vec<f64> {
    let mut out = Vec::new();
    for stage in stages.iter().filter(|s| s.trial == 0) {
        out.extend(stage.records.iter().map(&pick));
    }
    out
}

fn write_run_plots(dir: &Path, outputs: &[(&RegimeOutput, [u8; 3])]) -> Result<(), CliError> {
    let losses: Vec<Series> = outputs
        .iter()
        .map(|(o, color)| Series {
            color: *color,
            values: trial0_series(&o.stages, |r| r.mean_fkt_loss),
        })
        .collect();
    line_chart(&dir.join("plots").join("loss_curves.png"), &losses)?;
    let accs: Vec<Series> = outputs
        .iter()
        .map(|(o, color)| Series {
            color: *color,
            values: trial0_series(&o.stages, |r| r.test_accuracy),
        })
        .collect();
    line_chart(&dir.join("plots").join("accuracy_curves.png"), &accs)?;
    Ok(())
}

fn cmd_run(config_path: &Path, common: &CommonFlags) -> Result<(), CliError> {
    let cfg = load_with_flags(config_path, common)?;
    let started = now_iso();
    let run_dir = create_run_dir(&cfg.output_dir, &cfg.regime.to_string(), &cfg.dataset.name.to_string())?;
    println!("run directory: {}", run_dir.display());

    let output = run_regime(&cfg, Some(&run_dir))?;
    if !output.trial_metrics.is_empty() {
        write_json(&run_dir.join("metrics.json"), &metrics_json(&output))?;
        let mean = output.mean();
        let std = output.std();
        println!(
            "{} on {}: accuracy {:.2}±{:.2}%, precision {:.2}±{:.2}%, recall {:.2}±{:.2}% over {} trial(s), {} epochs/trial",
            output.regime,
            output.dataset,
            mean.accuracy * 100.0,
            std.accuracy * 100.0,
            mean.precision * 100.0,
            std.precision * 100.0,
            mean.recall * 100.0,
            std.recall * 100.0,
            output.trial_metrics.len(),
            output.epochs_total,
        );
    }
    write_run_plots(&run_dir, &[(&output, PALETTE[0])])?;
    let artifacts = list_artifacts(&run_dir);
    write_json(&run_dir.join("manifest.json"), &manifest(&cfg, &started, &artifacts))?;
    Ok(())
}

fn cmd_compare(rep_path: &Path, fun_path: &Path, common: &CommonFlags) -> Result<(), CliError> {
    let rep_cfg = load_with_flags(rep_path, common)?;
    let fun_cfg = load_with_flags(fun_path, common)?;
    let started = now_iso();
    let run_dir = create_run_dir(
        &rep_cfg.output_dir,
        "comparison",
        &rep_cfg.dataset.name.to_string(),
    )?;
    println!("run directory: {}", run_dir.display());

    let rep_dir = run_dir.join("representational");
    let fun_dir = run_dir.join("functional");
    let report = run_comparison(&rep_cfg, &fun_cfg, Some(&rep_dir), Some(&fun_dir))?;

    let table = report.to_table();
    print!("{table}");
    std::fs::write(run_dir.join("comparison.txt"), &table)
        .map_err(|e| CliError { code: 5, message: e.to_string() })?;
    let report_value = serde_json::to_value(&report).expect("report serializes");
    write_json(&run_dir.join("comparison.json"), &report_value)?;

    bar_chart(
        &run_dir.join("plots").join("comparison_bars.png"),
        &[
            (
                report.representational.mean.accuracy,
                report.representational.std.accuracy,
                PALETTE[0],
            ),
            (
                report.functional.mean.accuracy,
                report.functional.std.accuracy,
                PALETTE[1],
            ),
        ],
    )?;
    // Curves come from the per-stage CSVs already on disk; re-plot from the
    // epoch records in the JSON-shaped report is not possible, so read the
    // CSVs back.
    let read_csv_col = |dir: &Path, col: usize| -> Vec<f64> {
        let mut names: Vec<String> = list_artifacts(dir)
            .into_iter()
            .filter(|n| (n.ends_with(".csv") && n.contains("trial0")) || n == "epochs.csv")
            .collect();
        // Chronological stage order for the sequential regime.
        names.sort_by_key(|n| (!n.contains("pretrain"), n.clone()));
        let mut all = Vec::new();
        for name in names {
            if let Ok(text) = std::fs::read_to_string(dir.join(&name)) {
                for line in text.lines().skip(1) {
                    if let Some(v) = line.split(',').nth(col).and_then(|s| s.parse().ok()) {
                        all.push(v);
                    }
                }
            }
        }
        all
    };
    line_chart(
        &run_dir.join("plots").join("loss_curves.png"),
        &[
            Series { color: PALETTE[0], values: read_csv_col(&rep_dir, 3) },
            Series { color: PALETTE[1], values: read_csv_col(&fun_dir, 3) },
        ],
    )?;
    line_chart(
        &run_dir.join("plots").join("accuracy_curves.png"),
        &[
            Series { color: PALETTE[0], values: read_csv_col(&rep_dir, 5) },
            Series { color: PALETTE[1], values: read_csv_col(&fun_dir, 5) },
        ],
    )?;

    let artifacts = list_artifacts(&run_dir);
    write_json(&run_dir.join("manifest.json"), &manifest(&rep_cfg, &started, &artifacts))?;
    Ok(())
}

fn load_checkpoint_model(
    ckpt_path: &Path,
) -> Result<(fkt_core::model::Model, Checkpoint), CliError> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let mut model = build_model(&ckpt.model_config, 0)?;
    load_all(&mut model, &ckpt)?;
    Ok((model, ckpt))
}

fn cmd_cam(
    ckpt_path: &Path,
    config_path: &Path,
    samples: &[String],
    out_dir: &Path,
    allow_small: bool,
    label: &str,
    common: &CommonFlags,
) -> Result<(), CliError> {
    let cfg = load_with_flags(config_path, common)?;
    let input_size = cfg.augment.output_size;
    if cam_suppressed(input_size) && !allow_small {
        eprintln!(
            "warning: input size {input_size} px is below the activation-map threshold (64 px); \
             skipping (use --allow-small to override)"
        );
        return Ok(());
    }
    let (mut model, _ckpt) = load_checkpoint_model(ckpt_path)?;
    let (_, test) = load_dataset(&cfg.dataset)?;

    for sample_id in samples {
        let Some(index) = test.ids.iter().position(|id| id == sample_id) else {
            return Err(CliError::config(format!(
                "sample {sample_id:?} not found in the test split"
            )));
        };
        let raw = test.to_batch(&[index]);
        let clean = eval_transform(&raw, &cfg.augment)?;
        let cam = grad_cam(&mut model, &clean, raw.labels[0])?;
        if cam.degenerate {
            eprintln!("warning: degenerate (all-zero) activation map for {sample_id}");
        }
        // Overlay over the resized, unnormalized pixels.
        let img = raw.pixels.index_axis(ndarray::Axis(0), 0);
        let display = fkt_core::augment::resize_bilinear(&img, input_size);
        let safe_id = sample_id.replace(['/', '\\'], "-");
        let path = out_dir.join(format!(
            "cam_{}_{}_{}.png",
            cfg.dataset.name, safe_id, label
        ));
        render_cam_overlay(&cam, &display, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_eval(
    ckpt_path: &Path,
    config_path: &Path,
    out: Option<&Path>,
    common: &CommonFlags,
) -> Result<(), CliError> {
    let cfg = load_with_flags(config_path, common)?;
    let (mut model, _) = load_checkpoint_model(ckpt_path)?;
    let (_, test) = load_dataset(&cfg.dataset)?;
    let report = evaluate(&mut model, &test, &cfg.augment, cfg.eval_batch_size)?;
    let value = serde_json::to_value(&report).expect("report serializes");
    print!("{}", output::to_canonical_json(&value));
    if let Some(path) = out {
        write_json(path, &value)?;
    }
    Ok(())
}

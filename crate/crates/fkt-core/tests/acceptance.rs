//! Acceptance suite: one test per criterion, each printing a pass/fail line
//! with its wall time. Criteria cover oracle equivalence for the losses,
//! gradient fidelity, analytic identities, invariances, optimizer unit laws,
//! desk-scale end-to-end runs, the comparison harness, metrics and activation
//! maps.
//!
//! Run with `cargo test -p fkt-core --test acceptance -- --nocapture`.
//!
//! The CIFAR-10 desk-scale comparison needs the dataset on disk and several
//! CPU-hours; it is `#[ignore]` by default and picks up `FKT_DATA_ROOT`.

use std::panic::AssertUnwindSafe;
use std::sync::LazyLock;
use std::time::Instant;

use fkt_core::augment::AugmentPolicy;
use fkt_core::data::{make_synthetic_blobs, parse_blob_geometry, DatasetName, DatasetSpec};
use fkt_core::eval::{grad_cam, metrics_from_pairs, cam_suppressed};
use fkt_core::losses::{
    cross_entropy, cross_entropy_with_grad, fkt_loss, nt_xent, nt_xent_with_grad,
    ContrastiveConfig, Reduction,
};
use fkt_core::model::{build_model, load_all, BackboneKind, Checkpoint, ModelConfig};
use fkt_core::optim::{lars_step, sgd_step, OptimKind, OptimizerSettings};
use fkt_core::pipelines::{run_comparison, run_regime, Regime, RunConfig};
use fkt_core::rng::StreamRng;
use ndarray::Array2;

fn check(id: &str, desc: &str, body: impl FnOnce()) {
    let start = Instant::now();
    let result = std::panic::catch_unwind(AssertUnwindSafe(body));
    let secs = start.elapsed().as_secs_f64();
    match &result {
        Ok(()) => println!("acceptance {id}: PASS ({secs:.1}s) — {desc}"),
        Err(_) => println!("acceptance {id}: FAIL ({secs:.1}s) — {desc}"),
    }
    if let Err(e) = result {
        std::panic::resume_unwind(e);
    }
}

fn random_matrix(rng: &mut StreamRng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.normal())
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv)
}

/// Term-by-term contrastive loss: per anchor, positive numerator over a plain
/// exponential sum across all other samples.
fn nt_xent_oracle(za: &Array2<f64>, zb: &Array2<f64>, tau: f64) -> f64 {
    let n = za.nrows();
    let two_n = 2 * n;
    let row = |i: usize| -> Vec<f64> {
        if i < n {
            za.row(i).to_vec()
        } else {
            zb.row(i - n).to_vec()
        }
    };
    let mut total = 0.0;
    for anchor in 0..two_n {
        let pos = (anchor + n) % two_n;
        let numerator = (cosine(&row(anchor), &row(pos)) / tau).exp();
        let mut denom = 0.0;
        for k in 0..two_n {
            if k != anchor {
                denom += (cosine(&row(anchor), &row(k)) / tau).exp();
            }
        }
        total += -(numerator / denom).ln();
    }
    total / two_n as f64
}

#[test]
fn acceptance_01_nt_xent_oracle_equivalence() {
    check("01", "contrastive loss matches brute-force oracle on 100 batches", || {
        let mut rng = StreamRng::from_key(&[0xa01]);
        let taus = [0.1, 0.5, 1.0];
        for case in 0..100u64 {
            let n = 1 + (case as usize % 8);
            let d = 2 + (case as usize % 15);
            let tau = taus[case as usize % 3];
            let za = random_matrix(&mut rng, n, d);
            let zb = random_matrix(&mut rng, n, d);
            let cfg = ContrastiveConfig {
                temperature: tau,
                reduction: Reduction::Mean,
            };
            let ours = nt_xent(&za, &zb, &cfg).unwrap();
            let oracle = nt_xent_oracle(&za, &zb, tau);
            let rel = (ours - oracle).abs() / ours.abs().max(oracle.abs()).max(1e-12);
            assert!(rel < 1e-6, "case {case}: rel diff {rel}");
        }
    });
}

#[test]
fn acceptance_02_gradient_fidelity() {
    check("02", "loss gradients match central finite differences", || {
        const H: f64 = 1e-5;
        let mut rng = StreamRng::from_key(&[0xa02]);
        let rel_err = |analytic: &[f64], numeric: &[f64]| -> f64 {
            let scale = analytic
                .iter()
                .chain(numeric)
                .fold(0.0f64, |m, v| m.max(v.abs()))
                .max(1e-12);
            analytic
                .iter()
                .zip(numeric)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
                / scale
        };

        for case in 0..4u64 {
            let n = 1 + case as usize % 4;
            let d = 3 + case as usize;
            let cfg = ContrastiveConfig {
                temperature: [0.1, 0.5, 1.0, 0.5][case as usize],
                reduction: Reduction::Mean,
            };
            let za = random_matrix(&mut rng, n, d);
            let zb = random_matrix(&mut rng, n, d);
            let (_, ga, _) = nt_xent_with_grad(&za, &zb, &cfg).unwrap();
            let mut numeric = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..d {
                    let mut zp = za.clone();
                    zp[[i, j]] = za[[i, j]] + H;
                    let up = nt_xent(&zp, &zb, &cfg).unwrap();
                    zp[[i, j]] = za[[i, j]] - H;
                    let dn = nt_xent(&zp, &zb, &cfg).unwrap();
                    numeric[i * d + j] = (up - dn) / (2.0 * H);
                }
            }
            let err = rel_err(ga.as_slice().unwrap(), &numeric);
            assert!(err < 1e-6, "nt_xent case {case}: rel err {err}");
        }

        for case in 0..4u64 {
            let n = 1 + case as usize % 4;
            let c = 2 + case as usize;
            let logits = random_matrix(&mut rng, n, c);
            let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
            let (_, grad) = cross_entropy_with_grad(&logits, &labels).unwrap();
            let mut numeric = vec![0.0; n * c];
            for i in 0..n {
                for j in 0..c {
                    let mut lp = logits.clone();
                    lp[[i, j]] = logits[[i, j]] + H;
                    let up = cross_entropy(&lp, &labels).unwrap();
                    lp[[i, j]] = logits[[i, j]] - H;
                    let dn = cross_entropy(&lp, &labels).unwrap();
                    numeric[i * c + j] = (up - dn) / (2.0 * H);
                }
            }
            let err = rel_err(grad.as_slice().unwrap(), &numeric);
            assert!(err < 1e-6, "cross_entropy case {case}: rel err {err}");
        }
    });
}

#[test]
fn acceptance_03_analytic_identities() {
    check("03", "single-pair zero, high-temperature limit, uniform CE, joint arithmetic", || {
        let mut rng = StreamRng::from_key(&[0xa03]);

        // N = 1: the denominator holds only the positive, loss is exactly 0.
        for _ in 0..5 {
            let za = random_matrix(&mut rng, 1, 6);
            let zb = random_matrix(&mut rng, 1, 6);
            let loss = nt_xent(&za, &zb, &ContrastiveConfig::default()).unwrap();
            assert_eq!(loss, 0.0);
        }

        // tau = 1e4 flattens similarities: loss -> log(2N - 1) = log 3 at N=2.
        let cfg = ContrastiveConfig {
            temperature: 1e4,
            reduction: Reduction::Mean,
        };
        for _ in 0..5 {
            let mut za = random_matrix(&mut rng, 2, 8);
            let mut zb = random_matrix(&mut rng, 2, 8);
            for m in [&mut za, &mut zb] {
                for mut row in m.rows_mut() {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    row.mapv_inplace(|v| v / norm);
                }
            }
            let loss = nt_xent(&za, &zb, &cfg).unwrap();
            assert!((loss - 3.0f64.ln()).abs() < 1e-3, "{loss}");
        }

        // Uniform logits: CE = ln|C| to 1e-9.
        let logits = Array2::<f64>::from_elem((6, 10), -1.7);
        let labels: Vec<usize> = (0..6).map(|i| i % 10).collect();
        let ce = cross_entropy(&logits, &labels).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-9);

        // Joint combination is exact arithmetic.
        let b = fkt_loss(2.0, 1.0, 1.0).unwrap();
        assert_eq!(b.fkt_loss, 3.0);
        let b = fkt_loss(0.5, 0.25, 2.0).unwrap();
        assert_eq!(b.fkt_loss, 1.25);
        let b = fkt_loss(123.0, 0.875, 0.0).unwrap();
        assert_eq!(b.fkt_loss, 0.875);
    });
}

#[test]
fn acceptance_04_invariance_suite() {
    check("04", "pair permutation, view swap, and per-row rescaling invariance", || {
        let mut rng = StreamRng::from_key(&[0xa04]);
        let cfg = ContrastiveConfig::default();
        for _ in 0..20 {
            let n = 2 + rng.below(6);
            let d = 2 + rng.below(12);
            let za = random_matrix(&mut rng, n, d);
            let zb = random_matrix(&mut rng, n, d);
            let base = nt_xent(&za, &zb, &cfg).unwrap();

            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let pa = Array2::from_shape_fn((n, d), |(i, j)| za[[perm[i], j]]);
            let pb = Array2::from_shape_fn((n, d), |(i, j)| zb[[perm[i], j]]);
            assert!((nt_xent(&pa, &pb, &cfg).unwrap() - base).abs() < 1e-9);

            assert!((nt_xent(&zb, &za, &cfg).unwrap() - base).abs() < 1e-9);

            let mut sa = za.clone();
            let mut sb = zb.clone();
            for i in 0..n {
                let fa = rng.uniform_in(0.1, 10.0);
                let fb = rng.uniform_in(0.1, 10.0);
                sa.row_mut(i).mapv_inplace(|v| v * fa);
                sb.row_mut(i).mapv_inplace(|v| v * fb);
            }
            assert!((nt_xent(&sa, &sb, &cfg).unwrap() - base).abs() < 1e-9);
        }
    });
}

#[test]
fn acceptance_05_optimizer_unit_laws() {
    check("05", "hand-computed optimizer steps and zero-gradient fixed points", || {
        // Vanilla SGD: w=1, g=2, lr=0.5 -> 0.
        let mut w = [1.0];
        let mut v = [0.0];
        sgd_step(&mut w, &[2.0], &mut v, 0.5, 0.0, 0.0).unwrap();
        assert_eq!(w[0], 0.0);

        // Momentum accumulation: v1=1, v2=1.9 -> w2 = -2.9.
        let mut w = [0.0];
        let mut v = [0.0];
        sgd_step(&mut w, &[1.0], &mut v, 1.0, 0.9, 0.0).unwrap();
        sgd_step(&mut w, &[1.0], &mut v, 1.0, 0.9, 0.0).unwrap();
        assert!((w[0] + 2.9).abs() < 1e-15);

        // Layer-wise scaling: local_lr = 1*|2|/|1| = 2; w = 2 - 0.1*2*1 = 1.8.
        let mut w = [2.0];
        let mut v = [0.0];
        lars_step(&mut w, &[1.0], &mut v, 0.1, 0.0, 0.0, 1.0, false).unwrap();
        assert!((w[0] - 1.8).abs() < 1e-15);

        // Excluded parameter: plain momentum step, no adaptation or decay.
        let mut w = [1.0];
        let mut v = [0.0];
        lars_step(&mut w, &[0.5], &mut v, 0.1, 0.0, 0.7, 1.0, true).unwrap();
        assert!((w[0] - 0.95).abs() < 1e-15);

        // Zero-gradient fixed points.
        let mut w = [3.0, -1.5];
        let mut v = [0.0, 0.0];
        sgd_step(&mut w, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(w, [3.0, -1.5]);
        lars_step(&mut w, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0, 0.001, false).unwrap();
        assert_eq!(w, [3.0, -1.5]);
    });
}

// ---------------------------------------------------------------------------
// End-to-end fixtures
// ---------------------------------------------------------------------------

fn blob_dataset(per_class: usize, image_size: usize) -> DatasetSpec {
    DatasetSpec {
        name: DatasetName::SyntheticBlobs,
        root_path: Default::default(),
        subset_size: None,
        num_classes: 2,
        image_size,
        split_seed: 21,
        synthetic_per_class: per_class,
        checksums: Default::default(),
    }
}

fn blob_run_config(per_class: usize, image_size: usize, epochs: usize) -> RunConfig {
    RunConfig {
        regime: Regime::Functional,
        epochs,
        pretrain_epochs: None,
        downstream_epochs: None,
        batch_size: 16,
        lambda: 1.0,
        temperature: 0.5,
        reduction: Default::default(),
        ssl_optimizer: OptimizerSettings {
            kind: OptimKind::Lars,
            lr: 1.0,
            momentum: 0.9,
            weight_decay: 1e-6,
            trust_coefficient: 0.01,
        },
        supervised_optimizer: OptimizerSettings::sgd_default(),
        joint_optimizer: None,
        trials: 1,
        seeds: vec![3],
        dataset: blob_dataset(per_class, image_size),
        model: ModelConfig {
            backbone: BackboneKind::SmallCnn,
            encoder_dim: 32,
            projector_hidden_dim: 32,
            projector_out_dim: 16,
            num_classes: 2,
            small_input_stem: true,
        },
        augment: AugmentPolicy::contrastive_default(image_size),
        output_dir: Default::default(),
        freeze_encoder: false,
        determinism: true,
        checkpoint_every: None,
        eval_batch_size: 64,
    }
}

struct TrainedBlobModel {
    cfg: RunConfig,
    accuracy: f64,
    first_ssl: f64,
    last_ssl: f64,
    checkpoint: Checkpoint,
}

/// The joint run shared by criteria 06 and 10: 2 classes x 100 images,
/// small_cnn, lambda = 1, 20 epochs. 48 px keeps the final conv grid fine
/// enough for the localization check.
static TRAINED: LazyLock<TrainedBlobModel> = LazyLock::new(|| {
    let cfg = blob_run_config(100, 48, 20);
    let (metrics, records, ckpt) =
        fkt_core::pipelines::run_functional(&cfg, 0, None).expect("training run");
    TrainedBlobModel {
        cfg,
        accuracy: metrics.accuracy,
        first_ssl: records.first().unwrap().mean_ssl_loss,
        last_ssl: records.last().unwrap().mean_ssl_loss,
        checkpoint: ckpt,
    }
});

#[test]
fn acceptance_06_functional_regime_end_to_end() {
    check("06", "joint run on 200 blobs reaches 95% and reduces the contrastive loss", || {
        let trained = &*TRAINED;
        assert!(
            trained.accuracy >= 0.95,
            "test accuracy {:.3} below 0.95",
            trained.accuracy
        );
        assert!(
            trained.last_ssl < trained.first_ssl,
            "contrastive loss rose: first {:.4}, last {:.4}",
            trained.first_ssl,
            trained.last_ssl
        );
    });
}

#[test]
fn acceptance_07_regime_equivalence_at_lambda_zero() {
    check("07", "lambda=0 joint run bit-matches the supervised-only run (epoch CSVs)", || {
        let dir = tempfile::tempdir().unwrap();
        let mut fun = blob_run_config(50, 16, 20);
        fun.lambda = 0.0;
        fun.seeds = vec![9];
        let fun_dir = dir.path().join("fun");
        run_regime(&fun, Some(&fun_dir)).unwrap();

        let mut sup = blob_run_config(50, 16, 20);
        sup.regime = Regime::SupervisedOnly;
        sup.seeds = vec![9];
        let sup_dir = dir.path().join("sup");
        run_regime(&sup, Some(&sup_dir)).unwrap();

        let fun_csv = std::fs::read(fun_dir.join("epochs.csv")).unwrap();
        let sup_csv = std::fs::read(sup_dir.join("epochs.csv")).unwrap();
        assert_eq!(fun_csv, sup_csv, "epoch CSVs differ between the two regimes");
    });
}

#[test]
fn acceptance_08_comparison_harness() {
    check("08", "comparison harness emits mean±std table and 2:1 epoch accounting", || {
        let mut rep = blob_run_config(50, 16, 4);
        rep.regime = Regime::Representational;
        rep.trials = 3;
        rep.seeds = vec![1, 2, 3];
        let mut fun = blob_run_config(50, 16, 4);
        fun.trials = 3;
        fun.seeds = vec![1, 2, 3];

        let report = run_comparison(&rep, &fun, None, None).unwrap();
        assert_eq!(report.representational.trials.len(), 3);
        assert_eq!(report.functional.trials.len(), 3);
        assert_eq!(report.representational.epochs_total, 8);
        assert_eq!(report.functional.epochs_total, 4);
        assert!((report.epoch_ratio - 0.5).abs() < 1e-12);
        for s in [&report.representational, &report.functional] {
            assert!(s.mean.accuracy.is_finite() && s.std.accuracy.is_finite());
            assert!(s.mean.precision.is_finite() && s.std.precision.is_finite());
            assert!(s.mean.recall.is_finite() && s.std.recall.is_finite());
        }
        let table = report.to_table();
        assert!(table.contains("representational"));
        assert!(table.contains("functional"));
        assert!(table.contains('±'));
        println!("{table}");
        // Directional check, reported not gated.
        let gap = report.functional.mean.accuracy - report.representational.mean.accuracy;
        println!(
            "directional check (reported, not gated): functional − representational accuracy = {:+.4} ({})",
            gap,
            if gap >= -0.01 { "within 1 point" } else { "below 1 point" }
        );
    });
}

/// The full desk-scale CIFAR-10 comparison: 5000/1000 stratified subset,
/// ResNet-18 small stem, 3 seeds, 20+20 vs 20 epochs. Requires the CIFAR-10
/// binary batches under $FKT_DATA_ROOT/cifar10 and several CPU-hours, so it
/// does not run in the default suite.
#[test]
#[ignore = "needs CIFAR-10 on disk and hours of compute; run explicitly"]
fn acceptance_08_cifar_desk_scale() {
    check("08-cifar", "CIFAR-10 subset comparison (ResNet-18, 3 seeds, 20+20 vs 20)", || {
        let root = std::env::var("FKT_DATA_ROOT").expect("set FKT_DATA_ROOT");
        let dataset = DatasetSpec {
            name: DatasetName::Cifar10,
            root_path: std::path::Path::new(&root).join("cifar10"),
            subset_size: Some(5000),
            num_classes: 10,
            image_size: 32,
            split_seed: 21,
            synthetic_per_class: 100,
            checksums: Default::default(),
        };
        let model = ModelConfig {
            backbone: BackboneKind::Resnet18,
            encoder_dim: 0,
            projector_hidden_dim: 0,
            projector_out_dim: 128,
            num_classes: 10,
            small_input_stem: true,
        };
        let mut rep = blob_run_config(100, 32, 20);
        rep.regime = Regime::Representational;
        rep.trials = 3;
        rep.seeds = vec![1, 2, 3];
        rep.batch_size = 256;
        rep.eval_batch_size = 256;
        rep.dataset = dataset.clone();
        rep.model = model.clone();
        rep.ssl_optimizer = OptimizerSettings::lars_default();
        rep.augment = AugmentPolicy::contrastive_default(32);
        let mut fun = rep.clone();
        fun.regime = Regime::Functional;

        let report = run_comparison(&rep, &fun, None, None).unwrap();
        println!("{}", report.to_table());
        assert!((report.epoch_ratio - 0.5).abs() < 1e-12);
        let gap = report.functional.mean.accuracy - report.representational.mean.accuracy;
        println!(
            "directional check (reported, not gated): functional − representational accuracy = {gap:+.4}"
        );
    });
}

#[test]
fn acceptance_09_metrics_oracle() {
    check("09", "metrics match per-class counting oracle; constant predictor case", || {
        let mut rng = StreamRng::from_key(&[0xa09]);
        let classes = 5;
        let preds: Vec<usize> = (0..1000).map(|_| rng.below(classes)).collect();
        let labels: Vec<usize> = (0..1000).map(|_| rng.below(classes)).collect();
        let report = metrics_from_pairs(&preds, &labels, classes).unwrap();
        for c in 0..classes {
            let tp = preds
                .iter()
                .zip(&labels)
                .filter(|(p, l)| **p == c && **l == c)
                .count() as f64;
            let predicted = preds.iter().filter(|&&p| p == c).count() as f64;
            let support = labels.iter().filter(|&&l| l == c).count() as f64;
            assert_eq!(
                report.per_class_precision[c],
                if predicted > 0.0 { tp / predicted } else { 0.0 }
            );
            assert_eq!(
                report.per_class_recall[c],
                if support > 0.0 { tp / support } else { 0.0 }
            );
        }

        // Constant predictor on a balanced 2-class set.
        let preds = vec![0usize; 200];
        let labels: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let report = metrics_from_pairs(&preds, &labels, 2).unwrap();
        assert_eq!(report.accuracy, 0.5);
        assert_eq!(report.macro_precision, 0.25);
        assert_eq!(report.macro_recall, 0.5);
    });
}

#[test]
fn acceptance_10_cam_contract() {
    check("10", "activation maps: bounds, scale invariance, blob localization, suppression", || {
        let trained = &*TRAINED;
        let mut model = build_model(&trained.cfg.model, 0).unwrap();
        load_all(&mut model, &trained.checkpoint).unwrap();

        // Fresh blob set sized to give 50 test images (25 per class).
        let size = trained.cfg.dataset.image_size;
        let (_, test) = make_synthetic_blobs(125, 2, size, 77).unwrap();
        assert_eq!(test.len(), 50);

        let mut localized = 0usize;
        for i in 0..test.len() {
            let batch = test.to_batch(&[i]);
            let target = batch.labels[0];
            let cam = grad_cam(&mut model, &batch, target).unwrap();
            assert_eq!(cam.heatmap.dim(), (size, size));
            assert!(cam.heatmap.iter().all(|&v| (0.0..=1.0).contains(&v)));

            let geo = parse_blob_geometry(&batch.sample_ids[0]).expect("geometry in id");
            let x_lo = geo.center_x.saturating_sub(geo.radius);
            let x_hi = (geo.center_x + geo.radius).min(size - 1);
            let y_lo = geo.center_y.saturating_sub(geo.radius);
            let y_hi = (geo.center_y + geo.radius).min(size - 1);
            let mut inside = 0.0;
            let mut outside = 0.0;
            for y in 0..size {
                for x in 0..size {
                    let v = cam.heatmap[[y, x]];
                    if (y_lo..=y_hi).contains(&y) && (x_lo..=x_hi).contains(&x) {
                        inside += v;
                    } else {
                        outside += v;
                    }
                }
            }
            if inside > outside {
                localized += 1;
            }
        }
        println!("blob localization: {localized}/50 heatmaps concentrated in the blob box");
        assert!(
            localized >= 40,
            "only {localized}/50 maps localized the blob (need >= 40)"
        );

        // Scale invariance of the normalized map under positive logit scaling.
        let batch = test.to_batch(&[0]);
        let base = grad_cam(&mut model, &batch, batch.labels[0]).unwrap();
        use fkt_core::nn::{ParamRef, Params};
        model.visit_params("", &mut |p: ParamRef<'_>| {
            let per_class = p.data.len() / 2;
            if p.name == "classifier.weight" {
                for v in &mut p.data[batch.labels[0] * per_class..(batch.labels[0] + 1) * per_class]
                {
                    *v *= 2.5;
                }
            }
        });
        let scaled = grad_cam(&mut model, &batch, batch.labels[0]).unwrap();
        let max_diff = base
            .heatmap
            .iter()
            .zip(scaled.heatmap.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-9, "normalized map changed by {max_diff}");

        // Small-input suppression threshold honored.
        assert!(cam_suppressed(32));
        assert!(!cam_suppressed(150));
    });
}

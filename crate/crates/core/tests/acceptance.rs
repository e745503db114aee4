//! Acceptance suite. Each criterion prints one `ACCEPTANCE n: PASS`/`FAIL`
//! line (run with `-- --nocapture` to see them as they complete).
//!
//! Criteria 1, 2, 4, and 6 need the MNIST and CIFAR-10 datasets on disk under
//! `SAAK_DATA_DIR` (default `/root/data`): `mnist/` holding the four IDX
//! files and `cifar-10-batches-bin/` holding the six binary batches.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use saak_core::classifier::{self, FeatureMatrix, MlpShape};
use saak_core::kernel::{self, Pooling, StageConfig, Truncation};
use saak_core::pipeline::{self, ExperimentConfig, ExperimentReport};
use saak_core::select;
use saak_core::tensor::Tensor;
use saak_core::transform::{self, FeatureTensor};

fn data_dir() -> PathBuf {
    std::env::var_os("SAAK_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("/root/data"))
}

fn pass(n: usize, detail: &str) {
    println!("ACCEPTANCE {}: PASS ({})", n, detail);
}

fn check(n: usize, ok: bool, detail: &str) {
    if ok {
        pass(n, detail);
    } else {
        panic!("ACCEPTANCE {}: FAIL ({})", n, detail);
    }
}

fn mnist_config(out: &std::path::Path, overlapping: bool) -> ExperimentConfig {
    let (stride, pool) = if overlapping { (1, "max2") } else { (2, "none") };
    let text = format!(
        r#"
version = 1
seed = 7
output_dir = "{out}"

[dataset]
kind = "mnist"
dir = "{data}"
train = 10000
test = 2000

[[stage]]
kernel_size = 2
stride = {stride}
pool = "{pool}"
truncation = "energy:0.995"

[[stage]]
kernel_size = 2
stride = {stride}
pool = "{pool}"
truncation = "energy:0.995"

[classifier]
kind = "mlp"
"#,
        out = out.display(),
        data = data_dir().join("mnist").display(),
        stride = stride,
        pool = pool,
    );
    ExperimentConfig::parse(&text).unwrap()
}

/// Two-stage CIFAR cascade with adaptive (energy) truncation, so the
/// retained spectrum grows with the kernel dimension in the kernel-size
/// comparison.
fn cifar_dim_config(out: &std::path::Path, kernel_size: usize) -> ExperimentConfig {
    let text = format!(
        r#"
version = 1
seed = 7
output_dir = "{out}"

[dataset]
kind = "cifar10"
dir = "{data}"
train = 5000
test = 1000

[[stage]]
kernel_size = {k}
stride = 1
pool = "max2"
truncation = "energy:0.995"

[[stage]]
kernel_size = {k}
stride = 1
pool = "max2"
truncation = "energy:0.995"

[classifier]
kind = "logistic"
"#,
        out = out.display(),
        data = data_dir().join("cifar-10-batches-bin").display(),
        k = kernel_size,
    );
    ExperimentConfig::parse(&text).unwrap()
}

fn cifar_config(out: &std::path::Path, kernel_size: usize, train: usize, test: usize) -> ExperimentConfig {
    let text = format!(
        r#"
version = 1
seed = 7
output_dir = "{out}"

[dataset]
kind = "cifar10"
dir = "{data}"
train = {train}
test = {test}

[[stage]]
kernel_size = {k}
stride = 1
pool = "max2"
truncation = "top:8"

[[stage]]
kernel_size = {k}
stride = 1
pool = "max2"
truncation = "top:12"

[[stage]]
kernel_size = {k}
stride = 1
pool = "none"
truncation = "top:12"

[classifier]
kind = "logistic"
"#,
        out = out.display(),
        data = data_dir().join("cifar-10-batches-bin").display(),
        train = train,
        test = test,
        k = kernel_size,
    );
    ExperimentConfig::parse(&text).unwrap()
}

struct MnistRun {
    _dir: tempfile::TempDir,
    report: ExperimentReport,
    kv: Vec<u8>,
    elapsed_s: f64,
}

static MNIST_OVERLAP: OnceLock<MnistRun> = OnceLock::new();

fn mnist_overlap_run() -> &'static MnistRun {
    MNIST_OVERLAP.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = mnist_config(dir.path(), true);
        let t0 = Instant::now();
        let report = pipeline::run_classification(&cfg).unwrap();
        let elapsed_s = t0.elapsed().as_secs_f64();
        let kv = std::fs::read(dir.path().join("report.kv")).unwrap();
        MnistRun {
            _dir: dir,
            report,
            kv,
            elapsed_s,
        }
    })
}

#[test]
fn criterion_1_mnist_desk_scale_classification() {
    let run = mnist_overlap_run();
    let acc = run.report.test_accuracy;
    check(
        1,
        acc >= 0.95 && run.elapsed_s <= 600.0,
        &format!(
            "MNIST 10k/2k overlapping 2-stage MLP: accuracy {:.4} (>= 0.95), {:.0}s (<= 600s)",
            acc, run.elapsed_s
        ),
    );
}

#[test]
fn criterion_2_overlap_benefit() {
    let overlap = mnist_overlap_run().report.test_accuracy;
    let dir = tempfile::tempdir().unwrap();
    let cfg = mnist_config(dir.path(), false);
    let non_overlap = pipeline::run_classification(&cfg).unwrap().test_accuracy;
    check(
        2,
        overlap >= non_overlap - 0.003,
        &format!(
            "overlapping {:.4} vs non-overlapping {:.4} (tolerance 0.3 points)",
            overlap, non_overlap
        ),
    );
}

#[test]
fn criterion_3_kernel_dimension_study() {
    let dir3 = tempfile::tempdir().unwrap();
    let acc3 = pipeline::run_classification(&cifar_dim_config(dir3.path(), 3))
        .unwrap()
        .test_accuracy;
    let dir2 = tempfile::tempdir().unwrap();
    let acc2 = pipeline::run_classification(&cifar_dim_config(dir2.path(), 2))
        .unwrap()
        .test_accuracy;
    check(
        3,
        acc3 > acc2,
        &format!("CIFAR 5k/1k: k_s=3 accuracy {:.4} > k_s=2 accuracy {:.4}", acc3, acc2),
    );
}

#[test]
fn criterion_4_kernel_stability() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = cifar_config(dir.path(), 3, 0, 1000);
    cfg.dataset.train = 0; // full 50k training set
    let t0 = Instant::now();
    let report = pipeline::run_stability(&cfg, &[5000]).unwrap();
    let elapsed_s = t0.elapsed().as_secs_f64();
    let row = &report.rows[0];
    let stage1 = row.per_stage_mean[0];
    let stage3 = row.per_stage_mean[2];
    check(
        4,
        stage1 >= 0.99 && stage3 >= 0.93 && elapsed_s <= 1200.0,
        &format!(
            "CIFAR 5k vs 50k: stage-1 mean |cos| {:.4} (>= 0.99), stage-3 {:.4} (>= 0.93), {:.0}s (<= 1200s)",
            stage1, stage3, elapsed_s
        ),
    );
}

// ---------- criterion 5: property suite ----------

fn random_images(n: usize, side: usize, channels: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..n * side * side * channels)
        .map(|_| rng.gen_range(0.0..1.0))
        .collect();
    Tensor::new(vec![n, side, side, channels], data).unwrap()
}

fn assert_orthonormal(set: &kernel::SaakKernelSet, tol: f64, what: &str) {
    let mut vectors: Vec<&[f32]> = vec![&set.dc];
    for b in &set.ac_basis {
        vectors.push(b);
    }
    for i in 0..vectors.len() {
        for j in i..vectors.len() {
            let dot: f64 = vectors[i]
                .iter()
                .zip(vectors[j])
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            let expected = if i == j { 1.0 } else { 0.0 };
            assert!(
                (dot - expected).abs() < tol,
                "ACCEPTANCE 5: FAIL ({}: <{},{}> = {}, expected {})",
                what,
                i,
                j,
                dot,
                expected
            );
        }
    }
}

#[test]
fn criterion_5a_orthonormality() {
    let images = random_images(200, 12, 1, 1);
    let stages = [
        StageConfig {
            kernel_size: 2,
            stride: 1,
            pool: Pooling::Max2,
            truncation: Truncation::Energy(0.995),
        },
        StageConfig {
            kernel_size: 3,
            stride: 1,
            pool: Pooling::None,
            truncation: Truncation::KeepAll,
        },
    ];
    let (cascade, _) = pipeline::fit_cascade(&images, &stages).unwrap();
    for (i, (_, set)) in cascade.stages.iter().enumerate() {
        assert_orthonormal(set, 1e-5, &format!("stage {} basis", i + 1));
    }
    pass(5, "orthonormality of every fitted basis within 1e-5");
}

#[test]
fn criterion_5b_non_negativity_and_pair_exclusivity() {
    let images = random_images(50, 8, 1, 2);
    let cfg = StageConfig {
        kernel_size: 2,
        stride: 1,
        pool: Pooling::None,
        truncation: Truncation::KeepAll,
    };
    let set = kernel::fit_stage_kernels(&images, &cfg).unwrap();
    let out = transform::forward_stage(&FeatureTensor::from_images(images), &set, &cfg).unwrap();
    let k = out.spectral_dim();
    for cell in out.data.data().chunks_exact(k) {
        for &v in cell {
            assert!(v >= 0.0, "ACCEPTANCE 5: FAIL (negative coefficient {})", v);
        }
        for pair in cell[1..].chunks_exact(2) {
            assert!(
                pair[0] == 0.0 || pair[1] == 0.0,
                "ACCEPTANCE 5: FAIL (S/P pair both nonzero: {:?})",
                pair
            );
        }
    }
    pass(5, "non-negativity and pair exclusivity of all coefficients");
}

#[test]
fn criterion_5c_parseval() {
    let images = random_images(20, 8, 1, 3);
    let cfg = StageConfig {
        kernel_size: 2,
        stride: 2,
        pool: Pooling::None,
        truncation: Truncation::KeepAll,
    };
    let set = kernel::fit_stage_kernels(&images, &cfg).unwrap();
    let input_energy: f64 = images.data().iter().map(|&v| (v as f64).powi(2)).sum();
    let out = transform::forward_stage(&FeatureTensor::from_images(images), &set, &cfg).unwrap();
    let output_energy: f64 = out.data.data().iter().map(|&v| (v as f64).powi(2)).sum();
    let rel = (input_energy - output_energy).abs() / input_energy;
    check(
        5,
        rel < 1e-5,
        &format!("Parseval energy preserved, relative error {:.2e} (< 1e-5)", rel),
    );
}

#[test]
fn criterion_5d_lossless_round_trips() {
    let cfg = StageConfig {
        kernel_size: 2,
        stride: 2,
        pool: Pooling::None,
        truncation: Truncation::KeepAll,
    };
    for stages in [1usize, 2] {
        let images = random_images(12, 8, 1, 4 + stages as u64);
        let (cascade, outputs) = pipeline::fit_cascade(&images, &vec![cfg; stages]).unwrap();
        let mut current = outputs.last().unwrap().clone();
        for (scfg, set) in cascade.stages.iter().rev() {
            current = transform::inverse_stage(&current, set, scfg).unwrap();
        }
        let max_err = images
            .data()
            .iter()
            .zip(current.data.data())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(
            max_err < 1e-5,
            "ACCEPTANCE 5: FAIL ({}-stage round trip error {})",
            stages,
            max_err
        );
    }
    pass(5, "lossless inverse round trips (1 and 2 stages) within 1e-5");
}

#[test]
fn criterion_5e_dimension_chain() {
    // 32 -> 30 -> 15 -> 13 -> 6 -> 4
    assert_eq!(transform::window_count(32, 3, 1), 30);
    assert_eq!(30 / 2, 15);
    assert_eq!(transform::window_count(15, 3, 1), 13);
    assert_eq!(13 / 2, 6);
    assert_eq!(transform::window_count(6, 3, 1), 4);
    let stage = |pool| StageConfig {
        kernel_size: 3,
        stride: 1,
        pool,
        truncation: Truncation::TopK(4),
    };
    let stages = [stage(Pooling::Max2), stage(Pooling::Max2), stage(Pooling::None)];
    let images = random_images(4, 32, 3, 6);
    let (_, outputs) = pipeline::fit_cascade(&images, &stages).unwrap();
    let dims: Vec<(usize, usize)> = outputs.iter().map(|o| o.spatial_dims()).collect();
    check(
        5,
        dims == vec![(15, 15), (6, 6), (4, 4)],
        &format!("dimension chain 30,15,13,6,4 realized; stage outputs {:?}", dims),
    );
}

/// Independent brute-force implementation of the histogram cross-entropy.
fn oracle_entropy(values: &[f32], labels: &[usize], classes: usize, bins: usize) -> f64 {
    let eps = 1e-8f64;
    let min = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if min == max {
        return values.len() as f64 * (1.0 / eps).ln();
    }
    let mut counts = vec![vec![0usize; classes]; bins];
    for (&v, &l) in values.iter().zip(labels) {
        let frac = (v - min) as f64 / (max - min) as f64;
        let mut b = (frac * bins as f64).floor() as usize;
        if b >= bins {
            b = bins - 1;
        }
        counts[b][l] += 1;
    }
    let mut wins = vec![0usize; classes];
    for bin in &counts {
        let best = (0..classes).max_by(|&a, &b| {
            bin[a].cmp(&bin[b]).then(b.cmp(&a)) // ties -> lowest class index
        });
        if let Some(c) = best {
            if bin[c] > 0 {
                wins[c] += 1;
            }
        }
    }
    labels
        .iter()
        .map(|&l| {
            let p = (wins[l] as f64 / bins as f64).max(eps);
            (1.0 / p).ln()
        })
        .sum()
}

#[test]
fn criterion_5f_entropy_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for instance in 0..50 {
        let classes = rng.gen_range(2..=4usize);
        let n = rng.gen_range(classes.max(5)..=40usize);
        let d1 = rng.gen_range(1..=4usize);
        let d2 = rng.gen_range(1..=4usize);
        let k = rng.gen_range(1..=6usize);
        let labels: Vec<usize> = (0..n)
            .map(|i| if i < classes { i } else { rng.gen_range(0..classes) })
            .collect();
        let mut data = Vec::with_capacity(n * d1 * d2 * k);
        for _ in 0..n * d1 * d2 * k {
            // mix of continuous values and repeats to exercise bin edges
            data.push(if rng.gen_bool(0.2) {
                rng.gen_range(0..4) as f32 * 0.25
            } else {
                rng.gen_range(-1.0..1.0)
            });
        }
        let features = FeatureTensor {
            data: Tensor::new(vec![n, d1, d2, k], data.clone()).unwrap(),
            stage: 1,
        };
        let map = select::entropy_map(&features, &labels, classes, 10).unwrap();
        for i in 0..d1 {
            for j in 0..d2 {
                for ch in 0..k {
                    let col: Vec<f32> = (0..n)
                        .map(|img| data[((img * d1 + i) * d2 + j) * k + ch])
                        .collect();
                    let expected = oracle_entropy(&col, &labels, classes, 10);
                    let got = map.get(i, j, ch);
                    // the map stores f32; compare after the same rounding
                    assert!(
                        got == expected as f32 as f64,
                        "ACCEPTANCE 5: FAIL (instance {} location ({},{},{}): {} vs oracle {})",
                        instance,
                        i,
                        j,
                        ch,
                        got,
                        expected
                    );
                }
            }
        }
    }
    pass(5, "entropy map matches an independent oracle on 50 random instances");
}

#[test]
fn criterion_5g_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 10;
    let f = 3;
    let classes = 3;
    let x = FeatureMatrix::new(
        n,
        f,
        (0..n * f).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let y: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let batch: Vec<usize> = (0..n).collect();
    let l2 = 1e-3f32;
    let h = 1e-3f32;

    let mut weights: Vec<f32> = (0..classes * f).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let bias: Vec<f32> = (0..classes).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let (_, gw, _) = classifier::logistic_loss_grad(&weights, &bias, &x, &y, &batch, l2);
    let mut worst_lr = 0.0f64;
    for i in 0..weights.len() {
        let orig = weights[i];
        weights[i] = orig + h;
        let lp = classifier::logistic_loss(&weights, &bias, &x, &y, &batch, l2);
        weights[i] = orig - h;
        let lm = classifier::logistic_loss(&weights, &bias, &x, &y, &batch, l2);
        weights[i] = orig;
        let num = (lp - lm) / (2.0 * h as f64);
        let rel = (gw[i] as f64 - num).abs() / num.abs().max(gw[i].abs() as f64).max(1e-4);
        worst_lr = worst_lr.max(rel);
    }
    assert!(worst_lr < 1e-4, "ACCEPTANCE 5: FAIL (LR gradient check, worst rel {})", worst_lr);

    let shape = MlpShape {
        features: f,
        hidden: 6,
        classes,
    };
    let mut params = classifier::mlp_init(&shape, 3);
    let (_, grad) = classifier::mlp_loss_grad(&shape, &params, &x, &y, &batch, l2);
    let mut worst_mlp = 0.0f64;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + h;
        let lp = classifier::mlp_loss(&shape, &params, &x, &y, &batch, l2);
        params[i] = orig - h;
        let lm = classifier::mlp_loss(&shape, &params, &x, &y, &batch, l2);
        params[i] = orig;
        let num = (lp - lm) / (2.0 * h as f64);
        let g = grad[i] as f64;
        worst_mlp = worst_mlp.max((g - num).abs() / num.abs().max(g.abs()).max(1e-3));
    }
    check(
        5,
        worst_mlp < 1e-3,
        &format!(
            "gradient checks: LR worst rel {:.2e} (< 1e-4), MLP worst rel {:.2e} (< 1e-3)",
            worst_lr, worst_mlp
        ),
    );
}

#[test]
fn criterion_5h_adversarial_identity() {
    // synthetic MNIST-format dataset on disk, full pipeline, attacked = clean
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    let write_pair = |prefix: &str, per_class: usize, salt: u64| -> Vec<f32> {
        let n = 2 * per_class;
        let mut img = Vec::new();
        img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        img.extend_from_slice(&(n as u32).to_be_bytes());
        img.extend_from_slice(&8u32.to_be_bytes());
        img.extend_from_slice(&8u32.to_be_bytes());
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lbl.extend_from_slice(&(n as u32).to_be_bytes());
        let mut scaled = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(salt);
        for i in 0..n {
            let class = i % 2;
            for y in 0..8 {
                for xcol in 0..8 {
                    let ramp = if class == 0 { xcol } else { y } * 28;
                    let b = (ramp + rng.gen_range(0..40)).min(255) as u8;
                    img.push(b);
                    scaled.push(b as f32 / 255.0);
                }
            }
            lbl.push(class as u8);
        }
        let (iname, lname) = if prefix == "train" {
            ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
        } else {
            ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
        };
        std::fs::write(data.join(iname), img).unwrap();
        std::fs::write(data.join(lname), lbl).unwrap();
        scaled
    };
    write_pair("train", 40, 1);
    let test_scaled = write_pair("test", 10, 2);

    let out = tmp.path().join("out");
    let cfg = ExperimentConfig::parse(&format!(
        r#"
version = 1
seed = 3
output_dir = "{out}"

[dataset]
kind = "mnist"
dir = "{data}"

[[stage]]
kernel_size = 2
stride = 1
pool = "max2"
truncation = "keep-all"

[classifier]
kind = "logistic"
epochs = 30
"#,
        out = out.display(),
        data = data.display()
    ))
    .unwrap();
    let clean = pipeline::run_classification(&cfg).unwrap();

    let attacked = Tensor::new(vec![20, 8, 8, 1], test_scaled).unwrap();
    let apath = tmp.path().join("attacked.saak");
    attacked.save(&apath).unwrap();
    let report = pipeline::run_adversarial_eval(&cfg, &apath).unwrap();
    assert_eq!(
        report.attacked_accuracy, clean.test_accuracy,
        "ACCEPTANCE 5: FAIL (attacked=clean accuracy {} vs clean {})",
        report.attacked_accuracy, clean.test_accuracy
    );
    assert!(
        report.rmse.iter().all(|&v| v == 0.0),
        "ACCEPTANCE 5: FAIL (nonzero RMSE curve on identical inputs)"
    );
    pass(5, "adversarial identity: clean accuracy reproduced exactly, zero RMSE curves");
}

#[test]
fn criterion_6_determinism() {
    // first run: the shared criterion-1 artifacts
    let first_kv = mnist_overlap_run().kv.clone();
    let dir = tempfile::tempdir().unwrap();
    let cfg = mnist_config(dir.path(), true);
    pipeline::run_classification(&cfg).unwrap();
    let second_kv = std::fs::read(dir.path().join("report.kv")).unwrap();
    check(
        6,
        first_kv == second_kv,
        "two identically-seeded runs of criterion 1 produced byte-identical reports",
    );
}

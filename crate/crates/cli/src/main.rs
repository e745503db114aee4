//! `saak` — command-line surface for the Saak transform pipeline.
//!
//! Each pipeline phase is a subcommand writing inspectable artifacts
//! (kernels, features, entropy maps, masks, models) under the output
//! directory, so any intermediate can be examined or re-run in isolation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use saak_core::classifier::Standardizer;
use saak_core::dataset;
use saak_core::error::SaakError;
use saak_core::kernel;
use saak_core::pipeline::{self, ExperimentConfig};
use saak_core::select::{self, EntropyMap};
use saak_core::tensor::Tensor;
use saak_core::transform::{self, SaakCascade};
use saak_core::Result;

#[derive(Parser)]
#[command(
    name = "saak",
    about = "Multi-stage Saak transform: kernels, features, selection, classification",
    version
)]
struct Cli {
    /// Experiment config file (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Cap module-internal parallelism (1 = fully deterministic)
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Print progress details
    #[arg(long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit Saak kernels stage by stage on the training subset
    FitKernels,
    /// Transform a split through fitted kernels and save feature tensors
    Transform {
        /// Which split to transform
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Compute cross-entropy maps for the in-scope stages (training split)
    Entropy,
    /// Build selection masks from saved entropy maps
    Select,
    /// Train the configured classifier on selected training features
    Train,
    /// Evaluate the trained classifier on the test subset
    Evaluate,
    /// Run the full pipeline: fit, select, train, evaluate, report
    Run,
    /// Kernel-stability study across training subset sizes
    Stability {
        /// Comma-separated subset sizes, e.g. 1000,5000
        #[arg(long)]
        sizes: String,
    },
    /// Evaluate externally supplied attacked images against clean artifacts
    Adversarial {
        /// Attacked test images as a tensor file (same dims as the test set)
        #[arg(long)]
        attacked: PathBuf,
    },
    /// Export a feature-response heatmap as PNG
    Visualize {
        #[arg(long)]
        stage: usize,
        #[arg(long, default_value_t = 0)]
        image: usize,
        #[arg(long, default_value_t = 0)]
        channel: usize,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Print kernel spectra and dimensions of fitted stages
    Inspect,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 2 by default; this tool reserves 1 for usage errors
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if cli.config.is_none() {
        eprintln!("saak: missing required option --config <file>");
        eprintln!("usage: saak <subcommand> --config <file> [--seed N] [--out DIR] [--threads N]");
        return ExitCode::from(1);
    }
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("saak: failed to set thread count: {}", e);
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("saak: {}", e);
            let code = match e {
                SaakError::Numeric(_) | SaakError::Train(_) => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().ok_or_else(|| {
        SaakError::Config("this subcommand requires --config <file>".into())
    })?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

/// Load the configured split, already subset per the config.
fn load_split(cfg: &ExperimentConfig, split: &str) -> Result<dataset::ImageSet> {
    let (train, test) = pipeline::load_dataset(&cfg.dataset)?;
    let (set, size, stream) = match split {
        "train" => (train, cfg.dataset.train, pipeline::seeds::TRAIN_SAMPLE),
        "test" => (test, cfg.dataset.test, pipeline::seeds::TEST_SAMPLE),
        other => {
            return Err(SaakError::Config(format!(
                "unknown split '{}' (expected train or test)",
                other
            )))
        }
    };
    if size == 0 || size == set.len() {
        return Ok(set);
    }
    let idx = pipeline::stratified_sample(
        &set.labels,
        set.class_count,
        size,
        pipeline::derive_seed(cfg.seed, stream),
    )?;
    set.subset(&idx)
}

fn load_cascade(cfg: &ExperimentConfig) -> Result<SaakCascade> {
    let kdir = cfg.output_dir.join("kernels");
    let mut stages = Vec::with_capacity(cfg.stages.len());
    for i in 1..=cfg.stages.len() {
        let path = kdir.join(format!("stage_{}.saak", i));
        stages.push(kernel::load_kernels(&path).map_err(|e| match e {
            SaakError::Io(io) => SaakError::Format(format!(
                "stage {} kernels missing at {} (run fit-kernels first): {}",
                i,
                path.display(),
                io
            )),
            other => other,
        })?);
    }
    Ok(SaakCascade { stages })
}

fn in_scope(cfg: &ExperimentConfig, idx: usize) -> bool {
    match cfg.selection.scope {
        pipeline::SelectionScope::Final => idx + 1 == cfg.stages.len(),
        pipeline::SelectionScope::Concat => true,
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::FitKernels => {
            let cfg = load_config(cli)?;
            let train = load_split(&cfg, "train")?;
            if cli.verbose {
                eprintln!("fitting on {} training images", train.len());
            }
            let stages = cfg.stage_configs()?;
            let (cascade, outputs) = pipeline::fit_cascade(&train.data, &stages)?;
            let kdir = cfg.output_dir.join("kernels");
            std::fs::create_dir_all(&kdir)?;
            for (i, (scfg, set)) in cascade.stages.iter().enumerate() {
                kernel::save_kernels(&kdir.join(format!("stage_{}.saak", i + 1)), scfg, set)?;
            }
            for (i, out) in outputs.iter().enumerate() {
                let (d1, d2) = out.spatial_dims();
                println!(
                    "stage {}: {}x{} spatial, {} spectral ({} AC kernels retained)",
                    i + 1,
                    d1,
                    d2,
                    out.spectral_dim(),
                    cascade.stages[i].1.retained()
                );
            }
            Ok(())
        }
        Command::Transform { split } => {
            let cfg = load_config(cli)?;
            let cascade = load_cascade(&cfg)?;
            let set = load_split(&cfg, split)?;
            let outputs = transform::forward_cascade(&set.data, &cascade)?;
            let fdir = cfg.output_dir.join("features");
            std::fs::create_dir_all(&fdir)?;
            for (i, out) in outputs.iter().enumerate() {
                let path = fdir.join(format!("{}_stage_{}.saak", split, i + 1));
                out.data.save(&path)?;
                println!("wrote {} ({:?})", path.display(), out.data.dims());
            }
            Ok(())
        }
        Command::Entropy => {
            let cfg = load_config(cli)?;
            let cascade = load_cascade(&cfg)?;
            let train = load_split(&cfg, "train")?;
            let outputs = transform::forward_cascade(&train.data, &cascade)?;
            let edir = cfg.output_dir.join("entropy");
            std::fs::create_dir_all(&edir)?;
            for (i, out) in outputs.iter().enumerate() {
                if !in_scope(&cfg, i) {
                    continue;
                }
                let map = select::entropy_map(
                    out,
                    &train.labels,
                    train.class_count,
                    cfg.selection.bins,
                )?;
                let path = edir.join(format!("stage_{}.saak", i + 1));
                map.values.save(&path)?;
                println!("wrote {} ({:?})", path.display(), map.values.dims());
            }
            Ok(())
        }
        Command::Select => {
            let cfg = load_config(cli)?;
            let mdir = cfg.output_dir.join("masks");
            std::fs::create_dir_all(&mdir)?;
            for i in 0..cfg.stages.len() {
                if !in_scope(&cfg, i) {
                    continue;
                }
                let epath = cfg.output_dir.join("entropy").join(format!("stage_{}.saak", i + 1));
                let values = Tensor::load(&epath).map_err(|e| match e {
                    SaakError::Io(io) => SaakError::Format(format!(
                        "entropy map missing at {} (run entropy first): {}",
                        epath.display(),
                        io
                    )),
                    other => other,
                })?;
                let map = EntropyMap {
                    values,
                    bins: cfg.selection.bins,
                    class_count: 0, // not needed for ranking
                };
                let (d1, d2) = map.spatial_dims();
                let spectral =
                    select::fraction_to_count(map.spectral_dim(), cfg.selection.spectral_fraction);
                let spatial = select::fraction_to_count(d1 * d2, cfg.selection.spatial_fraction);
                let mask = select::build_mask(&map, spectral, spatial)?;
                let path = mdir.join(format!("stage_{}.mask", i + 1));
                select::save_mask(&path, &mask)?;
                println!(
                    "wrote {} ({} channels x {} positions)",
                    path.display(),
                    mask.spectral_keep.len(),
                    spatial
                );
            }
            Ok(())
        }
        Command::Train => {
            let cfg = load_config(cli)?;
            let cascade = load_cascade(&cfg)?;
            let train = load_split(&cfg, "train")?;
            let outputs = transform::forward_cascade(&train.data, &cascade)?;
            let mut masks = Vec::new();
            for i in 0..cfg.stages.len() {
                if in_scope(&cfg, i) {
                    let path = cfg.output_dir.join("masks").join(format!("stage_{}.mask", i + 1));
                    masks.push(Some(select::load_mask(&path)?));
                } else {
                    masks.push(None);
                }
            }
            let x = pipeline::pack_features(&outputs, &masks)?;
            let standardizer = Standardizer::fit(&x)?;
            let xs = standardizer.transform(&x)?;
            let clf_seed = pipeline::derive_seed(cfg.seed, pipeline::seeds::CLASSIFIER);
            let model = match cfg.classifier.kind.as_str() {
                "logistic" => {
                    let hyper = saak_core::classifier::LogisticHyper {
                        lr: cfg.classifier.lr.unwrap_or(1e-2),
                        epochs: cfg.classifier.epochs,
                        batch: cfg.classifier.batch,
                        l2: cfg.classifier.l2,
                        seed: clf_seed,
                    };
                    saak_core::classifier::ModelKind::Logistic(
                        saak_core::classifier::train_logistic(
                            &xs,
                            &train.labels,
                            train.class_count,
                            &hyper,
                        )?,
                    )
                }
                _ => {
                    let hyper = saak_core::classifier::MlpHyper {
                        hidden: cfg.classifier.hidden,
                        lr: cfg.classifier.lr.unwrap_or(5e-3),
                        epochs: cfg.classifier.epochs,
                        batch: cfg.classifier.batch,
                        l2: cfg.classifier.l2,
                        seed: clf_seed,
                    };
                    saak_core::classifier::ModelKind::Mlp(saak_core::classifier::train_mlp(
                        &xs,
                        &train.labels,
                        train.class_count,
                        &hyper,
                    )?)
                }
            };
            let acc = model.evaluate(&xs, &train.labels)?;
            let clf = saak_core::classifier::TrainedClassifier {
                model,
                standardizer,
            };
            saak_core::classifier::save_classifier(&cfg.output_dir.join("model"), &clf)?;
            println!("train accuracy: {:.4}", acc);
            Ok(())
        }
        Command::Evaluate => {
            let cfg = load_config(cli)?;
            let (cascade, masks, clf) =
                pipeline::load_artifacts(&cfg.output_dir, cfg.stages.len())?;
            let test = load_split(&cfg, "test")?;
            let outputs = transform::forward_cascade(&test.data, &cascade)?;
            let x = pipeline::pack_features(&outputs, &masks)?;
            let acc = clf.evaluate_raw(&x, &test.labels)?;
            println!("test accuracy: {:.4}", acc);
            Ok(())
        }
        Command::Run => {
            let cfg = load_config(cli)?;
            let report = pipeline::run_classification(&cfg)?;
            print!("{}", report.to_text());
            println!("report written to {}", cfg.output_dir.join("report.txt").display());
            Ok(())
        }
        Command::Stability { sizes } => {
            let cfg = load_config(cli)?;
            let sizes: Vec<usize> = sizes
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| {
                        SaakError::Config(format!("bad subset size '{}'", s.trim()))
                    })
                })
                .collect::<Result<_>>()?;
            let report = pipeline::run_stability(&cfg, &sizes)?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Adversarial { attacked } => {
            let cfg = load_config(cli)?;
            let report = pipeline::run_adversarial_eval(&cfg, attacked)?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Visualize {
            stage,
            image,
            channel,
            split,
        } => {
            let cfg = load_config(cli)?;
            if *stage < 1 || *stage > cfg.stages.len() {
                return Err(SaakError::Config(format!(
                    "stage {} outside [1, {}]",
                    stage,
                    cfg.stages.len()
                )));
            }
            let cascade = load_cascade(&cfg)?;
            let set = load_split(&cfg, split)?;
            if *image >= set.len() {
                return Err(SaakError::Config(format!(
                    "image index {} outside the {} split of {} images",
                    image,
                    split,
                    set.len()
                )));
            }
            let one = set.subset(&[*image])?;
            let outputs = transform::forward_cascade(&one.data, &cascade)?;
            let out = &outputs[*stage - 1];
            let (d1, d2) = out.spatial_dims();
            if *channel >= out.spectral_dim() {
                return Err(SaakError::Config(format!(
                    "channel {} outside stage {}'s {} spectral channels",
                    channel,
                    stage,
                    out.spectral_dim()
                )));
            }
            let mut chan = Tensor::zeros(vec![d1, d2]);
            for i in 0..d1 {
                for j in 0..d2 {
                    chan.data_mut()[i * d2 + j] = out.data.get4(0, i, j, *channel);
                }
            }
            let vdir = cfg.output_dir.join("visualize");
            std::fs::create_dir_all(&vdir)?;
            let path = vdir.join(format!("stage{}_img{}_ch{}.png", stage, image, channel));
            dataset::export_heatmap(&chan, &path)?;
            println!("wrote {} ({}x{})", path.display(), d1, d2);
            Ok(())
        }
        Command::Inspect => {
            let cfg = load_config(cli)?;
            let cascade = load_cascade(&cfg)?;
            for (i, (scfg, set)) in cascade.stages.iter().enumerate() {
                println!(
                    "stage {}: k_s={} stride={} pool={} truncation={} input_dim={} retained_ac={} spectral_out={}",
                    i + 1,
                    scfg.kernel_size,
                    scfg.stride,
                    scfg.pool,
                    scfg.truncation,
                    set.input_dim,
                    set.retained(),
                    set.augmented_count()
                );
                let eigs: Vec<String> =
                    set.eigenvalues.iter().take(8).map(|v| format!("{:.3e}", v)).collect();
                println!(
                    "  leading eigenvalues: {}{}",
                    eigs.join(", "),
                    if set.eigenvalues.len() > 8 { ", ..." } else { "" }
                );
            }
            Ok(())
        }
    }
}

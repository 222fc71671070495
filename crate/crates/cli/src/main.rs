use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dcscr::checks::{run_suite, Suite};
use dcscr::harness::{
    classify_datasets, gen_synthetic, load_dataset, load_model, load_pairs, load_set, save_dataset,
    save_model, save_pairs, verify_pairs_file, Dataset, PairsFile, SynthConfig,
};
use dcscr::training::{pretrain_level1, train_level2, TrainConfig, TrainHistory};
use dcscr::{solve_pair, Error, Exec, Hyperparams, Model, ModelConfig, PairLabel};
use serde::Deserialize;

#[derive(Parser)]
#[command(
    name = "dcscr",
    version,
    about = "Image-set distances by class-specific collaborative representation"
)]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Gaussian-cluster dataset.
    GenSynth {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        sets: usize,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long, allow_negative_numbers = true)]
        separation: f64,
        #[arg(long, allow_negative_numbers = true)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Create an untrained model for a dataset's dimension and classes.
    InitModel {
        #[arg(long)]
        data: PathBuf,
        /// Spatial grid as HxW.
        #[arg(long, default_value = "4x4", value_parser = parse_grid)]
        grid: (usize, usize),
        /// Encoder output length; defaults to the pixel dimension.
        #[arg(long)]
        encoder_dim: Option<usize>,
        #[arg(long)]
        no_attention: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a dataset into a gallery (first set of each class) and probes.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        probe: PathBuf,
    },
    /// Write every pair of sets of a dataset as a pairs file.
    MakePairs {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the coupled representation problem for two sets.
    SolvePair {
        #[arg(long)]
        set_a: PathBuf,
        #[arg(long)]
        set_b: PathBuf,
        /// Treat the pair as same-class (mu1). This is the default.
        #[arg(long, conflicts_with = "diff")]
        same: bool,
        /// Treat the pair as different-class (mu2).
        #[arg(long)]
        diff: bool,
        #[command(flatten)]
        hyper: HyperArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nearest-set classification of probes against a gallery.
    Classify {
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        /// Required for raw-pixel datasets.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Which mu the pair problems use.
        #[arg(long, value_enum, default_value_t = Branch::Same)]
        branch: Branch,
        #[command(flatten)]
        hyper: HyperArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score labeled pairs, writing a ROC table and the AUC.
    VerifyPairs {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Comma-separated decision thresholds on the set distance.
        #[arg(
            long,
            value_delimiter = ',',
            required = true,
            allow_negative_numbers = true
        )]
        thresholds: Vec<f64>,
        #[arg(long, value_enum, default_value_t = Branch::Different)]
        branch: Branch,
        #[command(flatten)]
        hyper: HyperArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Level-1 pretraining followed by level-2 pair training.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON with optional `model`, `train` and `hyperparams` sections.
        #[arg(long)]
        config: PathBuf,
        /// Start from this model instead of a fresh one.
        #[arg(long)]
        init_model: Option<PathBuf>,
        #[arg(long)]
        out_model: PathBuf,
        /// Level-2 loss curve; the level-1 curve goes next to it with a
        /// `.level1` suffix.
        #[arg(long)]
        history: PathBuf,
    },
    /// Run a self-verification suite.
    Check {
        #[arg(long, value_enum)]
        suite: SuiteArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Branch {
    Same,
    Different,
}

impl From<Branch> for PairLabel {
    fn from(b: Branch) -> Self {
        match b {
            Branch::Same => PairLabel::Same,
            Branch::Different => PairLabel::Different,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Oracle,
    Gradients,
    Invariants,
    All,
}

#[derive(Args)]
struct HyperArgs {
    #[arg(long, default_value_t = 0.01, allow_negative_numbers = true)]
    mu1: f64,
    #[arg(long, default_value_t = 0.001, allow_negative_numbers = true)]
    mu2: f64,
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    lambda1: f64,
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    lambda2: f64,
    #[arg(long, default_value_t = 2.0, allow_negative_numbers = true)]
    margin: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    rho: f64,
    /// Constraint-residual tolerance.
    #[arg(long, default_value_t = 1e-8, allow_negative_numbers = true)]
    tol: f64,
    /// Max-norm iterate-change tolerance.
    #[arg(long, default_value_t = 1e-11, allow_negative_numbers = true)]
    tol_iterate: f64,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
}

impl HyperArgs {
    fn to_hyperparams(&self) -> Hyperparams {
        Hyperparams {
            mu1: self.mu1,
            mu2: self.mu2,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            margin: self.margin,
            rho: self.rho,
            tol_constraint: self.tol,
            tol_iterate: self.tol_iterate,
            max_iters: self.max_iters,
        }
    }
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(h)?, parse(w)?))
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    model: ModelSpec,
    train: TrainConfig,
    hyperparams: Hyperparams,
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSpec {
    grid_height: usize,
    grid_width: usize,
    encoder_dim: Option<usize>,
    attention: bool,
    seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            grid_height: 4,
            grid_width: 4,
            encoder_dim: None,
            attention: true,
            seed: 0,
        }
    }
}

fn build_model(data: &Dataset, spec: &ModelSpec) -> dcscr::Result<Model> {
    let classes = data.class_names();
    let mut cfg = ModelConfig::new(data.dim, classes.len());
    if let Some(enc) = spec.encoder_dim {
        cfg.encoder_dim = enc;
    }
    cfg = cfg
        .with_grid(spec.grid_height, spec.grid_width)
        .with_seed(spec.seed);
    cfg.attention = spec.attention;
    Model::with_classes(cfg, classes)
}

fn create(path: &Path) -> dcscr::Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn level1_path(history: &Path) -> PathBuf {
    let stem = history
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match history.extension() {
        Some(ext) => format!("{stem}.level1.{}", ext.to_string_lossy()),
        None => format!("{stem}.level1"),
    };
    history.with_file_name(name)
}

fn write_history(h: &TrainHistory, path: &Path) -> dcscr::Result<()> {
    let mut w = create(path)?;
    h.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn optional_model(path: Option<&Path>) -> dcscr::Result<Option<Model>> {
    path.map(load_model).transpose()
}

enum Outcome {
    Done,
    ChecksFailed,
}

fn run(cli: Cli) -> dcscr::Result<Outcome> {
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    match cli.command {
        Command::GenSynth {
            classes,
            sets,
            frames,
            dim,
            separation,
            noise,
            seed,
            out,
        } => {
            let data = gen_synthetic(&SynthConfig {
                classes,
                sets_per_class: sets,
                frames_per_set: frames,
                dim,
                separation,
                noise,
                seed,
            })?;
            save_dataset(&data, &out)?;
        }
        Command::InitModel {
            data,
            grid,
            encoder_dim,
            no_attention,
            seed,
            out,
        } => {
            let data = load_dataset(&data)?;
            let spec = ModelSpec {
                grid_height: grid.0,
                grid_width: grid.1,
                encoder_dim,
                attention: !no_attention,
                seed,
            };
            save_model(&build_model(&data, &spec)?, &out)?;
        }
        Command::Split {
            data,
            gallery,
            probe,
        } => {
            let (g, p) = load_dataset(&data)?.split_gallery_probe();
            save_dataset(&g, &gallery)?;
            save_dataset(&p, &probe)?;
        }
        Command::MakePairs { data, out } => {
            save_pairs(&PairsFile::all_pairs(&load_dataset(&data)?), &out)?;
        }
        Command::SolvePair {
            set_a,
            set_b,
            diff,
            hyper,
            out,
            ..
        } => {
            let h = hyper.to_hyperparams();
            let a = load_set(&set_a)?;
            let b = load_set(&set_b)?;
            let label = if diff {
                PairLabel::Different
            } else {
                PairLabel::Same
            };
            let sol = solve_pair(&a.frame_matrix()?, &b.frame_matrix()?, label, &h)?;
            let value = serde_json::json!({
                "alpha": sol.alpha,
                "beta": sol.beta,
                "distance": sol.distance,
                "iterations": sol.iterations,
                "converged": sol.converged,
            });
            let mut w = create(&out)?;
            serde_json::to_writer_pretty(&mut w, &value)?;
            writeln!(w)?;
            w.flush()?;
            if !sol.converged {
                log::warn!(
                    "solver stopped at max_iters ({}) before converging",
                    h.max_iters
                );
            }
        }
        Command::Classify {
            gallery,
            probe,
            model,
            branch,
            hyper,
            out,
        } => {
            let h = hyper.to_hyperparams();
            let model = optional_model(model.as_deref())?;
            let g = load_dataset(&gallery)?;
            let p = load_dataset(&probe)?;
            let result = classify_datasets(&g, &p, model.as_ref(), &h, branch.into(), exec)?;
            let mut w = create(&out)?;
            result.write_csv(&mut w)?;
            w.flush()?;
            log::info!(
                "accuracy {}/{} = {}",
                result.correct,
                result.total,
                result.accuracy
            );
        }
        Command::VerifyPairs {
            pairs,
            model,
            thresholds,
            branch,
            hyper,
            out,
        } => {
            let h = hyper.to_hyperparams();
            let model = optional_model(model.as_deref())?;
            let pairs = load_pairs(&pairs)?;
            let result =
                verify_pairs_file(&pairs, model.as_ref(), &h, &thresholds, branch.into(), exec)?;
            let mut w = create(&out)?;
            result.write_csv(&mut w)?;
            w.flush()?;
            log::info!("auc {}", result.auc);
        }
        Command::Train {
            data,
            config,
            init_model,
            out_model,
            history,
        } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| Error::Io(format!("{}: {e}", config.display())))?;
            let cfg: TrainFile = serde_json::from_str(&text)?;
            cfg.train.validate()?;
            cfg.hyperparams.validate()?;
            let data = load_dataset(&data)?;
            let model = match init_model {
                Some(path) => load_model(&path)?,
                None => build_model(&data, &cfg.model)?,
            };
            let (pretrained, h1) = pretrain_level1(&data, &model, &cfg.train, exec)?;
            let (trained, h2) =
                train_level2(&data, &pretrained, &cfg.train, &cfg.hyperparams, exec)?;
            save_model(&trained, &out_model)?;
            write_history(&h2, &history)?;
            write_history(&h1, &level1_path(&history))?;
            if let (Some(a), Some(b)) = (h2.first_loss(), h2.last_loss()) {
                log::info!("contrastive loss {a} -> {b}");
            }
        }
        Command::Check { suite } => {
            let suites: &[Suite] = match suite {
                SuiteArg::Oracle => &[Suite::Oracle],
                SuiteArg::Gradients => &[Suite::Gradients],
                SuiteArg::Invariants => &[Suite::Invariants],
                SuiteArg::All => &[Suite::Oracle, Suite::Gradients, Suite::Invariants],
            };
            let mut ok = true;
            for &s in suites {
                for o in run_suite(s, exec) {
                    println!("{o}");
                    ok &= o.passed;
                }
            }
            if !ok {
                return Ok(Outcome::ChecksFailed);
            }
        }
    }
    Ok(Outcome::Done)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

//! `kafgru` command-line tool.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kafgru::data::DatasetVariant;
use kafgru::harness::{
    evaluate_checkpoint, export_gamma_histogram, export_gate_shapes, measure_overhead, run_ablation, train_on,
    GateName, Grid, RunConfig, ShapeSource, SplitName, Splits,
};
use kafgru::head::checkpoint::load_checkpoint;
use kafgru::kafgate::GateVariant;
use kafgru::{Error, Result};

#[derive(Parser)]
#[command(name = "kafgru", version, about = "Train and inspect GRUs with kernel-activation gates on sequential MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model with early stopping.
    Train(RunArgs),
    /// Accuracy of a saved checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train all four gate variants for each seed and summarise.
    Ablate {
        /// Comma-separated seeds; each sets both weight and shuffle seed.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Reuse finished runs found in the output directory.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Tabulate gate shapes over a grid for plotting.
    ExportShapes {
        #[arg(long, value_enum, default_value_t = ShapeArg::Random)]
        source: ShapeArg,
        /// Required with `--source checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = GateArg::Reset)]
        gate: GateArg,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,6,7,8,9")]
        units: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.5,0.1")]
        gammas: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = -4.0, allow_negative_numbers = true)]
        lo: f64,
        #[arg(long, default_value_t = 4.0, allow_negative_numbers = true)]
        hi: f64,
        #[arg(long, default_value_t = 1000)]
        points: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-unit bandwidths of a trained gate plus a histogram.
    ExportGammas {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = GateArg::Reset)]
        gate: GateArg,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time optimizer steps of the KAF-gated and the standard model.
    Overhead {
        #[arg(long, default_value_t = 100)]
        hidden: usize,
        #[arg(long, default_value_t = 10)]
        dict_size: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 28)]
        steps: usize,
        #[arg(long, default_value_t = 28)]
        features: usize,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapeArg {
    Random,
    Identity,
    Checkpoint,
}

#[derive(Clone, Copy, ValueEnum)]
enum GateArg {
    Update,
    Reset,
}

impl From<GateArg> for GateName {
    fn from(g: GateArg) -> Self {
        match g {
            GateArg::Update => GateName::Update,
            GateArg::Reset => GateName::Reset,
        }
    }
}

/// Run settings. Unset flags fall back to `--config`, then to the built-in defaults.
#[derive(Args, Clone, Default)]
struct RunArgs {
    /// JSON file with any subset of the run settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// r-mnist, p-mnist or pp-mnist.
    #[arg(long)]
    dataset: Option<String>,
    /// standard, kaf, kaf-rand, kaf-nores or kaf-nores-rand.
    #[arg(long)]
    gate: Option<String>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    dict_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    dict_lo: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    dict_hi: Option<f64>,
    #[arg(long)]
    ridge_epsilon: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    patience: Option<u64>,
    #[arg(long)]
    max_iterations: Option<u64>,
    #[arg(long)]
    val_count: Option<usize>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    val_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(long)]
    eval_batch_size: Option<usize>,
    /// Sets both the weight and the shuffle seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    weight_seed: Option<u64>,
    #[arg(long)]
    shuffle_seed: Option<u64>,
    #[arg(long)]
    permutation_seed: Option<u64>,
    /// Directory with the MNIST IDX files (default: $KAFGRU_MNIST_DIR or data/mnist).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.dataset {
            c.dataset = DatasetVariant::parse(d).ok_or_else(|| Error::Usage(format!("unknown dataset `{d}`")))?;
        }
        if let Some(g) = &self.gate {
            c.variant = GateVariant::parse(g).ok_or_else(|| Error::Usage(format!("unknown gate `{g}`")))?;
        }
        macro_rules! set {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$field = v; })*
            };
        }
        set!(
            hidden => hidden_size,
            dict_size => dict_size,
            dict_lo => dict_lo,
            dict_hi => dict_hi,
            ridge_epsilon => ridge_epsilon,
            batch_size => batch_size,
            clip_norm => clip_norm,
            eval_every => eval_every,
            patience => patience,
            val_count => val_count,
            eval_batch_size => eval_batch_size,
            weight_seed => weight_seed,
            shuffle_seed => shuffle_seed,
            permutation_seed => permutation_seed,
            data_dir => data_dir,
            out => out_dir,
        );
        if let Some(lr) = self.lr {
            c.adam.lr = lr;
        }
        if let Some(s) = self.seed {
            c.weight_seed = s;
            c.shuffle_seed = s;
        }
        if self.max_iterations.is_some() {
            c.max_iterations = self.max_iterations;
        }
        if self.train_limit.is_some() {
            c.train_limit = self.train_limit;
        }
        if self.val_limit.is_some() {
            c.val_limit = self.val_limit;
        }
        if self.test_limit.is_some() {
            c.test_limit = self.test_limit;
        }
        c.verbose = !self.quiet;
        c.validate()?;
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let s = train_on(&cfg, &Splits::load(&cfg)?)?;
            println!(
                "{} on {}: best val {:.4} at iteration {}, test {:.4}, {:.2} ms/iteration",
                s.model,
                cfg.dataset.name(),
                s.best_val_accuracy,
                s.best_iteration,
                s.test_accuracy,
                1e3 * s.mean_iteration_seconds
            );
            println!("artifacts in {}", cfg.out_dir.display());
        }
        Command::Eval { checkpoint, split, run } => {
            let ck = load_checkpoint(&checkpoint)?;
            let mut cfg = run.resolve()?;
            if run.hidden.is_none() && run.config.is_none() {
                cfg.hidden_size = ck.model.config.hidden_size;
            }
            if run.gate.is_none() && run.config.is_none() {
                cfg.variant = ck.model.config.variant;
            }
            let splits = Splits::load(&cfg)?;
            let split = match split {
                SplitArg::Train => SplitName::Train,
                SplitArg::Val => SplitName::Val,
                SplitArg::Test => SplitName::Test,
            };
            println!("{:.6}", evaluate_checkpoint(&ck, &cfg, &splits, split)?);
        }
        Command::Ablate { seeds, resume, run } => {
            let mut cfg = run.resolve()?;
            if run.out.is_none() {
                cfg.out_dir = PathBuf::from(format!("runs/ablation-{}", cfg.dataset.name()));
            }
            let summary = run_ablation(&cfg, &seeds, &Splits::load(&cfg)?, resume)?;
            for arm in &summary.arms {
                println!(
                    "{:<15} {:.4} ± {:.4}  ({} runs)",
                    arm.label,
                    arm.mean_test_accuracy,
                    arm.std_test_accuracy,
                    arm.runs.len()
                );
            }
        }
        Command::ExportShapes { source, checkpoint, gate, units, gammas, samples, seed, lo, hi, points, out } => {
            let source = match source {
                ShapeArg::Random => match ShapeSource::random_default(seed) {
                    ShapeSource::Random { alpha_std, dict_size, dict_lo, dict_hi, .. } => {
                        ShapeSource::Random { gammas, samples, alpha_std, seed, dict_size, dict_lo, dict_hi }
                    }
                    other => other,
                },
                ShapeArg::Identity => ShapeSource::identity_default(),
                ShapeArg::Checkpoint => {
                    let path = checkpoint.ok_or_else(|| Error::Usage("--source checkpoint needs --checkpoint".into()))?;
                    let model = load_checkpoint(&path)?.model;
                    let units = units.into_iter().filter(|u| *u < model.config.hidden_size).collect();
                    ShapeSource::Model { model: Box::new(model), gate: gate.into(), units }
                }
            };
            let export = export_gate_shapes(&source, &Grid { lo, hi, points }, Some(&out))?;
            println!("{} curves, {} rows -> {}", export.series().len(), export.rows.len(), out.display());
        }
        Command::ExportGammas { checkpoint, gate, bins, out } => {
            let model = load_checkpoint(&checkpoint)?.model;
            let h = export_gamma_histogram(&model, gate.into(), bins, Some(&out))?;
            println!("{} bandwidths in {} bins -> {}", h.values.len(), h.bins.len(), out.display());
        }
        Command::Overhead { hidden, dict_size, batch_size, steps, features, iterations, out } => {
            let base = RunConfig { hidden_size: hidden, dict_size, ..RunConfig::default() };
            let mut model = base.model_config(1, features);
            model.input_size = features;
            let r = measure_overhead(&model, batch_size, steps, iterations, 0)?;
            println!(
                "standard {:.3} ms  kaf {:.3} ms  ratio {:.3}",
                1e3 * r.standard_seconds,
                1e3 * r.kaf_seconds,
                r.ratio
            );
            if let Some(path) = out {
                r.write(&path)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

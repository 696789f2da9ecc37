use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{RunConfig, Splits};
use crate::data::{make_sequences, batch_iterator, SequenceBatch, SequenceView};
use crate::head::checkpoint::{save_checkpoint, Checkpoint};
use crate::kafgate::GateVariant;
use crate::model::{argmax, GradientSet, Model, ModelConfig};
use crate::numerics::Rng;
use crate::recurrent::Workspace;
use crate::optim::{clip_global_norm, AdamConfig, AdamState, EarlyStopState, StopDecision, TensorSet};
use crate::{Error, Result, BUILD_ID};

pub const METRICS_HEADER: [&str; 5] = ["iteration", "epoch", "train_loss", "val_accuracy", "wall_seconds"];
pub const SUMMARY_SCHEMA_VERSION: u32 = 1;
const METRICS_FILE: &str = "metrics.csv";
const SUMMARY_FILE: &str = "summary.json";
const CHECKPOINT_FILE: &str = "best.ckpt";
const DIAGNOSTIC_FILE: &str = "diagnostic.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub weight: u64,
    pub shuffle: u64,
    pub permutation: u64,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub build_id: String,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub notes: Vec<String>,
    pub model: String,
    pub parameter_count: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub iterations: u64,
    pub last_epoch: usize,
    /// `early-stop` or `max-iterations`.
    pub stop_reason: String,
    pub best_iteration: u64,
    pub best_val_accuracy: f64,
    pub test_accuracy: f64,
    /// Loss of the very first batch, before any update.
    pub initial_train_loss: f64,
    /// Mean batch loss over the last evaluation window.
    pub final_train_loss: f64,
    pub min_window_train_loss: f64,
    /// Mean wall time of one optimizer step, evaluation excluded.
    pub mean_iteration_seconds: f64,
    pub total_wall_seconds: f64,
    pub metrics_file: String,
    pub checkpoint_file: String,
}

impl RunSummary {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Fraction of argmax-correct predictions with Eval-mode batch norm.
pub fn evaluate(model: &Model, view: &SequenceView<'_>, batch_size: usize) -> Result<f64> {
    if view.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty split".into()));
    }
    let indices: Vec<usize> = (0..view.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = view.batch(chunk);
        let probs = model.predict(&batch)?;
        correct += (0..probs.rows()).filter(|&r| argmax(probs.row(r)) == batch.labels[r]).count();
    }
    Ok(correct as f64 / view.len() as f64)
}

/// Accuracy of a stored model on one split of `cfg`'s dataset.
pub fn evaluate_checkpoint(ck: &Checkpoint, cfg: &RunConfig, splits: &Splits, split: SplitName) -> Result<f64> {
    let (rows, cols) = splits.image_shape();
    ck.check_shape(&cfg.model_config(rows, cols).shape())?;
    let set = match split {
        SplitName::Train => &splits.train,
        SplitName::Val => &splits.val,
        SplitName::Test => &splits.test,
    };
    let view = make_sequences(set, cfg.dataset, splits.permutation.as_ref())?;
    evaluate(&ck.model, &view, cfg.eval_batch_size)
}

/// Loads the data named by `cfg` and trains on it.
pub fn train(cfg: &RunConfig) -> Result<RunSummary> {
    let splits = Splits::load(cfg)?;
    train_on(cfg, &splits)
}

fn tensor_norms(set: &impl TensorSet) -> BTreeMap<String, f64> {
    set.tensors()
        .into_iter()
        .map(|(n, t)| (n.to_string(), t.iter().map(|v| v * v).sum::<f64>().sqrt()))
        .collect()
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    iteration: u64,
    epoch: usize,
    error: String,
    loss: Option<f64>,
    grad_norms: Option<BTreeMap<String, f64>>,
    previous_grad_norms: &'a BTreeMap<String, f64>,
}

/// The error plus whatever loss and gradients were computed before it.
type StepFailure = (Error, Option<f64>, Option<Box<GradientSet>>);

fn step(
    model: &mut Model,
    adam: &mut AdamState,
    batch: &SequenceBatch,
    clip_norm: f64,
    ws: &mut Workspace,
) -> std::result::Result<(f64, GradientSet), StepFailure> {
    let (loss, mut grads) = model.loss_and_gradients_in(batch, ws).map_err(|e| (e, None, None))?;
    if let Err(e) = clip_global_norm(&mut grads, clip_norm) {
        return Err((e, Some(loss), Some(Box::new(grads))));
    }
    adam.step(model, &grads).map_err(|e| (e, Some(loss), None))?;
    model.project_gammas();
    Ok((loss, grads))
}

/// Runs the full training protocol on preloaded data and writes
/// `metrics.csv`, `best.ckpt` and `summary.json` to `cfg.out_dir`.
pub fn train_on(cfg: &RunConfig, splits: &Splits) -> Result<RunSummary> {
    cfg.validate()?;
    if splits.val.is_empty() {
        return Err(Error::Usage("training needs a non-empty validation split".into()));
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let config_echo = serde_json::to_string(cfg)?;
    let (rows, cols) = splits.image_shape();
    let perm = splits.permutation.as_ref();
    let train_view = make_sequences(&splits.train, cfg.dataset, perm)?;
    let val_view = make_sequences(&splits.val, cfg.dataset, perm)?;
    let test_view = make_sequences(&splits.test, cfg.dataset, perm)?;

    let mut model = Model::init(cfg.model_config(rows, cols), &mut Rng::new(cfg.weight_seed))?;
    let mut adam = AdamState::new(&model, cfg.adam);
    let mut stopper = EarlyStopState::new(cfg.patience, cfg.eval_every);
    let mut batches = batch_iterator(train_view.len(), cfg.batch_size, &Rng::new(cfg.shuffle_seed))?;
    if cfg.verbose && splits.train.len() % cfg.batch_size == 1 {
        eprintln!("dropping a final batch of 1 every epoch");
    }

    let mut metrics = csv::Writer::from_path(cfg.out_dir.join(METRICS_FILE))?;
    metrics.write_record(METRICS_HEADER)?;
    metrics.flush()?;

    let start = Instant::now();
    let mut step_seconds = 0.0;
    let mut window = (0.0, 0usize);
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut min_window_loss = f64::INFINITY;
    let mut previous_norms = BTreeMap::new();
    let mut best: Option<Model> = None;
    let mut iteration = 0u64;
    let mut ws = Workspace::default();
    let stop_reason = loop {
        let idx = batches.next().expect("batch stream is infinite");
        let epoch = batches.epoch();
        let batch = train_view.batch(&idx);
        iteration += 1;

        let t0 = Instant::now();
        let (loss, grads) = match step(&mut model, &mut adam, &batch, cfg.clip_norm, &mut ws) {
            Ok(v) => v,
            Err((e, loss, grads)) => {
                let diag = Diagnostic {
                    iteration,
                    epoch,
                    error: e.to_string(),
                    loss,
                    grad_norms: grads.as_deref().map(tensor_norms),
                    previous_grad_norms: &previous_norms,
                };
                fs::write(cfg.out_dir.join(DIAGNOSTIC_FILE), serde_json::to_string_pretty(&diag)?)?;
                return Err(match e {
                    Error::Numerical(msg) => Error::Numerical(format!("iteration {iteration}: {msg}")),
                    other => other,
                });
            }
        };
        step_seconds += t0.elapsed().as_secs_f64();
        previous_norms = tensor_norms(&grads);
        if iteration == 1 {
            initial_loss = loss;
        }
        window.0 += loss;
        window.1 += 1;

        if iteration.is_multiple_of(cfg.eval_every) {
            let acc = evaluate(&model, &val_view, cfg.eval_batch_size)?;
            let train_loss = window.0 / window.1 as f64;
            window = (0.0, 0);
            final_loss = train_loss;
            min_window_loss = min_window_loss.min(train_loss);
            let wall = start.elapsed().as_secs_f64();
            metrics.write_record([
                iteration.to_string(),
                epoch.to_string(),
                train_loss.to_string(),
                acc.to_string(),
                format!("{wall:.3}"),
            ])?;
            metrics.flush()?;
            let decision = stopper.update(iteration, acc);
            if stopper.improved {
                let ck = Checkpoint::new(model.clone(), config_echo.clone(), cfg.weight_seed, iteration);
                save_checkpoint(&cfg.out_dir.join(CHECKPOINT_FILE), &ck)?;
                best = Some(model.clone());
            }
            if cfg.verbose {
                eprintln!(
                    "iter {iteration:>6} epoch {epoch:>3} loss {train_loss:.4} val {acc:.4} best {:.4}@{} {wall:.0}s",
                    stopper.best_accuracy, stopper.best_iteration
                );
            }
            if decision == StopDecision::Stop {
                break "early-stop";
            }
        }
        if cfg.max_iterations.is_some_and(|m| iteration >= m) {
            break "max-iterations";
        }
    };

    let best_model = match best {
        Some(m) => m,
        None => {
            // No evaluation ever improved on zero accuracy; report the last iterate.
            let ck = Checkpoint::new(model.clone(), config_echo.clone(), cfg.weight_seed, iteration);
            save_checkpoint(&cfg.out_dir.join(CHECKPOINT_FILE), &ck)?;
            model.clone()
        }
    };
    let test_accuracy = if test_view.is_empty() {
        f64::NAN
    } else {
        evaluate(&best_model, &test_view, cfg.eval_batch_size)?
    };

    let summary = RunSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        build_id: BUILD_ID.to_string(),
        config: cfg.clone(),
        seeds: Seeds { weight: cfg.weight_seed, shuffle: cfg.shuffle_seed, permutation: cfg.permutation_seed },
        notes: vec!["candidate state uses recurrent weights V_h on (r * h_prev)".into()],
        model: model.variant().label().to_string(),
        parameter_count: model.parameter_count(),
        train_size: train_view.len(),
        val_size: val_view.len(),
        test_size: test_view.len(),
        iterations: iteration,
        last_epoch: batches.epoch(),
        stop_reason: stop_reason.to_string(),
        best_iteration: stopper.best_iteration,
        best_val_accuracy: stopper.best_accuracy,
        test_accuracy,
        initial_train_loss: initial_loss,
        final_train_loss: final_loss,
        min_window_train_loss: min_window_loss,
        mean_iteration_seconds: step_seconds / iteration as f64,
        total_wall_seconds: start.elapsed().as_secs_f64(),
        metrics_file: METRICS_FILE.into(),
        checkpoint_file: CHECKPOINT_FILE.into(),
    };
    let mut f = fs::File::create(cfg.out_dir.join(SUMMARY_FILE))?;
    f.write_all(serde_json::to_string_pretty(&summary)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(summary)
}

/// Wall seconds of each of `iterations` optimizer steps, cycling over `batches`.
pub fn time_iterations(
    model: &mut Model,
    batches: &[SequenceBatch],
    iterations: usize,
    adam: AdamConfig,
    clip_norm: f64,
) -> Result<Vec<f64>> {
    let mut state = AdamState::new(model, adam);
    let mut times = Vec::with_capacity(iterations);
    let mut ws = Workspace::default();
    for i in 0..iterations {
        let t0 = Instant::now();
        step(model, &mut state, &batches[i % batches.len()], clip_norm, &mut ws).map_err(|(e, ..)| e)?;
        times.push(t0.elapsed().as_secs_f64());
    }
    Ok(times)
}

/// Per-iteration cost of the KAF-gated model relative to the standard one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub hidden_size: usize,
    pub dict_size: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub features: usize,
    pub iterations: usize,
    pub standard_seconds: f64,
    pub kaf_seconds: f64,
    pub ratio: f64,
}

impl OverheadReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times both models on identical synthetic batches. Rounds alternate
/// between the two so slow drift in machine load hits both equally.
pub fn measure_overhead(
    base: &ModelConfig,
    batch_size: usize,
    steps: usize,
    iterations: usize,
    seed: u64,
) -> Result<OverheadReport> {
    let mut rng = Rng::new(seed);
    let batches: Vec<SequenceBatch> = (0..4)
        .map(|_| {
            let inputs = (0..steps * batch_size * base.input_size).map(|_| rng.unit()).collect();
            let labels = (0..batch_size).map(|_| rng.below(base.classes)).collect();
            SequenceBatch::from_parts(steps, batch_size, base.input_size, inputs, labels)
        })
        .collect::<Result<_>>()?;
    let mut standard = Model::init(ModelConfig { variant: GateVariant::STANDARD, ..base.clone() }, &mut Rng::new(seed))?;
    let mut kaf = Model::init(ModelConfig { variant: GateVariant::KAF, ..base.clone() }, &mut Rng::new(seed))?;
    let adam = AdamConfig::default();
    time_iterations(&mut standard, &batches, 2, adam, 1.0)?;
    time_iterations(&mut kaf, &batches, 2, adam, 1.0)?;

    let rounds = 5;
    let per_round = iterations.div_ceil(rounds).max(1);
    let (mut ts, mut tk) = (Vec::new(), Vec::new());
    for _ in 0..rounds {
        ts.extend(time_iterations(&mut standard, &batches, per_round, adam, 1.0)?);
        tk.extend(time_iterations(&mut kaf, &batches, per_round, adam, 1.0)?);
    }
    let standard_seconds = median(ts);
    let kaf_seconds = median(tk);
    Ok(OverheadReport {
        hidden_size: base.hidden_size,
        dict_size: base.dict_size,
        batch_size,
        steps,
        features: base.input_size,
        iterations: per_round * rounds,
        standard_seconds,
        kaf_seconds,
        ratio: kaf_seconds / standard_seconds,
    })
}

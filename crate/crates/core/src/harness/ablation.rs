use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{train_on, RunSummary};
use super::{RunConfig, Splits};
use crate::kafgate::GateVariant;
use crate::Result;

/// The four compared models, in report order.
pub const ABLATION_ARMS: [GateVariant; 4] =
    [GateVariant::STANDARD, GateVariant::KAF, GateVariant::KAF_RANDOM, GateVariant::NO_RESIDUAL];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub seed: u64,
    pub test_accuracy: f64,
    pub best_val_accuracy: f64,
    pub best_iteration: u64,
    pub iterations: u64,
    pub mean_iteration_seconds: f64,
    pub run_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub label: String,
    pub variant: GateVariant,
    pub runs: Vec<AblationRun>,
    pub mean_test_accuracy: f64,
    /// Sample standard deviation; zero for a single run.
    pub std_test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub dataset: String,
    pub permutation_seed: u64,
    pub seeds: Vec<u64>,
    pub arms: Vec<AblationArm>,
}

impl AblationSummary {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn arm(&self, variant: GateVariant) -> Option<&AblationArm> {
        self.arms.iter().find(|a| a.variant == variant)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains every arm once per seed on the same data split and permutation.
///
/// Seed `s` sets both the weight and the shuffle seed of its run. Runs live
/// in `<out_dir>/<arm>/seed-<s>`; a run whose `summary.json` already exists
/// is reused when `resume` is set.
pub fn run_ablation(base: &RunConfig, seeds: &[u64], splits: &Splits, resume: bool) -> Result<AblationSummary> {
    let mut arms = Vec::new();
    for variant in ABLATION_ARMS {
        let mut runs = Vec::new();
        for &seed in seeds {
            let run_dir = base.out_dir.join(variant.label()).join(format!("seed-{seed}"));
            let cfg =
                RunConfig { variant, weight_seed: seed, shuffle_seed: seed, out_dir: run_dir.clone(), ..base.clone() };
            let summary_path = run_dir.join("summary.json");
            let summary = match RunSummary::read(&summary_path) {
                Ok(s) if resume && s.config == cfg => s,
                _ => {
                    if base.verbose {
                        eprintln!("== {} seed {seed}", variant.label());
                    }
                    train_on(&cfg, splits)?
                }
            };
            runs.push(AblationRun {
                seed,
                test_accuracy: summary.test_accuracy,
                best_val_accuracy: summary.best_val_accuracy,
                best_iteration: summary.best_iteration,
                iterations: summary.iterations,
                mean_iteration_seconds: summary.mean_iteration_seconds,
                run_dir: format!("{}/seed-{seed}", variant.label()),
            });
        }
        let accs: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
        let (mean, std) = mean_std(&accs);
        arms.push(AblationArm {
            label: variant.label().to_string(),
            variant,
            runs,
            mean_test_accuracy: mean,
            std_test_accuracy: std,
        });
    }
    let summary = AblationSummary {
        dataset: base.dataset.name().to_string(),
        permutation_seed: base.permutation_seed,
        seeds: seeds.to_vec(),
        arms,
    };
    fs::create_dir_all(&base.out_dir)?;
    fs::write(base.out_dir.join("ablation.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

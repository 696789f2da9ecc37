use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::kafgate::{identity_init, make_dictionary, rule_of_thumb_gamma, GateKind, KafGateParams};
use crate::model::Model;
use crate::numerics::{sigmoid, Matrix, Rng, Vector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateName {
    Update,
    Reset,
}

impl GateName {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "update" => Some(GateName::Update),
            "reset" => Some(GateName::Reset),
            _ => None,
        }
    }

    fn params(self, model: &Model) -> &KafGateParams {
        match self {
            GateName::Update => &model.gru.update_gate,
            GateName::Reset => &model.gru.reset_gate,
        }
    }
}

/// Evenly spaced evaluation points, both ends included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Self { lo: -4.0, hi: 4.0, points: 1000 }
    }
}

impl Grid {
    fn values(&self) -> Result<Vec<f64>> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) || self.points < 2 {
            return Err(Error::Usage(format!("bad grid [{}, {}] with {} points", self.lo, self.hi, self.points)));
        }
        let step = (self.hi - self.lo) / (self.points - 1) as f64;
        Ok((0..self.points).map(|i| self.lo + step * i as f64).collect())
    }
}

/// Where the exported gate shapes come from.
#[derive(Debug, Clone)]
pub enum ShapeSource {
    /// `samples` random coefficient vectors drawn from N(0, alpha_std²) for
    /// each fixed bandwidth in `gammas`.
    Random { gammas: Vec<f64>, samples: usize, alpha_std: f64, seed: u64, dict_size: usize, dict_lo: f64, dict_hi: f64 },
    /// Ridge-fitted coefficients, so the gate starts close to a sigmoid.
    Identity { dict_size: usize, dict_lo: f64, dict_hi: f64, ridge_epsilon: f64 },
    /// Units of one gate of a trained model.
    Model { model: Box<Model>, gate: GateName, units: Vec<usize> },
}

impl ShapeSource {
    /// The three bandwidths and ten samples of the classic random-shape plot.
    pub fn random_default(seed: u64) -> Self {
        ShapeSource::Random {
            gammas: vec![1.0, 0.5, 0.1],
            samples: 10,
            alpha_std: 1.0,
            seed,
            dict_size: 10,
            dict_lo: -4.0,
            dict_hi: 4.0,
        }
    }

    pub fn identity_default() -> Self {
        ShapeSource::Identity { dict_size: 10, dict_lo: -4.0, dict_hi: 4.0, ridge_epsilon: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeRow {
    pub series: String,
    pub gamma: f64,
    pub s: f64,
    pub kaf: f64,
    pub sigma_kaf: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeExport {
    pub rows: Vec<ShapeRow>,
    /// `(series, gamma, alphas)` for every exported curve.
    pub coefficients: Vec<(String, f64, Vec<f64>)>,
}

impl ShapeExport {
    pub fn series(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if out.last() != Some(&r.series.as_str()) {
                out.push(&r.series);
            }
        }
        out
    }
}

fn curves(gate: &KafGateParams, units: &[usize], labels: &[String], grid: &[f64], out: &mut ShapeExport) {
    for (&unit, label) in units.iter().zip(labels) {
        let gamma = gate.gammas[unit];
        for &s in grid {
            out.rows.push(ShapeRow {
                series: label.clone(),
                gamma,
                s,
                kaf: gate.kaf_eval(unit, s),
                sigma_kaf: gate.gate_eval(GateKind::KafResidual, unit, s),
                sigma: sigmoid(s),
            });
        }
        out.coefficients.push((label.clone(), gamma, gate.alphas.row(unit).to_vec()));
    }
}

/// Writes the gate shapes to `path` (columns `series gamma s kaf sigma_kaf sigma`)
/// and the coefficients behind each series to `<stem>.coefficients.tsv` next to it.
pub fn export_gate_shapes(source: &ShapeSource, grid: &Grid, path: Option<&Path>) -> Result<ShapeExport> {
    let xs = grid.values()?;
    let mut out = ShapeExport { rows: Vec::new(), coefficients: Vec::new() };
    match source {
        ShapeSource::Random { gammas, samples, alpha_std, seed, dict_size, dict_lo, dict_hi } => {
            let dict = Arc::new(make_dictionary(*dict_size, *dict_lo, *dict_hi)?);
            let mut rng = Rng::new(*seed);
            for &gamma in gammas {
                let alphas = Matrix::from_fn(*samples, dict.len(), |_, _| rng.normal(0.0, *alpha_std));
                let gate = KafGateParams::new(dict.clone(), alphas, Vector::filled(*samples, gamma))?;
                let labels: Vec<String> = (0..*samples).map(|k| format!("gamma={gamma}/sample={k}")).collect();
                curves(&gate, &(0..*samples).collect::<Vec<_>>(), &labels, &xs, &mut out);
            }
        }
        ShapeSource::Identity { dict_size, dict_lo, dict_hi, ridge_epsilon } => {
            let dict = Arc::new(make_dictionary(*dict_size, *dict_lo, *dict_hi)?);
            rule_of_thumb_gamma(dict.delta())?;
            let gate = identity_init(dict, 1, *ridge_epsilon)?;
            curves(&gate, &[0], &["identity".to_string()], &xs, &mut out);
        }
        ShapeSource::Model { model, gate, units } => {
            if !model.variant().kind.uses_kaf() {
                return Err(Error::UnsupportedVariant(format!("{} gates have no kernel expansion", model.variant().label())));
            }
            let params = gate.params(model);
            if let Some(u) = units.iter().find(|u| **u >= params.units()) {
                return Err(Error::Usage(format!("unit {u} out of range for {} units", params.units())));
            }
            let labels: Vec<String> = units.iter().map(|u| format!("unit={u}")).collect();
            curves(params, units, &labels, &xs, &mut out);
        }
    }

    if let Some(path) = path {
        let mut w = tsv_writer(path)?;
        w.write_record(["series", "gamma", "s", "kaf", "sigma_kaf", "sigma"])?;
        for r in &out.rows {
            w.write_record([
                r.series.clone(),
                r.gamma.to_string(),
                r.s.to_string(),
                r.kaf.to_string(),
                r.sigma_kaf.to_string(),
                r.sigma.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = tsv_writer(&sibling(path, "coefficients"))?;
        let dict_len = out.coefficients.first().map_or(0, |c| c.2.len());
        let mut header = vec!["series".to_string(), "gamma".to_string()];
        header.extend((0..dict_len).map(|i| format!("alpha_{i}")));
        w.write_record(&header)?;
        for (series, gamma, alphas) in &out.coefficients {
            let mut rec = vec![series.clone(), gamma.to_string()];
            rec.extend(alphas.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(out)
}

/// Per-unit bandwidths of one gate plus a histogram over them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaHistogram {
    pub gate: GateName,
    pub values: Vec<f64>,
    /// `(lo, hi, count)`; a single degenerate bin when all values coincide.
    pub bins: Vec<(f64, f64, usize)>,
}

/// Writes `unit gamma` rows to `path` and `bin_lo bin_hi count` rows to
/// `<stem>.bins.tsv`.
pub fn export_gamma_histogram(model: &Model, gate: GateName, bins: usize, path: Option<&Path>) -> Result<GammaHistogram> {
    if !model.variant().kind.uses_kaf() {
        return Err(Error::UnsupportedVariant(format!(
            "{} gates have no bandwidths to export",
            model.variant().label()
        )));
    }
    if bins == 0 {
        return Err(Error::Usage("need at least one bin".into()));
    }
    let values: Vec<f64> = gate.params(model).gammas.to_vec();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let hist = if hi - lo <= 1e-12 * hi.abs().max(1.0) {
        vec![(lo, hi, values.len())]
    } else {
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for v in &values {
            let k = (((v - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        counts.into_iter().enumerate().map(|(k, c)| (lo + width * k as f64, lo + width * (k + 1) as f64, c)).collect()
    };

    if let Some(path) = path {
        let mut w = tsv_writer(path)?;
        w.write_record(["unit", "gamma"])?;
        for (u, v) in values.iter().enumerate() {
            w.write_record([u.to_string(), v.to_string()])?;
        }
        w.flush()?;
        let mut w = tsv_writer(&sibling(path, "bins"))?;
        w.write_record(["bin_lo", "bin_hi", "count"])?;
        for (a, b, c) in &hist {
            w.write_record([a.to_string(), b.to_string(), c.to_string()])?;
        }
        w.flush()?;
    }
    Ok(GammaHistogram { gate, values, bins: hist })
}

fn tsv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?)
}

/// `shapes.tsv` -> `shapes.<tag>.tsv`.
pub(crate) fn sibling(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{tag}.tsv"))
}

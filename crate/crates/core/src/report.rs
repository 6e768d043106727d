//! Aggregation of per-seed evaluation metrics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::RngState;
use crate::synthetic::{coefficient_of_variation, EvalMetrics};

/// Population summary of one metric across seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("cannot summarize an empty list".into()));
        }
        let n = values.len() as f64;
        // Sorting first makes the sums independent of input order.
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let std = if v[0] == v[v.len() - 1] { 0.0 } else { var.sqrt() };
        Ok(Self { mean, std, min: v[0], max: v[v.len() - 1] })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub runs: usize,
    pub accuracy: Summary,
    pub load_cv: Summary,
    pub entropy: Summary,
    pub collapse_rate: f64,
}

pub fn aggregate(rows: &[EvalMetrics]) -> Result<Aggregate> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no rows to aggregate".into()));
    }
    let col = |f: fn(&EvalMetrics) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    Ok(Aggregate {
        runs: rows.len(),
        accuracy: Summary::of(&col(|m| m.assignment_accuracy))?,
        load_cv: Summary::of(&col(|m| m.load_cv))?,
        entropy: Summary::of(&col(|m| m.mean_entropy))?,
        collapse_rate: rows.iter().filter(|m| m.collapsed).count() as f64 / rows.len() as f64,
    })
}

/// CV of the seed-averaged load vector.
pub fn pooled_cv(loads: &[Vec<f64>]) -> Result<f64> {
    let n = loads.first().map_or(0, Vec::len);
    if n == 0 || loads.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidArgument("load rows must be nonempty and of equal length".into()));
    }
    let mean: Vec<f64> = (0..n).map(|e| loads.iter().map(|r| r[e]).sum::<f64>() / loads.len() as f64).collect();
    Ok(coefficient_of_variation(&mean))
}

/// Standard deviation of [`pooled_cv`] over bootstrap resamples of the seeds
/// (rows of `loads`).
pub fn bootstrap_cv_stderr(loads: &[Vec<f64>], resamples: usize, rng: &mut RngState) -> Result<f64> {
    if loads.len() < 2 {
        return Err(Error::InvalidArgument(format!("bootstrap needs at least 2 seeds, got {}", loads.len())));
    }
    if resamples < 200 {
        return Err(Error::InvalidArgument(format!("need at least 200 resamples, got {resamples}")));
    }
    pooled_cv(loads)?;
    let s = loads.len();
    let stats: Vec<f64> = (0..resamples)
        .map(|_| {
            let pick: Vec<Vec<f64>> = (0..s).map(|_| loads[rng.index(s)].clone()).collect();
            pooled_cv(&pick)
        })
        .collect::<Result<_>>()?;
    Ok(Summary::of(&stats)?.std)
}

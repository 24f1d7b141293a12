//! Data mismatch, RMSE and box-plot summaries.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// `sum_l (d_o - d_sim)^2 / var_l`.
pub fn data_mismatch(d_obs: &[f64], d_sim: &[f64], obs_var: &[f64]) -> Result<f64> {
    if d_obs.len() != d_sim.len() || d_obs.len() != obs_var.len() {
        return invalid(format!(
            "mismatch needs equal lengths, got {}, {}, {}",
            d_obs.len(),
            d_sim.len(),
            obs_var.len()
        ));
    }
    Ok(mismatch_unchecked(d_obs, d_sim, obs_var))
}

#[inline]
pub(crate) fn mismatch_unchecked(d_obs: &[f64], d_sim: &[f64], obs_var: &[f64]) -> f64 {
    d_obs.iter().zip(d_sim).zip(obs_var).map(|((o, s), v)| (o - s) * (o - s) / v).sum()
}

/// `||z - z_ref|| / sqrt(len)`.
pub fn rmse(z: &[f64], z_ref: &[f64]) -> Result<f64> {
    if z.len() != z_ref.len() || z.is_empty() {
        return invalid(format!("rmse needs equal nonzero lengths, got {} and {}", z.len(), z_ref.len()));
    }
    let ss: f64 = z.iter().zip(z_ref).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / z.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Quartiles interpolate linearly between order statistics.
pub fn box_stats(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() {
        return invalid("box statistics of an empty sample");
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = p * (v.len() - 1) as f64;
        let lo = h.floor() as usize;
        let hi = h.ceil() as usize;
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    let (mean, std) = mean_std(&v);
    Ok(BoxStats { min: v[0], q1: q(0.25), median: q(0.5), q3: q(0.75), max: v[v.len() - 1], mean, std })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

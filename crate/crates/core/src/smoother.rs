//! Iterative ensemble smoother.
//!
//! Each outer step applies the Kalman-type update
//!
//! ```text
//! theta_j^a = theta_j^b + S_theta S_h^T (S_h S_h^T + gamma C_y)^{-1} (d - h(theta_j^b))
//! ```
//!
//! with `S_theta` the background anomalies and `S_h` the prediction anomalies
//! taken about the prediction of the ensemble mean. `C_y` is diagonal. The
//! inverse is applied in the subspace of a truncated SVD of
//! `C_y^{-1/2} S_h`, which is exact when no singular value is dropped.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::exec;
use crate::metrics::mismatch_unchecked;

/// Parameter ensemble, one member per column.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMatrix(DMatrix<f64>);

impl EnsembleMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.ncols() < 2 {
            return invalid(format!("ensemble needs at least 2 members, got {}", m.ncols()));
        }
        if m.nrows() == 0 {
            return invalid("ensemble members must be nonempty");
        }
        if m.iter().any(|v| !v.is_finite()) {
            return invalid("ensemble entries must be finite");
        }
        Ok(Self(m))
    }

    pub fn from_members(members: &[Vec<f64>]) -> Result<Self> {
        let n_var = members.first().map_or(0, Vec::len);
        if members.iter().any(|m| m.len() != n_var) {
            return invalid("ensemble members have different lengths");
        }
        let flat: Vec<f64> = members.iter().flatten().copied().collect();
        Self::new(DMatrix::from_vec(n_var, members.len(), flat))
    }

    pub fn n_var(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_e(&self) -> usize {
        self.0.ncols()
    }

    pub fn member(&self, j: usize) -> &[f64] {
        let n = self.0.nrows();
        &self.0.as_slice()[j * n..(j + 1) * n]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn mean(&self) -> DVector<f64> {
        self.0.column_mean()
    }

    /// Rows `start..start + len` of every member.
    pub fn rows(&self, start: usize, len: usize) -> DMatrix<f64> {
        self.0.rows(start, len).into_owned()
    }
}

/// `(theta_j - mean) / sqrt(n_e - 1)` for every member.
pub fn anomalies(ensemble: &EnsembleMatrix) -> DMatrix<f64> {
    centered_anomalies(ensemble.matrix(), &ensemble.mean())
}

fn centered_anomalies(m: &DMatrix<f64>, center: &DVector<f64>) -> DMatrix<f64> {
    let scale = 1.0 / ((m.ncols() - 1) as f64).sqrt();
    let mut a = m.clone();
    for mut col in a.column_iter_mut() {
        col -= center;
        col *= scale;
    }
    a
}

/// Rank-`r` factors `U_r diag(s_r) V_r^T`, singular values descending.
#[derive(Debug, Clone)]
pub struct Tsvd {
    pub u: DMatrix<f64>,
    pub s: Vec<f64>,
    pub v: DMatrix<f64>,
}

impl Tsvd {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (k, s) in self.s.iter().enumerate() {
            us.column_mut(k).scale_mut(*s);
        }
        us * self.v.transpose()
    }
}

/// Keeps the smallest rank whose singular values sum to at least `energy` of
/// the total, capped at `min(rows, cols)`.
pub fn tsvd(m: &DMatrix<f64>, energy: f64) -> Result<Tsvd> {
    tsvd_capped(m, energy, usize::MAX)
}

pub fn tsvd_capped(m: &DMatrix<f64>, energy: f64, max_rank: usize) -> Result<Tsvd> {
    if !(energy > 0.0 && energy <= 1.0) {
        return invalid(format!("svd energy must lie in (0, 1], got {energy}"));
    }
    let (nr, nc) = m.shape();
    let empty = || Tsvd { u: DMatrix::zeros(nr, 0), s: vec![], v: DMatrix::zeros(nc, 0) };
    if nr == 0 || nc == 0 || m.iter().all(|v| *v == 0.0) {
        return Ok(empty());
    }
    if m.iter().any(|v| !v.is_finite()) {
        return invalid("cannot decompose a matrix with non-finite entries");
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let total: f64 = svd.singular_values.iter().sum();
    if !(total > 0.0) {
        return Ok(empty());
    }
    let cap = max_rank.min(nr).min(nc);
    let mut r = 0;
    let mut cum = 0.0;
    for &k in &order {
        if r >= cap || svd.singular_values[k] <= 0.0 {
            break;
        }
        cum += svd.singular_values[k];
        r += 1;
        // relative slack so that energy = 1 keeps every nonzero value
        if cum >= energy * total * (1.0 - 1e-12) && energy < 1.0 {
            break;
        }
    }
    let keep = &order[..r];
    Ok(Tsvd {
        u: DMatrix::from_fn(nr, r, |i, k| u[(i, keep[k])]),
        s: keep.iter().map(|&k| svd.singular_values[k]).collect(),
        v: DMatrix::from_fn(nc, r, |i, k| vt[(keep[k], i)]),
    })
}

/// Precomputed pieces of one update, so that inner trials only pay for the
/// final products when `gamma` changes.
pub struct IesUpdater {
    background: DMatrix<f64>,
    /// `S_theta V_r`
    theta_basis: DMatrix<f64>,
    s: Vec<f64>,
    /// `U_r^T C_y^{-1/2} (d - h_j)`
    projected_innovation: DMatrix<f64>,
}

impl IesUpdater {
    /// `active[j] == false` freezes member `j`: it contributes no prediction
    /// anomaly and receives no increment.
    pub fn new(
        background: &EnsembleMatrix,
        predictions: &DMatrix<f64>,
        pred_of_mean: &[f64],
        obs: &[f64],
        obs_var: &[f64],
        svd_energy: f64,
        active: Option<&[bool]>,
    ) -> Result<Self> {
        let n_e = background.n_e();
        let n_d = obs.len();
        if predictions.ncols() != n_e || predictions.nrows() != n_d || pred_of_mean.len() != n_d || obs_var.len() != n_d
        {
            return invalid(format!(
                "shape mismatch: {} members, predictions {}x{}, mean prediction {}, obs {}, obs_var {}",
                n_e,
                predictions.nrows(),
                predictions.ncols(),
                pred_of_mean.len(),
                n_d,
                obs_var.len()
            ));
        }
        if let Some(a) = active {
            if a.len() != n_e {
                return invalid("activity mask length differs from ensemble size");
            }
        }
        let is_active = |j: usize| active.is_none_or(|a| a[j]);
        if obs.iter().chain(pred_of_mean).any(|v| !v.is_finite()) {
            return invalid("observations and mean prediction must be finite");
        }
        if obs_var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return invalid("observation variances must be positive and finite");
        }
        for j in (0..n_e).filter(|&j| is_active(j)) {
            if predictions.column(j).iter().any(|v| !v.is_finite()) {
                return invalid(format!("prediction of member {j} is not finite"));
            }
        }

        let inv_sd: Vec<f64> = obs_var.iter().map(|v| 1.0 / v.sqrt()).collect();
        let scale = 1.0 / ((n_e - 1) as f64).sqrt();
        let mut sh = DMatrix::zeros(n_d, n_e);
        let mut innov = DMatrix::zeros(n_d, n_e);
        for j in (0..n_e).filter(|&j| is_active(j)) {
            let p = predictions.column(j);
            let mut a = sh.column_mut(j);
            for i in 0..n_d {
                a[i] = (p[i] - pred_of_mean[i]) * scale * inv_sd[i];
            }
            let mut d = innov.column_mut(j);
            for i in 0..n_d {
                d[i] = (obs[i] - p[i]) * inv_sd[i];
            }
        }
        let mut s_theta = anomalies(background);
        for j in (0..n_e).filter(|&j| !is_active(j)) {
            s_theta.column_mut(j).fill(0.0);
        }

        let svd = tsvd_capped(&sh, svd_energy, n_e - 1)?;
        let theta_basis = &s_theta * &svd.v;
        let projected_innovation = svd.u.transpose() * innov;
        Ok(Self { background: background.matrix().clone(), theta_basis, s: svd.s, projected_innovation })
    }

    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn analysis(&self, gamma: f64) -> Result<EnsembleMatrix> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return invalid(format!("gamma must be positive and finite, got {gamma}"));
        }
        let mut w = self.projected_innovation.clone();
        for (k, s) in self.s.iter().enumerate() {
            w.row_mut(k).scale_mut(s / (s * s + gamma));
        }
        let increment = &self.theta_basis * w;
        EnsembleMatrix::new(&self.background + increment)
    }
}

/// One smoother update with all members active.
#[allow(clippy::too_many_arguments)]
pub fn ies_update(
    background: &EnsembleMatrix,
    predictions: &DMatrix<f64>,
    pred_of_mean: &[f64],
    obs: &[f64],
    obs_var: &[f64],
    gamma: f64,
    svd_energy: f64,
) -> Result<EnsembleMatrix> {
    if background.matrix().iter().any(|v| !v.is_finite()) || predictions.iter().any(|v| !v.is_finite()) {
        return invalid("non-finite input to the ensemble update");
    }
    IesUpdater::new(background, predictions, pred_of_mean, obs, obs_var, svd_energy, None)?.analysis(gamma)
}

/// A member-wise forward simulator. Implementations must be pure.
pub trait ForwardModel: Sync {
    fn n_obs(&self) -> usize;

    /// Writes the simulated observations of one parameter vector into `out`.
    fn simulate(&self, theta: &[f64], out: &mut [f64]);
}

impl<F> ForwardModel for (usize, F)
where
    F: Fn(&[f64], &mut [f64]) + Sync,
{
    fn n_obs(&self) -> usize {
        self.0
    }

    fn simulate(&self, theta: &[f64], out: &mut [f64]) {
        (self.1)(theta, out)
    }
}

/// Simulates every member; column `j` of the result belongs to member `j`.
pub fn evaluate_ensemble<M: ForwardModel + ?Sized>(model: &M, ensemble: &EnsembleMatrix) -> DMatrix<f64> {
    let n_d = model.n_obs();
    let mut preds = DMatrix::zeros(n_d, ensemble.n_e());
    exec::fill_chunks(preds.as_mut_slice(), n_d, |j, out| model.simulate(ensemble.member(j), out));
    preds
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum Gamma0Rule {
    /// `gamma_0 * trace(C_y) = trace(S_h S_h^T)` on the initial ensemble.
    TraceRatio,
    Fixed(f64),
}

/// How `gamma_grow` and `gamma_shrink` act on gamma.
///
/// A larger gamma gives a shorter step. Under `StepSize` the factors scale the
/// step length `1 / gamma`: an accepted step divides gamma by `gamma_grow`,
/// and every inner trial divides it by `gamma_shrink`, so trials backtrack.
/// Under `Literal` the factors multiply gamma directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaSchedule {
    StepSize,
    Literal,
}

impl GammaSchedule {
    fn apply(self, gamma: f64, factor: f64) -> f64 {
        match self {
            Self::StepSize => gamma / factor,
            Self::Literal => gamma * factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IesConfig {
    pub max_outer: usize,
    pub max_inner: usize,
    /// Growth factor after an accepted step; see [`GammaSchedule`].
    pub gamma_grow: f64,
    /// Shrink factor before each inner trial; see [`GammaSchedule`].
    pub gamma_shrink: f64,
    pub schedule: GammaSchedule,
    pub rel_change_stop: f64,
    /// Stop once the average mismatch drops below `target_factor * n_obs`.
    pub target_factor: f64,
    pub svd_energy: f64,
    pub gamma0: Gamma0Rule,
}

impl Default for IesConfig {
    fn default() -> Self {
        Self {
            max_outer: 10,
            max_inner: 5,
            gamma_grow: 2.0,
            gamma_shrink: 0.9,
            rel_change_stop: 0.01,
            target_factor: 4.0,
            svd_energy: 0.999,
            gamma0: Gamma0Rule::TraceRatio,
            schedule: GammaSchedule::StepSize,
        }
    }
}

impl IesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer < 1 {
            return invalid("max_outer must be at least 1");
        }
        if !(self.gamma_shrink > 0.0 && self.gamma_shrink < 1.0 && self.gamma_grow > 1.0) {
            return invalid(format!(
                "need 0 < gamma_shrink < 1 < gamma_grow, got {} and {}",
                self.gamma_shrink, self.gamma_grow
            ));
        }
        if !(self.svd_energy > 0.0 && self.svd_energy <= 1.0) {
            return invalid(format!("svd_energy must lie in (0, 1], got {}", self.svd_energy));
        }
        if let Gamma0Rule::Fixed(g) = self.gamma0 {
            if !(g.is_finite() && g > 0.0) {
                return invalid(format!("fixed gamma0 must be positive, got {g}"));
            }
        }
        if !(self.rel_change_stop >= 0.0 && self.target_factor >= 0.0) {
            return invalid("stopping thresholds must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxOuter,
    RelChange,
    TargetMismatch,
}

/// Diagnostics of one outer step. Step 0 describes the initial ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    /// Per-member mismatch of the ensemble adopted at this step; members with
    /// non-finite predictions are recorded as infinity.
    pub mismatch: Vec<f64>,
    pub mean_mismatch: f64,
    pub gamma: f64,
    pub accepted: bool,
    pub inner_trials: usize,
    /// The adopted ensemble came from a trial sequence that never improved.
    pub non_improving: bool,
    pub failed_members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IesHistory {
    pub records: Vec<IterRecord>,
    pub stop_reason: StopReason,
}

impl IesHistory {
    pub fn final_record(&self) -> &IterRecord {
        self.records.last().expect("history always holds the initial record")
    }

    /// Mean mismatch of accepted steps, starting with the initial ensemble.
    pub fn accepted_means(&self) -> Vec<f64> {
        self.records.iter().filter(|r| r.accepted).map(|r| r.mean_mismatch).collect()
    }

    /// CSV with columns `iter,member,mismatch,gamma,accepted,inner_trials`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,member,mismatch,gamma,accepted,inner_trials\n");
        for r in &self.records {
            for (j, m) in r.mismatch.iter().enumerate() {
                let _ = writeln!(s, "{},{},{:e},{:e},{},{}", r.iter, j, m, r.gamma, r.accepted, r.inner_trials);
            }
        }
        s
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let f = self.final_record();
        serde_json::json!({
            "stop_reason": self.stop_reason,
            "iterations": f.iter,
            "final_mean_mismatch": f.mean_mismatch,
        })
    }
}

struct Evaluated {
    preds: DMatrix<f64>,
    mismatch: Vec<f64>,
    mean: f64,
    active: Vec<bool>,
}

fn evaluate<M: ForwardModel + ?Sized>(
    model: &M,
    ens: &EnsembleMatrix,
    obs: &[f64],
    obs_var: &[f64],
) -> Result<Evaluated> {
    let preds = evaluate_ensemble(model, ens);
    let n_e = ens.n_e();
    let mut mismatch = Vec::with_capacity(n_e);
    let mut active = Vec::with_capacity(n_e);
    for j in 0..n_e {
        let col = preds.column(j);
        let col = col.as_slice();
        if col.iter().all(|v| v.is_finite()) {
            mismatch.push(mismatch_unchecked(obs, col, obs_var));
            active.push(true);
        } else {
            mismatch.push(f64::INFINITY);
            active.push(false);
        }
    }
    let failed = active.iter().filter(|a| !**a).count();
    if failed * 2 > n_e {
        return Err(Error::ForwardFailure { failed, total: n_e });
    }
    if failed > 0 {
        log::warn!("{failed} of {n_e} members produced non-finite predictions and are frozen");
    }
    let finite: Vec<f64> = mismatch.iter().copied().filter(|m| m.is_finite()).collect();
    let mean = finite.iter().sum::<f64>() / finite.len() as f64;
    Ok(Evaluated { preds, mismatch, mean, active })
}

fn predict_mean<M: ForwardModel + ?Sized>(model: &M, ens: &EnsembleMatrix) -> Result<Vec<f64>> {
    let mean = ens.mean();
    let mut out = vec![0.0; model.n_obs()];
    model.simulate(mean.as_slice(), &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::ForwardFailure { failed: 1, total: 1 });
    }
    Ok(out)
}

fn initial_gamma(
    rule: Gamma0Rule,
    preds: &DMatrix<f64>,
    pred_of_mean: &[f64],
    active: &[bool],
    obs_var: &[f64],
) -> f64 {
    match rule {
        Gamma0Rule::Fixed(g) => g,
        Gamma0Rule::TraceRatio => {
            let n_e = preds.ncols();
            let mut spread = 0.0;
            for j in (0..n_e).filter(|&j| active[j]) {
                spread += preds.column(j).iter().zip(pred_of_mean).map(|(p, m)| (p - m) * (p - m)).sum::<f64>();
            }
            spread /= (n_e - 1) as f64;
            let noise: f64 = obs_var.iter().sum();
            let g = spread / noise;
            if g.is_finite() && g > 0.0 {
                g
            } else {
                1.0
            }
        }
    }
}

pub fn run_ies<M: ForwardModel + ?Sized>(
    forward: &M,
    init: &EnsembleMatrix,
    obs: &[f64],
    obs_var: &[f64],
    config: &IesConfig,
) -> Result<(EnsembleMatrix, IesHistory)> {
    run_ies_observed(forward, init, obs, obs_var, config, |_, _| {})
}

/// As [`run_ies`], calling `observer` with every adopted ensemble (including
/// the initial one) right after its record is created.
pub fn run_ies_observed<M, O>(
    forward: &M,
    init: &EnsembleMatrix,
    obs: &[f64],
    obs_var: &[f64],
    config: &IesConfig,
    mut observer: O,
) -> Result<(EnsembleMatrix, IesHistory)>
where
    M: ForwardModel + ?Sized,
    O: FnMut(&IterRecord, &EnsembleMatrix),
{
    config.validate()?;
    let n_d = forward.n_obs();
    if obs.len() != n_d || obs_var.len() != n_d {
        return invalid(format!(
            "forward model yields {n_d} values but obs has {} and obs_var {}",
            obs.len(),
            obs_var.len()
        ));
    }
    if obs.iter().any(|v| !v.is_finite()) || obs_var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return invalid("observations must be finite with positive variances");
    }
    let target = config.target_factor * n_d as f64;

    let mut bg = init.clone();
    let mut bg_eval = evaluate(forward, &bg, obs, obs_var)?;
    let mut bg_mean_pred = predict_mean(forward, &bg)?;
    let mut gamma = initial_gamma(config.gamma0, &bg_eval.preds, &bg_mean_pred, &bg_eval.active, obs_var);

    let mut records = vec![IterRecord {
        iter: 0,
        mismatch: bg_eval.mismatch.clone(),
        mean_mismatch: bg_eval.mean,
        gamma,
        accepted: true,
        inner_trials: 0,
        non_improving: false,
        failed_members: failed(&bg_eval.active),
    }];
    observer(&records[0], &bg);
    if bg_eval.mean < target {
        return Ok((bg, IesHistory { records, stop_reason: StopReason::TargetMismatch }));
    }

    let mut stop_reason = StopReason::MaxOuter;
    for iter in 1..=config.max_outer {
        let updater = IesUpdater::new(
            &bg,
            &bg_eval.preds,
            &bg_mean_pred,
            obs,
            obs_var,
            config.svd_energy,
            Some(&bg_eval.active),
        )?;
        let mut analysis = updater.analysis(gamma)?;
        let mut a_eval = evaluate(forward, &analysis, obs, obs_var)?;
        let mut gamma_used = gamma;
        let mut trials = 0;
        let accepted;
        if a_eval.mean < bg_eval.mean {
            accepted = true;
            gamma = config.schedule.apply(gamma, config.gamma_grow);
        } else {
            let mut improved = false;
            while trials < config.max_inner {
                trials += 1;
                gamma = config.schedule.apply(gamma, config.gamma_shrink);
                analysis = updater.analysis(gamma)?;
                a_eval = evaluate(forward, &analysis, obs, obs_var)?;
                if a_eval.mean < bg_eval.mean {
                    improved = true;
                    break;
                }
            }
            gamma_used = gamma;
            accepted = improved;
        }

        let previous = bg_eval.mean;
        bg = analysis;
        bg_eval = a_eval;
        bg_mean_pred = predict_mean(forward, &bg)?;
        let record = IterRecord {
            iter,
            mismatch: bg_eval.mismatch.clone(),
            mean_mismatch: bg_eval.mean,
            gamma: gamma_used,
            accepted,
            inner_trials: trials,
            non_improving: !accepted,
            failed_members: failed(&bg_eval.active),
        };
        observer(&record, &bg);
        records.push(record);

        if bg_eval.mean < target {
            stop_reason = StopReason::TargetMismatch;
            break;
        }
        if ((bg_eval.mean - previous) / previous).abs() < config.rel_change_stop {
            stop_reason = StopReason::RelChange;
            break;
        }
    }
    Ok((bg, IesHistory { records, stop_reason }))
}

fn failed(active: &[bool]) -> Vec<usize> {
    active.iter().enumerate().filter(|(_, a)| !**a).map(|(j, _)| j).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn anomaly_values() {
        let e = EnsembleMatrix::new(DMatrix::from_row_slice(1, 2, &[0.0, 2.0])).unwrap();
        let a = anomalies(&e);
        assert_eq!(a.as_slice(), &[-1.0, 1.0]);
        let same = EnsembleMatrix::new(DMatrix::from_element(3, 4, 1.7)).unwrap();
        assert!(anomalies(&same).iter().all(|v| *v == 0.0));
        assert!(EnsembleMatrix::new(DMatrix::zeros(3, 1)).is_err());
        assert!(EnsembleMatrix::new(DMatrix::from_element(1, 2, f64::NAN)).is_err());
    }

    #[test]
    fn tsvd_ranks() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0]));
        let t = tsvd(&d, 1.0).unwrap();
        assert_eq!(t.rank(), 3);
        assert!((t.reconstruct() - &d).amax() < 1e-14);

        let d2 = DMatrix::from_diagonal(&DVector::from_vec(vec![10.0, 1e-12]));
        assert_eq!(tsvd(&d2, 0.999).unwrap().rank(), 1);

        let z = tsvd(&DMatrix::zeros(4, 3), 0.9).unwrap();
        assert_eq!(z.rank(), 0);
        assert_eq!(z.u.shape(), (4, 0));
        assert!(tsvd(&d, 0.0).is_err());
        assert!(tsvd(&d, 1.5).is_err());
        assert_eq!(tsvd_capped(&d, 1.0, 2).unwrap().rank(), 2);
    }

    #[test]
    fn huge_gamma_is_a_no_op() {
        let bg = EnsembleMatrix::new(DMatrix::from_fn(2, 5, |i, j| (i * 5 + j) as f64 * 0.3 - 1.0)).unwrap();
        let preds = DMatrix::from_fn(3, 5, |i, j| bg.matrix()[(i % 2, j)] * (i + 1) as f64);
        let pm: Vec<f64> = (0..3).map(|i| bg.mean()[i % 2] * (i + 1) as f64).collect();
        let a = ies_update(&bg, &preds, &pm, &[1.0, 2.0, 3.0], &[0.1, 0.1, 0.1], 1e12, 1.0).unwrap();
        let rel = (a.matrix() - bg.matrix()).norm() / bg.matrix().norm();
        assert!(rel < 1e-6, "{rel}");
    }

    #[test]
    fn identical_predictions_give_zero_gain() {
        let bg = EnsembleMatrix::new(DMatrix::from_fn(2, 4, |i, j| (i + 2 * j) as f64)).unwrap();
        let preds = DMatrix::from_element(3, 4, 0.5);
        let a = ies_update(&bg, &preds, &[0.5; 3], &[1.0, 2.0, 3.0], &[1.0; 3], 1.0, 0.999).unwrap();
        assert_eq!(a, bg);
    }

    #[test]
    fn update_rejects_bad_input() {
        let bg = EnsembleMatrix::new(DMatrix::from_fn(2, 4, |i, j| (i + 2 * j) as f64)).unwrap();
        let mut preds = DMatrix::from_element(3, 4, 0.5);
        assert!(ies_update(&bg, &preds, &[0.5; 3], &[1.0; 3], &[1.0; 3], 0.0, 0.9).is_err());
        assert!(ies_update(&bg, &preds, &[0.5; 3], &[1.0; 3], &[0.0; 3], 1.0, 0.9).is_err());
        assert!(ies_update(&bg, &preds, &[0.5; 2], &[1.0; 3], &[1.0; 3], 1.0, 0.9).is_err());
        preds[(0, 0)] = f64::NAN;
        assert!(ies_update(&bg, &preds, &[0.5; 3], &[1.0; 3], &[1.0; 3], 1.0, 0.9).is_err());
    }

    #[test]
    fn quadratic_forward_history_is_monotone() {
        let forward = (1usize, |t: &[f64], out: &mut [f64]| out[0] = t[0] * t[0]);
        let init = EnsembleMatrix::new(DMatrix::from_fn(1, 40, |_, j| 1.5 + 0.3 * ((j as f64) * 0.77).sin())).unwrap();
        let cfg = IesConfig::default();
        let (_, hist) = run_ies(&forward, &init, &[4.0], &[0.01], &cfg).unwrap();
        let acc = hist.accepted_means();
        assert!(acc.len() >= 2);
        for w in acc.windows(2) {
            assert!(w[1] <= w[0], "{acc:?}");
        }
        assert!(hist.final_record().mean_mismatch < hist.records[0].mean_mismatch);
    }

    #[test]
    fn consistent_data_hits_target() {
        // observations produced by one member of a linear model
        let a = DMatrix::from_fn(6, 3, |i, j| ((i + 1) as f64 * 0.5 + j as f64).cos());
        let a2 = a.clone();
        let forward = (6usize, move |t: &[f64], out: &mut [f64]| {
            let y = &a2 * DVector::from_column_slice(t);
            out.copy_from_slice(y.as_slice());
        });
        let init =
            EnsembleMatrix::new(DMatrix::from_fn(3, 30, |i, j| ((i * 31 + j * 7) % 13) as f64 / 6.5 - 1.0)).unwrap();
        let truth = DVector::from_column_slice(init.member(4));
        let obs = (&a * truth).as_slice().to_vec();
        let (_, hist) = run_ies(&forward, &init, &obs, &[1e-4; 6], &IesConfig::default()).unwrap();
        assert_eq!(hist.stop_reason, StopReason::TargetMismatch);
        assert!(hist.final_record().iter < 10);
    }

    #[test]
    fn non_finite_members_are_frozen_or_abort() {
        let forward = (1usize, |t: &[f64], out: &mut [f64]| out[0] = if t[0] > 10.0 { f64::NAN } else { t[0] });
        let mut m = DMatrix::from_fn(1, 10, |_, j| j as f64 * 0.1);
        m[(0, 9)] = 11.0;
        let init = EnsembleMatrix::new(m.clone()).unwrap();
        let (fin, hist) = run_ies(&forward, &init, &[0.5], &[0.01], &IesConfig::default()).unwrap();
        assert_eq!(hist.records[0].failed_members, vec![9]);
        assert_eq!(fin.member(9)[0], 11.0);

        for j in 0..6 {
            m[(0, j)] = 20.0 + j as f64;
        }
        let bad = EnsembleMatrix::new(m).unwrap();
        assert!(matches!(
            run_ies(&forward, &bad, &[0.5], &[0.01], &IesConfig::default()),
            Err(Error::ForwardFailure { .. })
        ));
    }

    #[test]
    fn updater_reuse_matches_direct_update() {
        let bg = EnsembleMatrix::new(DMatrix::from_fn(3, 8, |i, j| ((i * 8 + j) as f64 * 0.37).sin())).unwrap();
        let preds = DMatrix::from_fn(4, 8, |i, j| bg.matrix()[(i % 3, j)].powi(2) + i as f64);
        let pm = vec![0.1, 1.2, 2.1, 3.3];
        let obs = [0.5, 1.5, 2.5, 3.5];
        let var = [0.2, 0.3, 0.4, 0.5];
        let up = IesUpdater::new(&bg, &preds, &pm, &obs, &var, 1.0, None).unwrap();
        for g in [0.1, 1.0, 10.0] {
            let a = up.analysis(g).unwrap();
            let b = ies_update(&bg, &preds, &pm, &obs, &var, g, 1.0).unwrap();
            assert_relative_eq!(a.matrix(), b.matrix(), epsilon = 1e-14);
        }
    }

    #[test]
    fn history_csv_layout() {
        let hist = IesHistory {
            records: vec![IterRecord {
                iter: 0,
                mismatch: vec![1.0, 2.0],
                mean_mismatch: 1.5,
                gamma: 3.0,
                accepted: true,
                inner_trials: 0,
                non_improving: false,
                failed_members: vec![],
            }],
            stop_reason: StopReason::RelChange,
        };
        let csv = hist.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "iter,member,mismatch,gamma,accepted,inner_trials");
        assert_eq!(lines.len(), 3);
        assert_eq!(hist.summary_json()["stop_reason"], "rel_change");
    }
}

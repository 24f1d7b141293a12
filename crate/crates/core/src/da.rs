//! Two-dimensional data-assimilation experiments.
//!
//! A reference field is observed through `f(z) = sqrt(|z|^3 + 1)` with ten
//! percent noise. The smoother estimates the field with a run simulator `g`
//! that is either `f` itself or the imperfect `z^2`, optionally augmented by a
//! learned residual model (kernel correction) or by a per-gridblock bias.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::exec;
use crate::gmm::{fit_gmm, GmmModel};
use crate::grf::{simulate_ensemble, simulate_field, CovarianceSpec, Field};
use crate::io;
use crate::kernel_init::{init_da_eta_ensemble, AnchorSource, Draws, InitDiagnostics};
use crate::kernels::{residual_da_flat, CenterDataDA};
use crate::metrics::{box_stats, mismatch_unchecked, rmse, BoxStats};
use crate::rng::{mix, stream, tag};
use crate::slp::{noise_std, simulator, truth};
use crate::smoother::{run_ies_observed, EnsembleMatrix, ForwardModel, IesConfig, IesHistory, StopReason};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// The run simulator is the true one.
    Perfect,
    /// The run simulator is `z^2`.
    Imperfect,
}

impl Scenario {
    pub fn simulator(self) -> fn(f64) -> f64 {
        match self {
            Self::Perfect => truth,
            Self::Imperfect => simulator,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Perfect => "perfect",
            Self::Imperfect => "imperfect",
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perfect" => Ok(Self::Perfect),
            "imperfect" => Ok(Self::Imperfect),
            _ => invalid(format!("unknown scenario `{s}` (expected perfect or imperfect)")),
        }
    }
}

/// Model-error correction mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Mec {
    None,
    Kernel { n_cl: usize },
    Bias,
}

impl Mec {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Kernel { .. } => "kernel",
            Self::Bias => "bias",
        }
    }

    pub fn n_clusters(self) -> usize {
        match self {
            Self::Kernel { n_cl } => n_cl,
            _ => 0,
        }
    }
}

/// Which noise scale enters the observation covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsVarRule {
    /// Ten percent of the noise-free response.
    #[default]
    Truth,
    /// Ten percent of the observed value.
    Observed,
}

/// Samples the clustering mixture is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GmmSource {
    /// Values of the initial ensemble-mean field.
    #[default]
    MeanField,
    /// Every value of every initial member.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaProblem {
    pub reference: Field,
    pub obs: Vec<f64>,
    pub obs_var: Vec<f64>,
    pub scenario: Scenario,
}

impl DaProblem {
    pub fn m_z(&self) -> usize {
        self.reference.len()
    }

    /// Average mismatch below which the smoother stops, `4 m_z` by default.
    pub fn target_mismatch(&self, cfg: &IesConfig) -> f64 {
        cfg.target_factor * self.m_z() as f64
    }
}

pub fn gen_da_problem(nx: usize, ny: usize, cov: CovarianceSpec, scenario: Scenario, seed: u64) -> Result<DaProblem> {
    gen_da_problem_with(nx, ny, cov, scenario, ObsVarRule::Truth, seed)
}

pub fn gen_da_problem_with(
    nx: usize,
    ny: usize,
    cov: CovarianceSpec,
    scenario: Scenario,
    rule: ObsVarRule,
    seed: u64,
) -> Result<DaProblem> {
    let reference = simulate_field(nx, ny, cov, mix(seed, tag::REFERENCE, 0))?;
    Ok(observe(reference, scenario, rule, seed))
}

/// Noisy observations of a given reference field.
pub fn observe(reference: Field, scenario: Scenario, rule: ObsVarRule, seed: u64) -> DaProblem {
    let mut rng = stream(seed, tag::OBS_NOISE, 0);
    let mut obs = Vec::with_capacity(reference.len());
    let mut obs_var = Vec::with_capacity(reference.len());
    for &z in &reference.values {
        let fz = truth(z);
        let sd = noise_std(fz);
        let e: f64 = rng.sample(StandardNormal);
        let d = fz + sd * e;
        obs.push(d);
        let s = match rule {
            ObsVarRule::Truth => sd,
            ObsVarRule::Observed => noise_std(d),
        };
        obs_var.push(s * s);
    }
    DaProblem { reference, obs, obs_var, scenario }
}

/// Initial model ensemble as a `m_z x n_e` matrix.
pub fn initial_models(nx: usize, ny: usize, cov: CovarianceSpec, n_e: usize, seed: u64) -> Result<DMatrix<f64>> {
    let fields = simulate_ensemble(n_e, nx, ny, cov, mix(seed, tag::ENSEMBLE, 0))?;
    let m_z = nx * ny;
    let flat: Vec<f64> = fields.into_iter().flat_map(|f| f.values).collect();
    Ok(DMatrix::from_vec(m_z, n_e, flat))
}

/// Residual-model center points.
///
/// The `n_cp` model values evenly span `[lo - 0.1|lo|, hi + 0.1|hi|)` over the
/// pooled initial values. Each carries the mean observation at the
/// `n_neighbors` gridblocks whose ensemble-mean value is closest (ties go to
/// the lower gridblock index).
pub fn build_center_points(z: &DMatrix<f64>, obs: &[f64], n_cp: usize, n_neighbors: usize) -> Result<CenterDataDA> {
    let (m_z, n_e) = z.shape();
    if n_e == 0 || obs.len() != m_z {
        return invalid(format!("need a nonempty ensemble matching {} observations", obs.len()));
    }
    if n_neighbors == 0 || n_neighbors > m_z {
        return invalid(format!("cannot pick {n_neighbors} neighbours among {m_z} gridblocks"));
    }
    if n_cp == 0 {
        return invalid("need at least one center point");
    }
    let lo = z.min();
    let hi = z.max();
    let (lo, hi) = (lo - 0.1 * lo.abs(), hi + 0.1 * hi.abs());
    if !(hi > lo) {
        return invalid("initial models have no spread to place centers on");
    }
    let step = (hi - lo) / n_cp as f64;
    let z_cp: Vec<f64> = (0..n_cp).map(|k| lo + k as f64 * step).collect();
    let mean = z.column_mean();
    let d_cp = exec::map_indexed(n_cp, |k| {
        let c = z_cp[k];
        let mut idx: Vec<usize> = (0..m_z).collect();
        let key = |&i: &usize| ((mean[i] - c).abs(), i);
        idx.select_nth_unstable_by(n_neighbors - 1, |a, b| {
            let (da, ia) = key(a);
            let (db, ib) = key(b);
            da.total_cmp(&db).then(ia.cmp(&ib))
        });
        idx[..n_neighbors].iter().map(|&i| obs[i]).sum::<f64>() / n_neighbors as f64
    });
    CenterDataDA::new(z_cp, d_cp)
}

/// Block layout of an augmented state `[z | extra]`, where `extra` is one
/// `[c | beta_z | beta_r]` block per cluster (kernel correction), a bias per
/// gridblock, or empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedLayout {
    pub m_z: usize,
    pub n_cp: usize,
    pub mec: Mec,
}

impl AugmentedLayout {
    pub fn extra_len(&self) -> usize {
        match self.mec {
            Mec::None => 0,
            Mec::Kernel { n_cl } => n_cl * 3 * self.n_cp,
            Mec::Bias => self.m_z,
        }
    }

    pub fn len(&self) -> usize {
        self.m_z + self.extra_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pack(&self, z: &[f64], extra: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.m_z || extra.len() != self.extra_len() {
            return invalid(format!(
                "layout expects {} + {} values, got {} + {}",
                self.m_z,
                self.extra_len(),
                z.len(),
                extra.len()
            ));
        }
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(z);
        v.extend_from_slice(extra);
        Ok(v)
    }

    pub fn unpack<'a>(&self, theta: &'a [f64]) -> Result<(&'a [f64], &'a [f64])> {
        if theta.len() != self.len() {
            return invalid(format!("layout expects {} values, got {}", self.len(), theta.len()));
        }
        Ok(theta.split_at(self.m_z))
    }

    /// The `s`-th kernel block of the extra part.
    pub fn eta_block<'a>(&self, extra: &'a [f64], s: usize) -> &'a [f64] {
        let b = 3 * self.n_cp;
        &extra[s * b..(s + 1) * b]
    }
}

/// Cluster probabilities used by the residual model.
#[derive(Debug, Clone, PartialEq)]
pub enum Clustering {
    /// One cluster everywhere.
    Single,
    /// Re-evaluated at the current value of each gridblock.
    Current(GmmModel),
    /// Fixed per gridblock (`m_z x n_cl`, row-major).
    Frozen { n_cl: usize, probs: Vec<f64> },
}

impl Clustering {
    pub fn n_clusters(&self) -> usize {
        match self {
            Self::Single => 1,
            Self::Current(g) => g.n_components(),
            Self::Frozen { n_cl, .. } => *n_cl,
        }
    }
}

/// Forward simulator of the augmented state.
pub struct EffectiveForward<'a> {
    pub problem: &'a DaProblem,
    pub layout: AugmentedLayout,
    pub cdata: Option<&'a CenterDataDA>,
    pub clustering: &'a Clustering,
    pub include_residual: bool,
}

impl EffectiveForward<'_> {
    fn simulate_into(&self, theta: &[f64], out: &mut [f64]) {
        let (z, extra) = theta.split_at(self.layout.m_z);
        let g = self.problem.scenario.simulator();
        match self.layout.mec {
            Mec::None => {
                for (o, &v) in out.iter_mut().zip(z) {
                    *o = g(v);
                }
            }
            Mec::Bias => {
                for ((o, &v), b) in out.iter_mut().zip(z).zip(extra) {
                    *o = g(v) + if self.include_residual { *b } else { 0.0 };
                }
            }
            Mec::Kernel { n_cl } => {
                let cdata = self.cdata.expect("kernel correction needs center data");
                let mut p = vec![0.0; n_cl];
                for (l, (o, &v)) in out.iter_mut().zip(z).enumerate() {
                    let gz = g(v);
                    *o = gz;
                    if !self.include_residual {
                        continue;
                    }
                    match self.clustering {
                        Clustering::Single => p[0] = 1.0,
                        Clustering::Current(m) => {
                            m.fill_responsibilities(v, &mut p);
                        }
                        Clustering::Frozen { probs, .. } => p.copy_from_slice(&probs[l * n_cl..(l + 1) * n_cl]),
                    }
                    let d = self.problem.obs[l];
                    for (s, ps) in p.iter().enumerate() {
                        if *ps != 0.0 {
                            *o += ps * residual_da_flat(v, d, gz, self.layout.eta_block(extra, s), cdata);
                        }
                    }
                }
            }
        }
    }
}

impl ForwardModel for EffectiveForward<'_> {
    fn n_obs(&self) -> usize {
        self.layout.m_z
    }

    fn simulate(&self, theta: &[f64], out: &mut [f64]) {
        self.simulate_into(theta, out)
    }
}

/// Simulated observations of one augmented state.
pub fn effective_forward(
    theta: &[f64],
    layout: AugmentedLayout,
    problem: &DaProblem,
    cdata: Option<&CenterDataDA>,
    clustering: &Clustering,
    include_residual: bool,
) -> Result<Vec<f64>> {
    layout.unpack(theta)?;
    if layout.m_z != problem.m_z() {
        return invalid("layout does not match the problem size");
    }
    if let Mec::Kernel { n_cl } = layout.mec {
        if cdata.is_none_or(|c| c.len() != layout.n_cp) || clustering.n_clusters() != n_cl {
            return invalid("kernel correction needs matching center data and clustering");
        }
    }
    let fw = EffectiveForward { problem, layout, cdata, clustering, include_residual };
    let mut out = vec![0.0; layout.m_z];
    fw.simulate_into(theta, &mut out);
    Ok(out)
}

/// Samples `n` vectors `mean + A xi` with `xi ~ N(0, I)`, `A` an anomaly
/// matrix, so they share the empirical mean and low-rank covariance `A A^T`.
pub fn sample_low_rank(mean: &[f64], anomalies: &DMatrix<f64>, n: usize, seed: u64) -> DMatrix<f64> {
    let k = anomalies.ncols();
    let cols = exec::map_indexed(n, |j| {
        let mut rng = stream(seed, tag::BIAS, j as u64);
        let xi: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let v = anomalies * nalgebra::DVector::from_vec(xi);
        mean.iter().zip(v.iter()).map(|(m, a)| m + a).collect::<Vec<f64>>()
    });
    DMatrix::from_vec(mean.len(), n, cols.into_iter().flatten().collect())
}

/// Bias ensemble drawn from the mean and covariance of the initial residuals
/// `d_o - g(z_j)`.
pub fn init_bias_ensemble(problem: &DaProblem, z: &DMatrix<f64>, seed: u64) -> Result<DMatrix<f64>> {
    let (m_z, n_e) = z.shape();
    if n_e < 2 || m_z != problem.m_z() {
        return invalid("bias initialization needs at least two members of the right size");
    }
    let g = problem.scenario.simulator();
    let resid = DMatrix::from_fn(m_z, n_e, |l, j| problem.obs[l] - g(z[(l, j)]));
    // mean taken about the first member, so identical residuals stay exact
    let mean: Vec<f64> = (0..m_z)
        .map(|l| {
            let r0 = resid[(l, 0)];
            r0 + resid.row(l).iter().map(|r| r - r0).sum::<f64>() / n_e as f64
        })
        .collect();
    let scale = 1.0 / ((n_e - 1) as f64).sqrt();
    let a = DMatrix::from_fn(m_z, n_e, |l, j| (resid[(l, j)] - mean[l]) * scale);
    Ok(sample_low_rank(&mean, &a, n_e, seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DaConfig {
    pub nx: usize,
    pub ny: usize,
    pub reference_cov: CovarianceSpec,
    pub initial_cov: CovarianceSpec,
    pub n_e: usize,
    pub n_cp: usize,
    pub n_neighbors: usize,
    pub scenario: Scenario,
    pub mec: Mec,
    pub ies: IesConfig,
    pub obs_var_rule: ObsVarRule,
    pub gmm_source: GmmSource,
    /// Keep cluster probabilities at their initial-mean-field values.
    pub freeze_responsibilities: bool,
    pub anchor: AnchorSource,
    pub draws: Draws,
    /// Start the residual model with all weights at zero; they then stay
    /// there, which reduces kernel correction to no correction.
    pub zero_weights: bool,
}

impl Default for DaConfig {
    fn default() -> Self {
        Self {
            nx: 100,
            ny: 120,
            reference_cov: CovarianceSpec { sigma: 2.0, len_x: 15.0, len_y: 25.0 },
            initial_cov: CovarianceSpec { sigma: 2.2, len_x: 17.0, len_y: 23.0 },
            n_e: 100,
            n_cp: 200,
            n_neighbors: 20,
            scenario: Scenario::Perfect,
            mec: Mec::None,
            ies: IesConfig::default(),
            obs_var_rule: ObsVarRule::Truth,
            gmm_source: GmmSource::MeanField,
            freeze_responsibilities: false,
            anchor: AnchorSource::Member,
            draws: Draws::Random,
            zero_weights: false,
        }
    }
}

impl DaConfig {
    pub fn validate(&self) -> Result<()> {
        self.reference_cov.validate()?;
        self.initial_cov.validate()?;
        self.ies.validate()?;
        if self.n_e < 2 {
            return invalid("need at least two members");
        }
        if let Mec::Kernel { n_cl } = self.mec {
            if n_cl == 0 {
                return invalid("kernel correction needs at least one cluster");
            }
            if self.n_cp == 0 || self.n_neighbors == 0 {
                return invalid("kernel correction needs center points and neighbours");
            }
        }
        Ok(())
    }

    pub fn problem(&self, seed: u64) -> Result<DaProblem> {
        gen_da_problem_with(self.nx, self.ny, self.reference_cov, self.scenario, self.obs_var_rule, seed)
    }

    pub fn initial_models(&self, seed: u64) -> Result<DMatrix<f64>> {
        initial_models(self.nx, self.ny, self.initial_cov, self.n_e, seed)
    }
}

#[derive(Debug, Clone)]
pub struct DaResults {
    pub scenario: Scenario,
    pub mec: Mec,
    pub layout: AugmentedLayout,
    pub history: IesHistory,
    /// Per-member RMSE of the model block, one row per history record.
    pub rmse: Vec<Vec<f64>>,
    /// RMSE of the ensemble-mean field, one value per history record.
    pub mean_field_rmse: Vec<f64>,
    /// Mismatch without minus with the correction term, per record and
    /// member (kernel correction only).
    pub dmdiff: Vec<Vec<f64>>,
    pub initial_mean_field: Field,
    pub final_ensemble: EnsembleMatrix,
    pub cdata: Option<CenterDataDA>,
    pub gmm: Option<GmmModel>,
    pub init: InitDiagnostics,
}

/// Runs one experiment. `z0` holds the initial models (`m_z x n_e`).
pub fn run_da(problem: &DaProblem, z0: &DMatrix<f64>, cfg: &DaConfig, seed: u64) -> Result<DaResults> {
    cfg.validate()?;
    let (m_z, n_e) = z0.shape();
    if m_z != problem.m_z() || n_e < 2 {
        return invalid(format!("initial ensemble is {m_z} x {n_e}, problem has {} gridblocks", problem.m_z()));
    }
    let g = problem.scenario.simulator();
    let layout = AugmentedLayout { m_z, n_cp: cfg.n_cp, mec: cfg.mec };
    let mean0 = z0.column_mean();

    let mut cdata = None;
    let mut gmm = None;
    let mut clustering = Clustering::Single;
    let mut init = InitDiagnostics::default();
    let extra: DMatrix<f64> = match cfg.mec {
        Mec::None => DMatrix::zeros(0, n_e),
        Mec::Bias => init_bias_ensemble(problem, z0, mix(seed, tag::BIAS, 0))?,
        Mec::Kernel { n_cl } => {
            let cd = build_center_points(z0, &problem.obs, cfg.n_cp, cfg.n_neighbors)?;
            let model = if n_cl == 1 {
                None
            } else {
                let samples: &[f64] = match cfg.gmm_source {
                    GmmSource::MeanField => mean0.as_slice(),
                    GmmSource::Pooled => z0.as_slice(),
                };
                Some(fit_gmm(samples, n_cl, 500, 1e-7, mix(seed, tag::GMM, 0))?)
            };
            let (mut eta, diag) =
                init_da_eta_ensemble(z0, &problem.obs, g, &cd, model.as_ref(), cfg.anchor, seed, cfg.draws)?;
            if cfg.zero_weights {
                for s in 0..n_cl {
                    eta.rows_mut(s * 3 * cfg.n_cp, cfg.n_cp).fill(0.0);
                }
            }
            init = diag;
            clustering = match &model {
                None => Clustering::Single,
                Some(m) if cfg.freeze_responsibilities => {
                    let mut probs = vec![0.0; m_z * n_cl];
                    for (l, v) in mean0.iter().enumerate() {
                        m.fill_responsibilities(*v, &mut probs[l * n_cl..(l + 1) * n_cl]);
                    }
                    Clustering::Frozen { n_cl, probs }
                }
                Some(m) => Clustering::Current(m.clone()),
            };
            gmm = model;
            cdata = Some(cd);
            eta
        }
    };

    let mut theta0 = DMatrix::zeros(layout.len(), n_e);
    theta0.rows_mut(0, m_z).copy_from(z0);
    theta0.rows_mut(m_z, layout.extra_len()).copy_from(&extra);
    let init_ens = EnsembleMatrix::new(theta0)?;

    let forward =
        EffectiveForward { problem, layout, cdata: cdata.as_ref(), clustering: &clustering, include_residual: true };
    let mut rmse_series = Vec::new();
    let mut mean_rmse = Vec::new();
    let mut dmdiff = Vec::new();
    let reference = &problem.reference.values;
    let (final_ensemble, history) =
        run_ies_observed(&forward, &init_ens, &problem.obs, &problem.obs_var, &cfg.ies, |rec, ens| {
            let per_member = exec::map_indexed(n_e, |j| {
                let z = &ens.member(j)[..m_z];
                let e = rmse(z, reference).unwrap_or(f64::NAN);
                let diff = if matches!(cfg.mec, Mec::Kernel { .. }) {
                    let plain: Vec<f64> = z.iter().map(|v| g(*v)).collect();
                    mismatch_unchecked(&problem.obs, &plain, &problem.obs_var) - rec.mismatch[j]
                } else {
                    0.0
                };
                (e, diff)
            });
            rmse_series.push(per_member.iter().map(|p| p.0).collect());
            if matches!(cfg.mec, Mec::Kernel { .. }) {
                dmdiff.push(per_member.iter().map(|p| p.1).collect());
            }
            let mean = ens.mean();
            mean_rmse.push(rmse(&mean.as_slice()[..m_z], reference).unwrap_or(f64::NAN));
        })?;

    Ok(DaResults {
        scenario: problem.scenario,
        mec: cfg.mec,
        layout,
        history,
        rmse: rmse_series,
        mean_field_rmse: mean_rmse,
        dmdiff,
        initial_mean_field: Field::new(problem.reference.nx, problem.reference.ny, mean0.as_slice().to_vec())?,
        final_ensemble,
        cdata,
        gmm,
        init,
    })
}

/// Mismatch without the correction term minus mismatch with it, per member.
/// Positive values mean the correction brings the simulation closer to the
/// observations.
pub fn mismatch_difference(
    ensemble: &EnsembleMatrix,
    layout: AugmentedLayout,
    problem: &DaProblem,
    cdata: Option<&CenterDataDA>,
    clustering: &Clustering,
) -> Result<Vec<f64>> {
    (0..ensemble.n_e())
        .map(|j| {
            let theta = ensemble.member(j);
            let with = effective_forward(theta, layout, problem, cdata, clustering, true)?;
            let without = effective_forward(theta, layout, problem, cdata, clustering, false)?;
            Ok(mismatch_unchecked(&problem.obs, &without, &problem.obs_var)
                - mismatch_unchecked(&problem.obs, &with, &problem.obs_var))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaSummary {
    pub scenario: Scenario,
    pub mec: String,
    pub n_cl: usize,
    pub nx: usize,
    pub ny: usize,
    pub n_e: usize,
    pub stop_reason: StopReason,
    pub iterations: usize,
    pub target_mismatch: f64,
    pub initial_mismatch: BoxStats,
    pub final_mismatch: BoxStats,
    pub initial_rmse: BoxStats,
    pub final_rmse: BoxStats,
    pub final_mean_field_rmse: f64,
    /// Share of members whose final mismatch difference is positive.
    pub positive_dmdiff_fraction: Option<f64>,
    pub audits: Vec<crate::slp::Audit>,
}

impl DaResults {
    pub fn final_rmse(&self) -> &[f64] {
        self.rmse.last().expect("observer runs at least once")
    }

    /// Mean over members of the final RMSE.
    pub fn final_mean_rmse(&self) -> f64 {
        let r = self.final_rmse();
        r.iter().sum::<f64>() / r.len() as f64
    }

    pub fn final_mismatch(&self) -> &[f64] {
        &self.history.final_record().mismatch
    }

    pub fn positive_dmdiff_fraction(&self) -> Option<f64> {
        let last = self.dmdiff.last()?;
        Some(last.iter().filter(|d| **d > 0.0).count() as f64 / last.len() as f64)
    }

    pub fn final_mean_field(&self) -> Field {
        let mean = self.final_ensemble.mean();
        let r = &self.initial_mean_field;
        Field { nx: r.nx, ny: r.ny, values: mean.as_slice()[..self.layout.m_z].to_vec() }
    }

    pub fn audits(&self) -> Vec<crate::slp::Audit> {
        use crate::slp::Audit;
        let recs = &self.history.records;
        vec![
            Audit {
                name: "accepted_steps_decrease".into(),
                passed: recs.windows(2).all(|w| !w[1].accepted || w[1].mean_mismatch <= w[0].mean_mismatch),
            },
            Audit { name: "rmse_every_step".into(), passed: self.rmse.len() == recs.len() },
            Audit { name: "state_layout".into(), passed: self.final_ensemble.n_var() == self.layout.len() },
            Audit { name: "finite_rmse".into(), passed: self.rmse.iter().flatten().all(|v| v.is_finite()) },
        ]
    }

    pub fn summary(&self, problem: &DaProblem, cfg: &DaConfig) -> Result<DaSummary> {
        let f = self.history.final_record();
        Ok(DaSummary {
            scenario: self.scenario,
            mec: self.mec.name().into(),
            n_cl: self.mec.n_clusters(),
            nx: problem.reference.nx,
            ny: problem.reference.ny,
            n_e: self.final_ensemble.n_e(),
            stop_reason: self.history.stop_reason,
            iterations: f.iter,
            target_mismatch: problem.target_mismatch(&cfg.ies),
            initial_mismatch: box_stats(&self.history.records[0].mismatch)?,
            final_mismatch: box_stats(&f.mismatch)?,
            initial_rmse: box_stats(&self.rmse[0])?,
            final_rmse: box_stats(self.final_rmse())?,
            final_mean_field_rmse: *self.mean_field_rmse.last().unwrap_or(&f64::NAN),
            positive_dmdiff_fraction: self.positive_dmdiff_fraction(),
            audits: self.audits(),
        })
    }

    /// Writes `da_history.csv`, `da_mean_field_{initial,final}.csv`,
    /// `da_reference.csv`, `da_dmdiff.csv` (kernel correction only) and
    /// `da_summary.json` into `dir`.
    pub fn write_outputs(&self, dir: &Path, problem: &DaProblem, cfg: &DaConfig) -> Result<DaSummary> {
        let mut h = String::from("iter,member,mismatch,rmse,gamma,accepted\n");
        for (r, e) in self.history.records.iter().zip(&self.rmse) {
            for (j, (m, x)) in r.mismatch.iter().zip(e).enumerate() {
                let _ = writeln!(h, "{},{j},{m:e},{x:e},{:e},{}", r.iter, r.gamma, r.accepted);
            }
        }
        io::write_text(dir.join("da_history.csv"), &h)?;
        self.initial_mean_field.write_csv(dir.join("da_mean_field_initial.csv"))?;
        self.final_mean_field().write_csv(dir.join("da_mean_field_final.csv"))?;
        problem.reference.write_csv(dir.join("da_reference.csv"))?;
        if !self.dmdiff.is_empty() {
            let mut d = String::from("iter,member,difference\n");
            for (r, row) in self.history.records.iter().zip(&self.dmdiff) {
                for (j, v) in row.iter().enumerate() {
                    let _ = writeln!(d, "{},{j},{v:e}", r.iter);
                }
            }
            io::write_text(dir.join("da_dmdiff.csv"), &d)?;
        }
        let summary = self.summary(problem, cfg)?;
        io::write_json(dir.join("da_summary.json"), &summary)?;
        Ok(summary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn observation_values() {
        let r = Field::new(2, 1, vec![0.0, 2.0]).unwrap();
        let p = observe(r, Scenario::Perfect, ObsVarRule::Truth, 1);
        assert_abs_diff_eq!(p.obs_var[0], 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(p.obs_var[1], 0.09, epsilon = 1e-15);
        assert_eq!(truth(0.0), 1.0);
        assert_eq!(truth(2.0), 3.0);
        let big = DaProblem {
            reference: Field::new(100, 120, vec![0.0; 12_000]).unwrap(),
            obs: vec![],
            obs_var: vec![],
            scenario: Scenario::Perfect,
        };
        assert_eq!(big.target_mismatch(&IesConfig::default()), 48_000.0);
    }

    #[test]
    fn center_interval() {
        let z = DMatrix::from_column_slice(4, 2, &[-10.0, 0.0, 3.0, 10.0, 1.0, 2.0, -4.0, 5.0]);
        let c = build_center_points(&z, &[1.0; 4], 200, 2).unwrap();
        assert_eq!(c.z_cp[0], -11.0);
        assert_abs_diff_eq!(c.z_cp[1] - c.z_cp[0], 22.0 / 200.0, epsilon = 1e-12);
        assert!(*c.z_cp.last().unwrap() < 11.0);
        assert!(build_center_points(&z, &[1.0; 4], 10, 5).is_err());
    }

    #[test]
    fn center_data_matches_brute_force() {
        // 5x5 grid, two members; values repeat so ties occur
        let z = DMatrix::from_fn(25, 2, |l, j| ((l * 7) % 9) as f64 * 0.5 - 2.0 + j as f64 * 0.25);
        let obs: Vec<f64> = (0..25).map(|l| (l as f64 * 0.37).sin() * 3.0).collect();
        let mean = z.column_mean();
        let c = build_center_points(&z, &obs, 13, 4).unwrap();
        for (k, zc) in c.z_cp.iter().enumerate() {
            let mut all: Vec<(f64, usize)> = (0..25).map(|l| ((mean[l] - zc).abs(), l)).collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let expect = all[..4].iter().map(|(_, l)| obs[*l]).sum::<f64>() / 4.0;
            assert_abs_diff_eq!(c.d_cp[k], expect, epsilon = 1e-12);
        }
    }

    fn toy_problem(scenario: Scenario) -> DaProblem {
        let r = Field::new(2, 2, vec![0.5, -1.0, 1.5, 2.0]).unwrap();
        observe(r, scenario, ObsVarRule::Truth, 3)
    }

    #[test]
    fn layout_round_trip() {
        for mec in [Mec::None, Mec::Bias, Mec::Kernel { n_cl: 2 }] {
            let l = AugmentedLayout { m_z: 4, n_cp: 3, mec };
            let z = [1.0, 2.0, 3.0, 4.0];
            let extra: Vec<f64> = (0..l.extra_len()).map(|i| i as f64 * 0.1).collect();
            let theta = l.pack(&z, &extra).unwrap();
            let (a, b) = l.unpack(&theta).unwrap();
            assert_eq!((a, b), (&z[..], &extra[..]));
            assert_eq!(l.pack(a, b).unwrap(), theta);
        }
        assert_eq!(AugmentedLayout { m_z: 12_000, n_cp: 200, mec: Mec::Kernel { n_cl: 1 } }.len(), 12_600);
    }

    #[test]
    fn forward_hand_values() {
        let p = toy_problem(Scenario::Imperfect);
        let cd = CenterDataDA::new(vec![1.0], vec![2.0]).unwrap();
        let layout = AugmentedLayout { m_z: 4, n_cp: 1, mec: Mec::Kernel { n_cl: 1 } };
        let z = [0.5, -1.0, 1.5, 2.0];
        let theta = layout.pack(&z, &[0.7, 1.2, 0.8]).unwrap();
        let plain = effective_forward(&theta, layout, &p, Some(&cd), &Clustering::Single, false).unwrap();
        assert_eq!(plain, z.iter().map(|v| v * v).collect::<Vec<_>>());
        let out = effective_forward(&theta, layout, &p, Some(&cd), &Clustering::Single, true).unwrap();
        for l in 0..4 {
            let dz = z[l] - 1.0;
            let dr = (p.obs[l] - z[l] * z[l]) - (p.obs[l] - 2.0);
            let k = (-(1.44 * dz * dz + 0.64 * dr * dr) / 4.0).exp();
            assert_abs_diff_eq!(out[l], z[l] * z[l] + 0.7 * k, epsilon = 1e-14);
        }

        let zero = layout.pack(&z, &[0.0, 1.2, 0.8]).unwrap();
        assert_eq!(
            effective_forward(&zero, layout, &p, Some(&cd), &Clustering::Single, true).unwrap(),
            effective_forward(&zero, layout, &p, Some(&cd), &Clustering::Single, false).unwrap()
        );
    }

    #[test]
    fn mismatch_difference_values() {
        let p = toy_problem(Scenario::Imperfect);
        let layout = AugmentedLayout { m_z: 4, n_cp: 0, mec: Mec::Bias };
        let z = [0.5, -1.0, 1.5, 2.0];
        let exact: Vec<f64> = (0..4).map(|l| p.obs[l] - z[l] * z[l]).collect();
        let ens =
            EnsembleMatrix::from_members(&[layout.pack(&z, &exact).unwrap(), layout.pack(&z, &[0.0; 4]).unwrap()])
                .unwrap();
        let d = mismatch_difference(&ens, layout, &p, None, &Clustering::Single).unwrap();
        let plain: Vec<f64> = z.iter().map(|v| v * v).collect();
        let full = mismatch_unchecked(&p.obs, &plain, &p.obs_var);
        assert!(full > 0.0);
        assert_abs_diff_eq!(d[0], full, epsilon = 1e-9 * full);
        assert_eq!(d[1], 0.0);

        // hand values on three gridblocks
        let r = Field::new(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        let q = DaProblem {
            reference: r,
            obs: vec![1.0, 2.0, 3.0],
            obs_var: vec![1.0, 0.5, 2.0],
            scenario: Scenario::Imperfect,
        };
        let l3 = AugmentedLayout { m_z: 3, n_cp: 0, mec: Mec::Bias };
        let e =
            EnsembleMatrix::from_members(&[vec![0.0, 1.0, 2.0, 0.5, 0.5, -0.5], vec![0.0, 1.0, 2.0, 0.0, 0.0, 0.0]])
                .unwrap();
        let d = mismatch_difference(&e, l3, &q, None, &Clustering::Single).unwrap();
        // residuals without: 1, 1, -1 -> 1 + 2 + 0.5; with: 0.5, 0.5, -0.5 -> 0.25 + 0.5 + 0.125
        assert_abs_diff_eq!(d[0], 3.5 - 0.875, epsilon = 1e-14);
    }

    #[test]
    fn bias_ensemble_statistics() {
        let z = DMatrix::from_element(3, 5, 0.7);
        let p = DaProblem {
            reference: Field::new(3, 1, vec![0.0; 3]).unwrap(),
            obs: vec![1.0, 2.0, 3.0],
            obs_var: vec![1.0; 3],
            scenario: Scenario::Imperfect,
        };
        let b = init_bias_ensemble(&p, &z, 1).unwrap();
        for j in 0..5 {
            for l in 0..3 {
                assert_eq!(b[(l, j)], p.obs[l] - 0.7 * 0.7);
            }
        }

        let a = DMatrix::from_fn(10, 6, |i, j| ((i * 3 + j * 5) % 7) as f64 * 0.2 - 0.6);
        let mean: Vec<f64> = (0..10).map(|i| i as f64 * 0.5 + 1.0).collect();
        let s = sample_low_rank(&mean, &a, 10_000, 4);
        let m = s.column_mean();
        let err = (0..10).map(|i| (m[i] - mean[i]).powi(2)).sum::<f64>().sqrt();
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / norm < 0.02);
        let mut c = s.clone();
        for mut col in c.column_iter_mut() {
            col -= &m;
        }
        let cov = &c * c.transpose() / (10_000.0 - 1.0);
        let target = &a * a.transpose();
        assert!((cov - &target).norm() / target.norm() < 0.1);
    }

    fn small_cfg(mec: Mec, scenario: Scenario) -> DaConfig {
        DaConfig {
            nx: 12,
            ny: 10,
            reference_cov: CovarianceSpec { sigma: 2.0, len_x: 3.0, len_y: 5.0 },
            initial_cov: CovarianceSpec { sigma: 2.2, len_x: 3.4, len_y: 4.6 },
            n_e: 30,
            n_cp: 20,
            n_neighbors: 5,
            scenario,
            mec,
            ies: IesConfig { max_outer: 4, ..IesConfig::default() },
            ..DaConfig::default()
        }
    }

    #[test]
    fn zero_weights_track_uncorrected_run() {
        let none = small_cfg(Mec::None, Scenario::Imperfect);
        let p = none.problem(5).unwrap();
        let z0 = none.initial_models(5).unwrap();
        let a = run_da(&p, &z0, &none, 5).unwrap();
        let k = DaConfig { mec: Mec::Kernel { n_cl: 1 }, zero_weights: true, ..none };
        let b = run_da(&p, &z0, &k, 5).unwrap();
        assert_eq!(a.history.records.len(), b.history.records.len());
        for (ra, rb) in a.history.records.iter().zip(&b.history.records) {
            for (x, y) in ra.mismatch.iter().zip(&rb.mismatch) {
                assert!((x - y).abs() <= 1e-9 * x.abs(), "{x} {y}");
            }
        }
        assert!(b.dmdiff.iter().flatten().all(|d| *d == 0.0));
    }

    #[test]
    fn kernel_run_shapes_and_audits() {
        let cfg = small_cfg(Mec::Kernel { n_cl: 2 }, Scenario::Imperfect);
        let p = cfg.problem(2).unwrap();
        let z0 = cfg.initial_models(2).unwrap();
        let r = run_da(&p, &z0, &cfg, 2).unwrap();
        assert_eq!(r.layout.len(), 120 + 2 * 60);
        assert_eq!(r.rmse.len(), r.history.records.len());
        assert_eq!(r.dmdiff.len(), r.history.records.len());
        assert!(r.audits().iter().all(|a| a.passed), "{:?}", r.audits());
        let again = run_da(&p, &z0, &cfg, 2).unwrap();
        assert_eq!(r.final_ensemble, again.final_ensemble);

        let cl = Clustering::Current(r.gmm.clone().unwrap());
        let d = mismatch_difference(&r.final_ensemble, r.layout, &p, r.cdata.as_ref(), &cl).unwrap();
        for (x, y) in d.iter().zip(r.dmdiff.last().unwrap()) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn bias_run_writes_outputs() {
        let cfg = small_cfg(Mec::Bias, Scenario::Imperfect);
        let p = cfg.problem(3).unwrap();
        let z0 = cfg.initial_models(3).unwrap();
        let r = run_da(&p, &z0, &cfg, 3).unwrap();
        let dir = std::env::temp_dir().join(format!("ensda-da-{}", std::process::id()));
        let s = r.write_outputs(&dir, &p, &cfg).unwrap();
        assert_eq!(s.mec, "bias");
        for f in ["da_history.csv", "da_mean_field_initial.csv", "da_mean_field_final.csv", "da_summary.json"] {
            assert!(dir.join(f).exists(), "{f}");
        }
        assert!(!dir.join("da_dmdiff.csv").exists());
        std::fs::remove_dir_all(dir).unwrap();
    }
}

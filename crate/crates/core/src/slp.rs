//! Supervised-learning experiments: learn the residual `f - g` between a true
//! response `f(x) = sqrt(|x|^3 + 1)` and an imperfect simulator `g(x) = x^2`
//! from noisy samples, with one kernel-model ensemble per input cluster.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gmm::{fit_gmm, Component, GmmModel};
use crate::io;
use crate::kernel_init::{init_slp_ensemble, Draws, InitDiagnostics};
use crate::kernels::{model_1d_flat, CenterSet1D};
use crate::metrics::box_stats;
use crate::rng::{mix, stream, tag};
use crate::smoother::{evaluate_ensemble, run_ies_observed, EnsembleMatrix, ForwardModel, IesConfig, IesHistory};

pub fn truth(x: f64) -> f64 {
    (x.abs().powi(3) + 1.0).sqrt()
}

pub fn simulator(x: f64) -> f64 {
    x * x
}

/// Ten percent of the response, floored at `1e-6`.
pub fn noise_std(response: f64) -> f64 {
    (0.1 * response.abs()).max(1e-6)
}

/// Number of points on the evaluation grid `-10, -9.9, ..., 10`.
pub const GRID_LEN: usize = 201;

pub fn grid_point(i: usize) -> f64 {
    (i as f64 - 100.0) / 10.0
}

pub fn grid() -> Vec<f64> {
    (0..GRID_LEN).map(grid_point).collect()
}

/// One Gaussian component of the input distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputMode {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl FromStr for InputMode {
    type Err = Error;

    /// Parses `mean,std,count`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || Error::InvalidArgument(format!("expected `mean,std,count`, got `{s}`"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let mean: f64 = parts[0].parse().map_err(|_| bad())?;
        let std: f64 = parts[1].parse().map_err(|_| bad())?;
        let count: usize = parts[2].parse().map_err(|_| bad())?;
        Ok(Self { mean, std, count })
    }
}

/// Parses `;`-separated modes, e.g. `-5,1,10000;5,1,10000`.
pub fn parse_modes(s: &str) -> Result<Vec<InputMode>> {
    s.split(';').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlpDataset {
    pub inputs: Vec<f64>,
    /// Noisy residuals `f(x) + noise - g(x)`.
    pub labels: Vec<f64>,
    pub noise_std: Vec<f64>,
}

impl SlpDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: idx.iter().map(|&i| self.inputs[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            noise_std: idx.iter().map(|&i| self.noise_std[i]).collect(),
        }
    }

    pub fn obs_var(&self) -> Vec<f64> {
        self.noise_std.iter().map(|s| s * s).collect()
    }
}

pub fn gen_slp_data(modes: &[InputMode], seed: u64) -> Result<SlpDataset> {
    gen_slp_data_with(modes, seed, true)
}

/// As [`gen_slp_data`]; `noisy = false` drops the noise but keeps its scale.
pub fn gen_slp_data_with(modes: &[InputMode], seed: u64, noisy: bool) -> Result<SlpDataset> {
    if modes.is_empty() {
        return invalid("need at least one input mode");
    }
    let mut ds = SlpDataset { inputs: vec![], labels: vec![], noise_std: vec![] };
    for (m, mode) in modes.iter().enumerate() {
        if mode.count == 0 || !(mode.std > 0.0 && mode.mean.is_finite() && mode.std.is_finite()) {
            return invalid(format!("invalid input mode {mode:?}"));
        }
        let dist = Normal::new(mode.mean, mode.std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut rng = stream(seed, tag::SLP_DATA, m as u64);
        for _ in 0..mode.count {
            let x = dist.sample(&mut rng);
            let fx = truth(x);
            let sd = noise_std(fx);
            let e: f64 = rng.sample(StandardNormal);
            let noise = if noisy { sd * e } else { 0.0 };
            ds.inputs.push(x);
            ds.labels.push(fx + noise - simulator(x));
            ds.noise_std.push(sd);
        }
    }
    Ok(ds)
}

/// Random disjoint partition with `floor(frac * n)` training indices.
pub fn split_indices(n: usize, train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return invalid(format!("training fraction must lie in (0, 1), got {train_frac}"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, tag::SPLIT, 0));
    let n_train = (train_frac * n as f64).floor() as usize;
    let cv = idx.split_off(n_train);
    Ok((idx, cv))
}

pub fn split_dataset(ds: &SlpDataset, train_frac: f64, seed: u64) -> Result<(SlpDataset, SlpDataset)> {
    let (tr, cv) = split_indices(ds.len(), train_frac, seed)?;
    Ok((ds.subset(&tr), ds.subset(&cv)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlpConfig {
    pub n_cp: usize,
    /// Centers evenly span `[center_lo, center_hi)`.
    pub center_lo: f64,
    pub center_hi: f64,
    pub n_e: usize,
    pub train_frac: f64,
    pub ies: IesConfig,
    pub draws: Draws,
}

impl Default for SlpConfig {
    fn default() -> Self {
        Self {
            n_cp: 200,
            center_lo: -6.0,
            center_hi: 6.0,
            n_e: 100,
            train_frac: 0.8,
            ies: IesConfig::default(),
            draws: Draws::Random,
        }
    }
}

impl SlpConfig {
    pub fn centers(&self) -> Result<CenterSet1D> {
        CenterSet1D::uniform(self.center_lo, self.center_hi, self.n_cp)
    }
}

/// Kernel-model predictions at fixed inputs.
struct KernelForward<'a> {
    inputs: &'a [f64],
    centers: &'a [f64],
}

impl ForwardModel for KernelForward<'_> {
    fn n_obs(&self) -> usize {
        self.inputs.len()
    }

    fn simulate(&self, theta: &[f64], out: &mut [f64]) {
        for (o, &x) in out.iter_mut().zip(self.inputs) {
            *o = model_1d_flat(x, theta, self.centers);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClusterRun {
    pub ensemble: EnsembleMatrix,
    pub history: IesHistory,
    /// Responsibility-weighted cross-validation mismatch per member, one row
    /// per history record.
    pub cv_mismatch: Vec<Vec<f64>>,
    pub n_train: usize,
    pub init: InitDiagnostics,
}

#[derive(Debug, Clone)]
pub struct SlpRun {
    pub centers: CenterSet1D,
    pub gmm: GmmModel,
    pub clusters: Vec<ClusterRun>,
}

/// A single cluster covering every input.
pub fn train_unimodal(train: &SlpDataset, cv: &SlpDataset, cfg: &SlpConfig, seed: u64) -> Result<SlpRun> {
    train_with_gmm(train, cv, single_component(&train.inputs)?, cfg, seed)
}

/// Fits an `n_cl`-component mixture on the training inputs, hard-assigns each
/// point to its most probable component and trains the clusters in order of
/// ascending mean. With `n_cl = 1` this is exactly [`train_unimodal`].
pub fn train_mmls(train: &SlpDataset, cv: &SlpDataset, n_cl: usize, cfg: &SlpConfig, seed: u64) -> Result<SlpRun> {
    if n_cl == 0 {
        return invalid("need at least one cluster");
    }
    let gmm = if n_cl == 1 {
        single_component(&train.inputs)?
    } else {
        fit_gmm(&train.inputs, n_cl, 500, 1e-7, mix(seed, tag::GMM, 0))?
    };
    train_with_gmm(train, cv, gmm, cfg, seed)
}

fn single_component(inputs: &[f64]) -> Result<GmmModel> {
    if inputs.is_empty() {
        return invalid("empty training set");
    }
    let (mu, sd) = crate::metrics::mean_std(inputs);
    GmmModel::new(vec![Component { w: 1.0, mu, var: (sd * sd).max(f64::MIN_POSITIVE) }])
}

fn has_spread(xs: &[f64]) -> bool {
    if xs.is_empty() {
        return false;
    }
    let (mu, sd) = crate::metrics::mean_std(xs);
    sd > 1e-12 * mu.abs().max(1.0)
}

fn assign_all(gmm: &GmmModel, inputs: &[f64]) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); gmm.n_components()];
    for (i, &x) in inputs.iter().enumerate() {
        groups[gmm.assign(x)].push(i);
    }
    groups
}

fn train_with_gmm(
    train: &SlpDataset,
    cv: &SlpDataset,
    mut gmm: GmmModel,
    cfg: &SlpConfig,
    seed: u64,
) -> Result<SlpRun> {
    let centers = cfg.centers()?;
    let mut groups = assign_all(&gmm, &train.inputs);
    // a component whose training points have no spread (none, or a single
    // repeated input) cannot seed kernel scales; dropping it hands its input
    // range to the neighbouring components
    while let Some(bad) = groups.iter().position(|g| !has_spread(&train.subset(g).inputs)) {
        if gmm.n_components() == 1 {
            return invalid("training inputs have zero spread");
        }
        log::warn!(
            "cluster {bad} received {} training point(s) without spread; merging it into its neighbours",
            groups[bad].len()
        );
        gmm = gmm.without(bad)?;
        groups = assign_all(&gmm, &train.inputs);
    }

    let mut clusters = Vec::with_capacity(gmm.n_components());
    for (s, idx) in groups.iter().enumerate() {
        let part = train.subset(idx);
        let cv_weights: Vec<f64> = cv.inputs.iter().map(|&x| gmm.responsibilities(x).probs[s]).collect();
        let run = train_cluster(&part, cv, &cv_weights, &centers, cfg, mix(seed, tag::CLUSTER, s as u64))?;
        log::info!(
            "cluster {s}: {} points, {} outer steps, stop = {:?}",
            part.len(),
            run.history.final_record().iter,
            run.history.stop_reason
        );
        clusters.push(run);
    }
    Ok(SlpRun { centers, gmm, clusters })
}

fn train_cluster(
    part: &SlpDataset,
    cv: &SlpDataset,
    cv_weights: &[f64],
    centers: &CenterSet1D,
    cfg: &SlpConfig,
    seed: u64,
) -> Result<ClusterRun> {
    let (theta0, init) = init_slp_ensemble(&part.inputs, &part.labels, centers, cfg.n_e, seed, cfg.draws)?;
    let init_ens = EnsembleMatrix::new(theta0)?;
    let forward = KernelForward { inputs: &part.inputs, centers: centers.as_slice() };
    let cv_forward = KernelForward { inputs: &cv.inputs, centers: centers.as_slice() };
    let cv_var = cv.obs_var();
    let mut cv_series = Vec::new();
    let (ensemble, history) =
        run_ies_observed(&forward, &init_ens, &part.labels, &part.obs_var(), &cfg.ies, |_, ens| {
            cv_series.push(weighted_mismatch(&cv_forward, ens, &cv.labels, &cv_var, cv_weights));
        })?;
    Ok(ClusterRun { ensemble, history, cv_mismatch: cv_series, n_train: part.len(), init })
}

fn weighted_mismatch(
    forward: &KernelForward<'_>,
    ens: &EnsembleMatrix,
    labels: &[f64],
    var: &[f64],
    weights: &[f64],
) -> Vec<f64> {
    if labels.is_empty() {
        return vec![0.0; ens.n_e()];
    }
    let preds = evaluate_ensemble(forward, ens);
    preds
        .column_iter()
        .map(|p| {
            p.iter()
                .zip(labels)
                .zip(var)
                .zip(weights)
                .map(|(((h, y), v), w)| {
                    let r = w * (y - h);
                    r * r / v
                })
                .sum()
        })
        .collect()
}

/// Cross-validation mismatch of one cluster's final ensemble, with residuals
/// weighted by the cluster responsibility.
pub fn cv_mismatch_clustered(cv: &SlpDataset, run: &SlpRun, cluster: usize) -> Result<Vec<f64>> {
    let Some(c) = run.clusters.get(cluster) else {
        return invalid(format!("run has {} clusters, asked for {cluster}", run.clusters.len()));
    };
    let weights: Vec<f64> = cv.inputs.iter().map(|&x| run.gmm.responsibilities(x).probs[cluster]).collect();
    let forward = KernelForward { inputs: &cv.inputs, centers: run.centers.as_slice() };
    Ok(weighted_mismatch(&forward, &c.ensemble, &cv.labels, &cv.obs_var(), &weights))
}

/// Corrected predictions `g(x) + sum_s P_s(x) h_s(x)` on the evaluation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPrediction {
    pub x: Vec<f64>,
    /// `GRID_LEN x n_e`.
    pub members: DMatrix<f64>,
    pub mean: Vec<f64>,
}

impl GridPrediction {
    /// Mean absolute error of the mean curve against `f` over grid points
    /// with `lo <= x <= hi`.
    pub fn mean_abs_error(&self, lo: f64, hi: f64) -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for (x, m) in self.x.iter().zip(&self.mean) {
            if *x >= lo - 1e-9 && *x <= hi + 1e-9 {
                total += (m - truth(*x)).abs();
                n += 1;
            }
        }
        total / n as f64
    }

    pub fn grid_error(&self) -> f64 {
        self.mean_abs_error(f64::NEG_INFINITY, f64::INFINITY)
    }
}

/// Error of the uncorrected simulator over grid points in `[lo, hi]`.
pub fn baseline_abs_error(lo: f64, hi: f64) -> f64 {
    let pts: Vec<f64> = grid().into_iter().filter(|x| *x >= lo - 1e-9 && *x <= hi + 1e-9).collect();
    pts.iter().map(|&x| (simulator(x) - truth(x)).abs()).sum::<f64>() / pts.len() as f64
}

pub fn eval_grid(run: &SlpRun) -> GridPrediction {
    eval_at(run, &grid())
}

fn eval_at(run: &SlpRun, xs: &[f64]) -> GridPrediction {
    let n_e = run.clusters[0].ensemble.n_e();
    let centers = run.centers.as_slice();
    let resp: Vec<Vec<f64>> = xs.iter().map(|&x| run.gmm.responsibilities(x).probs).collect();
    let mut members = DMatrix::from_fn(xs.len(), n_e, |i, _| simulator(xs[i]));
    for (s, c) in run.clusters.iter().enumerate() {
        for j in 0..n_e {
            let theta = c.ensemble.member(j);
            for (i, &x) in xs.iter().enumerate() {
                let p = resp[i][s];
                if p != 0.0 {
                    members[(i, j)] += p * model_1d_flat(x, theta, centers);
                }
            }
        }
    }
    let mean = members.column_mean().as_slice().to_vec();
    GridPrediction { x: xs.to_vec(), members, mean }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlpSummary {
    pub n_train: usize,
    pub n_cv: usize,
    pub n_clusters: usize,
    pub gmm: GmmModel,
    pub grid_error: f64,
    pub baseline_grid_error: f64,
    pub clusters: Vec<ClusterSummary>,
    pub audits: Vec<Audit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub n_train: usize,
    pub stop_reason: crate::smoother::StopReason,
    pub iterations: usize,
    pub initial_train_mismatch: crate::metrics::BoxStats,
    pub final_train_mismatch: crate::metrics::BoxStats,
    pub final_cv_mismatch: crate::metrics::BoxStats,
}

/// A named invariant check on a finished run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Audit {
    pub name: String,
    pub passed: bool,
}

impl SlpRun {
    pub fn audits(&self, train: &SlpDataset) -> Vec<Audit> {
        let mut out = Vec::new();
        let n: usize = self.clusters.iter().map(|c| c.n_train).sum();
        out.push(Audit { name: "clusters_partition_training_set".into(), passed: n == train.len() });
        out.push(Audit {
            name: "cluster_count_matches_mixture".into(),
            passed: self.clusters.len() == self.gmm.n_components(),
        });
        for (s, c) in self.clusters.iter().enumerate() {
            let recs = &c.history.records;
            let first = recs[0].mean_mismatch;
            let last = c.history.final_record().mean_mismatch;
            out.push(Audit { name: format!("cluster_{s}_final_not_above_initial"), passed: last <= first });
            let accepted_ok = recs.windows(2).all(|w| !w[1].accepted || w[1].mean_mismatch <= w[0].mean_mismatch);
            out.push(Audit { name: format!("cluster_{s}_accepted_steps_decrease"), passed: accepted_ok });
        }
        out
    }

    pub fn summary(&self, train: &SlpDataset, cv: &SlpDataset) -> Result<SlpSummary> {
        let grid = eval_grid(self);
        let mut clusters = Vec::new();
        for c in &self.clusters {
            let f = c.history.final_record();
            clusters.push(ClusterSummary {
                n_train: c.n_train,
                stop_reason: c.history.stop_reason,
                iterations: f.iter,
                initial_train_mismatch: box_stats(&c.history.records[0].mismatch)?,
                final_train_mismatch: box_stats(&f.mismatch)?,
                final_cv_mismatch: box_stats(c.cv_mismatch.last().expect("observer runs at least once"))?,
            });
        }
        Ok(SlpSummary {
            n_train: train.len(),
            n_cv: cv.len(),
            n_clusters: self.clusters.len(),
            gmm: self.gmm.clone(),
            grid_error: grid.grid_error(),
            baseline_grid_error: baseline_abs_error(f64::NEG_INFINITY, f64::INFINITY),
            clusters,
            audits: self.audits(train),
        })
    }

    /// Writes `slp_mismatch.csv`, `slp_grid.csv`, `slp_params.csv` and
    /// `slp_summary.json` into `dir`.
    pub fn write_outputs(&self, dir: &Path, train: &SlpDataset, cv: &SlpDataset) -> Result<SlpSummary> {
        let mut mm = String::from("iter,cluster,member,train_mismatch,cv_mismatch\n");
        for (s, c) in self.clusters.iter().enumerate() {
            for (r, cvm) in c.history.records.iter().zip(&c.cv_mismatch) {
                for (j, (t, v)) in r.mismatch.iter().zip(cvm).enumerate() {
                    let _ = writeln!(mm, "{},{s},{j},{t:e},{v:e}", r.iter);
                }
            }
        }
        io::write_text(dir.join("slp_mismatch.csv"), &mm)?;

        let grid = eval_grid(self);
        let mut gs = String::from("x,member,prediction\n");
        for (i, x) in grid.x.iter().enumerate() {
            for j in 0..grid.members.ncols() {
                let _ = writeln!(gs, "{x},{j},{:e}", grid.members[(i, j)]);
            }
            let _ = writeln!(gs, "{x},mean,{:e}", grid.mean[i]);
        }
        io::write_text(dir.join("slp_grid.csv"), &gs)?;

        let mut ps = format!("cluster,member,{}\n", io::params_header(self.centers.len(), 1));
        for (s, c) in self.clusters.iter().enumerate() {
            for j in 0..c.ensemble.n_e() {
                let col = DMatrix::from_column_slice(c.ensemble.n_var(), 1, c.ensemble.member(j));
                io::push_param_rows(&mut ps, &format!("{s},{j}"), &col);
            }
        }
        io::write_text(dir.join("slp_params.csv"), &ps)?;

        let summary = self.summary(train, cv)?;
        io::write_json(dir.join("slp_summary.json"), &summary)?;
        Ok(summary)
    }
}

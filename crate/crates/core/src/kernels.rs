//! Gaussian RBF kernel models.
//!
//! Univariate: `h(x) = sum_k c_k exp(-beta_k^2 (x - x_k)^2 / 2)`.
//! Multivariate with `m` input axes: the exponent becomes
//! `(1 / 2m) sum_l beta_{k,l}^2 (x_l - x_{k,l})^2`.
//! Scales enter squared only, so their sign is irrelevant.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::gmm::GmmModel;

/// Exponent arguments below this evaluate to exactly zero.
pub const UNDERFLOW_ARG: f64 = -700.0;

#[inline]
pub(crate) fn exp_floor(arg: f64) -> f64 {
    if arg < UNDERFLOW_ARG {
        0.0
    } else {
        arg.exp()
    }
}

#[inline]
pub fn eval_kernel_1d(x: f64, center: f64, beta: f64) -> f64 {
    let d = x - center;
    exp_floor(-beta * beta * d * d * 0.5)
}

pub fn eval_kernel_md(x: &[f64], center: &[f64], betas: &[f64]) -> Result<f64> {
    let m = x.len();
    if m == 0 || center.len() != m || betas.len() != m {
        return invalid(format!(
            "kernel inputs need equal nonzero lengths, got x={}, center={}, beta={}",
            x.len(),
            center.len(),
            betas.len()
        ));
    }
    let s: f64 = x.iter().zip(center).zip(betas).map(|((a, c), b)| b * b * (a - c) * (a - c)).sum();
    Ok(exp_floor(-s / (2.0 * m as f64)))
}

/// Fixed, strictly increasing center points of a univariate model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterSet1D {
    centers: Vec<f64>,
}

impl CenterSet1D {
    pub fn new(centers: Vec<f64>) -> Result<Self> {
        if centers.is_empty() {
            return invalid("center set must not be empty");
        }
        if centers.iter().any(|c| !c.is_finite()) || centers.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("centers must be finite and strictly increasing");
        }
        Ok(Self { centers })
    }

    /// `n` points evenly spanning the half-open interval `[lo, hi)`.
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n == 0 || !(hi > lo) {
            return invalid(format!("cannot span [{lo}, {hi}) with {n} points"));
        }
        let step = (hi - lo) / n as f64;
        Self::new((0..n).map(|k| lo + k as f64 * step).collect())
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.centers
    }
}

/// Weights and scales of a univariate model. As a flat parameter vector the
/// layout is `[c_1..c_n | beta_1..beta_n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams1D {
    pub weights: Vec<f64>,
    pub scales: Vec<f64>,
}

impl KernelParams1D {
    pub fn new(weights: Vec<f64>, scales: Vec<f64>) -> Result<Self> {
        if weights.len() != scales.len() {
            return invalid(format!("{} weights but {} scales", weights.len(), scales.len()));
        }
        if weights.iter().chain(&scales).any(|v| !v.is_finite()) {
            return invalid("kernel parameters must be finite");
        }
        Ok(Self { weights, scales })
    }

    pub fn from_flat(theta: &[f64]) -> Result<Self> {
        if !theta.len().is_multiple_of(2) {
            return invalid(format!("flat 1D parameter vector has odd length {}", theta.len()));
        }
        let n = theta.len() / 2;
        Self::new(theta[..n].to_vec(), theta[n..].to_vec())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        v.extend_from_slice(&self.scales);
        v
    }

    pub fn n_centers(&self) -> usize {
        self.weights.len()
    }
}

/// Evaluates a univariate model given its flat `[c | beta]` parameter slice.
/// Shapes are not checked; callers validate once up front.
#[inline]
pub(crate) fn model_1d_flat(x: f64, theta: &[f64], centers: &[f64]) -> f64 {
    let n = centers.len();
    let (c, b) = theta.split_at(n);
    let mut acc = 0.0;
    for k in 0..n {
        if c[k] != 0.0 {
            acc += c[k] * eval_kernel_1d(x, centers[k], b[k]);
        }
    }
    acc
}

pub fn eval_model_1d(x: f64, params: &KernelParams1D, centers: &CenterSet1D) -> Result<f64> {
    if params.weights.len() != centers.len() || params.scales.len() != centers.len() {
        return invalid(format!(
            "model has {} weights / {} scales for {} centers",
            params.weights.len(),
            params.scales.len(),
            centers.len()
        ));
    }
    let c = centers.as_slice();
    Ok(params.weights.iter().zip(&params.scales).zip(c).map(|((w, b), xc)| w * eval_kernel_1d(x, *xc, *b)).sum())
}

/// Weights and per-axis scales of a multivariate model. Flat layout:
/// `[c_1..c_n | beta_{1,1}..beta_{n,1} | ... | beta_{1,m}..beta_{n,m}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParamsMD {
    pub weights: Vec<f64>,
    /// `scales[k][l]` is the scale of center `k` along axis `l`.
    pub scales: Vec<Vec<f64>>,
}

impl KernelParamsMD {
    pub fn new(weights: Vec<f64>, scales: Vec<Vec<f64>>) -> Result<Self> {
        if scales.len() != weights.len() {
            return invalid(format!("{} weights but {} scale rows", weights.len(), scales.len()));
        }
        let m = scales.first().map_or(1, Vec::len);
        if m == 0 || scales.iter().any(|r| r.len() != m) {
            return invalid("scale rows must share a nonzero length");
        }
        if weights.iter().chain(scales.iter().flatten()).any(|v| !v.is_finite()) {
            return invalid("kernel parameters must be finite");
        }
        Ok(Self { weights, scales })
    }

    pub fn dim(&self) -> usize {
        self.scales.first().map_or(0, Vec::len)
    }

    pub fn n_centers(&self) -> usize {
        self.weights.len()
    }

    /// Number of scalar parameters, `(m + 1) * n_centers`.
    pub fn cardinality(&self) -> usize {
        (self.dim() + 1) * self.n_centers()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let n = self.n_centers();
        let m = self.dim();
        let mut v = Vec::with_capacity((m + 1) * n);
        v.extend_from_slice(&self.weights);
        for l in 0..m {
            v.extend(self.scales.iter().map(|row| row[l]));
        }
        v
    }

    pub fn from_flat(theta: &[f64], m: usize) -> Result<Self> {
        if m == 0 || !theta.len().is_multiple_of(m + 1) {
            return invalid(format!("flat vector of length {} does not fit m = {m}", theta.len()));
        }
        let n = theta.len() / (m + 1);
        let weights = theta[..n].to_vec();
        let scales = (0..n).map(|k| (0..m).map(|l| theta[n * (l + 1) + k]).collect()).collect();
        Self::new(weights, scales)
    }
}

/// Center points for the data-assimilation residual model: model-value
/// centers and the observation value associated with each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterDataDA {
    pub z_cp: Vec<f64>,
    pub d_cp: Vec<f64>,
}

impl CenterDataDA {
    pub fn new(z_cp: Vec<f64>, d_cp: Vec<f64>) -> Result<Self> {
        if z_cp.len() != d_cp.len() || z_cp.is_empty() {
            return invalid(format!("center data lengths {} and {} must match and be nonzero", z_cp.len(), d_cp.len()));
        }
        if z_cp.iter().chain(&d_cp).any(|v| !v.is_finite()) {
            return invalid("center data must be finite");
        }
        Ok(Self { z_cp, d_cp })
    }

    pub fn len(&self) -> usize {
        self.z_cp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z_cp.is_empty()
    }
}

/// Residual correction at one gridblock, from a flat `m = 2` parameter slice.
/// The augmented input is `[z, d_o - g(z)]` and the center is
/// `[z_cp, d_o - d_cp]`.
#[inline]
pub(crate) fn residual_da_flat(z: f64, d_o: f64, g_of_z: f64, eta: &[f64], cdata: &CenterDataDA) -> f64 {
    let n = cdata.z_cp.len();
    let c = &eta[..n];
    let bz = &eta[n..2 * n];
    let br = &eta[2 * n..3 * n];
    let resid = d_o - g_of_z;
    let mut acc = 0.0;
    for k in 0..n {
        if c[k] == 0.0 {
            continue;
        }
        let dz = z - cdata.z_cp[k];
        let dr = resid - (d_o - cdata.d_cp[k]);
        let s = bz[k] * bz[k] * dz * dz + br[k] * br[k] * dr * dr;
        acc += c[k] * exp_floor(-s * 0.25);
    }
    acc
}

pub fn eval_residual_da(z: f64, d_o: f64, g_of_z: f64, eta: &KernelParamsMD, cdata: &CenterDataDA) -> Result<f64> {
    if eta.dim() != 2 {
        return invalid(format!("residual model needs m = 2, got {}", eta.dim()));
    }
    if eta.n_centers() != cdata.len() {
        return invalid(format!("{} kernel centers but {} center data points", eta.n_centers(), cdata.len()));
    }
    Ok(residual_da_flat(z, d_o, g_of_z, &eta.to_flat(), cdata))
}

/// Responsibility-weighted mixture of per-cluster univariate models.
pub fn predict_mixture(
    x: f64,
    gmm: &GmmModel,
    cluster_params: &[KernelParams1D],
    centers: &CenterSet1D,
) -> Result<f64> {
    if cluster_params.len() != gmm.n_components() {
        return invalid(format!(
            "{} cluster models for {} mixture components",
            cluster_params.len(),
            gmm.n_components()
        ));
    }
    let p = gmm.responsibilities(x);
    let mut acc = 0.0;
    for (ps, params) in p.probs.iter().zip(cluster_params) {
        acc += ps * eval_model_1d(x, params, centers)?;
    }
    Ok(acc)
}

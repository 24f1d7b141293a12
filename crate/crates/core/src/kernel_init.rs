//! Initial ensembles of kernel parameters.
//!
//! Scales are log-normal around the inverse spread of the inputs. Weights come
//! from a regularized one-point fit: member `j` picks one training pair
//! `(x, dy)` and sets `c = dy K / (alpha + K^T K)` with
//! `alpha = exp(xi) K^T K`, so that at `xi = 0` the member predicts exactly
//! `dy / 2` at its anchor.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::exec;
use crate::gmm::GmmModel;
use crate::kernels::{eval_kernel_1d, exp_floor, CenterDataDA, CenterSet1D};
use crate::rng::{stream, tag};

/// Whether the normal draws are random or pinned at zero (for audits).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Draws {
    #[default]
    Random,
    Zero,
}

impl Draws {
    fn normal<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            Self::Random => rng.sample(StandardNormal),
            Self::Zero => 0.0,
        }
    }
}

/// How one member (and, in the clustered case, one cluster) was initialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberInit {
    pub member: usize,
    pub cluster: usize,
    /// Training pair (or gridblock) used as anchor.
    pub pair_index: usize,
    pub xi: f64,
    pub alpha: f64,
    /// Every kernel underflowed at the anchor, so the weights were zeroed.
    pub zero_kernel: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InitDiagnostics {
    pub members: Vec<MemberInit>,
}

impl InitDiagnostics {
    pub fn zero_kernel_count(&self) -> usize {
        self.members.iter().filter(|m| m.zero_kernel).count()
    }
}

/// `n_cp x n_e` matrix of `exp(xi) / sigma_ti`.
pub fn init_beta_ensemble(sigma_ti: f64, n_cp: usize, n_e: usize, seed: u64) -> Result<DMatrix<f64>> {
    init_beta_ensemble_with(sigma_ti, n_cp, n_e, seed, Draws::Random)
}

pub fn init_beta_ensemble_with(
    sigma_ti: f64,
    n_cp: usize,
    n_e: usize,
    seed: u64,
    draws: Draws,
) -> Result<DMatrix<f64>> {
    if !(sigma_ti.is_finite() && sigma_ti > 0.0) {
        return invalid(format!("input spread must be positive, got {sigma_ti}"));
    }
    let cols = exec::map_indexed(n_e, |j| beta_column(sigma_ti, n_cp, seed, j as u64, draws));
    let flat: Vec<f64> = cols.into_iter().flatten().collect();
    Ok(DMatrix::from_vec(n_cp, n_e, flat))
}

fn beta_column(sigma_ti: f64, n_cp: usize, seed: u64, index: u64, draws: Draws) -> Vec<f64> {
    let mut rng = stream(seed, tag::BETA, index);
    (0..n_cp).map(|_| draws.normal(&mut rng).exp() / sigma_ti).collect()
}

/// Result of a regularized one-point fit.
#[derive(Debug, Clone, PartialEq)]
pub struct OnePointFit {
    pub weights: Vec<f64>,
    pub alpha: f64,
    pub zero_kernel: bool,
}

/// `c = dy K / (alpha + K^T K)` with `alpha = exp(xi) K^T K`.
pub fn one_point_fit(kernel: &[f64], dy: f64, xi: f64) -> OnePointFit {
    let kk: f64 = kernel.iter().map(|k| k * k).sum();
    if kk == 0.0 {
        return OnePointFit { weights: vec![0.0; kernel.len()], alpha: 0.0, zero_kernel: true };
    }
    let alpha = xi.exp() * kk;
    let s = dy / (alpha + kk);
    OnePointFit { weights: kernel.iter().map(|k| s * k).collect(), alpha, zero_kernel: false }
}

/// One-point weights of a univariate model anchored at `(x, dy)`.
pub fn init_weight_vector(x: f64, dy: f64, betas: &[f64], centers: &CenterSet1D, xi: f64) -> Result<OnePointFit> {
    if betas.len() != centers.len() {
        return invalid(format!("{} scales for {} centers", betas.len(), centers.len()));
    }
    let k: Vec<f64> = centers.as_slice().iter().zip(betas).map(|(c, b)| eval_kernel_1d(x, *c, *b)).collect();
    let fit = one_point_fit(&k, dy, xi);
    if fit.zero_kernel {
        log::warn!("all kernels vanish at anchor x = {x}; weights set to zero");
    }
    Ok(fit)
}

/// Initial `[c | beta]` ensemble (`2 n_cp x n_e`) of a univariate model
/// trained on `(inputs, labels)`. Anchors are drawn without replacement when
/// there are at least as many pairs as members.
pub fn init_slp_ensemble(
    inputs: &[f64],
    labels: &[f64],
    centers: &CenterSet1D,
    n_e: usize,
    seed: u64,
    draws: Draws,
) -> Result<(DMatrix<f64>, InitDiagnostics)> {
    let n = inputs.len();
    if n == 0 || labels.len() != n {
        return invalid(format!("need matching nonempty inputs and labels, got {n} and {}", labels.len()));
    }
    let (mu_ti, sigma_ti) = crate::metrics::mean_std(inputs);
    if !(sigma_ti > 1e-12 * mu_ti.abs().max(1.0)) {
        return invalid("training inputs have zero spread");
    }
    let n_cp = centers.len();
    let betas = init_beta_ensemble_with(sigma_ti, n_cp, n_e, seed, draws)?;
    let pairs = anchor_indices(n, n_e, seed);

    let mut theta = DMatrix::zeros(2 * n_cp, n_e);
    let mut diag = InitDiagnostics::default();
    for (j, &i) in pairs.iter().enumerate() {
        let mut rng = stream(seed, tag::WEIGHT, j as u64);
        let xi = draws.normal(&mut rng);
        let b = betas.column(j);
        let fit = init_weight_vector(inputs[i], labels[i], b.as_slice(), centers, xi)?;
        let mut col = theta.column_mut(j);
        for k in 0..n_cp {
            col[k] = fit.weights[k];
            col[n_cp + k] = b[k];
        }
        diag.members.push(MemberInit {
            member: j,
            cluster: 0,
            pair_index: i,
            xi,
            alpha: fit.alpha,
            zero_kernel: fit.zero_kernel,
        });
    }
    Ok((theta, diag))
}

fn anchor_indices(n: usize, n_e: usize, seed: u64) -> Vec<usize> {
    let mut rng = stream(seed, tag::PAIR, 0);
    if n_e <= n {
        sample(&mut rng, n, n_e).into_vec()
    } else {
        (0..n_e).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Where data-assimilation members take their one-point anchor from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSource {
    /// Member `j`'s own model value at a random gridblock.
    #[default]
    Member,
    /// The ensemble-mean model value at a random gridblock.
    EnsembleMean,
}

/// Initial residual-model ensemble for data assimilation.
///
/// `z` holds the initial models (one per column). Returns a
/// `n_cl * 3 n_cp x n_e` matrix with one `[c | beta_z | beta_r]` block per
/// cluster. With a mixture, the anchor of cluster `s` is drawn among the
/// gridblocks whose value is assigned to `s` (any gridblock if none is).
#[allow(clippy::too_many_arguments)]
pub fn init_da_eta_ensemble(
    z: &DMatrix<f64>,
    obs: &[f64],
    g: fn(f64) -> f64,
    cdata: &CenterDataDA,
    gmm: Option<&GmmModel>,
    anchor: AnchorSource,
    seed: u64,
    draws: Draws,
) -> Result<(DMatrix<f64>, InitDiagnostics)> {
    let (m_z, n_e) = z.shape();
    if obs.len() != m_z || m_z == 0 || n_e == 0 {
        return invalid(format!("model size {m_z} and observation count {} must match", obs.len()));
    }
    let (mu_z, sigma_z) = crate::metrics::mean_std(z.as_slice());
    if !(sigma_z.is_finite() && sigma_z > 1e-12 * mu_z.abs().max(1.0)) {
        return invalid("initial models have degenerate pooled spread");
    }
    let mean_z = z.column_mean();
    let mean_resid: Vec<f64> =
        (0..m_z).map(|l| z.row(l).iter().map(|v| obs[l] - g(*v)).sum::<f64>() / n_e as f64).collect();
    let (mu_r, mut sigma_r) = crate::metrics::mean_std(&mean_resid);
    if !(sigma_r.is_finite() && sigma_r > 1e-12 * mu_r.abs().max(1.0)) {
        log::warn!("mean residuals have zero spread; residual-axis scales use unit spread");
        sigma_r = 1.0;
    }

    let n_cp = cdata.len();
    let n_cl = gmm.map_or(1, GmmModel::n_components);
    let block = 3 * n_cp;
    let per_member = exec::map_indexed(n_e, |j| {
        let mut col = vec![0.0; n_cl * block];
        let mut entries = Vec::with_capacity(n_cl);
        let mut pick_rng = stream(seed, tag::PAIR, j as u64);
        let mut xi_rng = stream(seed, tag::WEIGHT, j as u64);
        let source = match anchor {
            AnchorSource::Member => z.column(j).clone_owned(),
            AnchorSource::EnsembleMean => mean_z.clone(),
        };
        let labels = gmm.map(|m| source.iter().map(|v| m.assign(*v)).collect::<Vec<_>>());
        for s in 0..n_cl {
            let idx = (s * n_e + j) as u64;
            let bz = beta_column(sigma_z, n_cp, seed, 2 * idx, draws);
            let br = beta_column(sigma_r, n_cp, seed, 2 * idx + 1, draws);
            let l = match &labels {
                Some(lab) => {
                    let members: Vec<usize> = (0..m_z).filter(|&l| lab[l] == s).collect();
                    if members.is_empty() {
                        pick_rng.random_range(0..m_z)
                    } else {
                        members[pick_rng.random_range(0..members.len())]
                    }
                }
                None => pick_rng.random_range(0..m_z),
            };
            let zl = source[l];
            let gz = g(zl);
            let kernel: Vec<f64> = (0..n_cp)
                .map(|k| {
                    let dz = zl - cdata.z_cp[k];
                    let dr = cdata.d_cp[k] - gz;
                    exp_floor(-(bz[k] * bz[k] * dz * dz + br[k] * br[k] * dr * dr) * 0.25)
                })
                .collect();
            let xi = draws.normal(&mut xi_rng);
            let fit = one_point_fit(&kernel, obs[l] - gz, xi);
            let out = &mut col[s * block..(s + 1) * block];
            out[..n_cp].copy_from_slice(&fit.weights);
            out[n_cp..2 * n_cp].copy_from_slice(&bz);
            out[2 * n_cp..].copy_from_slice(&br);
            entries.push(MemberInit {
                member: j,
                cluster: s,
                pair_index: l,
                xi,
                alpha: fit.alpha,
                zero_kernel: fit.zero_kernel,
            });
        }
        (col, entries)
    });

    let mut eta = DMatrix::zeros(n_cl * block, n_e);
    let mut diag = InitDiagnostics::default();
    for (j, (col, entries)) in per_member.into_iter().enumerate() {
        eta.column_mut(j).copy_from_slice(&col);
        diag.members.extend(entries);
    }
    let zeroed = diag.zero_kernel_count();
    if zeroed > 0 {
        log::warn!("{zeroed} residual-model members had vanishing kernels at their anchor");
    }
    Ok((eta, diag))
}

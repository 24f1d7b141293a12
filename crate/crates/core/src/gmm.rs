//! One-dimensional Gaussian mixtures fitted by expectation-maximization.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub w: f64,
    pub mu: f64,
    pub var: f64,
}

impl Component {
    fn log_weighted_density(&self, x: f64) -> f64 {
        let d = x - self.mu;
        self.w.ln() - 0.5 * (2.0 * PI * self.var).ln() - 0.5 * d * d / self.var
    }
}

/// Mixture with components sorted by ascending mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGmm")]
pub struct GmmModel {
    components: Vec<Component>,
}

#[derive(Deserialize)]
struct RawGmm {
    components: Vec<Component>,
}

impl TryFrom<RawGmm> for GmmModel {
    type Error = Error;

    fn try_from(raw: RawGmm) -> Result<Self> {
        GmmModel::new(raw.components)
    }
}

/// Posterior cluster probabilities at one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub probs: Vec<f64>,
    /// Set when the posterior could not be evaluated and a one-hot vector on
    /// the nearest mean was returned instead.
    pub fallback: bool,
}

impl GmmModel {
    pub fn new(mut components: Vec<Component>) -> Result<Self> {
        if components.is_empty() {
            return invalid("mixture needs at least one component");
        }
        for c in &components {
            if !(c.w.is_finite() && c.w >= 0.0 && c.mu.is_finite() && c.var.is_finite() && c.var > 0.0) {
                return invalid(format!("invalid mixture component {c:?}"));
            }
        }
        let total: f64 = components.iter().map(|c| c.w).sum();
        if (total - 1.0).abs() > 1e-9 {
            return invalid(format!("mixture weights sum to {total}, not 1"));
        }
        components.sort_by(|a, b| a.mu.total_cmp(&b.mu));
        Ok(Self { components })
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn means(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.mu).collect()
    }

    pub fn log_density(&self, x: f64) -> f64 {
        log_sum_exp(self.components.iter().map(|c| c.log_weighted_density(x)))
    }

    /// Posterior probability of each component at `x`, computed in the log
    /// domain. A single-component model always yields exactly `[1.0]`.
    pub fn responsibilities(&self, x: f64) -> Responsibilities {
        let k = self.components.len();
        if k == 1 {
            return Responsibilities { probs: vec![1.0], fallback: false };
        }
        let mut probs = vec![0.0; k];
        if self.fill_responsibilities(x, &mut probs) {
            Responsibilities { probs, fallback: false }
        } else {
            let mut probs = vec![0.0; k];
            probs[self.nearest_mean(x)] = 1.0;
            Responsibilities { probs, fallback: true }
        }
    }

    /// Allocation-free variant; returns false if the fallback was needed, in
    /// which case `out` holds the one-hot vector.
    pub fn fill_responsibilities(&self, x: f64, out: &mut [f64]) -> bool {
        debug_assert_eq!(out.len(), self.components.len());
        if self.components.len() == 1 {
            out[0] = 1.0;
            return true;
        }
        let mut max = f64::NEG_INFINITY;
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.log_weighted_density(x);
            max = max.max(*o);
        }
        if !max.is_finite() {
            out.fill(0.0);
            out[self.nearest_mean(x)] = 1.0;
            return false;
        }
        let mut total = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
        true
    }

    fn nearest_mean(&self, x: f64) -> usize {
        self.components
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1.mu - x).abs().total_cmp(&(b.1.mu - x).abs()))
            .map_or(0, |(i, _)| i)
    }

    /// Index of the most probable component.
    pub fn assign(&self, x: f64) -> usize {
        let r = self.responsibilities(x);
        r.probs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(i, _)| i)
    }

    /// Removes a component and renormalizes the remaining weights.
    pub fn without(&self, index: usize) -> Result<Self> {
        if self.components.len() < 2 || index >= self.components.len() {
            return invalid("cannot remove the only component or an out-of-range one");
        }
        let mut comps = self.components.clone();
        comps.remove(index);
        let total: f64 = comps.iter().map(|c| c.w).sum();
        if total <= 0.0 {
            return Err(Error::DegenerateComponent("remaining components carry no weight".into()));
        }
        for c in &mut comps {
            c.w /= total;
        }
        GmmModel::new(comps)
    }
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + it.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmOptions {
    pub max_iter: usize,
    /// Stop when the log-likelihood gain falls below `rel_tol * |LL|`.
    pub rel_tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self { max_iter: 500, rel_tol: 1e-7, restarts: 5, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Log-likelihood after each EM iteration of the winning restart.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

/// Fits `n_cl` components with the default restart count.
pub fn fit_gmm(samples: &[f64], n_cl: usize, max_iter: usize, rel_tol: f64, seed: u64) -> Result<GmmModel> {
    let opts = GmmOptions { max_iter, rel_tol, seed, ..GmmOptions::default() };
    Ok(fit_gmm_traced(samples, n_cl, &opts)?.model)
}

pub fn fit_gmm_traced(samples: &[f64], n_cl: usize, opts: &GmmOptions) -> Result<GmmFit> {
    if n_cl == 0 {
        return invalid("need at least one mixture component");
    }
    if samples.len() < 10 * n_cl {
        return invalid(format!("{} samples are too few for {n_cl} components (need {})", samples.len(), 10 * n_cl));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return invalid("samples must be finite");
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::DegenerateComponent("samples have zero variance".into()));
    }
    let floor = 1e-6 * var;

    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let candidates = quantile_candidates(&sorted, 1000);

    let mut best: Option<GmmFit> = None;
    for restart in 0..opts.restarts.max(1) {
        let mut rng = rng::stream(opts.seed, tag::GMM, restart as u64);
        // one reseed is allowed when a component empties out
        let mut fit = None;
        for _attempt in 0..2 {
            let means = seed_means(&candidates, n_cl, &mut rng);
            if let Some(f) = run_em(samples, means, var, floor, opts) {
                fit = Some(f);
                break;
            }
        }
        let Some(fit) = fit else { continue };
        let ll = *fit.log_likelihood.last().unwrap_or(&f64::NEG_INFINITY);
        let better = best.as_ref().is_none_or(|b| ll > *b.log_likelihood.last().unwrap_or(&f64::NEG_INFINITY));
        if better {
            best = Some(fit);
        }
    }
    best.ok_or_else(|| Error::DegenerateComponent(format!("every restart emptied a component (n_cl = {n_cl})")))
}

fn quantile_candidates(sorted: &[f64], max: usize) -> Vec<f64> {
    let n = sorted.len();
    let m = n.min(max);
    (0..m).map(|i| sorted[((i as f64 + 0.5) / m as f64 * n as f64) as usize]).collect()
}

/// k-means++ seeding over the quantile candidates.
fn seed_means<R: Rng>(candidates: &[f64], k: usize, rng: &mut R) -> Vec<f64> {
    let mut means = vec![candidates[rng.random_range(0..candidates.len())]];
    let mut d2: Vec<f64> = candidates.iter().map(|c| (c - means[0]).powi(2)).collect();
    while means.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = candidates.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..candidates.len())
        };
        let m = candidates[pick];
        means.push(m);
        for (d, c) in d2.iter_mut().zip(candidates) {
            *d = d.min((c - m).powi(2));
        }
    }
    means
}

fn run_em(samples: &[f64], means: Vec<f64>, var: f64, floor: f64, opts: &GmmOptions) -> Option<GmmFit> {
    let k = means.len();
    let n = samples.len();
    let mut comps: Vec<Component> = means.into_iter().map(|mu| Component { w: 1.0 / k as f64, mu, var }).collect();
    let mut resp = vec![0.0; n * k];
    let mut trace = Vec::new();
    let mut converged = false;

    for _ in 0..opts.max_iter.max(1) {
        // E-step
        let mut ll = 0.0;
        for (i, &x) in samples.iter().enumerate() {
            let row = &mut resp[i * k..(i + 1) * k];
            let mut max = f64::NEG_INFINITY;
            for (r, c) in row.iter_mut().zip(&comps) {
                *r = c.log_weighted_density(x);
                max = max.max(*r);
            }
            let mut total = 0.0;
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                total += *r;
            }
            for r in row.iter_mut() {
                *r /= total;
            }
            ll += max + total.ln();
        }
        if let Some(&prev) = trace.last() {
            let gain: f64 = ll - prev;
            trace.push(ll);
            if gain < opts.rel_tol * ll.abs() {
                converged = true;
                break;
            }
        } else {
            trace.push(ll);
        }

        // M-step
        for (s, c) in comps.iter_mut().enumerate() {
            let mut nk = 0.0;
            let mut sx = 0.0;
            for (i, &x) in samples.iter().enumerate() {
                let r = resp[i * k + s];
                nk += r;
                sx += r * x;
            }
            if nk < 1e-10 * n as f64 {
                return None;
            }
            let mu = sx / nk;
            let mut sv = 0.0;
            for (i, &x) in samples.iter().enumerate() {
                sv += resp[i * k + s] * (x - mu).powi(2);
            }
            *c = Component { w: nk / n as f64, mu, var: (sv / nk).max(floor) };
        }
    }

    if !converged {
        log::debug!("EM stopped at max_iter = {} without meeting tolerance", opts.max_iter);
    }
    let total: f64 = comps.iter().map(|c| c.w).sum();
    for c in &mut comps {
        c.w /= total;
    }
    let model = GmmModel::new(comps).ok()?;
    // the trace ends on the likelihood of the parameters before the last
    // M-step; append the final parameters' value so it matches `model`
    let final_ll: f64 = samples.iter().map(|&x| model.log_density(x)).sum();
    if let Some(&last) = trace.last() {
        if final_ll.is_finite() && final_ll != last {
            trace.push(final_ll);
        }
    }
    Some(GmmFit { model, log_likelihood: trace, converged })
}

//! Stationary 2D Gaussian random fields.
//!
//! Covariance is squared-exponential,
//! `C(dx, dy) = sigma^2 * exp(-(dx/len_x)^2 - (dy/len_y)^2)`, with lags in
//! gridblocks. Sampling uses circulant embedding on a periodic grid padded to
//! a power of two of at least twice each dimension. If that embedding is not
//! nonnegative definite the padding is doubled (at most twice) and, for grids
//! up to 64x64, a dense eigen-factorization is used as the last resort.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::exec;
use crate::rng::{self, tag};

const NEGATIVE_MASS_TOL: f64 = 1e-8;
const EXTRA_DOUBLINGS: u32 = 2;
const DENSE_FALLBACK_MAX: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub sigma: f64,
    pub len_x: f64,
    pub len_y: f64,
}

impl CovarianceSpec {
    pub fn new(sigma: f64, len_x: f64, len_y: f64) -> Result<Self> {
        let spec = Self { sigma, len_x, len_y };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.sigma) && ok(self.len_x) && ok(self.len_y)) {
            return invalid(format!("covariance parameters must be positive and finite: {self:?}"));
        }
        Ok(())
    }

    pub fn eval(&self, dx: f64, dy: f64) -> f64 {
        let ax = dx / self.len_x;
        let ay = dy / self.len_y;
        self.sigma * self.sigma * (-(ax * ax) - ay * ay).exp()
    }
}

/// A scalar field on an `nx` by `ny` grid. `values[y * nx + x]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl Field {
    pub fn new(nx: usize, ny: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != nx * ny {
            return invalid(format!("field of {nx}x{ny} needs {} values, got {}", nx * ny, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return invalid("field values must be finite");
        }
        Ok(Self { nx, ny, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.nx + x]
    }

    /// CSV layout: `nx,ny` on the first line, then one value per line.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.values.len() * 24);
        let _ = writeln!(s, "{},{}", self.nx, self.ny);
        for v in &self.values {
            let _ = writeln!(s, "{v:e}");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::InvalidArgument("empty field file".into()))?;
        let dims: Vec<usize> = header
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("bad field header {header:?}: {e}")))?;
        if dims.len() != 2 {
            return invalid(format!("bad field header {header:?}"));
        }
        let values = lines
            .map(|l| l.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::InvalidArgument(format!("bad field value: {e}")))?;
        Field::new(dims[0], dims[1], values)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

enum Sampler {
    Circulant { mx: usize, my: usize, amplitude: Vec<f64> },
    Dense(DMatrix<f64>),
}

/// Precomputed sampler for one grid and covariance; draws are cheap after
/// construction.
pub struct FieldSimulator {
    nx: usize,
    ny: usize,
    sampler: Sampler,
}

impl FieldSimulator {
    pub fn new(nx: usize, ny: usize, cov: CovarianceSpec) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return invalid(format!("grid must be at least 2x2, got {nx}x{ny}"));
        }
        cov.validate()?;

        let mut mx = (2 * nx).next_power_of_two();
        let mut my = (2 * ny).next_power_of_two();
        let mut last_err = None;
        for _ in 0..=EXTRA_DOUBLINGS {
            match circulant_amplitude(mx, my, &cov) {
                Ok(amplitude) => return Ok(Self { nx, ny, sampler: Sampler::Circulant { mx, my, amplitude } }),
                Err(e) => last_err = Some(e),
            }
            mx *= 2;
            my *= 2;
        }
        if nx <= DENSE_FALLBACK_MAX && ny <= DENSE_FALLBACK_MAX {
            log::debug!("circulant embedding failed for {nx}x{ny}, using dense factorization");
            return Ok(Self { nx, ny, sampler: Sampler::Dense(dense_factor(nx, ny, &cov)) });
        }
        Err(last_err.expect("at least one embedding attempt"))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Field {
        let (nx, ny) = (self.nx, self.ny);
        let values = match &self.sampler {
            Sampler::Circulant { mx, my, amplitude } => {
                let mut buf: Vec<Complex64> = amplitude
                    .iter()
                    .map(|&a| {
                        let re: f64 = rng.sample(StandardNormal);
                        let im: f64 = rng.sample(StandardNormal);
                        Complex64::new(a * re, a * im)
                    })
                    .collect();
                fft2(&mut buf, *mx, *my);
                let mut out = Vec::with_capacity(nx * ny);
                for y in 0..ny {
                    for x in 0..nx {
                        out.push(buf[y * mx + x].re);
                    }
                }
                out
            }
            Sampler::Dense(factor) => {
                let xi = DVector::from_fn(factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
                (factor * xi).iter().copied().collect()
            }
        };
        Field { nx, ny, values }
    }
}

fn fft2(buf: &mut [Complex64], mx: usize, my: usize) {
    let mut planner = FftPlanner::<f64>::new();
    let fx = planner.plan_fft_forward(mx);
    let fy = planner.plan_fft_forward(my);
    for row in buf.chunks_mut(mx) {
        fx.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); my];
    for x in 0..mx {
        for y in 0..my {
            col[y] = buf[y * mx + x];
        }
        fy.process(&mut col);
        for y in 0..my {
            buf[y * mx + x] = col[y];
        }
    }
}

/// Returns `sqrt(lambda_k / N)` for the embedding eigenvalues, or an error if
/// the negative eigenvalues carry too much mass to clip.
fn circulant_amplitude(mx: usize, my: usize, cov: &CovarianceSpec) -> Result<Vec<f64>> {
    let n = mx * my;
    let mut base = Vec::with_capacity(n);
    for y in 0..my {
        let dy = y.min(my - y) as f64;
        for x in 0..mx {
            let dx = x.min(mx - x) as f64;
            base.push(Complex64::new(cov.eval(dx, dy), 0.0));
        }
    }
    fft2(&mut base, mx, my);

    let trace: f64 = base.iter().map(|c| c.re).sum();
    let negative: f64 = base.iter().filter(|c| c.re < 0.0).map(|c| -c.re).sum();
    if negative > NEGATIVE_MASS_TOL * trace {
        return Err(Error::EmbeddingNotPsd { negative, trace });
    }
    let nf = n as f64;
    Ok(base.iter().map(|c| (c.re.max(0.0) / nf).sqrt()).collect())
}

fn dense_factor(nx: usize, ny: usize, cov: &CovarianceSpec) -> DMatrix<f64> {
    let n = nx * ny;
    let c = DMatrix::from_fn(n, n, |i, j| {
        let (xi, yi) = ((i % nx) as f64, (i / nx) as f64);
        let (xj, yj) = ((j % nx) as f64, (j / nx) as f64);
        cov.eval(xi - xj, yi - yj)
    });
    let eig = SymmetricEigen::new(c);
    let mut factor = eig.eigenvectors;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        factor.column_mut(k).scale_mut(s);
    }
    factor
}

/// One realization, drawn from the stream `(seed, 0)`. It equals member 0 of
/// [`simulate_ensemble`] with the same seed.
pub fn simulate_field(nx: usize, ny: usize, cov: CovarianceSpec, seed: u64) -> Result<Field> {
    let sim = FieldSimulator::new(nx, ny, cov)?;
    Ok(sim.sample(&mut rng::stream(seed, tag::FIELD, 0)))
}

/// `n_members` realizations; member `i` depends only on `(seed, i)`.
pub fn simulate_ensemble(n_members: usize, nx: usize, ny: usize, cov: CovarianceSpec, seed: u64) -> Result<Vec<Field>> {
    if n_members < 2 {
        return invalid(format!("ensemble needs at least 2 members, got {n_members}"));
    }
    let sim = FieldSimulator::new(nx, ny, cov)?;
    Ok(exec::map_indexed(n_members, |i| sim.sample(&mut rng::stream(seed, tag::FIELD, i as u64))))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pooled_std(fields: &[Field]) -> f64 {
        let n: usize = fields.iter().map(Field::len).sum();
        let mean = fields.iter().flat_map(|f| f.values.iter()).sum::<f64>() / n as f64;
        let ss: f64 = fields.iter().flat_map(|f| f.values.iter()).map(|v| (v - mean).powi(2)).sum();
        (ss / n as f64).sqrt()
    }

    #[test]
    fn rejects_small_grids_and_ensembles() {
        let cov = CovarianceSpec::new(1.0, 2.0, 2.0).unwrap();
        assert!(matches!(simulate_field(1, 5, cov, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(simulate_field(5, 1, cov, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(simulate_ensemble(1, 5, 5, cov, 0), Err(Error::InvalidArgument(_))));
        assert!(CovarianceSpec::new(0.0, 1.0, 1.0).is_err());
        assert!(CovarianceSpec::new(1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn reference_field_std() {
        let cov = CovarianceSpec::new(2.0, 15.0, 25.0).unwrap();
        let fields = simulate_ensemble(20, 100, 120, cov, 11).unwrap();
        let s = pooled_std(&fields);
        assert!((s - 2.0).abs() < 0.2, "pooled std {s}");
    }

    #[test]
    fn initial_ensemble_std() {
        let cov = CovarianceSpec::new(2.2, 17.0, 23.0).unwrap();
        let fields = simulate_ensemble(100, 100, 120, cov, 5).unwrap();
        assert_eq!(fields.len(), 100);
        let s = pooled_std(&fields);
        assert!((s - 2.2).abs() < 0.22, "pooled std {s}");
    }

    #[test]
    fn vanishing_variance() {
        let cov = CovarianceSpec::new(1e-12, 3.0, 4.0).unwrap();
        let f = simulate_field(16, 12, cov, 3).unwrap();
        assert!(f.values.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn members_differ_and_calls_repeat() {
        let cov = CovarianceSpec::new(1.0, 2.0, 3.0).unwrap();
        let a = simulate_ensemble(2, 8, 8, cov, 9).unwrap();
        assert_ne!(a[0].values, a[1].values);
        let b = simulate_ensemble(2, 8, 8, cov, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(simulate_field(8, 8, cov, 9).unwrap(), a[0]);
    }

    #[test]
    fn dense_fallback_for_long_correlations() {
        // len 40 on an 8x8 grid cannot be embedded on 16..64 periodic grids
        let cov = CovarianceSpec::new(1.0, 40.0, 40.0).unwrap();
        let sim = FieldSimulator::new(8, 8, cov).unwrap();
        assert!(matches!(sim.sampler, Sampler::Dense(_)));
        let f = sim.sample(&mut rng::stream(1, 0, 0));
        assert_eq!(f.len(), 64);
        assert!(f.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn csv_round_trip() {
        let cov = CovarianceSpec::new(1.0, 2.0, 3.0).unwrap();
        let f = simulate_field(5, 4, cov, 1).unwrap();
        let text = f.to_csv();
        assert!(text.starts_with("5,4\n"));
        assert_eq!(Field::from_csv(&text).unwrap(), f);
    }
}

//! Property suites shared by the `properties` tests and the acceptance run.
//! Each suite draws `cases` random inputs and reports the first failure.

#![allow(dead_code)]

use std::fmt::Debug;

use nalgebra::DMatrix;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use ensda::da::{effective_forward, AugmentedLayout, Clustering, DaProblem, Mec, Scenario};
use ensda::gmm::{Component, GmmModel};
use ensda::grf::Field;
use ensda::kernel_init::init_weight_vector;
use ensda::kernels::{
    eval_kernel_1d, eval_kernel_md, eval_model_1d, CenterDataDA, CenterSet1D, KernelParams1D, KernelParamsMD,
};
use ensda::metrics::{box_stats, data_mismatch, rmse};
use ensda::slp::split_indices;
use ensda::smoother::{anomalies, ies_update, tsvd, EnsembleMatrix};

pub type Suite = fn(u32) -> Result<(), String>;

/// Every suite with its name.
pub const SUITES: &[(&str, Suite)] = &[
    ("kernel is one at its center", kernel_at_center),
    ("single-axis kernel reduces to univariate", single_axis_reduction),
    ("scale sign is irrelevant", scale_sign),
    ("anomalies remove the mean", anomaly_mean_removal),
    ("huge gamma changes nothing", huge_gamma_no_op),
    ("increments lie in the anomaly span", increment_subspace),
    ("full-energy tsvd reconstructs", tsvd_reconstruction),
    ("responsibilities are a distribution", responsibility_normalization),
    ("layouts round-trip", layout_round_trip),
    ("zero weights leave the simulator unchanged", null_correction),
    ("mismatch scales inversely with variance", mismatch_scaling),
    ("rmse obeys the triangle inequality", rmse_triangle),
    ("box stats are ordered and permutation invariant", box_stats_order),
    ("split is an exact partition", split_partition),
    ("unit-draw initialization predicts half the label", half_label_init),
    ("mismatch and rmse hand values", hand_values),
];

fn check<S>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S: Strategy,
    S::Value: Debug,
{
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

fn vec_of(lo: f64, hi: f64, len: impl Into<prop::collection::SizeRange>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, len)
}

pub fn kernel_at_center(cases: u32) -> Result<(), String> {
    check(cases, (-50.0..50.0f64, -20.0..20.0f64), |(x, beta)| {
        prop_assert_eq!(eval_kernel_1d(x, x, beta), 1.0);
        let p = [x, -x];
        prop_assert_eq!(eval_kernel_md(&p, &p, &[beta, 2.0 * beta]).unwrap(), 1.0);
        Ok(())
    })
}

pub fn single_axis_reduction(cases: u32) -> Result<(), String> {
    check(cases, (-10.0..10.0f64, -5.0..5.0f64, -4.0..4.0f64), |(x, c, beta)| {
        let md = eval_kernel_md(&[x], &[0.5], &[beta]).unwrap();
        prop_assert!((md - eval_kernel_1d(x, 0.5, beta)).abs() <= 1e-15);
        let centers = CenterSet1D::new(vec![0.5]).unwrap();
        let params = KernelParams1D::new(vec![c], vec![beta]).unwrap();
        prop_assert!((eval_model_1d(x, &params, &centers).unwrap() - c * md).abs() <= 1e-14 * c.abs().max(1.0));
        Ok(())
    })
}

pub fn scale_sign(cases: u32) -> Result<(), String> {
    check(cases, (-10.0..10.0f64, -10.0..10.0f64, 0.0..5.0f64), |(x, center, beta)| {
        prop_assert_eq!(eval_kernel_1d(x, center, beta), eval_kernel_1d(x, center, -beta));
        Ok(())
    })
}

pub fn anomaly_mean_removal(cases: u32) -> Result<(), String> {
    check(cases, matrix(7, 12, -100.0, 100.0), |m| {
        let a = anomalies(&EnsembleMatrix::new(m.clone()).unwrap());
        for i in 0..a.nrows() {
            let s: f64 = a.row(i).iter().sum();
            let scale = m.row(i).iter().map(|v| v.abs()).sum::<f64>().max(1.0);
            prop_assert!(s.abs() <= 1e-12 * scale, "row {} sums to {}", i, s);
        }
        Ok(())
    })
}

pub fn huge_gamma_no_op(cases: u32) -> Result<(), String> {
    check(cases, (matrix(4, 10, -3.0, 3.0), matrix(6, 10, -1.0, 1.0)), |(theta, noise)| {
        let bg = EnsembleMatrix::new(theta.clone()).unwrap();
        let a = DMatrix::from_fn(6, 4, |i, j| ((i * 4 + j) as f64).sin());
        let preds = &a * &theta + noise * 0.1;
        let mean = a.clone() * bg.mean();
        let var = vec![0.2; 6];
        let ratio = anomalies(&EnsembleMatrix::new(preds.clone()).unwrap()).norm_squared() / var.iter().sum::<f64>();
        let out = ies_update(&bg, &preds, mean.as_slice(), &[0.5; 6], &var, 1e12 * ratio.max(1e-12), 1.0).unwrap();
        for j in 0..10 {
            let d = (out.matrix().column(j) - theta.column(j)).norm();
            prop_assert!(d <= 1e-6 * theta.column(j).norm().max(1.0));
        }
        Ok(())
    })
}

pub fn increment_subspace(cases: u32) -> Result<(), String> {
    check(cases, (matrix(8, 5, -3.0, 3.0), 0.01..100.0f64), |(theta, gamma)| {
        // fewer members than variables, so the span is a proper subspace
        let bg = EnsembleMatrix::new(theta.clone()).unwrap();
        let a = DMatrix::from_fn(3, 8, |i, j| ((i + 2 * j) as f64).cos());
        let preds = &a * &theta;
        let mean = a.clone() * bg.mean();
        let out = ies_update(&bg, &preds, mean.as_slice(), &[1.0, -1.0, 0.5], &[0.3; 3], gamma, 1.0).unwrap();
        // the anomalies span the same space as the member differences
        // theta_j - theta_0, which are full rank and well conditioned
        let diffs = DMatrix::from_fn(8, 4, |i, j| theta[(i, j + 1)] - theta[(i, 0)]);
        let basis = diffs.qr().q();
        let inc = out.matrix() - &theta;
        let residual = &inc - &basis * (basis.transpose() * &inc);
        prop_assert!(residual.norm() <= 1e-8 * inc.norm().max(1e-12), "residual {} of {}", residual.norm(), inc.norm());
        Ok(())
    })
}

pub fn tsvd_reconstruction(cases: u32) -> Result<(), String> {
    check(cases, matrix(5, 3, -10.0, 10.0), |m| {
        let t = tsvd(&m, 1.0).unwrap();
        prop_assert!((t.reconstruct() - &m).amax() < 1e-10);
        Ok(())
    })
}

pub fn responsibility_normalization(cases: u32) -> Result<(), String> {
    check(cases, (-1e3..1e3f64, vec_of(-10.0, 10.0, 1..6), 1e-3..10.0f64), |(x, mus, var)| {
        let n = mus.len();
        let gmm = GmmModel::new(mus.iter().map(|&mu| Component { w: 1.0 / n as f64, mu, var }).collect()).unwrap();
        let r = gmm.responsibilities(x);
        prop_assert!(r.probs.iter().all(|p| (0.0..=1.0).contains(p)));
        prop_assert!((r.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        Ok(())
    })
}

pub fn layout_round_trip(cases: u32) -> Result<(), String> {
    check(cases, (1usize..40, 1usize..10, 1usize..4, 0usize..3, any::<u64>()), |(m_z, n_cp, n_cl, mode, seed)| {
        let mec = [Mec::None, Mec::Kernel { n_cl }, Mec::Bias][mode];
        let layout = AugmentedLayout { m_z, n_cp, mec };
        let theta: Vec<f64> = (0..layout.len()).map(|i| ((i as u64 ^ seed) as f64).sin()).collect();
        let (z, extra) = layout.unpack(&theta).unwrap();
        prop_assert_eq!(z.len(), m_z);
        prop_assert_eq!(layout.pack(z, extra).unwrap(), theta.clone());
        let eta: Vec<f64> = (0..3 * n_cp).map(|i| (i as f64 + seed as f64).cos()).collect();
        prop_assert_eq!(KernelParamsMD::from_flat(&eta, 2).unwrap().to_flat(), eta);
        Ok(())
    })
}

pub fn null_correction(cases: u32) -> Result<(), String> {
    check(cases, (vec_of(-6.0, 6.0, 12), vec_of(-3.0, 3.0, 8), any::<bool>()), |(z, scales, imperfect)| {
        let scenario = if imperfect { Scenario::Imperfect } else { Scenario::Perfect };
        let g = scenario.simulator();
        let problem = DaProblem {
            reference: Field::new(3, 4, vec![0.0; 12]).unwrap(),
            obs: z.iter().map(|v| g(*v) + 0.3).collect(),
            obs_var: vec![0.1; 12],
            scenario,
        };
        let cdata = CenterDataDA::new(vec![-2.0, 0.0, 1.0, 3.0], vec![1.0, 2.0, 0.5, 4.0]).unwrap();
        let kernel = AugmentedLayout { m_z: 12, n_cp: 4, mec: Mec::Kernel { n_cl: 1 } };
        let mut eta = vec![0.0; 4];
        eta.extend_from_slice(&scales);
        let theta = kernel.pack(&z, &eta).unwrap();
        let with = effective_forward(&theta, kernel, &problem, Some(&cdata), &Clustering::Single, true).unwrap();
        let none = AugmentedLayout { m_z: 12, n_cp: 4, mec: Mec::None };
        let without = effective_forward(&z, none, &problem, None, &Clustering::Single, true).unwrap();
        prop_assert_eq!(with, without);
        Ok(())
    })
}

pub fn mismatch_scaling(cases: u32) -> Result<(), String> {
    check(cases, (vec_of(-5.0, 5.0, 1..20), 0.1..10.0f64), |(res, k)| {
        let zeros = vec![0.0; res.len()];
        let var: Vec<f64> = (0..res.len()).map(|i| 0.5 + i as f64).collect();
        let scaled: Vec<f64> = var.iter().map(|v| v * k).collect();
        let a = data_mismatch(&res, &zeros, &var).unwrap();
        let b = data_mismatch(&res, &zeros, &scaled).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a / k - b).abs() <= 1e-12 * a.max(1e-300) / k);
        Ok(())
    })
}

pub fn rmse_triangle(cases: u32) -> Result<(), String> {
    check(cases, (vec_of(-5.0, 5.0, 10), vec_of(-5.0, 5.0, 10), vec_of(-5.0, 5.0, 10)), |(a, b, c)| {
        prop_assert!(rmse(&a, &c).unwrap() <= rmse(&a, &b).unwrap() + rmse(&b, &c).unwrap() + 1e-12);
        Ok(())
    })
}

pub fn box_stats_order(cases: u32) -> Result<(), String> {
    check(cases, vec_of(-100.0, 100.0, 1..40), |mut v| {
        let s = box_stats(&v).unwrap();
        prop_assert!(s.min <= s.q1 && s.q1 <= s.median && s.median <= s.q3 && s.q3 <= s.max);
        v.reverse();
        prop_assert_eq!(box_stats(&v).unwrap(), s);
        Ok(())
    })
}

pub fn split_partition(cases: u32) -> Result<(), String> {
    check(cases, (2usize..500, 0.05..0.95f64, any::<u64>()), |(n, frac, seed)| {
        let (tr, cv) = split_indices(n, frac, seed).unwrap();
        prop_assert_eq!(tr.len(), (frac * n as f64).floor() as usize);
        let mut all: Vec<usize> = tr.iter().chain(&cv).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        Ok(())
    })
}

pub fn half_label_init(cases: u32) -> Result<(), String> {
    check(cases, (-6.0..6.0f64, -20.0..20.0f64, vec_of(0.2, 3.0, 9)), |(x, dy, betas)| {
        let centers = CenterSet1D::uniform(-6.0, 6.0, 9).unwrap();
        let fit = init_weight_vector(x, dy, &betas, &centers, 0.0).unwrap();
        let params = KernelParams1D::new(fit.weights, betas).unwrap();
        let pred = eval_model_1d(x, &params, &centers).unwrap();
        prop_assert!((pred - dy / 2.0).abs() <= 1e-12 * dy.abs().max(1.0));
        Ok(())
    })
}

/// Fixed hand-computed values; `cases` is unused.
pub fn hand_values(_cases: u32) -> Result<(), String> {
    let checks = [
        ("mismatch of residual 2 over variance 4", data_mismatch(&[2.0], &[0.0], &[4.0]).unwrap() == 1.0),
        ("mismatch of a perfect fit", data_mismatch(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 1.0]).unwrap() == 0.0),
        ("rmse of (1, 2, 3)", (rmse(&[1.0, 2.0, 3.0], &[0.0; 3]).unwrap() - (14.0f64 / 3.0).sqrt()).abs() < 1e-15),
        ("rmse of a unit offset", rmse(&[1.0; 17], &[0.0; 17]).unwrap() == 1.0),
        ("mismatch length check", data_mismatch(&[1.0], &[1.0, 2.0], &[1.0]).is_err()),
        ("rmse length check", rmse(&[1.0], &[1.0, 2.0]).is_err()),
    ];
    match checks.iter().find(|(_, ok)| !ok) {
        Some((name, _)) => Err(format!("{name} is wrong")),
        None => Ok(()),
    }
}

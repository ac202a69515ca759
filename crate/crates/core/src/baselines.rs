//! Linear calibration estimators and a lower bound on DL prediction error.
//!
//! Every estimator fits the reciprocity model `h_DL[n] = a[n] h_UL[n]^T B` from
//! paired UL/DL estimates. The per-user scale `a` and `B` are only identified
//! up to a common complex factor; estimates keep `sum |a[n]|^2 = N`.

use crate::channel::{CalibrationDataset, HardwareProfile, Scenario, Snr};
use crate::error::{CalibError, Result};
use crate::numerics::{cholesky_solve, matmul, solve, CMatrix, C64};

const RATIO_FLOOR: f64 = 1e-9;
const MAX_CONDITION: f64 = 1e12;
const ALS_MAX_ITERS: usize = 500;
const ALS_TOL: f64 = 1e-14;

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);

/// Fitted UL→DL map.
#[derive(Debug, Clone, PartialEq)]
pub enum LinearCalibration {
    /// `h_DL[n]_m = a[n] d[m] h_UL[n]_m`
    Diagonal { a: Vec<C64>, d: Vec<C64> },
    /// `h_DL[n] = a[n] h_UL[n]^T B`
    Full { a: Vec<C64>, b: CMatrix },
}

impl LinearCalibration {
    /// `(M, N)`.
    pub fn dims(&self) -> (usize, usize) {
        match self {
            LinearCalibration::Diagonal { a, d } => (d.len(), a.len()),
            LinearCalibration::Full { a, b } => (b.rows(), a.len()),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            LinearCalibration::Diagonal { a, d } => a.iter().chain(d).all(|z| z.is_finite()),
            LinearCalibration::Full { a, b } => a.iter().all(|z| z.is_finite()) && b.is_finite(),
        }
    }
}

/// Predicts `H_DL` (`N x M`) from `H_UL` (`M x N`).
pub fn apply_linear_calibration(cal: &LinearCalibration, h_ul: &CMatrix) -> Result<CMatrix> {
    let (m, n) = cal.dims();
    if h_ul.shape() != (m, n) {
        return Err(CalibError::shape(
            "apply_linear_calibration",
            format!("calibration for H_UL {m}x{n}"),
            h_ul.shape_str(),
        ));
    }
    match cal {
        LinearCalibration::Diagonal { a, d } => {
            Ok(CMatrix::from_fn(n, m, |u, k| a[u] * d[k] * h_ul[(k, u)]))
        }
        LinearCalibration::Full { a, b } => {
            let rows = matmul(&h_ul.transpose(), b)?;
            Ok(CMatrix::from_fn(n, m, |u, k| a[u] * rows[(u, k)]))
        }
    }
}

/// Per-(antenna, user) sums `S_uu = sum_p |u|^2` and `S_uv = sum_p conj(u) v`
/// with `u = H_UL[m, n]` and `v = H_DL[n, m]`, stored `[m * N + n]`.
struct DiagonalStats {
    m: usize,
    n: usize,
    s_uu: Vec<f64>,
    s_uv: Vec<C64>,
}

impl DiagonalStats {
    fn new(ds: &CalibrationDataset) -> DiagonalStats {
        let (m, n) = (ds.m, ds.n);
        let mut s_uu = vec![0.0; m * n];
        let mut s_uv = vec![ZERO; m * n];
        for pair in &ds.pairs {
            for k in 0..m {
                for u in 0..n {
                    let x = pair.h_ul[(k, u)];
                    s_uu[k * n + u] += x.norm_sqr();
                    s_uv[k * n + u] += x.conj() * pair.h_dl[(u, k)];
                }
            }
        }
        DiagonalStats { m, n, s_uu, s_uv }
    }

    fn check_antennas(&self) -> Result<()> {
        for k in 0..self.m {
            let energy: f64 = self.s_uu[k * self.n..(k + 1) * self.n].iter().sum();
            if energy == 0.0 {
                return Err(CalibError::DegenerateAntenna { antenna: k + 1 });
            }
        }
        Ok(())
    }

    /// LS for `d` given `a`.
    fn d_step(&self, a: &[C64]) -> Result<Vec<C64>> {
        (0..self.m)
            .map(|k| {
                let mut num = ZERO;
                let mut den = 0.0;
                for (u, au) in a.iter().enumerate() {
                    num += au.conj() * self.s_uv[k * self.n + u];
                    den += au.norm_sqr() * self.s_uu[k * self.n + u];
                }
                if den == 0.0 {
                    return Err(CalibError::DegenerateAntenna { antenna: k + 1 });
                }
                Ok(num / den)
            })
            .collect()
    }

    /// LS for `a` given `d`.
    fn a_step(&self, d: &[C64]) -> Result<Vec<C64>> {
        (0..self.n)
            .map(|u| {
                let mut num = ZERO;
                let mut den = 0.0;
                for (k, dk) in d.iter().enumerate() {
                    num += dk.conj() * self.s_uv[k * self.n + u];
                    den += dk.norm_sqr() * self.s_uu[k * self.n + u];
                }
                if den == 0.0 {
                    return Err(CalibError::Degenerate(format!(
                        "user {} has no calibrated UL energy",
                        u + 1
                    )));
                }
                Ok(num / den)
            })
            .collect()
    }
}

/// Rescales `a` to `sum |a|^2 = N` and `other` inversely; products are kept.
fn normalize_scale(a: &mut [C64], other: &mut [C64]) {
    let power: f64 = a.iter().map(|z| z.norm_sqr()).sum();
    if power > 0.0 && power.is_finite() {
        let s = (a.len() as f64 / power).sqrt();
        a.iter_mut().for_each(|z| *z *= s);
        other.iter_mut().for_each(|z| *z /= s);
    }
}

fn max_rel_change(old: &[C64], new: &[C64]) -> f64 {
    let scale = new.iter().map(|z| z.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    old.iter()
        .zip(new)
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
        / scale
}

/// Diagonal coefficients with every user scale fixed to one:
/// `d[m] = sum_{p,n} conj(u) v / sum_{p,n} |u|^2`.
pub fn ls_diagonal_coefficients(dataset: &CalibrationDataset) -> Result<Vec<C64>> {
    let stats = DiagonalStats::new(dataset);
    stats.check_antennas()?;
    stats.d_step(&vec![ONE; dataset.n])
}

/// Least-squares fit of the diagonal model by alternating between `d` and the
/// per-user scales, starting from [`ls_diagonal_coefficients`].
pub fn ls_diagonal_calibrate(dataset: &CalibrationDataset) -> Result<LinearCalibration> {
    let stats = DiagonalStats::new(dataset);
    stats.check_antennas()?;
    let mut a = vec![ONE; dataset.n];
    let mut d = stats.d_step(&a)?;
    for _ in 0..ALS_MAX_ITERS {
        let mut next_a = stats.a_step(&d)?;
        normalize_scale(&mut next_a, &mut d);
        let next_d = stats.d_step(&next_a)?;
        let change = max_rel_change(&a, &next_a).max(max_rel_change(&d, &next_d));
        a = next_a;
        d = next_d;
        if change < ALS_TOL {
            break;
        }
    }
    let cal = LinearCalibration::Diagonal { a, d };
    if !cal.is_finite() {
        return Err(CalibError::Degenerate("diagonal LS produced non-finite coefficients".into()));
    }
    Ok(cal)
}

/// Reference-antenna calibration: `d[m]` is the mean of the relative ratios
/// `(v_m / u_m) / (v_ref / u_ref)` over all pairs and users, then each user's
/// scale is fitted by one-dimensional LS. `reference_antenna` is 1-based.
pub fn argos_calibrate(
    dataset: &CalibrationDataset,
    reference_antenna: usize,
) -> Result<LinearCalibration> {
    let (m, n) = (dataset.m, dataset.n);
    if reference_antenna == 0 || reference_antenna > m {
        return Err(CalibError::invalid(format!(
            "reference antenna {reference_antenna} outside [1, {m}]"
        )));
    }
    let r = reference_antenna - 1;
    let mut sums = vec![ZERO; m];
    let mut counts = vec![0usize; m];
    for pair in &dataset.pairs {
        for u in 0..n {
            let u_ref = pair.h_ul[(r, u)];
            if u_ref.norm() < RATIO_FLOOR {
                continue;
            }
            let ref_ratio = pair.h_dl[(u, r)] / u_ref;
            if ref_ratio.norm() < RATIO_FLOOR {
                continue;
            }
            for k in 0..m {
                let x = pair.h_ul[(k, u)];
                if x.norm() < RATIO_FLOOR {
                    continue;
                }
                let rel = (pair.h_dl[(u, k)] / x) / ref_ratio;
                if rel.is_finite() {
                    sums[k] += rel;
                    counts[k] += 1;
                }
            }
        }
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(CalibError::Degenerate(format!(
            "no usable ratio for antenna {} relative to reference {reference_antenna}",
            k + 1
        )));
    }
    let mut d: Vec<C64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s / c as f64)
        .collect();
    let stats = DiagonalStats::new(dataset);
    let mut a = stats.a_step(&d)?;
    normalize_scale(&mut a, &mut d);
    Ok(LinearCalibration::Diagonal { a, d })
}

/// Full-matrix fit of `h_DL[n] = a[n] h_UL[n]^T B`, alternating between the
/// normal equations for `B` and per-user scalar LS for `a` (starting at `a = 1`).
pub fn ls_full_calibrate(dataset: &CalibrationDataset) -> Result<LinearCalibration> {
    let (m, n) = (dataset.m, dataset.n);
    let observations = dataset.len() * n;
    // Per-user Gram matrices G_n = sum conj(u) u^T and cross terms C_n = sum conj(u) v^T.
    let mut gram = vec![CMatrix::zeros(m, m); n];
    let mut cross = vec![CMatrix::zeros(m, m); n];
    for pair in &dataset.pairs {
        for u in 0..n {
            let col = pair.h_ul.column(u);
            let row = pair.h_dl.row(u);
            let (g, c) = (&mut gram[u], &mut cross[u]);
            for i in 0..m {
                let ci = col[i].conj();
                if ci == ZERO {
                    continue;
                }
                for j in 0..m {
                    g[(i, j)] += ci * col[j];
                    c[(i, j)] += ci * row[j];
                }
            }
        }
    }
    let b_step = |a: &[C64]| -> Result<CMatrix> {
        let mut lhs = CMatrix::zeros(m, m);
        let mut rhs = CMatrix::zeros(m, m);
        for u in 0..n {
            let w = a[u].norm_sqr();
            let ac = a[u].conj();
            for (l, g) in lhs.as_mut_slice().iter_mut().zip(gram[u].as_slice()) {
                *l += g * w;
            }
            for (r, c) in rhs.as_mut_slice().iter_mut().zip(cross[u].as_slice()) {
                *r += c * ac;
            }
        }
        let (b, condition) = cholesky_solve(&lhs, &rhs)?;
        if !(condition <= MAX_CONDITION) {
            return Err(CalibError::IllConditioned {
                condition,
                observations,
                unknowns: m,
            });
        }
        Ok(b)
    };
    // a[n] = tr(B^H C_n) / tr(B^H G_n B)
    let a_step = |b: &CMatrix| -> Result<Vec<C64>> {
        let bh = b.adjoint();
        (0..n)
            .map(|u| {
                let num = trace_product(&bh, &cross[u]);
                let gb = matmul(&gram[u], b)?;
                let den = trace_product(&bh, &gb).re;
                if !(den > 0.0) {
                    return Err(CalibError::Degenerate(format!(
                        "user {} has no calibrated UL energy",
                        u + 1
                    )));
                }
                Ok(num / den)
            })
            .collect()
    };

    let mut a = vec![ONE; n];
    let mut b = b_step(&a)?;
    for _ in 0..ALS_MAX_ITERS {
        let mut next_a = a_step(&b)?;
        normalize_scale(&mut next_a, b.as_mut_slice());
        let next_b = b_step(&next_a)?;
        let change = max_rel_change(&a, &next_a)
            .max(max_rel_change(b.as_slice(), next_b.as_slice()));
        a = next_a;
        b = next_b;
        if change < ALS_TOL {
            break;
        }
    }
    let cal = LinearCalibration::Full { a, b };
    if !cal.is_finite() {
        return Err(CalibError::Degenerate("full LS produced non-finite coefficients".into()));
    }
    Ok(cal)
}

/// `tr(X Y)` for square matrices.
fn trace_product(x: &CMatrix, y: &CMatrix) -> C64 {
    let m = x.rows();
    let mut acc = ZERO;
    for i in 0..m {
        for k in 0..m {
            acc += x[(i, k)] * y[(k, i)];
        }
    }
    acc
}

/// Inputs of the prediction-error bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrbSpec {
    pub m: usize,
    pub n: usize,
    /// Number of training pairs.
    pub p: usize,
    pub snr: Snr,
    pub ul_pilot_length: usize,
    pub dl_pilot_length: usize,
}

impl CrbSpec {
    /// Minimal orthogonal pilots: `K_UL = N`, `K_DL = M`.
    pub fn new(m: usize, n: usize, p: usize, snr: Snr) -> CrbSpec {
        CrbSpec {
            m,
            n,
            p,
            snr,
            ul_pilot_length: n,
            dl_pilot_length: m,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.p == 0 {
            return Err(CalibError::invalid("CRB needs positive M, N and P"));
        }
        if self.ul_pilot_length < self.n || self.dl_pilot_length < self.m {
            return Err(CalibError::invalid(
                "pilot lengths must cover the number of sources",
            ));
        }
        Ok(())
    }

    /// Per-entry LS estimation error variances `(UL, DL)`.
    pub fn error_variances(&self) -> (f64, f64) {
        let nv = self.snr.noise_variance();
        (
            nv / self.ul_pilot_length as f64,
            nv / self.dl_pilot_length as f64,
        )
    }

    /// Calibration-estimation term: `M + N - 1` free complex coefficients
    /// learned from `P M N` noisy products.
    fn parameter_term(&self) -> f64 {
        let (su, sd) = self.error_variances();
        let (m, n, p) = (self.m as f64, self.n as f64, self.p as f64);
        (su + sd) * (m + n - 1.0) / (m * n * p)
    }
}

/// Bound on the per-entry DL prediction MSE for unit-power i.i.d. UL channels
/// and unit-gain calibration: the MMSE of the noisy UL estimate,
/// `σu² / (1 + σu²)`, plus the error of estimating the calibration from `P`
/// noisy pairs, `(σu² + σd²)(M + N − 1) / (M N P)`.
pub fn crb_mse(spec: &CrbSpec) -> Result<f64> {
    spec.validate()?;
    let (su, _) = spec.error_variances();
    Ok(su / (1.0 + su) + spec.parameter_term())
}

/// Same bound evaluated for the actual second-order statistics of a linear
/// scenario: the UL-estimate term becomes `tr(A E A^H) / (M N)` per user, with
/// `A` the user's linear UL→DL map and `E = σu² Σ (Σ + σu² I)^{-1}` the MMSE
/// error covariance of its UL channel (covariance `Σ`). The parameter term is
/// weighted by the scenario's mean DL power.
pub fn crb_mse_for_scenario(scenario: &Scenario, spec: &CrbSpec) -> Result<f64> {
    spec.validate()?;
    let (m, n) = scenario.dims();
    if (m, n) != (spec.m, spec.n) {
        return Err(CalibError::shape(
            "crb_mse_for_scenario",
            format!("scenario M={m} N={n}"),
            format!("spec M={} N={}", spec.m, spec.n),
        ));
    }
    let (su, _) = spec.error_variances();
    // Per user: UL covariance Σ and UL→DL map (acting on column vectors).
    let users: Vec<(CMatrix, CMatrix)> = match scenario {
        Scenario::LinearTdd { profile } => tdd_user_maps(profile)?,
        Scenario::LinearSynthetic { c, d } => c
            .iter()
            .map(|cu| (CMatrix::identity(m), d.transpose().scale(*cu)))
            .collect(),
        _ => {
            return Err(CalibError::InvalidScenario(format!(
                "no linear calibration bound for the {} scenario",
                scenario.kind()
            )))
        }
    };
    let mut ul_term = 0.0;
    let mut dl_power = 0.0;
    for (sigma, map) in &users {
        dl_power += trace_product(&matmul(map, sigma)?, &map.adjoint()).re;
        if su > 0.0 {
            let mut shifted = sigma.clone();
            for i in 0..m {
                shifted[(i, i)] += su;
            }
            let err = solve(&shifted, sigma)?.scale(C64::new(su, 0.0));
            ul_term += trace_product(&matmul(map, &err)?, &map.adjoint()).re;
        }
    }
    let entries = (m * n) as f64;
    Ok(ul_term / entries + spec.parameter_term() * dl_power / entries)
}

fn tdd_user_maps(profile: &HardwareProfile) -> Result<Vec<(CMatrix, CMatrix)>> {
    let (a, b) = profile.calibration_coefficients()?;
    let rrh = matmul(&profile.r_ul, &profile.r_ul.adjoint())?;
    let bt = b.transpose();
    Ok(a.iter()
        .zip(&profile.t_ul)
        .map(|(au, tu)| (rrh.scale(C64::new(tu.norm_sqr(), 0.0)), bt.scale(*au)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{build_dataset, ChannelPair, ScenarioKind, TanhMode};
    use crate::numerics::{mse_between, random_unitary, sample_complex_gaussian, Normalization, SimRng};

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn dataset_from(m: usize, n: usize, pairs: Vec<(CMatrix, CMatrix)>) -> CalibrationDataset {
        let pairs: Vec<ChannelPair> = pairs
            .into_iter()
            .map(|(h_ul, h_dl)| ChannelPair {
                h_ul,
                h_dl,
                snr: Snr::Noiseless,
            })
            .collect();
        let truth = pairs.iter().map(|p| p.h_dl.clone()).collect();
        CalibrationDataset::new(m, n, ScenarioKind::LinearSynthetic, pairs, truth).unwrap()
    }

    fn diagonal_tdd(rng: &mut SimRng, m: usize, n: usize, unit_users: bool) -> HardwareProfile {
        let mut p = crate::channel::gen_hardware_profile(rng, m, n, 0.0).unwrap();
        if unit_users {
            p.t_ul = vec![ONE; n];
            p.r_dl = vec![ONE; n];
        }
        p
    }

    fn training_residual(cal: &LinearCalibration, ds: &CalibrationDataset) -> f64 {
        ds.pairs
            .iter()
            .map(|p| {
                let pred = apply_linear_calibration(cal, &p.h_ul).unwrap();
                mse_between(&pred, &p.h_dl, Normalization::Sum).unwrap()
            })
            .sum()
    }

    fn prediction_mse(cal: &LinearCalibration, ds: &CalibrationDataset) -> f64 {
        ds.pairs
            .iter()
            .zip(&ds.truth_dl)
            .map(|(p, t)| {
                let pred = apply_linear_calibration(cal, &p.h_ul).unwrap();
                mse_between(&pred, t, Normalization::Mean).unwrap()
            })
            .sum::<f64>()
            / ds.len() as f64
    }

    #[test]
    fn scalar_ratio() {
        let ds = dataset_from(
            1,
            1,
            vec![(
                CMatrix::column_vector(&[c(2.0, 0.0)]),
                CMatrix::row_vector(&[c(6.0, 0.0)]),
            )],
        );
        assert_eq!(ls_diagonal_coefficients(&ds).unwrap(), vec![c(3.0, 0.0)]);
        let cal = ls_diagonal_calibrate(&ds).unwrap();
        let pred = apply_linear_calibration(&cal, &CMatrix::column_vector(&[c(2.0, 0.0)])).unwrap();
        assert!((pred[(0, 0)] - c(6.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn diagonal_recovers_hardware_ratios() {
        let mut rng = SimRng::new(1);
        let profile = diagonal_tdd(&mut rng, 8, 3, true);
        let scenario = Scenario::LinearTdd {
            profile: profile.clone(),
        };
        let ds = build_dataset(&SimRng::new(2), &scenario, 20, Snr::Noiseless).unwrap();
        let d = ls_diagonal_coefficients(&ds).unwrap();
        for k in 0..8 {
            let expect = profile.t_dl[(k, k)] / profile.r_ul[(k, k)];
            assert!((d[k] - expect).norm() < 1e-8);
        }
        let cal = ls_diagonal_calibrate(&ds).unwrap();
        assert!(prediction_mse(&cal, &ds) < 1e-12);
    }

    #[test]
    fn degenerate_antenna_is_named() {
        let mut h_ul = CMatrix::zeros(3, 1);
        h_ul[(0, 0)] = ONE;
        h_ul[(2, 0)] = ONE;
        let ds = dataset_from(3, 1, vec![(h_ul, CMatrix::from_fn(1, 3, |_, _| ONE))]);
        assert_eq!(
            ls_diagonal_calibrate(&ds),
            Err(CalibError::DegenerateAntenna { antenna: 2 })
        );
    }

    #[test]
    fn argos_matches_ls_on_single_antenna() {
        let mut rng = SimRng::new(3);
        let pairs = (0..5)
            .map(|_| {
                let u = sample_complex_gaussian(&mut rng, 1, 2, 1.0).unwrap();
                let v = CMatrix::from_fn(2, 1, |n, _| u[(0, n)] * c(0.5 + n as f64, -1.0));
                (u, v)
            })
            .collect();
        let ds = dataset_from(1, 2, pairs);
        let ls = ls_diagonal_calibrate(&ds).unwrap();
        let ar = argos_calibrate(&ds, 1).unwrap();
        let x = sample_complex_gaussian(&mut rng, 1, 2, 1.0).unwrap();
        let diff = apply_linear_calibration(&ls, &x)
            .unwrap()
            .max_abs_diff(&apply_linear_calibration(&ar, &x).unwrap())
            .unwrap();
        assert!(diff < 1e-12);
        assert!(argos_calibrate(&ds, 0).is_err());
        assert!(argos_calibrate(&ds, 2).is_err());
    }

    #[test]
    fn argos_exact_on_noiseless_diagonal_tdd() {
        let mut rng = SimRng::new(4);
        let profile = diagonal_tdd(&mut rng, 6, 3, false);
        let scenario = Scenario::LinearTdd { profile };
        let ds = build_dataset(&SimRng::new(5), &scenario, 30, Snr::Noiseless).unwrap();
        let ls = ls_diagonal_calibrate(&ds).unwrap();
        for reference in [1, 4] {
            let ar = argos_calibrate(&ds, reference).unwrap();
            for pair in &ds.pairs {
                let a = apply_linear_calibration(&ls, &pair.h_ul).unwrap();
                let b = apply_linear_calibration(&ar, &pair.h_ul).unwrap();
                assert!(a.max_abs_diff(&b).unwrap() < 1e-8);
            }
            assert!(prediction_mse(&ar, &ds) < 1e-12);
        }
    }

    #[test]
    fn argos_is_reference_sensitive_under_noise() {
        let mut rng = SimRng::new(6);
        let profile = diagonal_tdd(&mut rng, 8, 2, false);
        let scenario = Scenario::LinearTdd { profile };
        let ds = build_dataset(&SimRng::new(7), &scenario, 40, Snr::Db(10.0)).unwrap();
        let a1 = argos_calibrate(&ds, 1).unwrap();
        let a5 = argos_calibrate(&ds, 5).unwrap();
        let x = &ds.pairs[0].h_ul;
        let diff = apply_linear_calibration(&a1, x)
            .unwrap()
            .max_abs_diff(&apply_linear_calibration(&a5, x).unwrap())
            .unwrap();
        assert!(diff > 1e-6);
    }

    #[test]
    fn argos_never_beats_ls_on_training_residual() {
        for seed in 0..20 {
            let mut rng = SimRng::new(100 + seed);
            let profile = diagonal_tdd(&mut rng, 4, 2, false);
            let scenario = Scenario::LinearTdd { profile };
            let ds = build_dataset(&SimRng::new(seed), &scenario, 15, Snr::Db(5.0)).unwrap();
            let ls = training_residual(&ls_diagonal_calibrate(&ds).unwrap(), &ds);
            let ar = training_residual(&argos_calibrate(&ds, 1).unwrap(), &ds);
            assert!(ls <= ar * (1.0 + 1e-12), "seed {seed}: {ls} > {ar}");
        }
    }

    #[test]
    fn argos_noisier_than_ls_on_average() {
        let mut ls_total = 0.0;
        let mut ar_total = 0.0;
        for t in 0..100 {
            let mut rng = SimRng::new(1000 + t);
            let profile = diagonal_tdd(&mut rng, 8, 4, false).power_normalized();
            let scenario = Scenario::LinearTdd { profile };
            let ds = build_dataset(&SimRng::new(t), &scenario, 50, Snr::Db(0.0)).unwrap();
            ls_total += prediction_mse(&ls_diagonal_calibrate(&ds).unwrap(), &ds);
            ar_total += prediction_mse(&argos_calibrate(&ds, 1).unwrap(), &ds);
        }
        assert!(ar_total >= ls_total, "argos {ar_total} < ls {ls_total}");
    }

    #[test]
    fn diagonal_scale_equivariance() {
        let mut rng = SimRng::new(8);
        let profile = diagonal_tdd(&mut rng, 5, 2, false);
        let scenario = Scenario::LinearTdd { profile };
        let ds = build_dataset(&SimRng::new(9), &scenario, 12, Snr::Db(10.0)).unwrap();
        let gamma = c(0.7, -1.3);
        let mut scaled = ds.clone();
        for p in &mut scaled.pairs {
            p.h_dl = p.h_dl.scale(gamma);
        }
        let d0 = ls_diagonal_coefficients(&ds).unwrap();
        let d1 = ls_diagonal_coefficients(&scaled).unwrap();
        for (x, y) in d0.iter().zip(&d1) {
            assert!((x * gamma - y).norm() <= 1e-14 * y.norm());
        }
        let p0 = apply_linear_calibration(&ls_diagonal_calibrate(&ds).unwrap(), &ds.pairs[0].h_ul)
            .unwrap()
            .scale(gamma);
        let p1 =
            apply_linear_calibration(&ls_diagonal_calibrate(&scaled).unwrap(), &ds.pairs[0].h_ul)
                .unwrap();
        assert!(p0.max_abs_diff(&p1).unwrap() < 1e-10 * p1.max_abs());
    }

    #[test]
    fn full_recovers_unitary_with_unit_scales() {
        let mut rng = SimRng::new(10);
        let d = random_unitary(&mut rng, 6).unwrap();
        let scenario = Scenario::LinearSynthetic {
            c: vec![ONE; 3],
            d: d.clone(),
        };
        let ds = build_dataset(&SimRng::new(11), &scenario, 10, Snr::Noiseless).unwrap();
        let cal = ls_full_calibrate(&ds).unwrap();
        let LinearCalibration::Full { a, b } = &cal else {
            panic!("expected full calibration")
        };
        assert!(b.max_abs_diff(&d).unwrap() < 1e-8);
        assert!(a.iter().all(|x| (x - ONE).norm() < 1e-8));
        assert!(prediction_mse(&cal, &ds) < 1e-12);
    }

    #[test]
    fn full_exact_with_random_user_scales() {
        let mut rng = SimRng::new(12);
        let scenario =
            Scenario::synthetic(ScenarioKind::LinearSynthetic, &mut rng, 4, 3, TanhMode::Split)
                .unwrap();
        let ds = build_dataset(&SimRng::new(13), &scenario, 10, Snr::Noiseless).unwrap();
        assert!(prediction_mse(&ls_full_calibrate(&ds).unwrap(), &ds) < 1e-12);
    }

    #[test]
    fn full_small_consistent_system() {
        let mut rng = SimRng::new(14);
        let b = sample_complex_gaussian(&mut rng, 2, 2, 1.0).unwrap();
        let pairs = (0..4)
            .map(|_| {
                let u = sample_complex_gaussian(&mut rng, 2, 2, 1.0).unwrap();
                let v = matmul(&u.transpose(), &b).unwrap();
                (u, v)
            })
            .collect();
        let ds = dataset_from(2, 2, pairs);
        let cal = ls_full_calibrate(&ds).unwrap();
        assert!(training_residual(&cal, &ds) < 1e-16);
    }

    #[test]
    fn full_on_single_antenna_matches_diagonal() {
        let mut rng = SimRng::new(15);
        let profile = diagonal_tdd(&mut rng, 1, 3, false);
        let scenario = Scenario::LinearTdd { profile };
        let ds = build_dataset(&SimRng::new(16), &scenario, 8, Snr::Db(5.0)).unwrap();
        let full = ls_full_calibrate(&ds).unwrap();
        let diag = ls_diagonal_calibrate(&ds).unwrap();
        let x = &ds.pairs[0].h_ul;
        let diff = apply_linear_calibration(&full, x)
            .unwrap()
            .max_abs_diff(&apply_linear_calibration(&diag, x).unwrap())
            .unwrap();
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn full_is_diagonal_on_diagonal_truth() {
        let mut rng = SimRng::new(17);
        let profile = diagonal_tdd(&mut rng, 4, 2, false);
        let scenario = Scenario::LinearTdd { profile };
        let ds = build_dataset(&SimRng::new(18), &scenario, 6, Snr::Noiseless).unwrap();
        let LinearCalibration::Full { b, .. } = ls_full_calibrate(&ds).unwrap() else {
            panic!("expected full calibration")
        };
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(b[(i, j)].norm() < 1e-8, "B[{i},{j}] = {}", b[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn full_rejects_underdetermined() {
        let mut rng = SimRng::new(19);
        let scenario =
            Scenario::synthetic(ScenarioKind::LinearSynthetic, &mut rng, 8, 2, TanhMode::Split)
                .unwrap();
        let ds = build_dataset(&SimRng::new(20), &scenario, 3, Snr::Noiseless).unwrap();
        match ls_full_calibrate(&ds) {
            Err(CalibError::IllConditioned {
                observations,
                unknowns,
                ..
            }) => assert_eq!((observations, unknowns), (6, 8)),
            other => panic!("expected ill-conditioned error, got {other:?}"),
        }
    }

    #[test]
    fn apply_examples() {
        let mut rng = SimRng::new(21);
        let h = sample_complex_gaussian(&mut rng, 3, 2, 1.0).unwrap();
        let ident = LinearCalibration::Diagonal {
            a: vec![ONE; 2],
            d: vec![ONE; 3],
        };
        assert_eq!(apply_linear_calibration(&ident, &h).unwrap(), h.transpose());
        let full = LinearCalibration::Full {
            a: vec![c(0.3, 1.0), c(-2.0, 0.5)],
            b: sample_complex_gaussian(&mut rng, 3, 3, 1.0).unwrap(),
        };
        let zero = apply_linear_calibration(&full, &CMatrix::zeros(3, 2)).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
        assert!(apply_linear_calibration(&full, &CMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn crb_examples() {
        let noiseless = CrbSpec::new(32, 4, 100, Snr::Noiseless);
        assert_eq!(crb_mse(&noiseless).unwrap(), 0.0);
        let lo = crb_mse(&CrbSpec::new(32, 4, 100, Snr::Db(40.0))).unwrap();
        let hi = crb_mse(&CrbSpec::new(32, 4, 100, Snr::Db(40.0 + 10.0 * 2f64.log10()))).unwrap();
        assert!((hi / lo - 0.5).abs() < 0.005, "ratio {}", hi / lo);
        assert!(crb_mse(&CrbSpec::new(0, 4, 100, Snr::Db(0.0))).is_err());
    }

    #[test]
    fn crb_monotone_in_snr_and_p() {
        let mut last = f64::INFINITY;
        for db in (-10..=50).step_by(5) {
            let v = crb_mse(&CrbSpec::new(32, 4, 100, Snr::Db(db as f64))).unwrap();
            assert!(v < last);
            last = v;
        }
        let mut last = f64::INFINITY;
        for p in [1, 2, 10, 100, 1000] {
            let v = crb_mse(&CrbSpec::new(32, 4, p, Snr::Db(10.0))).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn scenario_bound_reduces_to_closed_form_for_unitary_maps() {
        let mut rng = SimRng::new(22);
        let scenario = Scenario::LinearSynthetic {
            c: vec![ONE; 4],
            d: random_unitary(&mut rng, 8).unwrap(),
        };
        let spec = CrbSpec::new(8, 4, 50, Snr::Db(3.0));
        let a = crb_mse_for_scenario(&scenario, &spec).unwrap();
        let b = crb_mse(&spec).unwrap();
        assert!((a - b).abs() < 1e-12 * b);
        let power = Scenario::synthetic(ScenarioKind::PowerType, &mut rng, 8, 4, TanhMode::Split)
            .unwrap();
        assert!(crb_mse_for_scenario(&power, &spec).is_err());
    }

    #[test]
    fn scenario_bound_below_estimators_at_zero_db() {
        let (m, n, p) = (8, 2, 60);
        let mut bound = 0.0;
        let mut ls_full = 0.0;
        let mut ls_diag = 0.0;
        for t in 0..200 {
            let mut rng = SimRng::new(5000 + t);
            let scenario = Scenario::linear_tdd(&mut rng, m, n, 0.0).unwrap();
            let ds = build_dataset(&SimRng::new(t), &scenario, p, Snr::Db(0.0)).unwrap();
            let (tr, te) = ds.split(0.4, &mut SimRng::new(t + 1)).unwrap();
            bound +=
                crb_mse_for_scenario(&scenario, &CrbSpec::new(m, n, tr.len(), Snr::Db(0.0)))
                    .unwrap();
            ls_full += prediction_mse(&ls_full_calibrate(&tr).unwrap(), &te);
            ls_diag += prediction_mse(&ls_diagonal_calibrate(&tr).unwrap(), &te);
        }
        assert!(bound <= ls_full && bound <= ls_diag, "{bound} {ls_full} {ls_diag}");
    }
}

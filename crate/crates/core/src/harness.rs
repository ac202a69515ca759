//! Monte Carlo experiment drivers: SNR sweeps over all calibration methods,
//! training-convergence curves, the nonlinear scenario suite and the
//! single-coefficient trace.
//!
//! Every trial owns a sub-stream `master.fork_indexed("trial", t)` with role
//! children (`scenario`, `data`, `split`, ...), so results do not depend on the
//! order in which trials run. Within a trial all SNR points share the scenario,
//! the channel draws, the standardized noise and the train/test split.

use rayon::prelude::*;

use crate::baselines::{
    apply_linear_calibration, argos_calibrate, crb_mse_for_scenario, ls_diagonal_calibrate,
    ls_full_calibrate, CrbSpec, LinearCalibration,
};
use crate::calinet::{fit, predict, predict_user, train_split, train_user, NetMode, TrainConfig, TrainHistory};
use crate::channel::{
    build_dataset, build_dataset_mixed_snr, split_indices, CalibrationDataset, Scenario,
    ScenarioKind, Snr,
};
use crate::config::{ExperimentConfig, Method};
use crate::error::{CalibError, Result};
use crate::numerics::{mse_between, CMatrix, Normalization, SimRng};
use crate::report::{MseReport, MseRow, TraceRow};

/// Draws the trial's scenario of the given kind.
pub fn draw_scenario(cfg: &ExperimentConfig, kind: ScenarioKind, rng: &mut SimRng) -> Result<Scenario> {
    match kind {
        ScenarioKind::LinearTdd => Scenario::linear_tdd(rng, cfg.m, cfg.n, cfg.crosstalk),
        other => Scenario::synthetic(other, rng, cfg.m, cfg.n, cfg.tanh_mode),
    }
}

/// Mean per-entry squared error against the noiseless DL channels.
pub fn evaluate(
    test: &CalibrationDataset,
    predictor: impl Fn(&CMatrix) -> Result<CMatrix>,
) -> Result<f64> {
    if !test.has_truth() {
        return Err(CalibError::invalid("evaluation needs noiseless DL ground truth"));
    }
    let mut total = 0.0;
    for (pair, truth) in test.pairs.iter().zip(&test.truth_dl) {
        total += mse_between(&predictor(&pair.h_ul)?, truth, Normalization::Mean)?;
    }
    Ok(total / test.len() as f64)
}

fn evaluate_linear(test: &CalibrationDataset, cal: &LinearCalibration) -> Result<f64> {
    evaluate(test, |h| apply_linear_calibration(cal, h))
}

fn trial_train_config(cfg: &ExperimentConfig, trial: u64) -> TrainConfig {
    TrainConfig {
        seed: SimRng::new(cfg.train_seed).fork_indexed("trial", trial).seed(),
        ..cfg.train_config()
    }
}

/// MSE of every method at every SNR for one trial: `[method][snr]`.
fn run_trial(
    cfg: &ExperimentConfig,
    kind: ScenarioKind,
    methods: &[Method],
    trial: u64,
) -> Result<Vec<Vec<f64>>> {
    let rng = SimRng::new(cfg.master_seed).fork_indexed("trial", trial);
    let scenario = draw_scenario(cfg, kind, &mut rng.fork("scenario"))?;
    let data = rng.fork("data");
    let (train_idx, test_idx) =
        split_indices(cfg.p, cfg.validation_fraction, &mut rng.fork("split"))?;
    let train_cfg = trial_train_config(cfg, trial);
    let grid = &cfg.snr_grid_db;

    let mixed_model = if cfg.train_once_mixed_snr && methods.contains(&Method::Dnn) {
        let lo = grid[0];
        let hi = grid[grid.len() - 1];
        let ds = build_dataset_mixed_snr(&rng.fork("mixed"), &scenario, cfg.p, lo, hi)?;
        Some(fit(&ds.subset(&train_idx)?, &train_cfg)?)
    } else {
        None
    };
    let fixed_train = cfg
        .train_snr_db
        .map(|db| build_dataset(&data, &scenario, cfg.p, Snr::from_db(db)?))
        .transpose()?;

    let mut out = vec![Vec::with_capacity(grid.len()); methods.len()];
    for &db in grid {
        let snr = Snr::from_db(db)?;
        let ds = build_dataset(&data, &scenario, cfg.p, snr)?;
        let test = ds.subset(&test_idx)?;
        let train = fixed_train.as_ref().unwrap_or(&ds).subset(&train_idx)?;
        for (i, method) in methods.iter().enumerate() {
            let mse = match method {
                Method::Dnn => match &mixed_model {
                    Some(model) => evaluate(&test, |h| predict(model, h))?,
                    None => {
                        let model = fit(&train, &train_cfg)?;
                        evaluate(&test, |h| predict(&model, h))?
                    }
                },
                Method::Argos => {
                    evaluate_linear(&test, &argos_calibrate(&train, cfg.reference_antenna)?)?
                }
                Method::LsDiag => evaluate_linear(&test, &ls_diagonal_calibrate(&train)?)?,
                Method::LsFull => evaluate_linear(&test, &ls_full_calibrate(&train)?)?,
                Method::Crb => crb_mse_for_scenario(
                    &scenario,
                    &CrbSpec::new(cfg.m, cfg.n, train.len(), snr),
                )?,
            };
            out[i].push(mse);
        }
    }
    Ok(out)
}

/// Runs the trials (in parallel, in the given order) and averages them in
/// trial-index order.
fn run_grid(
    cfg: &ExperimentConfig,
    kind: ScenarioKind,
    methods: &[Method],
    order: &[u64],
) -> Result<MseReport> {
    let mut results: Vec<(u64, Result<Vec<Vec<f64>>>)> = order
        .par_iter()
        .map(|&t| (t, run_trial(cfg, kind, methods, t)))
        .collect();
    results.sort_by_key(|(t, _)| *t);
    let mut sums = vec![vec![0.0; cfg.snr_grid_db.len()]; methods.len()];
    for (_, r) in results {
        for (acc, vals) in sums.iter_mut().zip(r?) {
            for (a, v) in acc.iter_mut().zip(vals) {
                *a += v;
            }
        }
    }
    let mut report = MseReport::default();
    for (method, sums) in methods.iter().zip(sums) {
        for (&db, s) in cfg.snr_grid_db.iter().zip(sums) {
            report.push(MseRow {
                scenario: kind.name().to_string(),
                method: method.label().to_string(),
                snr_db: db,
                mse: s / order.len() as f64,
                trials: order.len(),
                seed: cfg.master_seed,
            })?;
        }
    }
    Ok(report)
}

/// Every configured method on the configured scenario across the SNR grid.
pub fn run_snr_sweep(cfg: &ExperimentConfig) -> Result<MseReport> {
    let order: Vec<u64> = (0..cfg.trials as u64).collect();
    run_snr_sweep_in_order(cfg, &order)
}

/// [`run_snr_sweep`] with trials dispatched in `order`, which must be a
/// permutation of `0..trials`. The report does not depend on the order.
pub fn run_snr_sweep_in_order(cfg: &ExperimentConfig, order: &[u64]) -> Result<MseReport> {
    cfg.validate()?;
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..cfg.trials as u64).collect::<Vec<_>>() {
        return Err(CalibError::invalid("trial order must be a permutation of 0..trials"));
    }
    cfg.check_methods_for(cfg.scenario)?;
    run_grid(cfg, cfg.scenario, &cfg.methods, order)
}

fn require_dnn(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.methods.contains(&Method::Dnn) {
        Ok(())
    } else {
        Err(CalibError::Config {
            field: "methods".into(),
            message: "this experiment needs `dnn` among the methods".into(),
        })
    }
}

/// One network per SNR, identical architecture and seed, trained on datasets
/// sharing channels and split; returns per-epoch histories in `snr_list` order.
pub fn run_training_convergence(
    cfg: &ExperimentConfig,
    snr_list: &[f64],
) -> Result<Vec<(f64, TrainHistory)>> {
    cfg.validate()?;
    require_dnn(cfg)?;
    if snr_list.is_empty() {
        return Err(CalibError::invalid("no SNRs given"));
    }
    let rng = SimRng::new(cfg.master_seed).fork("convergence");
    let scenario = draw_scenario(cfg, cfg.scenario, &mut rng.fork("scenario"))?;
    let data = rng.fork("data");
    let (train_idx, test_idx) =
        split_indices(cfg.p, cfg.validation_fraction, &mut rng.fork("split"))?;
    let train_cfg = cfg.train_config();
    snr_list
        .par_iter()
        .map(|&db| {
            let ds = build_dataset(&data, &scenario, cfg.p, Snr::from_db(db)?)?;
            let (_, history) =
                train_split(&ds.subset(&train_idx)?, &ds.subset(&test_idx)?, &train_cfg)?;
            Ok((db, history))
        })
        .collect()
}

/// DNN-only sweep over each configured scenario.
pub fn run_nonlinear_suite(cfg: &ExperimentConfig) -> Result<MseReport> {
    cfg.validate()?;
    require_dnn(cfg)?;
    let order: Vec<u64> = (0..cfg.trials as u64).collect();
    let mut report = MseReport::default();
    for &kind in &cfg.suite_scenarios {
        report.extend(run_grid(cfg, kind, &[Method::Dnn], &order)?)?;
    }
    Ok(report)
}

/// Actual and predicted `|h_DL|^2` of one (antenna, user) coefficient over
/// held-out tanh-type pairs at the trace SNR. Indices are 1-based.
pub fn run_coefficient_trace(
    cfg: &ExperimentConfig,
    bs_antenna: usize,
    user: usize,
    num_samples: usize,
) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    if bs_antenna == 0 || bs_antenna > cfg.m {
        return Err(CalibError::invalid(format!(
            "antenna {bs_antenna} outside [1, {}]",
            cfg.m
        )));
    }
    if user == 0 || user > cfg.n {
        return Err(CalibError::invalid(format!("user {user} outside [1, {}]", cfg.n)));
    }
    let (k, u) = (bs_antenna - 1, user - 1);
    let rng = SimRng::new(cfg.master_seed).fork("trace");
    let scenario = draw_scenario(cfg, ScenarioKind::TanhType, &mut rng.fork("scenario"))?;
    let ds = build_dataset(
        &rng.fork("data"),
        &scenario,
        cfg.p,
        Snr::from_db(cfg.trace_snr_db)?,
    )?;
    let (train, test) = ds.split(cfg.validation_fraction, &mut rng.fork("split"))?;
    if num_samples == 0 || num_samples > test.len() {
        return Err(CalibError::invalid(format!(
            "requested {num_samples} samples but only {} held-out pairs exist",
            test.len()
        )));
    }
    let train_cfg = cfg.train_config();
    let predicted: Vec<f64> = match train_cfg.mode {
        NetMode::PerUser => {
            let (net, _) = train_user(&train, None, &train_cfg, u)?;
            test.pairs[..num_samples]
                .iter()
                .map(|p| Ok(predict_user(&net, &p.h_ul.column(u), train_cfg.target_scale)?[k].norm_sqr()))
                .collect::<Result<_>>()?
        }
        NetMode::Joint => {
            let model = fit(&train, &train_cfg)?;
            test.pairs[..num_samples]
                .iter()
                .map(|p| Ok(predict(&model, &p.h_ul)?[(u, k)].norm_sqr()))
                .collect::<Result<_>>()?
        }
    };
    Ok(predicted
        .into_iter()
        .enumerate()
        .map(|(s, pred)| TraceRow {
            sample: s,
            actual_sq_modulus: test.truth_dl[s][(u, k)].norm_sqr(),
            predicted_sq_modulus: pred,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(methods: &str) -> ExperimentConfig {
        ExperimentConfig::parse(&format!(
            "m = 4\nn = 2\np = 40\ntrials = 3\nsnr_grid_db = 0,20\nepochs = 3\nhidden_dims = 8,8\nmethods = {methods}\ntrace_user = 1\n"
        ))
        .unwrap()
    }

    #[test]
    fn sweep_report_is_complete() {
        let cfg = tiny("dnn,argos,ls_diag,ls_full,crb");
        let report = run_snr_sweep(&cfg).unwrap();
        assert_eq!(report.rows.len(), 5 * 2);
        for m in Method::ALL {
            assert_eq!(report.curve("linear-tdd", m.label()).len(), 2);
        }
    }

    #[test]
    fn noiseless_consistency_cell() {
        let mut cfg = tiny("ls_diag");
        cfg.crosstalk = 0.0;
        cfg.snr_grid_db = vec![200.0];
        let report = run_snr_sweep(&cfg).unwrap();
        assert!(report.rows[0].mse < 1e-12, "{}", report.rows[0].mse);
    }

    #[test]
    fn trial_order_does_not_matter() {
        let cfg = tiny("dnn,ls_full");
        let a = run_snr_sweep_in_order(&cfg, &[0, 1, 2]).unwrap();
        let b = run_snr_sweep_in_order(&cfg, &[2, 0, 1]).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(run_snr_sweep_in_order(&cfg, &[0, 0, 1]).is_err());
    }

    #[test]
    fn strict_mode_rejects_baselines_on_nonlinear() {
        let mut cfg = tiny("dnn,argos");
        cfg.scenario = ScenarioKind::TanhType;
        let err = run_snr_sweep(&cfg).unwrap_err();
        assert!(err.is_config_error());
    }

    #[test]
    fn convergence_and_suite_shapes() {
        let cfg = tiny("dnn");
        let hist = run_training_convergence(&cfg, &[10.0, 20.0]).unwrap();
        assert_eq!(hist.len(), 2);
        assert!(hist.iter().all(|(_, h)| h.records.len() == 3));
        let suite = run_nonlinear_suite(&cfg).unwrap();
        assert_eq!(suite.rows.len(), 3 * 2);
        assert!(run_training_convergence(&tiny("ls_full"), &[10.0]).is_err());
    }

    #[test]
    fn trace_rows() {
        let cfg = tiny("dnn");
        let rows = run_coefficient_trace(&cfg, 2, 2, 5).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.actual_sq_modulus >= 0.0 && r.predicted_sq_modulus >= 0.0));
        assert!(run_coefficient_trace(&cfg, 5, 1, 5).is_err());
        assert!(run_coefficient_trace(&cfg, 1, 3, 5).is_err());
        assert!(run_coefficient_trace(&cfg, 1, 1, 500).is_err());
    }

    #[test]
    fn mixed_snr_training_runs() {
        let mut cfg = tiny("dnn");
        cfg.train_once_mixed_snr = true;
        let report = run_snr_sweep(&cfg).unwrap();
        assert_eq!(report.rows.len(), 2);
        cfg.train_once_mixed_snr = false;
        cfg.train_snr_db = Some(30.0);
        assert_eq!(run_snr_sweep(&cfg).unwrap().rows.len(), 2);
    }
}

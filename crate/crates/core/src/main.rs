use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mimo_calib::calinet::{predict, train};
use mimo_calib::channel::{build_dataset, Snr};
use mimo_calib::config::{parse_methods, ExperimentConfig};
use mimo_calib::formats::{load_dataset, load_model, save_dataset, save_model};
use mimo_calib::harness::{
    draw_scenario, run_coefficient_trace, run_nonlinear_suite, run_snr_sweep,
    run_training_convergence,
};
use mimo_calib::numerics::fmt_f64;
use mimo_calib::report::{convergence_csv, trace_csv};
use mimo_calib::{CalibError, Result, SimRng};

/// Massive MIMO UL/DL channel calibration simulator.
#[derive(Parser)]
#[command(name = "mimo-calib", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (also used as the network seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; defaults to `output_path` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Comma-separated subset of dnn,argos,ls_diag,ls_full,crb.
    #[arg(long, global = true)]
    methods: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// MSE of every method across the SNR grid.
    Sweep {
        /// Train one network per trial on pairs with SNRs spread over the grid.
        #[arg(long)]
        train_once_mixed_snr: bool,
    },
    /// Per-epoch training and validation MSE at several SNRs.
    Converge {
        /// Comma-separated SNRs in dB; defaults to `convergence_snr_db`.
        #[arg(long)]
        snrs: Option<String>,
    },
    /// DNN MSE across the nonlinear scenario suite.
    Scenarios,
    /// Actual vs predicted squared modulus of one DL coefficient.
    Trace {
        #[arg(long)]
        antenna: Option<usize>,
        #[arg(long)]
        user: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Writes a dataset of UL/DL estimate pairs.
    GenDataset {
        #[arg(long)]
        snr_db: Option<f64>,
    },
    /// Trains a model on a dataset file.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Also write the per-epoch history CSV here.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Predicts DL channels for every pair of a dataset file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            CalibError::Io(message) => CalibError::Config {
                field: "config".into(),
                message,
            },
            other => other,
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
        cfg.train_seed = seed;
    }
    if let Some(trials) = common.trials {
        cfg.trials = trials;
    }
    if let Some(methods) = &common.methods {
        cfg.methods = parse_methods(methods)?;
    }
    if let Some(out) = &common.out {
        cfg.output_path = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_db_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim().parse::<f64>().map_err(|e| CalibError::Config {
                field: "snrs".into(),
                message: format!("`{v}`: {e}"),
            })
        })
        .collect()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CalibError::Io(format!("{}: {e}", path.display())))
}

/// Writes `<out>.meta.txt` next to a report.
fn write_meta(out: &Path, command: &str, cfg: &ExperimentConfig) -> Result<()> {
    let mut meta = String::new();
    let _ = writeln!(meta, "# mimo-calib {command}");
    let _ = writeln!(
        meta,
        "# MSE is the mean squared error per complex DL coefficient against the noiseless DL channel"
    );
    meta.push_str(&cfg.serialize());
    let mut name = out.as_os_str().to_owned();
    name.push(".meta.txt");
    write_file(Path::new(&name), &meta)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let out = PathBuf::from(&cfg.output_path);
    match cli.command {
        Command::Sweep {
            train_once_mixed_snr,
        } => {
            cfg.train_once_mixed_snr |= train_once_mixed_snr;
            let report = run_snr_sweep(&cfg)?;
            write_file(&out, &report.to_csv())?;
            write_meta(&out, "sweep", &cfg)?;
        }
        Command::Converge { snrs } => {
            let snrs = match snrs {
                Some(s) => parse_db_list(&s)?,
                None => cfg.convergence_snr_db.clone(),
            };
            let histories = run_training_convergence(&cfg, &snrs)?;
            write_file(&out, &convergence_csv(&histories))?;
            write_meta(&out, "converge", &cfg)?;
        }
        Command::Scenarios => {
            let report = run_nonlinear_suite(&cfg)?;
            write_file(&out, &report.to_csv())?;
            write_meta(&out, "scenarios", &cfg)?;
        }
        Command::Trace {
            antenna,
            user,
            samples,
        } => {
            cfg.trace_antenna = antenna.unwrap_or(cfg.trace_antenna);
            cfg.trace_user = user.unwrap_or(cfg.trace_user);
            cfg.trace_samples = samples.unwrap_or(cfg.trace_samples);
            cfg.validate()?;
            let rows =
                run_coefficient_trace(&cfg, cfg.trace_antenna, cfg.trace_user, cfg.trace_samples)?;
            write_file(&out, &trace_csv(&rows))?;
            write_meta(&out, "trace", &cfg)?;
        }
        Command::GenDataset { snr_db } => {
            let snr = Snr::from_db(snr_db.unwrap_or(cfg.trace_snr_db))?;
            let rng = SimRng::new(cfg.master_seed).fork("gen-dataset");
            let scenario = draw_scenario(&cfg, cfg.scenario, &mut rng.fork("scenario"))?;
            let ds = build_dataset(&rng.fork("data"), &scenario, cfg.p, snr)?;
            save_dataset(&ds, &out)?;
        }
        Command::Train { data, history } => {
            let ds = load_dataset(&data)?;
            let (model, hist) = train(&ds, &cfg.train_config())?;
            save_model(&model, &out)?;
            if let Some(path) = history {
                let snr = ds.snr().map_or(f64::NAN, |s| s.db());
                write_file(&path, &convergence_csv(&[(snr, hist)]))?;
            }
        }
        Command::Predict { model, data } => {
            let model = load_model(&model)?;
            let ds = load_dataset(&data)?;
            let mut csv = String::from("sample,user,antenna,re,im\n");
            for (s, pair) in ds.pairs.iter().enumerate() {
                let h = predict(&model, &pair.h_ul)?;
                for u in 0..h.rows() {
                    for k in 0..h.cols() {
                        let z = h[(u, k)];
                        let _ = writeln!(
                            csv,
                            "{s},{},{},{},{}",
                            u + 1,
                            k + 1,
                            fmt_f64(z.re),
                            fmt_f64(z.im)
                        );
                    }
                }
            }
            write_file(&out, &csv)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}

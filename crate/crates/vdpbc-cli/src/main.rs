//! Command-line front end: runs tracking scenarios, parameter sweeps, and
//! the numerical certification suite.
//!
//! Exit codes are a stable contract: 0 success, 1 validation failure,
//! 2 divergence, 3 certification failure.

mod scenario;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{error::ErrorKind, Parser, Subcommand};
use nalgebra::DVector;

use scenario::Scenario;
use vdpbc::control::{FjrController, SineReference};
use vdpbc::phmech::PhaseState;
use vdpbc::sim::{simulate_closed_loop, SimError, SimulationRecord};
use vdpbc::verify::{run_all_checks, VerifyModel};

const EXIT_VALIDATION: i32 = 1;
const EXIT_DIVERGENCE: i32 = 2;
const EXIT_CERTIFICATION: i32 = 3;

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "vdpbc",
    version,
    about = "Tracking control of flexible-joint robots with numerical contraction certificates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file: simulate the closed loop, write a time-series
    /// CSV and a summary.
    Run {
        scenario: PathBuf,
        /// Override `integrator.dt`.
        #[arg(long)]
        dt: Option<f64>,
        /// Override `integrator.t_end`.
        #[arg(long)]
        t_end: Option<f64>,
        /// Override `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the numerical certification suite against a bundled model.
    Verify {
        /// Model selector: table1 | two-link | two-link-broken.
        #[arg(long, default_value = "table1")]
        model: String,
        /// Directory to write the report into (defaults to stdout only).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Run a scenario once per value of one parameter and aggregate the
    /// summaries into a CSV.
    Sweep {
        scenario: PathBuf,
        /// Dotted scenario key to sweep, e.g. model.stiffness.
        #[arg(long)]
        param: String,
        /// Comma-separated list of values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        t_end: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(EXIT_VALIDATION);
        }
    };
    if let Err(f) = dispatch(cli) {
        eprintln!("error: {}", f.message);
        std::process::exit(f.code);
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            scenario,
            dt,
            t_end,
            out,
            seed,
        } => {
            let mut sc = scenario::load(&scenario).map_err(Failure::validation)?;
            apply_overrides(&mut sc, dt, t_end, out, seed)?;
            let (record, summary) = run_scenario(&sc)?;
            let csv_path = sc.out_dir.join(format!("{}.csv", sc.name));
            write_csv(&csv_path, &record).map_err(Failure::validation)?;
            let summary_path = sc.out_dir.join(format!("{}_summary.txt", sc.name));
            std::fs::write(&summary_path, &summary)
                .map_err(|e| Failure::validation(format!("cannot write summary: {e}")))?;
            print!("{summary}");
            println!("time series: {}", csv_path.display());
            Ok(())
        }
        Command::Verify { model, out, seed } => {
            let selector = VerifyModel::parse(&model).ok_or_else(|| {
                Failure::validation(format!(
                    "unknown model `{model}` (expected table1, two-link or two-link-broken)"
                ))
            })?;
            let report = run_all_checks(selector, seed);
            let text = report.render();
            print!("{text}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)
                    .map_err(|e| Failure::validation(format!("cannot create {}: {e}", dir.display())))?;
                let path = dir.join(format!("certification_{model}.txt"));
                std::fs::write(&path, &text)
                    .map_err(|e| Failure::validation(format!("cannot write report: {e}")))?;
            }
            if report.passed() {
                Ok(())
            } else {
                Err(Failure {
                    code: EXIT_CERTIFICATION,
                    message: format!("certification failed for model {model}"),
                })
            }
        }
        Command::Sweep {
            scenario,
            param,
            values,
            dt,
            t_end,
            out,
            seed,
        } => sweep(&scenario, &param, &values, dt, t_end, out, seed),
    }
}

fn apply_overrides(
    sc: &mut Scenario,
    dt: Option<f64>,
    t_end: Option<f64>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    if let Some(dt) = dt {
        if dt <= 0.0 || !dt.is_finite() {
            return Err(Failure::validation(format!("--dt must be positive, got {dt}")));
        }
        sc.dt = dt;
    }
    if let Some(t_end) = t_end {
        if t_end < sc.dt || !t_end.is_finite() {
            return Err(Failure::validation(format!(
                "--t-end must be at least dt, got {t_end}"
            )));
        }
        sc.t_end = t_end;
    }
    if let Some(out) = out {
        sc.out_dir = out;
    }
    if let Some(seed) = seed {
        sc.seed = seed;
    }
    Ok(())
}

/// Simulates one validated scenario and renders its summary.
fn run_scenario(sc: &Scenario) -> Result<(SimulationRecord, String), Failure> {
    std::fs::create_dir_all(&sc.out_dir)
        .map_err(|e| Failure::validation(format!("cannot create {}: {e}", sc.out_dir.display())))?;
    let model = sc.model.build();
    let cfg = sc.controller_config();
    let traj = SineReference::scalar(sc.amplitude, sc.frequency, sc.phase, sc.offset);
    let ctrl = FjrController::new(&model, &cfg, &traj).map_err(|e| Failure {
        code: EXIT_CERTIFICATION,
        message: format!("controller synthesis failed: {e}"),
    })?;
    let x0 = PhaseState::new(
        DVector::from_vec(vec![sc.initial[0], sc.initial[1]]),
        DVector::from_vec(vec![sc.initial[2], sc.initial[3]]),
    )
    .expect("scalar state");
    let record = simulate_closed_loop(&ctrl, &sc.integrator(), &x0).map_err(|e| match e {
        SimError::Divergence { t, norm } => Failure {
            code: EXIT_DIVERGENCE,
            message: format!("simulation diverged at t = {t:.6} s (norm {norm:.3e})"),
        },
        other => Failure::validation(other.to_string()),
    })?;

    let cert = ctrl.certificate();
    let s = &record.summary;
    let mut text = String::new();
    text.push_str(&format!("scenario: {}\n", sc.name));
    text.push_str(&format!(
        "model: single flexible joint, stiffness {} N·m/rad\n",
        sc.model.stiffness
    ));
    text.push_str(&format!(
        "integrator: {:?}, dt = {:e} s, horizon = {} s, stride {}\n",
        sc.scheme, sc.dt, sc.t_end, sc.record_stride
    ));
    text.push_str(&format!(
        "rates: beta_link = {:.6}, beta_motor = {:.6}, momentum channel = {:.6} (blockwise {:.4}/{:.4})\n",
        cert.beta_link,
        cert.beta_motor,
        cert.momentum_rate,
        cert.blockwise_momentum_rates[0],
        cert.blockwise_momentum_rates[1],
    ));
    text.push_str(&format!("beta (guaranteed) = {:.6}\n", cert.beta));
    match &s.decay {
        Some(d) => text.push_str(&format!(
            "beta_hat (measured) = {:.6}{}\n",
            d.beta_hat,
            if d.truncated { " [truncated window]" } else { "" }
        )),
        None => text.push_str("beta_hat (measured) = n/a\n"),
    }
    text.push_str(&format!(
        "final link position error = {:e} rad\n",
        s.final_link_pos_err
    ));
    text.push_str(&format!("final momentum error = {:e}\n", s.final_mom_err));
    text.push_str(&format!("peak |u| = {:e} N·m\n", s.peak_control));
    match s.transient_time_pos {
        Some(t) => text.push_str(&format!(
            "transient time to |link position error| < 1e-3: {t:.4} s\n"
        )),
        None => text.push_str("transient time to |link position error| < 1e-3: not reached\n"),
    }
    Ok((record, text))
}

/// Writes the time-series CSV with the fixed scalar-joint schema.
fn write_csv(path: &Path, rec: &SimulationRecord) -> Result<(), String> {
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| format!("cannot write {}: {e}", path.display()))?,
    );
    let mut emit = || -> std::io::Result<()> {
        writeln!(
            out,
            "t,q_l,q_m,p_l,p_m,u,u_ff,u_fb,err_q_l,err_q_m,sigma_l,sigma_m,H,V,dVdt"
        )?;
        for k in 0..rec.t.len() {
            let x = &rec.states[k];
            let e = &rec.error_coords[k];
            writeln!(
                out,
                "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                rec.t[k],
                x.q[0],
                x.q[1],
                x.p[0],
                x.p[1],
                rec.controls[k][0],
                rec.controls_ff[k][0],
                rec.controls_fb[k][0],
                e[0],
                e[1],
                e[2],
                e[3],
                rec.energy[k],
                rec.storage[k],
                rec.storage_rate[k],
            )?;
        }
        Ok(())
    };
    emit().map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn sanitize_param(name: &str) -> String {
    name.replace('.', "_")
}

fn sanitize_value(value: &str) -> String {
    value.replace('.', "p").replace('-', "m")
}

struct SweepOutcome {
    beta: f64,
    beta_hat: Option<f64>,
    transient: Option<f64>,
    peak: f64,
    final_err: f64,
}

struct SweepRow {
    value: f64,
    outcome: Result<SweepOutcome, Failure>,
}

fn sweep(
    scenario_path: &Path,
    param: &str,
    values: &str,
    dt: Option<f64>,
    t_end: Option<f64>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<(), Failure> {
    let text = std::fs::read_to_string(scenario_path)
        .map_err(|e| Failure::validation(format!("cannot read {}: {e}", scenario_path.display())))?;
    let base_name = scenario_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".into());
    let parsed: Vec<f64> = values
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Failure::validation(format!("bad sweep value `{s}`")))
        })
        .collect::<Result<_, _>>()?;
    if parsed.is_empty() {
        return Err(Failure::validation("empty sweep value list"));
    }

    // Each run owns its scenario and output files; runs execute in
    // parallel and results are collected in value order.
    let mut rows: Vec<Option<SweepRow>> = (0..parsed.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for &value in &parsed {
            let text = &text;
            let base_name = &base_name;
            let out = out.clone();
            handles.push(scope.spawn(move || {
                let patched = scenario::override_key(text, param, &format!("{value}"));
                let name = format!("{base_name}_{}_{}", sanitize_param(param), sanitize_value(&format!("{value}")));
                let outcome = (|| {
                    let mut sc = scenario::from_text(&patched, name).map_err(Failure::validation)?;
                    apply_overrides(&mut sc, dt, t_end, out, seed)?;
                    let (record, _) = run_scenario(&sc)?;
                    let csv_path = sc.out_dir.join(format!("{}.csv", sc.name));
                    write_csv(&csv_path, &record).map_err(Failure::validation)?;
                    let model = sc.model.build();
                    let cfg = sc.controller_config();
                    let cert = cfg.validate(&model).map_err(|e| Failure {
                        code: EXIT_CERTIFICATION,
                        message: e.to_string(),
                    })?;
                    let s = &record.summary;
                    Ok(SweepOutcome {
                        beta: cert.beta,
                        beta_hat: s.decay.as_ref().map(|d| d.beta_hat),
                        transient: s.transient_time_pos,
                        peak: s.peak_control,
                        final_err: s.final_link_pos_err,
                    })
                })();
                SweepRow { value, outcome }
            }));
        }
        for (slot, handle) in rows.iter_mut().zip(handles) {
            *slot = Some(handle.join().expect("sweep worker"));
        }
    });

    let out_dir = out.unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| Failure::validation(format!("cannot create {}: {e}", out_dir.display())))?;
    let agg_path = out_dir.join(format!("sweep_{}.csv", sanitize_param(param)));
    let mut lines =
        String::from("param,value,status,beta,beta_hat,transient_time,peak_u,final_link_pos_err\n");
    let mut failures = 0;
    let mut first_failure_code = EXIT_VALIDATION;
    for row in rows.into_iter().flatten() {
        match row.outcome {
            Ok(o) => {
                lines.push_str(&format!(
                    "{},{:e},ok,{:e},{},{},{:e},{:e}\n",
                    param,
                    row.value,
                    o.beta,
                    o.beta_hat.map(|b| format!("{b:e}")).unwrap_or_default(),
                    o.transient.map(|t| format!("{t:e}")).unwrap_or_default(),
                    o.peak,
                    o.final_err,
                ));
            }
            Err(f) => {
                if failures == 0 {
                    first_failure_code = f.code;
                }
                failures += 1;
                lines.push_str(&format!(
                    "{},{:e},\"error: {}\",,,,,\n",
                    param, row.value, f.message
                ));
            }
        }
    }
    std::fs::write(&agg_path, &lines)
        .map_err(|e| Failure::validation(format!("cannot write {}: {e}", agg_path.display())))?;
    print!("{lines}");
    println!("sweep summary: {}", agg_path.display());
    if failures == parsed.len() {
        return Err(Failure {
            code: first_failure_code,
            message: "every sweep run failed".into(),
        });
    }
    Ok(())
}

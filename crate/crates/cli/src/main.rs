use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand};
use rover_core::gateway::{self, GatewayConfig};
use rover_core::kinematics::actuator_sizing;
use rover_core::telemetry::{parse_command_log, parse_telemetry, TimedCommand};
use rover_core::{load_scenario, RobotParams, Simulation};

#[derive(Parser)]
#[command(name = "rover", version, about = "Deterministic delivery-robot twin")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// No gateway; run as fast as possible.
        #[arg(long)]
        headless: bool,
        /// Serve telemetry and accept commands on this address.
        #[arg(long, value_name = "ADDR", num_args = 0..=1, default_missing_value = gateway::DEFAULT_ADDR)]
        serve: Option<String>,
        /// Telemetry log (exact byte stream).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Metrics JSON; printed to stdout when omitted.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Trajectory CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Replay a recorded command log.
        #[arg(long)]
        commands: Option<PathBuf>,
        /// Write the commands applied in this run.
        #[arg(long)]
        record_commands: Option<PathBuf>,
        /// Pace the loop to wall-clock time.
        #[arg(long)]
        realtime: bool,
    },
    /// Print motor speed and torque requirements.
    Size {
        /// Robot parameter file (TOML); defaults when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Target ground speed, m/s.
        #[arg(long)]
        v: f64,
        #[arg(long)]
        json: bool,
    },
    /// Re-broadcast a telemetry log at its recorded pace.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value = gateway::DEFAULT_ADDR)]
        serve: String,
        /// Playback speed multiplier.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
}

fn write_file(path: &Path, data: &str) -> Result<(), String> {
    fs::write(path, data).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

#[allow(clippy::too_many_arguments)]
fn run(
    scenario: &Path,
    seed: Option<u64>,
    headless: bool,
    serve: Option<String>,
    log: Option<PathBuf>,
    metrics: Option<PathBuf>,
    csv: Option<PathBuf>,
    commands: Option<PathBuf>,
    record_commands: Option<PathBuf>,
    realtime: bool,
) -> Result<(), String> {
    let mut sc = load_scenario(scenario).map_err(|e| format!("{}: {e}", scenario.display()))?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    let recorded: Vec<TimedCommand> = match &commands {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| format!("cannot read {}: {e}", p.display()))?;
            parse_command_log(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => Vec::new(),
    };
    let gw = match (&serve, headless) {
        (Some(addr), false) => Some(gateway::serve(addr, GatewayConfig::default()).map_err(|e| e.to_string())?),
        (Some(_), true) => {
            log::warn!("--serve ignored in headless mode");
            None
        }
        _ => None,
    };
    if let Some(g) = &gw {
        eprintln!("serving telemetry on {}", g.url());
    }

    let mut log_file = match &log {
        Some(p) => Some(fs::File::create(p).map_err(|e| format!("cannot create {}: {e}", p.display()))?),
        None => None,
    };
    let mut sim = Simulation::with_commands(sc.clone(), &recorded);
    let wall0 = Instant::now();
    while !sim.is_done() {
        if let Some(g) = &gw {
            for c in g.try_commands() {
                log::info!("operator command from client {}: {:?}", c.client_id, c.kind);
                sim.push_command(c.kind);
            }
        }
        if realtime {
            let due = Duration::from_secs_f64(sim.time());
            if let Some(wait) = due.checked_sub(wall0.elapsed()) {
                std::thread::sleep(wait);
            }
        }
        if let Some(line) = sim.step() {
            if let Some(g) = &gw {
                g.publish(&line);
            }
            if let Some(f) = &mut log_file {
                f.write_all(line.as_bytes()).map_err(|e| format!("telemetry log: {e}"))?;
            }
        }
    }
    let out = sim.finish();
    if let Some(p) = &csv {
        write_file(p, &out.csv)?;
    }
    if let Some(p) = &record_commands {
        write_file(p, &out.command_log)?;
    }
    let json = out.metrics.to_json();
    match &metrics {
        Some(p) => write_file(p, &json)?,
        None => print!("{json}"),
    }
    Ok(())
}

fn size(params: Option<PathBuf>, v: f64, json: bool) -> Result<(), String> {
    let p: RobotParams = match params {
        Some(path) => {
            let text = fs::read_to_string(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?
        }
        None => RobotParams::default(),
    };
    let r = actuator_sizing(&p, v).map_err(|e| e.to_string())?;
    if json {
        println!("{}", serde_json::to_string_pretty(&r).map_err(|e| e.to_string())?);
    } else {
        println!("omega_required = {} rad/s", r.omega_required);
        println!("rpm_required = {} rpm", r.rpm_required);
        println!("weight = {} N", r.weight);
        println!("wheel_load = {} N", r.wheel_load);
        println!("traction_force = {} N", r.traction_force);
        println!("startup_torque = {} N*m", r.startup_torque);
    }
    Ok(())
}

fn replay(log: &Path, addr: &str, speed: f64) -> Result<(), String> {
    if !(speed > 0.0) {
        return Err("--speed must be positive".into());
    }
    let text = fs::read_to_string(log).map_err(|e| format!("cannot read {}: {e}", log.display()))?;
    let g = gateway::serve(addr, GatewayConfig::default()).map_err(|e| e.to_string())?;
    eprintln!("replaying {} on {}", log.display(), g.url());
    let wall0 = Instant::now();
    let mut t0 = None;
    for line in text.split_inclusive('\n') {
        let t = parse_telemetry(line).map_err(|e| format!("{}: {e}", log.display()))?.t;
        let start = *t0.get_or_insert(t);
        let due = Duration::from_secs_f64((t - start).max(0.0) / speed);
        if let Some(wait) = due.checked_sub(wall0.elapsed()) {
            std::thread::sleep(wait);
        }
        g.publish(line);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            seed,
            headless,
            serve,
            log,
            metrics,
            csv,
            commands,
            record_commands,
            realtime,
        } => run(&scenario, seed, headless, serve, log, metrics, csv, commands, record_commands, realtime),
        Command::Size { params, v, json } => size(params, v, json),
        Command::Replay { log, serve, speed } => replay(&log, &serve, speed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use shadowstage_cli::serve::{self, ServeConfig};
use shadowstage_cli::{load, replay, run, validate, Failure, ReplayOutcome, RunOptions};

#[derive(Parser)]
#[command(name = "shadowstage", version, about = "Headless avatar-direction runtime")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a show file and everything it references.
    Validate {
        show: PathBuf,
        /// Treat warnings (loop seams, unknown fields under --lenient) as failures.
        #[arg(long)]
        strict: bool,
        /// Report unknown fields as warnings instead of errors.
        #[arg(long)]
        lenient: bool,
    },
    /// Simulate headless and print the log hash.
    Run {
        show: PathBuf,
        /// Seconds per tick.
        #[arg(long = "fixed-step", default_value_t = shadowstage::stage::DEFAULT_DT)]
        fixed_step: f64,
        /// Pace ticks to the wall clock.
        #[arg(long)]
        realtime: bool,
        /// Input trace: lines of `<tick> <control or mocap record>`.
        #[arg(long)]
        script: Option<PathBuf>,
        /// Write the snapshot log (newline-delimited JSON) here.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Number of ticks (default: up to the last scripted tick, or 600).
        #[arg(long)]
        ticks: Option<u64>,
        #[arg(long)]
        lenient: bool,
    },
    /// Re-simulate a recorded log and report the first divergence.
    Replay {
        show: PathBuf,
        log: PathBuf,
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long)]
        lenient: bool,
    },
    /// Serve the control, mocap and console sockets in real time.
    Serve {
        show: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long = "control-port", default_value_t = 7400)]
        control_port: u16,
        #[arg(long = "mocap-port", default_value_t = 7401)]
        mocap_port: u16,
        #[arg(long = "ws-port", default_value_t = 7402)]
        ws_port: u16,
        #[arg(long = "fixed-step", default_value_t = shadowstage::stage::DEFAULT_DT)]
        fixed_step: f64,
        #[arg(long)]
        lenient: bool,
    },
}

fn execute(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Validate { show, strict, lenient } => {
            let report = validate(&show, strict, lenient);
            for e in &report.errors {
                println!("error: {e}");
            }
            for w in &report.warnings {
                println!("warning: {w}");
            }
            if report.exit_code == 0 {
                println!("{}: ok ({} warning(s))", show.display(), report.warnings.len());
                Ok(())
            } else {
                Err(Failure::config(anyhow::anyhow!(
                    "{}: {} error(s), {} warning(s)",
                    show.display(),
                    report.errors.len(),
                    report.warnings.len()
                )))
            }
        }
        Cmd::Run {
            show,
            fixed_step,
            realtime,
            script,
            log,
            ticks,
            lenient,
        } => {
            let summary = run(
                &show,
                &RunOptions {
                    dt: fixed_step,
                    realtime,
                    script,
                    log,
                    ticks,
                    lenient,
                },
            )?;
            println!("ticks {}", summary.ticks);
            println!("diagnostics {}", summary.diagnostics);
            println!("hash {}", summary.hash);
            println!("wall {:.3}s", summary.wall.as_secs_f64());
            Ok(())
        }
        Cmd::Replay {
            show,
            log,
            script,
            lenient,
        } => match replay(&show, &log, script.as_deref(), lenient)? {
            ReplayOutcome::Identical { lines, hash } => {
                println!("identical: {lines} lines");
                println!("hash {hash}");
                Ok(())
            }
            ReplayOutcome::Diverged { line, expected, found } => {
                println!("expected: {expected}");
                println!("found:    {found}");
                Err(Failure::config(anyhow::anyhow!("replay diverged at line {line}")))
            }
        },
        Cmd::Serve {
            show,
            bind,
            control_port,
            mocap_port,
            ws_port,
            fixed_step,
            lenient,
        } => {
            let show = load(&show, lenient)?;
            let handle = serve::start(
                show,
                &ServeConfig {
                    bind,
                    control_port,
                    mocap_port,
                    ws_port,
                    dt: fixed_step,
                },
            )?;
            println!("control {}", handle.control_addr);
            println!("mocap {}", handle.mocap_addr);
            println!("console ws://{}", handle.ws_addr);
            handle.wait();
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("shadowstage: {f}");
            ExitCode::from(f.code)
        }
    }
}

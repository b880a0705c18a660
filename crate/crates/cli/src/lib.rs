//! Command implementations behind the `shadowstage` binary.
//!
//! Exit codes: 0 clean, 1 validation or configuration error, 2 runtime abort.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::json;
use shadowstage::protocol::{
    encode_snapshot, load_show, map_control, parse_trace, Parsed, Show, ShowErrors, TraceEntry, TraceInput,
};
use shadowstage::stage::{Command, LogHasher, Stage};

pub mod serve;

/// Ticks run when neither `--ticks` nor a script says otherwise (10 s at 60 Hz).
pub const DEFAULT_TICKS: u64 = 600;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn config(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 1,
            error: error.into(),
        }
    }

    pub fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 2,
            error: error.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl std::error::Error for Failure {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
    pub exit_code: u8,
}

/// Runs every loader check. `strict` turns warnings into failures; `lenient`
/// downgrades unknown fields to warnings.
pub fn validate(path: &Path, strict: bool, lenient: bool) -> ValidationReport {
    let (errors, warnings) = match load_show(path, !lenient) {
        Ok(Parsed { warnings, .. }) => (Vec::new(), warnings.iter().map(ToString::to_string).collect()),
        Err(ShowErrors(errors)) => (errors.iter().map(ToString::to_string).collect(), Vec::new()),
    };
    let exit_code = u8::from(!errors.is_empty() || (strict && !warnings.is_empty()));
    ValidationReport {
        errors,
        warnings,
        exit_code,
    }
}

pub fn load(path: &Path, lenient: bool) -> Result<Arc<Show>, Failure> {
    match load_show(path, !lenient) {
        Ok(p) => {
            for w in &p.warnings {
                log::warn!("{w}");
            }
            Ok(Arc::new(p.value))
        }
        Err(e) => Err(Failure::config(anyhow::anyhow!("{}: invalid show\n{e}", path.display()))),
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub dt: f64,
    pub realtime: bool,
    pub script: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub ticks: Option<u64>,
    pub lenient: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            dt: shadowstage::stage::DEFAULT_DT,
            realtime: false,
            script: None,
            log: None,
            ticks: None,
            lenient: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub ticks: u64,
    pub hash: String,
    pub wall: Duration,
    pub diagnostics: usize,
}

/// Reads a trace and rejects inputs naming avatars the show does not have.
pub fn load_script(path: &Path, show: &Show) -> Result<Vec<TraceEntry>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(anyhow::anyhow!("cannot read script {}: {e}", path.display())))?;
    let entries = parse_trace(&text).map_err(|e| Failure::config(anyhow::anyhow!("{}: {e}", path.display())))?;
    for e in &entries {
        if let Some(avatar) = e.input.avatar() {
            if show.avatar(avatar).is_none() {
                return Err(Failure::config(anyhow::anyhow!(
                    "{}: tick {}: unknown avatar {avatar:?}",
                    path.display(),
                    e.tick
                )));
            }
        }
    }
    Ok(entries)
}

fn to_command(input: &TraceInput, show: &Show) -> Option<Command> {
    match input {
        TraceInput::Control(c) => map_control(c, &show.controls),
        TraceInput::Mocap(f) => Some(Command::Mocap(f.clone())),
    }
}

pub fn header_line(show_path: &Path, show: &Show, dt: f64, ticks: u64) -> String {
    json!({
        "type": "header",
        "format": 1,
        "show": show_path.file_name().map(|n| n.to_string_lossy().into_owned()),
        "dt": dt,
        "ticks": ticks,
        "avatars": show.avatars.iter().map(|a| a.id.as_str()).collect::<Vec<_>>(),
    })
    .to_string()
}

/// Simulates `ticks` steps, feeding scripted inputs, and hands every log line to `sink`.
pub fn simulate(
    show: Arc<Show>,
    dt: f64,
    ticks: u64,
    script: &[TraceEntry],
    realtime: bool,
    mut sink: impl FnMut(&str) -> std::io::Result<()>,
) -> Result<usize, Failure> {
    let mut stage = Stage::new(show.clone(), dt).map_err(Failure::config)?;
    let mut next = 0;
    let mut diagnostics = 0;
    let start = Instant::now();
    for k in 0..ticks {
        while next < script.len() && script[next].tick <= k {
            if let Some(c) = to_command(&script[next].input, &show) {
                stage.push(c);
            }
            next += 1;
        }
        if realtime {
            let due = start + Duration::from_secs_f64(k as f64 * dt);
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
        }
        let snap = stage.tick();
        for d in &snap.diagnostics {
            log::info!("tick {}: {d}", snap.tick);
        }
        diagnostics += snap.diagnostics.len();
        sink(&encode_snapshot(&snap)).map_err(Failure::runtime)?;
    }
    if next < script.len() {
        log::warn!("{} scripted input(s) fall after the last tick and were not delivered", script.len() - next);
    }
    Ok(diagnostics)
}

pub fn run(show_path: &Path, opts: &RunOptions) -> Result<RunSummary, Failure> {
    if !(opts.dt > 0.0 && opts.dt.is_finite()) {
        return Err(Failure::config(anyhow::anyhow!("--fixed-step must be positive")));
    }
    let show = load(show_path, opts.lenient)?;
    let script = match &opts.script {
        Some(p) => load_script(p, &show)?,
        None => Vec::new(),
    };
    let ticks = opts
        .ticks
        .unwrap_or_else(|| script.last().map_or(DEFAULT_TICKS, |e| e.tick + 1));

    let mut log = match &opts.log {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| {
            Failure::runtime(anyhow::anyhow!("cannot create log {}: {e}", p.display()))
        })?)),
        None => None,
    };
    let mut hasher = LogHasher::new();
    let mut emit = |line: &str| -> std::io::Result<()> {
        hasher.line(line);
        if let Some(w) = &mut log {
            writeln!(w, "{line}")?;
        }
        Ok(())
    };
    let started = Instant::now();
    emit(&header_line(show_path, &show, opts.dt, ticks)).map_err(Failure::runtime)?;
    let diagnostics = simulate(show, opts.dt, ticks, &script, opts.realtime, &mut emit)?;
    if let Some(w) = &mut log {
        w.flush().map_err(Failure::runtime)?;
    }
    Ok(RunSummary {
        ticks,
        hash: hasher.finish(),
        wall: started.elapsed(),
        diagnostics,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReplayOutcome {
    Identical { lines: usize, hash: String },
    Diverged { line: usize, expected: String, found: String },
}

/// Re-simulates a recorded log (same show, same script, dt and tick count
/// taken from its header) and compares it line by line.
pub fn replay(show_path: &Path, log_path: &Path, script: Option<&Path>, lenient: bool) -> Result<ReplayOutcome, Failure> {
    let show = load(show_path, lenient)?;
    let file = File::open(log_path)
        .map_err(|e| Failure::config(anyhow::anyhow!("cannot read log {}: {e}", log_path.display())))?;
    let recorded: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(Failure::config)?;
    let header: serde_json::Value = recorded
        .first()
        .and_then(|l| serde_json::from_str(l).ok())
        .filter(|h: &serde_json::Value| h["type"] == "header")
        .ok_or_else(|| Failure::config(anyhow::anyhow!("{}: missing header line", log_path.display())))?;
    let (Some(dt), Some(ticks)) = (header["dt"].as_f64(), header["ticks"].as_u64()) else {
        return Err(Failure::config(anyhow::anyhow!("{}: header lacks dt/ticks", log_path.display())));
    };
    let script = match script {
        Some(p) => load_script(p, &show)?,
        None => Vec::new(),
    };

    let mut produced = vec![header_line(show_path, &show, dt, ticks)];
    simulate(show, dt, ticks, &script, false, |l| {
        produced.push(l.to_string());
        Ok(())
    })?;
    for (i, (want, got)) in recorded.iter().zip(&produced).enumerate() {
        if want != got {
            return Ok(ReplayOutcome::Diverged {
                line: i + 1,
                expected: want.clone(),
                found: got.clone(),
            });
        }
    }
    if recorded.len() != produced.len() {
        let line = recorded.len().min(produced.len()) + 1;
        let at = |v: &[String]| v.get(line - 1).cloned().unwrap_or_else(|| "<end of log>".into());
        return Ok(ReplayOutcome::Diverged {
            line,
            expected: at(&recorded),
            found: at(&produced),
        });
    }
    let mut hasher = LogHasher::new();
    for l in &produced {
        hasher.line(l);
    }
    Ok(ReplayOutcome::Identical {
        lines: produced.len(),
        hash: hasher.finish(),
    })
}

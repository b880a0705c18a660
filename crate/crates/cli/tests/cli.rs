use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;
use std::time::{Duration, Instant};

use shadowstage::protocol::{encode_mocap_frame, parse_server_message, MocapFrame, ServerMessage, Show};
use shadowstage::stage::{self, Stage};
use shadowstage_cli::serve::{self, ServeConfig, ServerHandle};
use tungstenite::{Message, WebSocket};

fn shows() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../shows")
}

fn golden() -> PathBuf {
    shows().join("shadow.json")
}

fn trace() -> PathBuf {
    shows().join("shadow.trace")
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shadowstage")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn hash_of(out: &Output) -> String {
    stdout(out)
        .lines()
        .find_map(|l| l.strip_prefix("hash ").map(str::to_string))
        .unwrap_or_else(|| panic!("no hash in {:?}", stdout(out)))
}

const SMALL: &str = r#"{
    "version": 1,
    "skeletons": [{"name": "s", "bones": [{"name": "root", "translation": [0, 1, 0]},
                                          {"name": "arm", "parent": "root", "translation": [0.3, 0.4, 0]}]}],
    "clips": [
        {"name": "rest", "skeleton": "s", "duration": 1.0, "loopable": true, "salience": "idle",
         "tracks": {"root": [{"t": 0, "translation": [0, 1, 0]}, {"t": 1.0, "translation": [0.3, 1, 0]}]}},
        {"name": "wave", "skeleton": "s", "duration": 0.5, "salience": "salient",
         "tracks": {"arm": [{"t": 0}, {"t": 0.5, "rotation": [0.9, 0, 0, 0.43]}]}}
    ],
    "avatars": [{"id": "a", "skeleton": "s", "idle_clip": "rest",
                 "controller": {"origin": "external", "decision": "external", "source": "clips"}}],
    "cues": [{"id": "C1", "avatar": "a", "salient": "wave", "idle": "rest"}]
}"#;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn validate_exit_codes() {
    assert_eq!(code(&cli(&["validate", golden().to_str().unwrap()])), 0);

    let dir = tempfile::tempdir().unwrap();
    // the idle loop ends 0.3 m away from where it starts
    let seamy = write(dir.path(), "seam.json", SMALL);
    let lax = cli(&["validate", seamy.to_str().unwrap()]);
    assert_eq!(code(&lax), 0);
    assert!(stdout(&lax).contains("loop seam"), "{}", stdout(&lax));
    assert_eq!(code(&cli(&["validate", "--strict", seamy.to_str().unwrap()])), 1);

    let dangling = write(dir.path(), "dangling.json", &SMALL.replace("\"salient\": \"wave\"", "\"salient\": \"bow\""));
    let out = cli(&["validate", dangling.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("\"bow\""));

    let missing = dir.path().join("absent.json");
    assert_eq!(code(&cli(&["validate", missing.to_str().unwrap()])), 1);
}

#[test]
fn zero_ticks_logs_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("run.log");
    let out = cli(&["run", golden().to_str().unwrap(), "--ticks", "0", "--log", log.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1);
    let header: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(header["type"], "header");
    assert_eq!(header["ticks"], 0);
}

#[test]
fn scripted_runs_hash_identically() {
    let (show, script) = (golden(), trace());
    let args = ["run", show.to_str().unwrap(), "--script", script.to_str().unwrap(), "--ticks", "900"];
    let (a, b) = (cli(&args), cli(&args));
    assert_eq!((code(&a), code(&b)), (0, 0));
    assert_eq!(hash_of(&a), hash_of(&b));
    assert!(stdout(&a).contains("ticks 900"));
}

#[test]
fn realtime_pacing_does_not_change_output() {
    let (show, script) = (golden(), trace());
    let base = ["run", show.to_str().unwrap(), "--script", script.to_str().unwrap(), "--ticks", "30"];
    let fast = cli(&base);
    let started = Instant::now();
    let paced = cli(&[&base[..], &["--realtime"]].concat());
    // 30 ticks at 60 Hz take at least half a second when paced
    assert!(started.elapsed() >= Duration::from_millis(450));
    assert_eq!(hash_of(&fast), hash_of(&paced));
}

#[test]
fn script_naming_unknown_avatar_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let script = write(dir.path(), "bad.trace", "0 GO\n5 OFFSET nobody 1 0 0\n");
    let out = cli(&["run", golden().to_str().unwrap(), "--script", script.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nobody"));
}

#[test]
fn bad_step_is_a_config_error() {
    assert_eq!(code(&cli(&["run", golden().to_str().unwrap(), "--fixed-step", "0"])), 1);
}

#[test]
fn replay_matches_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("show.log");
    let (show, script) = (golden(), trace());
    let run = cli(&[
        "run",
        show.to_str().unwrap(),
        "--script",
        script.to_str().unwrap(),
        "--ticks",
        "400",
        "--log",
        log.to_str().unwrap(),
    ]);
    assert_eq!(code(&run), 0);
    let rep = cli(&["replay", show.to_str().unwrap(), log.to_str().unwrap(), "--script", script.to_str().unwrap()]);
    assert_eq!(code(&rep), 0, "{}", stdout(&rep));
    assert!(stdout(&rep).contains("identical: 401 lines"));
    assert_eq!(hash_of(&rep), hash_of(&run));

    let text = std::fs::read_to_string(&log).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines[200] = lines[200].replacen("\"tick\":200", "\"tick\":201", 1);
    std::fs::write(&log, lines.join("\n") + "\n").unwrap();
    let rep = cli(&["replay", show.to_str().unwrap(), log.to_str().unwrap(), "--script", script.to_str().unwrap()]);
    assert_eq!(code(&rep), 1);
    assert!(String::from_utf8_lossy(&rep.stderr).contains("line 201"));
}

fn load_golden() -> Arc<Show> {
    shadowstage_cli::load(&golden(), false).unwrap()
}

fn start_server() -> ServerHandle {
    let cfg = ServeConfig {
        bind: "127.0.0.1".into(),
        control_port: 0,
        mocap_port: 0,
        ws_port: 0,
        dt: stage::DEFAULT_DT,
    };
    serve::start(load_golden(), &cfg).unwrap()
}

fn console(handle: &ServerHandle) -> WebSocket<TcpStream> {
    let stream = TcpStream::connect(handle.ws_addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    let (mut ws, _) = tungstenite::client(format!("ws://{}/", handle.ws_addr), stream).unwrap();
    match next_message(&mut ws) {
        ServerMessage::Show { avatars, cues, pointer } => {
            assert_eq!(avatars.len(), 5);
            assert_eq!(cues.len(), 12);
            assert_eq!(pointer, 0);
        }
        other => panic!("expected the show message first, got {other:?}"),
    }
    ws
}

fn next_message(ws: &mut WebSocket<TcpStream>) -> ServerMessage {
    loop {
        match ws.read().expect("console message within the read timeout") {
            Message::Text(t) => return parse_server_message(t.as_str()).unwrap(),
            Message::Close(_) => panic!("server closed the console"),
            _ => {}
        }
    }
}

/// Reads until `pick` returns a value or the deadline passes.
fn wait_for<T>(ws: &mut WebSocket<TcpStream>, mut pick: impl FnMut(&ServerMessage) -> Option<T>) -> T {
    let deadline = Instant::now() + Duration::from_secs(10);
    while Instant::now() < deadline {
        if let Some(v) = pick(&next_message(ws)) {
            return v;
        }
    }
    panic!("timed out waiting for console message");
}

#[test]
fn console_go_fires_within_two_ticks() {
    let handle = start_server();
    let mut ws = console(&handle);
    let before = handle.current_tick();
    ws.send(Message::text(r#"{"type": "go"}"#)).unwrap();
    let (id, tick) = wait_for(&mut ws, |m| match m {
        ServerMessage::CueFired { id, tick, .. } => Some((id.clone(), *tick)),
        _ => None,
    });
    assert_eq!(id, "C1");
    assert!(tick <= before + 2, "sent after tick {before}, fired on tick {tick}");
    let pointer = wait_for(&mut ws, |m| match m {
        ServerMessage::Snapshot(s) => Some(s.cue_pointer),
        _ => None,
    });
    assert_eq!(pointer, 1);

    ws.send(Message::text("JUMP")).unwrap();
    let err = wait_for(&mut ws, |m| match m {
        ServerMessage::Error { message } => Some(message.clone()),
        _ => None,
    });
    assert!(err.contains("JUMP"));
    handle.shutdown();
}

#[test]
fn control_socket_accepts_the_text_grammar() {
    let handle = start_server();
    let mut ws = console(&handle);
    let mut control = TcpStream::connect(handle.control_addr).unwrap();
    control.write_all(b"GOTO C3\nGO\n").unwrap();
    let id = wait_for(&mut ws, |m| match m {
        ServerMessage::CueFired { id, .. } => Some(id.clone()),
        _ => None,
    });
    assert_eq!(id, "C3");
    handle.shutdown();
}

#[test]
fn mocap_drives_the_puppet_and_disconnect_is_reported() {
    let show = load_golden();
    let bones = show.mocap_bone_count("shadow1").unwrap();
    let frame = MocapFrame {
        avatar: "shadow1".into(),
        t: 0.0,
        root: [2.5, 1.0, -1.0],
        rot: vec![[1.0, 0.0, 0.0, 0.0]; bones],
    };
    // expected root from a local stage fed the same frame
    let mut local = Stage::new(show, stage::DEFAULT_DT).unwrap();
    local.push(stage::Command::Mocap(frame.clone()));
    let expected = local.tick().avatars[0].root.translation;

    let handle = start_server();
    let mut ws = console(&handle);
    let mut mocap = TcpStream::connect(handle.mocap_addr).unwrap();
    mocap.write_all(format!("{}\n", encode_mocap_frame(&frame)).as_bytes()).unwrap();
    wait_for(&mut ws, |m| match m {
        ServerMessage::Snapshot(s) => {
            let got = s.avatars[0].root.translation;
            got.iter().zip(expected).all(|(a, b)| (a - b).abs() < 1e-9).then_some(())
        }
        _ => None,
    });

    drop(mocap);
    let note = wait_for(&mut ws, |m| match m {
        ServerMessage::Snapshot(s) => s.diagnostics.iter().find(|d| d.contains("disconnected")).cloned(),
        _ => None,
    });
    assert!(note.contains("shadow1"), "{note}");
    handle.shutdown();
}

#[test]
fn port_in_use_is_a_runtime_abort() {
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let out = cli(&[
        "serve",
        golden().to_str().unwrap(),
        "--control-port",
        &port,
        "--mocap-port",
        "0",
        "--ws-port",
        "0",
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("control port"));
}

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use pslab_cli::AppState;
use pslab_core::api::Lab;
use pslab_core::fixtures::Fixtures;
use serde_json::Value;

pub const COPY_CHECKSUM: u32 = 0xba9d_24cc;
pub const FACT_CHECKSUM: u32 = 0x14c1_745c;
pub const FACT_SMALL_CHECKSUM: u32 = 0xa558_8368;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("fixtures")
}

pub fn fixtures() -> &'static Fixtures {
    static FIXTURES: OnceLock<Fixtures> = OnceLock::new();
    FIXTURES.get_or_init(|| Fixtures::ensure(&fixture_dir()).expect("fixtures build"))
}

/// Scratch directory unique to one test.
pub fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli-tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Base URL of a server over the fixture models, started once per binary.
pub fn server() -> &'static str {
    static URL: OnceLock<String> = OnceLock::new();
    URL.get_or_init(|| {
        fixtures();
        let lab = Lab::open::<&Path>(&[], Some(&fixture_dir())).expect("lab");
        let state = AppState::new(lab);
        let (tx, rx) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .worker_threads(2)
                .enable_all()
                .build()
                .unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                tx.send(listener.local_addr().unwrap()).unwrap();
                axum::serve(listener, pslab_cli::router(state)).await.unwrap();
            });
        });
        format!("http://{}", rx.recv().unwrap())
    })
}

pub fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(std::time::Duration::from_secs(600))
        .build()
        .unwrap()
}

/// POSTs `body` and returns the status and parsed JSON.
pub fn post(path: &str, body: &Value) -> (u16, Value) {
    let resp = client().post(format!("{}{path}", server())).json(body).send().unwrap();
    let status = resp.status().as_u16();
    (status, resp.json().unwrap())
}

pub fn get(path: &str) -> (u16, Value) {
    let resp = client().get(format!("{}{path}", server())).send().unwrap();
    let status = resp.status().as_u16();
    (status, resp.json().unwrap())
}

pub fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pslab"))
        .args(args)
        .env_remove("PSLAB_SEED")
        .output()
        .unwrap()
}

/// Runs the CLI, requires success and parses stdout as JSON.
pub fn cli_json(args: &[&str]) -> Value {
    let out = cli(args);
    assert!(
        out.status.success(),
        "pslab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

pub fn write_json(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

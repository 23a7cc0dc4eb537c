#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tiltfuse::sim::build_replicate;
use tiltfuse::SimConfig;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tiltfuse"))
}

pub fn run(args: &[String]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

pub struct Fixture {
    pub panel: PathBuf,
    pub summary_x: PathBuf,
    pub summary_z: PathBuf,
}

/// Panel and both summaries of one simulated replicate.
pub fn write_fixture(dir: &Path, cfg: &SimConfig, index: usize) -> Fixture {
    std::fs::create_dir_all(dir).unwrap();
    let data = build_replicate(cfg, index).unwrap();
    let f = Fixture {
        panel: dir.join("panel.csv"),
        summary_x: dir.join("summary_x.json"),
        summary_z: dir.join("summary_z.json"),
    };
    data.problem.panel.write_csv(&f.panel).unwrap();
    data.problem.summary_x.save(&f.summary_x).unwrap();
    data.problem.summary_z.save(&f.summary_z).unwrap();
    f
}

pub fn fit_args(cmd: &str, f: &Fixture, out: &Path, seed: u64, extra: &[&str]) -> Vec<String> {
    let mut a: Vec<String> = vec![
        cmd.into(),
        "--panel".into(),
        f.panel.display().to_string(),
        "--x-cols".into(),
        "x1,x2,x3".into(),
        "--z-cols".into(),
        "z1,z2,z3".into(),
        "--c-cols".into(),
        "c1,c2".into(),
        "--summary-x".into(),
        f.summary_x.display().to_string(),
        "--summary-z".into(),
        f.summary_z.display().to_string(),
        "--seed".into(),
        seed.to_string(),
        "--intercept-start".into(),
        "-3".into(),
        "--out".into(),
        out.display().to_string(),
    ];
    a.extend(extra.iter().map(|s| s.to_string()));
    a
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

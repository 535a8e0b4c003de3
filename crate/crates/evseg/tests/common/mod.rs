#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use evseg::annotate::{self, AnnotationStore};
use evseg::formats::{self, Palette};
use evseg_core::synth::{benchmark_sample, BenchmarkConfig, SyntheticSample};

pub const NETWORK_TOML: &str = "[network]\nheight = 16\nwidth = 16\nfeature_dim = 6\ntrunk_widths = [3, 4]\ndecoder_width = 3\n";

pub fn tiny_benchmark(scenes: usize, seed: u64) -> BenchmarkConfig {
    BenchmarkConfig {
        scenes,
        width: 16,
        height: 16,
        duration_us: 40_000,
        target_time_us: 20_000,
        seed,
        ..BenchmarkConfig::default()
    }
}

/// Writes `scenes` small samples plus a synthetic palette into `dir`.
pub fn tiny_dataset(dir: &Path, scenes: usize, seed: u64) -> Vec<SyntheticSample> {
    let cfg = tiny_benchmark(scenes, seed);
    std::fs::create_dir_all(dir).unwrap();
    formats::write_json(&dir.join(formats::CLASSES_FILE), &Palette::synthetic(6)).unwrap();
    (0..scenes)
        .map(|i| {
            let s = benchmark_sample(&cfg, i).unwrap();
            formats::write_sample(&dir.join(&s.id), &s).unwrap();
            s
        })
        .collect()
}

pub fn train_toml(data: &Path, extra_train: &str) -> String {
    format!(
        "schema_version = 1\ndata = {:?}\n{NETWORK_TOML}[train]\nmode = \"full\"\nbatch_size = 2\nwindow_us = 10000\n{extra_train}",
        data.to_str().unwrap()
    )
}

pub fn evseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn text(out: &[u8]) -> String {
    String::from_utf8_lossy(out).into_owned()
}

pub struct Server {
    pub base: String,
    runtime: tokio::runtime::Runtime,
}

impl Server {
    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }
}

pub fn start(store: AnnotationStore) -> Server {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .unwrap();
    let listener = runtime.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    runtime.spawn(annotate::serve(Arc::new(store), listener));
    Server {
        base: format!("http://{addr}"),
        runtime,
    }
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into()
}

pub fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

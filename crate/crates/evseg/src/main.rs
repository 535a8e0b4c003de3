use std::fs;
use std::io::Write;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use evseg::annotate::AnnotationStore;
use evseg::checkpoint::{Checkpoint, Payload};
use evseg::config::{AblationFile, DataSource, TrainFile};
use evseg::formats::{self, Palette};
use evseg::report;
use evseg_core::evaluator::{evaluate, run_ablation, AblationSetup, RunMeta};
use evseg_core::event::{render_frame, slice_window};
use evseg_core::synth::{benchmark_sample, generate_benchmark, BenchmarkConfig, SyntheticSample};
use evseg_core::trainer::{fit, prepare_dataset, FitEvent, TrainerState};
use tracing::info;

#[derive(Parser)]
#[command(name = "evseg", version, about = "Weakly supervised event-camera segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate synthetic samples into sample directories.
    Synth {
        #[arg(long)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        width: u16,
        #[arg(long, default_value_t = 64)]
        height: u16,
        #[arg(long, default_value_t = 6)]
        classes: u8,
        #[arg(long, default_value_t = 200_000)]
        duration_us: u64,
        #[arg(long, default_value_t = 100_000)]
        target_us: u64,
        #[arg(long, default_value_t = 1)]
        points_per_class: usize,
        /// Write `train/` and `eval/` (every fifth scene) instead of one directory.
        #[arg(long)]
        split: bool,
    },
    /// Train from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Label bundle replacing the samples' own labels (overrides the config).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Continue from a checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against a dataset's dense ground truth.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Train and evaluate every cell of an ablation grid.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        /// Directory for the table, CSV, JSON and plots.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render an event file as a PNG frame.
    Render {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Window start (us, inclusive); the stream start by default.
        #[arg(long)]
        t0: Option<u64>,
        /// Window end (us, exclusive); past the last event by default.
        #[arg(long)]
        t1: Option<u64>,
    },
    /// Serve the point-annotation API over a dataset directory.
    ServeAnnotate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Length of the rendered window before each frame's target time (us).
        #[arg(long, default_value_t = 20_000)]
        window_us: u64,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth {
            scenes,
            seed,
            out,
            width,
            height,
            classes,
            duration_us,
            target_us,
            points_per_class,
            split,
        } => {
            let cfg = BenchmarkConfig {
                scenes,
                seed,
                width,
                height,
                class_count: classes,
                duration_us,
                target_time_us: target_us,
                points_per_class,
                ..BenchmarkConfig::default()
            };
            synth(&cfg, &out, split)
        }
        Command::Train {
            config,
            out,
            labels,
            resume,
        } => train(&config, &out, labels, resume),
        Command::Eval { ckpt, data, json } => eval(&ckpt, &data, json),
        Command::Ablate { grid, out } => ablate(&grid, out.as_deref()),
        Command::Render { events, out, t0, t1 } => render(&events, &out, t0, t1),
        Command::ServeAnnotate {
            data,
            port,
            host,
            window_us,
        } => serve(&data, host, port, window_us),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn synth(cfg: &BenchmarkConfig, out: &Path, split: bool) -> anyhow::Result<()> {
    let palette = Palette::synthetic(usize::from(cfg.class_count));
    let dirs: Vec<PathBuf> = if split {
        vec![out.join("train"), out.join("eval")]
    } else {
        vec![out.to_path_buf()]
    };
    for d in &dirs {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
        formats::write_json(&d.join(formats::CLASSES_FILE), &palette)?;
    }
    for i in 0..cfg.scenes {
        let sample = benchmark_sample(cfg, i)?;
        let dir = if split && cfg.is_eval_index(i) { &dirs[1] } else { &dirs[0] };
        formats::write_sample(&dir.join(&sample.id), &sample)?;
    }
    info!(scenes = cfg.scenes, out = %out.display(), "wrote samples");
    Ok(())
}

fn train(config: &Path, out: &Path, labels: Option<PathBuf>, resume: Option<PathBuf>) -> anyhow::Result<()> {
    let file = TrainFile::load(config)?;
    let mut samples = formats::read_dataset(&file.data)?;
    if samples.is_empty() {
        bail!("{}: no sample directories", file.data.display());
    }
    if let Some(path) = labels.or(file.labels.clone()) {
        let bundle: formats::LabelBundle = formats::read_json(&path)?;
        samples = formats::apply_bundle(samples, &bundle, file.network.classes)
            .with_context(|| format!("applying {}", path.display()))?;
    }
    let mut state = match &resume {
        Some(p) => {
            let s = Checkpoint::load(p)?.into_trainer(p)?;
            if s.model.network != file.network {
                bail!("{}: network config differs from {}", p.display(), config.display());
            }
            s
        }
        None => TrainerState::init(file.network.clone(), file.train.clone())?,
    };
    if resume.is_some() {
        // Only the step budget and checkpoint period may change on resume.
        state.config.steps = file.train.steps;
        state.config.checkpoint_every = file.train.checkpoint_every;
    }
    let prepared = prepare_dataset(&samples, &state.model.network, &state.config)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let log_path = out.join("log.jsonl");
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let ckpt_path = out.join("checkpoint.json");
    info!(samples = prepared.len(), mode = %state.config.mode, from = state.step, to = state.config.steps, "training");
    let result = fit(&mut state, &prepared, |event| match event {
        FitEvent::Step { record, .. } => {
            let mut line = serde_json::to_vec(record).map_err(|e| e.to_string())?;
            line.push(b'\n');
            log_file
                .write_all(&line)
                .and_then(|_| log_file.flush())
                .map_err(|e| format!("{}: {e}", log_path.display()))?;
            if record.step % 100 == 0 {
                info!(step = record.step, total = record.total, "step");
            }
            Ok(())
        }
        FitEvent::Checkpoint { state } => Checkpoint::trainer(state).save(&ckpt_path).map_err(|e| e.to_string()),
    });
    let log = match result {
        Ok(log) => log,
        Err(abort) => bail!("training stopped after {} logged steps: {}", abort.log.len(), abort.error),
    };
    if !log.is_empty() {
        report::plot_losses(&out.join("losses.svg"), &log)?;
    }
    info!(steps = state.step, checkpoint = %ckpt_path.display(), "done");
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, json: bool) -> anyhow::Result<()> {
    let samples = formats::read_dataset(data)?;
    let report = match Checkpoint::load(ckpt)?.payload {
        Payload::Trainer(state) => {
            let mut r = evaluate(&state.model, &samples, state.config.window_us)?;
            r.meta = RunMeta {
                mode: Some(state.config.mode),
                seed: Some(state.config.seed),
                config_hash: Some(evseg_core::evaluator::config_hash(&state.model.network, &state.config)),
            };
            r
        }
        Payload::Oracle(oracle) => oracle.evaluate(&samples)?,
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        let palette = formats::read_palette(data)?;
        print!("{}", report::metrics_table(&report, Some(&palette)));
    }
    Ok(())
}

fn load_split(source: &DataSource) -> anyhow::Result<(Vec<SyntheticSample>, Vec<SyntheticSample>, u64)> {
    Ok(match source {
        DataSource::Benchmark(cfg) => {
            let b = generate_benchmark(cfg)?;
            (b.train, b.eval, b.split_hash)
        }
        DataSource::Dirs { train, eval } => {
            let train = formats::read_dataset(train)?;
            let eval = formats::read_dataset(eval)?;
            let ids: Vec<f64> = eval.iter().flat_map(|s| s.id.bytes().map(f64::from)).collect();
            let hash = evseg_core::fingerprint_f64(&ids);
            (train, eval, hash)
        }
    })
}

fn ablate(grid: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let file = AblationFile::load(grid)?;
    let source = file.source().map_err(anyhow::Error::msg)?;
    let (train, eval, split_hash) = load_split(&source)?;
    let setup = AblationSetup {
        network: file.network.clone(),
        train: file.train.clone(),
        seeds: file.seeds.clone(),
        confusing_classes: file.confusing_classes.clone(),
    };
    info!(cells = file.grid.len(), seeds = setup.seeds.len(), train = train.len(), eval = eval.len(), "ablation");
    let report = run_ablation(&train, &eval, split_hash, &setup, &file.grid, |cell, run| match (&run.report, &run.error) {
        (Some(m), _) => info!(cell = %cell.label, seed = run.seed, miou = m.miou, "run finished"),
        (None, e) => info!(cell = %cell.label, seed = run.seed, error = e.as_deref().unwrap_or(""), "run failed"),
    });
    let table = report::ablation_table(&report);
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        formats::write_bytes(&dir.join("ablation.txt"), table.as_bytes())?;
        formats::write_json(&dir.join("ablation.json"), &report)?;
        let csv_path = dir.join("ablation.csv");
        let f = fs::File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
        report::write_ablation_csv(&report, f).with_context(|| format!("writing {}", csv_path.display()))?;
        report::plot_ablation(dir, &report)?;
    }
    Ok(())
}

fn render(events: &Path, out: &Path, t0: Option<u64>, t1: Option<u64>) -> anyhow::Result<()> {
    let stream = formats::read_events(events)?;
    let shown = match stream.time_span() {
        Some((lo, hi)) if t0.is_some() || t1.is_some() => slice_window(&stream, t0.unwrap_or(lo), t1.unwrap_or(hi + 1))?,
        _ => stream,
    };
    let img = render_frame(&shown);
    let png = formats::encode_rgb_png(img.width, img.height, img.to_bytes())?;
    formats::write_bytes(out, &png)?;
    Ok(())
}

fn serve(data: &Path, host: IpAddr, port: u16, window_us: u64) -> anyhow::Result<()> {
    let store = Arc::new(AnnotationStore::open(data, window_us)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        let addr = listener.local_addr()?;
        if !host.is_loopback() {
            tracing::warn!(%addr, "annotation service is reachable from other hosts");
        }
        println!("listening on http://{addr}");
        std::io::stdout().flush()?;
        tokio::select! {
            r = evseg::annotate::serve(store, listener) => r?,
            _ = tokio::signal::ctrl_c() => info!("shutting down"),
        }
        Ok(())
    })
}

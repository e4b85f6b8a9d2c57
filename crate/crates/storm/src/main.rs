use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use storm::bench::run_bench;
use storm::experiment::{check_dataset_grid, run_methods, sweep_rows, timeline, Method};
use storm::{load_model, scenarios, Error, Pipeline, PipelineConfig, Result};
use storm_core::eval::format_table;
use storm_core::simworld::{self, read_dataset, DatasetHeader, DatasetWriter, FrameRecord, SceneConfig};
use storm_gridnet::{train, weights, GridNet, SampleSet};

/// Dynamic-obstacle detection on LiDAR scans: simulate recordings, run the
/// detection pipeline, train the learned dynamic grid, evaluate and time it.
///
/// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
/// failure.
#[derive(Parser)]
#[command(name = "storm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ray-cast a scene and write a dataset with ground truth.
    Simulate(SimulateArgs),
    /// Run the pipeline over a dataset and write the per-frame track log.
    Run(RunArgs),
    /// Train the learned dynamic grid on one or more datasets.
    Train(TrainArgs),
    /// Score the pipeline against ground truth over distance thresholds.
    Eval(EvalArgs),
    /// Time each pipeline stage.
    Bench(BenchArgs),
    /// Print the default pipeline configuration as TOML.
    DefaultConfig,
}

#[derive(Args)]
struct SimulateArgs {
    /// Named scene (static, walkers, flyers, wall-brush, circling, bench) or
    /// a scene TOML file.
    #[arg(long)]
    scene: String,
    /// Recording length in seconds [default: the scene's own duration].
    #[arg(long)]
    seconds: Option<f64>,
    /// Seeds the scene layout and the sensor's subsampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Static obstacles in named scenes with clutter.
    #[arg(long, default_value_t = 10)]
    clutter: usize,
    /// Pipeline config whose BEV grid is recorded in the header [default:
    /// built-in config].
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Pipeline config TOML [default: built-in config].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set ogm.tau_u=0.4` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Track log, one JSON line per frame [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fusion reports, one JSON line per frame.
    #[arg(long)]
    reports: Option<PathBuf>,
    /// Run the cluster branch and the learned grid on separate threads.
    #[arg(long)]
    concurrent: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset (repeatable).
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Validation dataset (repeatable).
    #[arg(long)]
    val: Vec<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Seeds the initial weights [default: the config's train.seed].
    #[arg(long)]
    seed: Option<u64>,
    /// Weights file; the manifest is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Distance thresholds in meters.
    #[arg(long, value_delimiter = ',', default_value = "0.75,0.5,0.25")]
    sweep: Vec<f64>,
    /// Also score these ablations: no-gridnet, ogm-only.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
    /// Structured rows, one JSON line per method and threshold.
    #[arg(long)]
    rows: Option<PathBuf>,
    /// Per-frame counts, one JSON line per method, threshold and frame.
    #[arg(long)]
    timeline: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Only time the first N frames.
    #[arg(long)]
    frames: Option<usize>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Run(a) => run(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::DefaultConfig => {
            print!("{}", PipelineConfig::default().to_toml_string());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("storm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(a: &ConfigArgs) -> Result<PipelineConfig> {
    let base = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if a.overrides.is_empty() {
        return Ok(base);
    }
    let mut doc: toml::Table = toml::from_str(&base.to_toml_string()).map_err(|e| Error::Config(e.to_string()))?;
    for o in &a.overrides {
        let (key, value) = o.split_once('=').ok_or_else(|| Error::Config(format!("override '{o}' is not KEY=VALUE")))?;
        set_dotted(&mut doc, key.trim(), parse_value(value.trim()))?;
    }
    let weights = base.weights.clone();
    let mut c = PipelineConfig::from_toml_str(&toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?)?;
    // keep the file-relative weights path unless it was overridden
    if !a.overrides.iter().any(|o| o.trim_start().starts_with("weights")) {
        c.weights = weights;
    }
    Ok(c)
}

/// TOML literal if it parses as one, else a bare string.
fn parse_value(s: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {s}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(s.to_string()))
}

fn set_dotted(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("empty override key '{key}'")))?;
    let mut t = doc;
    for p in parts {
        t = t
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("'{p}' in '{key}' is not a section")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn out_err(e: io::Error) -> Error {
    Error::Data(format!("write failed: {e}"))
}

fn load_dataset(path: &Path, config: &PipelineConfig) -> Result<(DatasetHeader, Vec<FrameRecord>)> {
    let (header, frames) = read_dataset(path)?;
    check_dataset_grid(header.grid.as_ref(), config)?;
    Ok((header, frames))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut scene: SceneConfig = if a.scene.ends_with(".toml") {
        SceneConfig::load(Path::new(&a.scene))?
    } else {
        scenarios::by_name(&a.scene, a.clutter, a.seed)?
    };
    if let Some(s) = a.seconds {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Config(format!("--seconds must be positive, got {s}")));
        }
        scene.duration_s = Some(s);
    }
    let grid = match &a.config {
        Some(p) => PipelineConfig::load(p)?.gridnet.pillar.grid,
        None => PipelineConfig::default().gridnet.pillar.grid,
    };
    let scene = simworld::build_scene(scene)?;
    let seconds = scene.duration();
    if !(seconds > 0.0) {
        return Err(Error::Config("scene has no moving obstacles to set its length; pass --seconds".into()));
    }
    let mut header = DatasetHeader::new(a.seed, scene.lidar().clone(), Some(grid));
    header.static_obstacles = Some(scene.static_count());
    let mut w = DatasetWriter::create(&a.out, &header)?;
    let frames = simworld::simulate(&scene, seconds, a.seed);
    for f in &frames {
        w.write_frame(f)?;
    }
    w.finish()?;
    eprintln!("wrote {} frames ({seconds:.2} s, seed {}) to {}", frames.len(), a.seed, a.out.display());
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let config = load_config(&a.config)?;
    let (_, frames) = load_dataset(&a.data, &config)?;
    let mut pipeline = Pipeline::new(&config)?;
    pipeline.set_concurrent(a.concurrent);
    let mut log: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let mut reports = a.reports.as_deref().map(create).transpose()?;
    let (mut spawned, mut recovered, mut matched) = (0, 0, 0);
    for f in &frames {
        let out = pipeline.step(&f.scan)?;
        pipeline.fusion().tracker.write_log_line(f.scan.stamp, &mut log).map_err(out_err)?;
        if let Some(r) = reports.as_mut() {
            let line = serde_json::to_string(&out.report).expect("report serializes");
            writeln!(r, "{line}").map_err(out_err)?;
        }
        spawned += out.report.spawned;
        recovered += out.report.recovered_2d;
        matched += out.report.matched_3d;
    }
    log.flush().map_err(out_err)?;
    if let Some(mut r) = reports {
        r.flush().map_err(out_err)?;
    }
    eprintln!("{} frames: {matched} cluster matches, {recovered} grid recoveries, {spawned} tracks spawned", frames.len());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config = load_config(&a.config)?;
    let mut tc = config.train;
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    let load_set = |paths: &[PathBuf]| -> Result<SampleSet> {
        let mut set = SampleSet::new();
        for p in paths {
            let (header, frames) = read_dataset(p)?;
            if let Some(g) = header.grid {
                if g != config.gridnet.pillar.grid {
                    return Err(Error::Config(format!("{}: dataset grid differs from the configured BEV grid", p.display())));
                }
            }
            set.add_recording(&frames, &config.gridnet)?;
        }
        Ok(set)
    };
    let train_set = load_set(&a.data)?;
    let val_set = load_set(&a.val)?;
    let mut model = GridNet::new(config.gridnet, tc.seed)?;
    let mut stdout = io::stdout().lock();
    let report = train::train_with(&mut model, &train_set, (!val_set.is_empty()).then_some(&val_set), &tc, |e| {
        let _ = writeln!(stdout, "{}", serde_json::to_string(e).expect("epoch stats serialize"));
    })?;
    let names = |ps: &[PathBuf]| ps.iter().map(|p| p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned())).collect::<Vec<_>>();
    let notes = serde_json::json!({
        "train": tc,
        "data": names(&a.data),
        "val": names(&a.val),
        "samples": train_set.len(),
        "initial_loss": report.initial_loss,
        "final_loss": report.epochs.last().map(|e| e.train_loss),
    });
    weights::save(&model, &a.out, notes)?;
    eprintln!("trained {} epochs on {} samples, weights in {}", report.epochs.len(), train_set.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if a.sweep.is_empty() || a.sweep.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::Config(format!("distance thresholds must be positive, got {:?}", a.sweep)));
    }
    let config = load_config(&a.config)?;
    let (header, frames) = load_dataset(&a.data, &config)?;
    let mut methods = vec![if config.gridnet_enabled() { Method::Fusion } else { Method::NoGridnet }];
    for s in &a.ablate {
        let m: Method = s.parse()?;
        if m == Method::Fusion {
            return Err(Error::Config("fusion is not an ablation".into()));
        }
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    let model = load_model(&config)?;
    let runs = run_methods(&frames, &config, model.as_ref(), &methods)?;
    let setting = match header.static_obstacles {
        Some(n) => format!("clutter {n}"),
        None => a.data.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
    };
    let results: Vec<_> = runs.iter().map(|r| (setting.clone(), r.method.to_string(), r.sweep(&a.sweep))).collect();
    print!("{}", format_table(&results));
    if let Some(p) = &a.rows {
        let mut w = create(p)?;
        for (run, (_, _, sweep)) in runs.iter().zip(&results) {
            for row in sweep_rows(&setting, run.method, sweep) {
                writeln!(w, "{}", serde_json::to_string(&row).expect("row serializes")).map_err(out_err)?;
            }
        }
        w.flush().map_err(out_err)?;
    }
    if let Some(p) = &a.timeline {
        let mut w = create(p)?;
        for run in &runs {
            for row in timeline(run, &a.sweep) {
                writeln!(w, "{}", serde_json::to_string(&row).expect("row serializes")).map_err(out_err)?;
            }
        }
        w.flush().map_err(out_err)?;
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let config = load_config(&a.config)?;
    let (_, mut frames) = load_dataset(&a.data, &config)?;
    if let Some(n) = a.frames {
        frames.truncate(n);
    }
    let report = run_bench(&frames, &config, load_model(&config)?)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", report.table());
    }
    Ok(())
}

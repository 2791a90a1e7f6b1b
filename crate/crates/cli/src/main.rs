#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

mod manifest;
mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use conda_core::graph::synth::{generate, SynthConfig};
use conda_core::graph::{eventfile, ingest_csv, CsvFormat, EventLog, GraphError};
use conda_core::sweep::{parse_values, run_sweep, SweepParam};
use conda_core::train::{run_experiment_with, Augmenter, ConfigError, TrainError};

use manifest::RunManifest;
use settings::Settings;

#[derive(Parser)]
#[command(name = "conda-tgl", version, about = "Diffusion-augmented temporal link prediction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a CSV interaction file into a binary event file.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = parse_format)]
        format: CsvFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a planted-community interaction log.
    Synth {
        #[arg(long, default_value_t = 200)]
        nodes: usize,
        #[arg(long, default_value_t = 5000)]
        events: usize,
        #[arg(long, default_value_t = 2)]
        communities: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write its report, checkpoint and manifest.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = parse_augmenter)]
        augmenter: Option<Augmenter>,
    },
    /// Sweep `diff_len` or `k` over a list of values and a shared seed set.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = parse_param)]
        param: SweepParam,
        /// Comma-separated values, e.g. `1,L/16,L/8` or `1e-5,1e-4`.
        #[arg(long)]
        values: String,
        /// Comma-separated seeds; overrides the `seeds` config key.
        #[arg(long)]
        seeds: Option<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Event file; overrides the `data` config key.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; overrides the `out` config key.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn parse_format(s: &str) -> Result<CsvFormat, String> {
    s.parse()
}

fn parse_augmenter(s: &str) -> Result<Augmenter, String> {
    s.parse()
}

fn parse_param(s: &str) -> Result<SweepParam, String> {
    s.parse()
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (kind, msg) = match self {
            Failure::Usage(m) => ("configuration", m),
            Failure::Data(m) => ("data", m),
            Failure::Numeric(m) => ("numeric", m),
        };
        write!(f, "{kind} error: {msg}")
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<GraphError> for Failure {
    fn from(e: GraphError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let msg = e.to_string();
        match e {
            TrainError::Graph(_) => Failure::Data(msg),
            TrainError::NonFinite { .. } | TrainError::FreezeViolation(_) | TrainError::Tensor(_) | TrainError::Metric(_) => {
                Failure::Numeric(msg)
            }
            _ => Failure::Usage(msg),
        }
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

fn write_event_file(log: &EventLog, out: &Path, name: &str) -> Result<(), Failure> {
    let hash = eventfile::write(out, log)?;
    let stats = log.stats(name, 0.1);
    let mut record = serde_json::to_value(&stats).expect("serializable");
    record["content_hash"] = hash.into();
    record["path"] = out.display().to_string().into();
    let text = serde_json::to_string_pretty(&record).expect("serializable");
    fs::write(out.with_extension("stats.json"), format!("{text}\n")).map_err(io(out))?;
    println!("{text}");
    Ok(())
}

struct Loaded {
    settings: Settings,
    log: EventLog,
    data_hash: String,
}

fn load(run: &RunArgs, augmenter: Option<Augmenter>) -> Result<Loaded, Failure> {
    let text = fs::read_to_string(&run.config).map_err(|e| Failure::Usage(format!("{}: {e}", run.config.display())))?;
    let mut settings = Settings::parse(&text, &run.overrides)?;
    if let Some(a) = augmenter {
        settings.train.augmenter = a;
    }
    if let Some(d) = &run.data {
        settings.data = Some(d.clone());
    }
    if let Some(o) = &run.out {
        settings.out = o.clone();
    }
    settings.train.validate()?;
    let data = settings
        .data
        .clone()
        .ok_or_else(|| Failure::Usage("no dataset: set `data` in the config or pass --data".into()))?;
    let bytes = fs::read(&data).map_err(io(&data))?;
    let log = eventfile::decode(&bytes)?;
    settings.data = Some(data);
    Ok(Loaded {
        settings,
        log,
        data_hash: eventfile::content_hash(&bytes),
    })
}

fn prepare_out(manifest: &RunManifest) -> Result<PathBuf, Failure> {
    let dir = manifest.run_dir();
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let path = dir.join("manifest.json");
    fs::write(&path, format!("{}\n", to_json(manifest))).map_err(io(&path))?;
    Ok(dir)
}

fn train(run: &RunArgs, augmenter: Option<Augmenter>) -> Result<(), Failure> {
    let loaded = load(run, augmenter)?;
    let manifest = RunManifest::new("train", &run.config, &loaded.settings, &loaded.data_hash, "");
    let dir = prepare_out(&manifest)?;
    let ckpt = dir.join("best.ckpt");
    let report = run_experiment_with(&loaded.settings.train, &loaded.log, Some(&ckpt))?;
    let path = dir.join("report.jsonl");
    fs::write(&path, report.to_jsonl()).map_err(io(&path))?;
    let last = report.final_record().expect("finished runs carry a final record");
    println!(
        "run {}: test AP {:.4}, test AUC {:.4}, best val AP {:.4} (epoch {})",
        manifest.run_id, last.test_ap, last.test_auc, last.best_val_ap, last.best_epoch
    );
    println!("outputs in {}", dir.display());
    Ok(())
}

fn sweep(run: &RunArgs, param: SweepParam, values: &str, seeds: Option<&str>) -> Result<(), Failure> {
    let mut loaded = load(run, None)?;
    if let Some(s) = seeds {
        loaded.settings.seeds = settings::parse_seeds(s)?;
    }
    let values = parse_values(param, values)?;
    let extra = format!("{}={}", param.key(), values.join(","));
    let manifest = RunManifest::new("sweep", &run.config, &loaded.settings, &loaded.data_hash, &extra);
    let dir = prepare_out(&manifest)?;
    let table = run_sweep(&loaded.settings.train, &loaded.log, param, &values, &loaded.settings.seeds)?;
    let path = dir.join("sweep.json");
    fs::write(&path, format!("{}\n", to_json(&table))).map_err(io(&path))?;
    let rendered = table.render();
    let path = dir.join("table.txt");
    fs::write(&path, &rendered).map_err(io(&path))?;
    print!("{rendered}");
    println!("outputs in {}", dir.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Ingest { input, format, out } => {
            let log = ingest_csv(&input, format)?;
            let name = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            write_event_file(&log, &out, &name)
        }
        Command::Synth {
            nodes,
            events,
            communities,
            seed,
            out,
        } => {
            let cfg = SynthConfig {
                nodes,
                events,
                communities,
                seed,
                ..SynthConfig::default()
            };
            let log = generate(&cfg).map_err(|e| Failure::Usage(e.to_string()))?;
            write_event_file(&log, &out, &format!("synth-c{communities}-s{seed}"))
        }
        Command::Train { run, augmenter } => train(&run, augmenter),
        Command::Sweep {
            run,
            param,
            values,
            seeds,
        } => sweep(&run, param, &values, seeds.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Ok(v) = std::env::var("CONDA_TGL_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => conda_core::tensor::set_threads(n),
            _ => {
                eprintln!("configuration error: CONDA_TGL_THREADS must be a positive integer, got `{v}`");
                return ExitCode::from(1);
            }
        }
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code())
        }
    }
}

use anyhow::{anyhow, Context};
use autocluster::autotune::ScreenReport;
use autocluster::decoding::{imbalance_ratio, risk_profile, write_profile_csv, RiskLabelMap};
use autocluster::features::{FeatureMatrix, MatrixState};
use autocluster::indicators::rectify;
use autocluster::pipeline::{
    self, create_file, decode, features_from_tracks, ingest, open_file, read_json, read_trials, run_pipeline,
    screen, select, tune, write_feature_sidecar, write_json, PipelineConfig, RunOptions,
};
use autocluster::synthetic::{write_ngsim_csv, TrafficScenario};
use autocluster::trajectory::{load_tracks, save_tracks, LengthUnit};
use clap::{Parser, Subcommand, ValueEnum};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "autocluster", version, about = "Unsupervised traffic-conflict risk levels from vehicle trajectories")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Random seed; overrides the configuration file.
    #[arg(long, global = true, env = "AUTOCLUSTER_SEED")]
    seed: Option<u64>,

    /// Configuration file (TOML, or JSON when the extension is .json).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Toml,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration.
    Defaults {
        #[arg(long, value_enum, default_value = "toml")]
        format: Format,
    },
    /// Run every stage in the configured work directory.
    Run {
        /// Skip stages whose inputs are unchanged since the last run.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        workdir: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Parse and smooth an NGSIM trajectory file.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        unit: Option<LengthUnit>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the rectified 12-feature matrix from smoothed tracks.
    Features {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the unrectified matrix.
        #[arg(long)]
        raw_out: Option<PathBuf>,
    },
    /// Replicate stability and quality prescreen of the algorithm portfolio.
    Screen {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Elimination importance of every feature and the reduced matrix.
    SelectFeatures {
        #[arg(long)]
        features: PathBuf,
        /// Prescreen report; without it the configured algorithms are used.
        #[arg(long)]
        screen: Option<PathBuf>,
        /// Importance table (CSV).
        #[arg(long)]
        out: PathBuf,
        /// Matrix restricted to the selected features.
        #[arg(long)]
        selected_out: Option<PathBuf>,
        /// Models, table and selection as JSON.
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Search algorithms, k and hyperparameters; prints the best model per k.
    Tune {
        #[arg(long)]
        features: PathBuf,
        /// Prescreen report whose shortlist is searched.
        #[arg(long)]
        screen: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        /// Trial log (JSON lines).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        best_out: Option<PathBuf>,
    },
    /// Turn a trial log into risk labels, thresholds and flows.
    Decode {
        #[arg(long)]
        trials: PathBuf,
        /// The matrix the trials were tuned on (rectified scale).
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        /// Needed for the profile output.
        #[arg(long)]
        tracks: Option<PathBuf>,
        /// labels,thresholds,sankey[,profile] paths.
        #[arg(long, value_delimiter = ',', required = true)]
        out: Vec<PathBuf>,
        /// Summary, letter values and silhouettes go here when given.
        #[arg(long)]
        extra_dir: Option<PathBuf>,
    },
    /// Time-space risk records per lane from labels and tracks.
    Profile {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a simulated NGSIM-format trajectory file.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        lanes: usize,
        #[arg(long, default_value_t = 20)]
        vehicles_per_lane: usize,
        #[arg(long, default_value_t = 900)]
        frames: usize,
    },
}

enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
    Stage(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Stage(_) => 4,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Config(e) | Failure::Data(e) | Failure::Stage(e) => e,
        }
    }
}

impl From<autocluster::Error> for Failure {
    fn from(e: autocluster::Error) -> Self {
        if e.is_data_error() {
            Failure::Data(e.into())
        } else {
            Failure::Stage(e.into())
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn config_error(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn load_config(cli: &Cli) -> Outcome<PipelineConfig> {
    let mut cfg = match &cli.config {
        None => PipelineConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(config_error)?;
            let json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
            if json {
                serde_json::from_str(&text).map_err(config_error)?
            } else {
                toml::from_str(&text).map_err(config_error)?
            }
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn validated(cfg: PipelineConfig) -> Outcome<PipelineConfig> {
    cfg.validate().map_err(config_error)?;
    Ok(cfg)
}

fn load_matrix(path: &Path) -> Outcome<FeatureMatrix> {
    Ok(FeatureMatrix::load_csv(path, MatrixState::Rectified)?)
}

fn flush(mut w: impl Write, path: &Path) -> Outcome {
    w.flush().with_context(|| format!("writing {}", path.display())).map_err(Failure::Data)
}

fn read_labels(path: &Path) -> Outcome<RiskLabelMap> {
    let mut reader = csv::Reader::from_reader(open_file(path)?);
    let (mut ids, mut levels) = (Vec::new(), Vec::new());
    for rec in reader.deserialize::<(i64, usize)>() {
        let (id, level) = rec.map_err(autocluster::Error::from)?;
        ids.push(id);
        levels.push(level);
    }
    let k = levels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0; k];
    levels.iter().for_each(|&l| counts[l] += 1);
    Ok(RiskLabelMap {
        vehicle_ids: ids,
        cluster_to_level: (0..k).collect(),
        imbalance: imbalance_ratio(&counts, &[]),
        levels,
        counts,
        high_risk: Vec::new(),
    })
}

fn execute(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Defaults { format } => {
            let cfg = PipelineConfig::default();
            let text = match format {
                Format::Toml => toml::to_string_pretty(&cfg).map_err(config_error)?,
                Format::Json => serde_json::to_string_pretty(&cfg).map_err(config_error)? + "\n",
            };
            print!("{text}");
        }
        Command::Run { resume, workdir, input } => {
            let mut cfg = load_config(cli)?;
            if let Some(w) = workdir {
                cfg.workdir = w.clone();
            }
            if let Some(i) = input {
                cfg.input.path = i.clone();
            }
            let report = run_pipeline(&cfg, &RunOptions { resume: *resume }).map_err(|e| {
                let failure = if e.stage == "config" {
                    Failure::Config
                } else if e.source.is_data_error() {
                    Failure::Data
                } else {
                    Failure::Stage
                };
                failure(e.into())
            })?;
            for a in report.manifest.artifacts() {
                println!("{}  {}", a.sha256, a.path);
            }
            if !report.skipped.is_empty() {
                log::info!("skipped unchanged stages: {}", report.skipped.join(", "));
            }
        }
        Command::Ingest { input, unit, out } => {
            let mut cfg = load_config(cli)?;
            cfg.input.path = input.clone();
            if let Some(u) = unit {
                cfg.input.unit = *u;
            }
            let cfg = validated(cfg)?;
            let (tracks, summary) = ingest(&cfg.input, &cfg.smoothing)?;
            save_tracks(out, &tracks)?;
            eprintln!(
                "{} vehicles, {} samples ({} malformed and {} duplicate rows dropped)",
                summary.vehicles, summary.samples, summary.malformed_rows, summary.duplicate_rows
            );
        }
        Command::Features { tracks, out, raw_out } => {
            let cfg = validated(load_config(cli)?)?;
            let tracks = load_tracks(tracks)?;
            let raw = features_from_tracks(&tracks, &cfg.pairing, &cfg.indicators)?;
            if let Some(p) = raw_out {
                raw.save_csv(p)?;
                write_feature_sidecar(p, &raw, &cfg.indicators)?;
            }
            let m = rectify(&raw, &cfg.indicators)?;
            m.save_csv(out)?;
            write_feature_sidecar(out, &m, &cfg.indicators)?;
        }
        Command::Screen { features, out } => {
            let cfg = validated(load_config(cli)?)?;
            let m = load_matrix(features)?;
            let report = screen(&m, &cfg.screen.algorithms, &cfg.screen.k_values, &cfg.stability, cfg.seed)?;
            write_json(out, &report)?;
            for row in &report.rows {
                println!(
                    "{:<20} cv={:<10.4} bSI={:<8.4} sigma={:<8.4} {}",
                    row.algorithm,
                    row.cv,
                    row.mean_bsi,
                    row.mean_sigma,
                    if row.kept { "kept" } else { "dropped" }
                );
            }
        }
        Command::SelectFeatures {
            features,
            screen,
            out,
            selected_out,
            report_out,
        } => {
            let cfg = validated(load_config(cli)?)?;
            let m = load_matrix(features)?;
            let shortlist = match screen {
                Some(p) => read_json::<ScreenReport>(p)?.shortlist,
                None => cfg.screen.algorithms.clone(),
            };
            let outcome = select(&m, &shortlist, cfg.selection.k, cfg.seed)?;
            let w = create_file(out)?;
            outcome.table.write_csv(w)?;
            if let Some(p) = selected_out {
                m.select_columns(&outcome.selection.selected)?.save_csv(p)?;
            }
            if let Some(p) = report_out {
                write_json(p, &outcome)?;
            }
            println!("selected: {}", outcome.selection.selected.join(", "));
            println!("dropped:  {}", outcome.selection.dropped.join(", "));
        }
        Command::Tune {
            features,
            screen,
            iters,
            out,
            best_out,
        } => {
            let mut cfg = load_config(cli)?;
            if let Some(n) = iters {
                cfg.tune.iterations = *n;
            }
            let cfg = validated(cfg)?;
            let m = load_matrix(features)?;
            let algorithms = match screen {
                Some(p) => read_json::<ScreenReport>(p)?.shortlist,
                None => cfg.screen.algorithms.clone(),
            };
            let space = cfg.search_space(&algorithms).map_err(config_error)?;
            let mut log = create_file(out)?;
            let history = tune(&m, &space, &cfg.tune_config(), |t| {
                serde_json::to_writer(&mut log, t)?;
                writeln!(log).map_err(|e| autocluster::Error::Io {
                    path: out.clone(),
                    source: e,
                })
            })?;
            flush(log, out)?;
            if let Some(p) = best_out {
                history.write_best_csv(create_file(p)?)?;
            }
            history.write_best_csv(std::io::stdout().lock())?;
        }
        Command::Decode {
            trials,
            features,
            k,
            tracks,
            out,
            extra_dir,
        } => {
            let mut cfg = load_config(cli)?;
            if let Some(k) = k {
                cfg.decode.k = *k;
            }
            let cfg = validated(cfg)?;
            if !(3..=4).contains(&out.len()) {
                return Err(config_error(anyhow!("--out takes three or four comma-separated paths")));
            }
            if out.len() == 4 && tracks.is_none() {
                return Err(config_error(anyhow!("a profile output needs --tracks")));
            }
            let m = load_matrix(features)?;
            let trials = read_trials(trials)?;
            let result = decode(&m, &trials, &cfg.decode, &cfg.stability.weights)?;
            result.labels.write_csv(create_file(&out[0])?)?;
            autocluster::decoding::write_thresholds_csv(create_file(&out[1])?, &result.thresholds)?;
            autocluster::decoding::write_sankey_csv(create_file(&out[2])?, &result.sankey)?;
            if let (Some(p), Some(t)) = (out.get(3), tracks) {
                let tracks = load_tracks(t)?;
                write_profile_csv(create_file(p)?, &risk_profile(&result.labels, &tracks))?;
            }
            if let Some(dir) = extra_dir {
                pipeline::write_decode_outputs(dir, &result, None)?;
            }
            println!(
                "k={} counts={:?} high-risk={:?} IR={} ({:.2})",
                result.summary.k,
                result.summary.counts,
                result.summary.high_risk,
                result.summary.imbalance_ratio_reported,
                result.summary.imbalance_ratio
            );
        }
        Command::Profile { labels, tracks, out } => {
            let labels = read_labels(labels)?;
            let tracks = load_tracks(tracks)?;
            write_profile_csv(create_file(out)?, &risk_profile(&labels, &tracks))?;
        }
        Command::Synth {
            out,
            lanes,
            vehicles_per_lane,
            frames,
        } => {
            let cfg = load_config(cli)?;
            let scenario = TrafficScenario {
                lanes: *lanes,
                vehicles_per_lane: *vehicles_per_lane,
                frames: *frames,
                seed: cfg.seed,
            };
            write_ngsim_csv(create_file(out)?, &scenario).map_err(|e| match e {
                autocluster::Error::Parameter(_) => config_error(e),
                e => e.into(),
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

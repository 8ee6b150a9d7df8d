use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scgi::ablation::{holdout_benchmark, run_ablation_suite, run_corruption_suite};
use scgi::caption::{corrupt_caption, render_caption, write_caption_file, CaptionRecord};
use scgi::config::{Config, KEYS};
use scgi::evaluator::{format_ranked_lists, threads_from_env};
use scgi::model::{group_of, MODEL_FORMAT};
use scgi::nn::Checkpoint;
use scgi::synth::{generate_dataset, read_manifest, split_query_gallery, Dataset};
use scgi::trainer::{evaluate_checkpoint, train_checkpoint};
use scgi::{Error, Result};

#[derive(Parser)]
#[command(name = "scgi", version, about = "Caption-guided person re-identification on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    SynthData {
        #[arg(long, default_value_t = 16)]
        ids: usize,
        #[arg(long, default_value_t = 8)]
        per_id: usize,
        #[arg(long, default_value_t = 3)]
        cams: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a caption file from a manifest, resampling attributes with
    /// probability P.
    Caption {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        corrupt_p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and run log.
    #[command(after_help = config_help())]
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Caption file, relative to the data directory or absolute.
        #[arg(long)]
        captions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Run log path [default: <out>.log]
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a query/gallery split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Seed of the query/gallery split.
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        /// Also write each query's top-10 gallery entries here.
        #[arg(long)]
        ranked: Option<PathBuf>,
    },
    /// Train and compare ablation arms over several seeds on held-out identities.
    #[command(after_help = config_help())]
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated seeds, at least two.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        /// Skip the depth and query-count sweeps.
        #[arg(long)]
        no_sweeps: bool,
        /// Comma-separated caption corruption levels; empty to skip.
        #[arg(long, default_value = "0,0.2,0.5")]
        corrupt_levels: String,
    },
    /// Print parameter groups, shapes and the config hash of a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write a copy without the inversion-branch parameters.
        #[arg(long)]
        strip_cgi: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable); applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config> {
        let mut c = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {kv:?} is not KEY=VALUE")))?;
            c.set(k.trim(), v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn config_help() -> String {
    let defaults = Config::default().entries();
    let mut out = String::from("Config keys (default):\n");
    for (k, desc) in KEYS {
        let _ = writeln!(out, "  {k} = {}\n      {desc}", defaults[k]);
    }
    out
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Config(format!("bad {what} {s:?}"))))
        .collect()
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SynthData {
            ids,
            per_id,
            cams,
            seed,
            out,
        } => {
            let data = generate_dataset(ids, per_id, cams, seed)?;
            data.save(&out)?;
            println!("wrote {} samples of {ids} identities to {}", data.len(), out.display());
        }
        Command::Caption {
            manifest,
            corrupt_p,
            seed,
            out,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let records = read_manifest(&manifest)?
                .into_iter()
                .map(|e| {
                    Ok(CaptionRecord {
                        caption: render_caption(&corrupt_caption(&e.attrs, corrupt_p, &mut rng)?),
                        image_id: e.image_id,
                        identity_id: e.identity_id,
                        camera_id: e.camera_id,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            write_caption_file(&out, &records)?;
            println!("wrote {} captions to {}", records.len(), out.display());
        }
        Command::Train {
            config,
            data,
            captions,
            out,
            log,
        } => {
            let config = config.resolve()?;
            let data = Dataset::load(&data, captions.as_deref())?;
            let (ck, run_log) = train_checkpoint(&config, &data)?;
            ck.save(&out)?;
            let log_path = log.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".log");
                p.into()
            });
            write(&log_path, run_log.to_text())?;
            let last = run_log.final_total().unwrap_or(f64::NAN);
            eprintln!("trained in {:.1}s", run_log.wall_seconds);
            println!("final l_total {last}; checkpoint {}; log {}", out.display(), log_path.display());
        }
        Command::Eval {
            checkpoint,
            data,
            report,
            split_seed,
            ranked,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let data = Dataset::load(&data, None)?;
            let (query, gallery) = split_query_gallery(&data, &mut ChaCha8Rng::seed_from_u64(split_seed))?;
            let (metrics, lists) = evaluate_checkpoint(&ck, &data, &query, &gallery, threads_from_env())?;
            write(&report, metrics.to_text())?;
            if let Some(p) = ranked {
                write(&p, format_ranked_lists(&data, &lists))?;
            }
            println!("mAP {} rank-1 {} over {} queries", metrics.map, metrics.rank1(), metrics.n_queries);
        }
        Command::Ablate {
            config,
            data,
            seeds,
            out,
            split_seed,
            no_sweeps,
            corrupt_levels,
        } => {
            let config = config.resolve()?;
            let seeds: Vec<u64> = parse_list(&seeds, "seed")?;
            let levels: Vec<f64> = parse_list(&corrupt_levels, "corruption level")?;
            let data = Dataset::load(&data, None)?;
            let bench = holdout_benchmark(&data, split_seed)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let report = run_ablation_suite(&config, &bench, &seeds, !no_sweeps)?;
            write(&out.join("ablation.txt"), report.to_text())?;
            print!("{}", report.to_text());
            if !levels.is_empty() {
                let corruption = run_corruption_suite(&config, &bench, &levels)?;
                write(&out.join("corruption.txt"), corruption.to_text())?;
                print!("{}", corruption.to_text());
            }
        }
        Command::Inspect { checkpoint, strip_cgi } => {
            let mut ck = Checkpoint::load(&checkpoint)?;
            if ck.meta.get("format").map(String::as_str) != Some(MODEL_FORMAT) {
                return Err(Error::Checkpoint(format!("{} is not a model checkpoint", checkpoint.display())));
            }
            let config = Config::from_meta(&ck.meta)?;
            println!("dtype {}", ck.dtype.name());
            println!("config_hash {}", config.hash());
            let mut total = 0usize;
            for (name, t) in &ck.tensors {
                let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
                total += t.shape.iter().product::<usize>();
                println!("{name}\t{}\t[{}]", group_of(name).name(), shape.join(", "));
            }
            println!("{} tensors, {total} values", ck.tensors.len());
            if let Some(p) = strip_cgi {
                let n = ck.remove_prefix("cgi.");
                ck.save(&p)?;
                println!("removed {n} inversion-branch tensors; wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

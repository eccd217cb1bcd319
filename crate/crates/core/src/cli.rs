//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration
//! (unknown key, bad value), 3 missing input file.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{prepare, ConfigError, RunConfig};
use crate::datasets::LogFormat;
use crate::error::Error;
use crate::eval::{
    full_rank_eval, sparsity_groups, stage_eval, trajectory_report, write_similarity_csv, write_stage_ranks_csv,
    EvalSplit,
};
use crate::numerics::RandomSource;
use crate::rqvae::{read_embeddings, sid_table, train_tokenizer};
use crate::trainer::{ablation_variants, run_ablation, test_report, train, EpochRecord, RunPaths, TimingRecord};

pub const CONFIG_ENV: &str = "LATENTREC_CONFIG";

#[derive(Debug, Parser)]
#[command(name = "latentrec", version, about = "Latent-reasoning sequential recommendation experiments")]
pub struct Cli {
    /// JSON config (defaults to $LATENTREC_CONFIG, then built-in defaults).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Exact output directory instead of `<out>/<timestamp>-seed<seed>`.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Tsv,
    TsvNoRating,
    Jsonl,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter and split an interaction log; writes sequences and statistics.
    Prep {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
    /// Generate a synthetic log with planted intents.
    Synth,
    /// Train a model and keep the best-validation checkpoint.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Full-ranking evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Also score every reasoning stage separately.
        #[arg(long)]
        stages: bool,
        /// Baseline checkpoint for the sparsity-group comparison.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Write trajectory diagnostics for the first N users.
        #[arg(long, default_value_t = 0)]
        trajectories: usize,
    },
    /// Fit the residual-quantization tokenizer to item embeddings.
    Tokenize {
        #[arg(long)]
        embeddings: PathBuf,
    },
    /// Train and compare the component ablations.
    Ablate,
    /// Turn a metrics stream into a per-epoch CSV with timing columns.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        /// Defaults to `timing.jsonl` next to the metrics file.
        #[arg(long)]
        timing: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
            Error::Invalid(_) => 2,
            _ => 1,
        };
        Self { code, msg: e.to_string() }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Invalid { .. } => Self {
                code: 2,
                msg: e.to_string(),
            },
            ConfigError::Other(e) => e.into(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg.resolve()?)
}

fn make_run_dir(cli: &Cli, cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = match &cli.run_dir {
        Some(d) => d.clone(),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            let base = cfg.out.join(format!("{stamp}-seed{}", cfg.seed));
            let mut dir = base.clone();
            let mut n = 1;
            while dir.exists() {
                dir = PathBuf::from(format!("{}-{n}", base.display()));
                n += 1;
            }
            dir
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir.join("config.json"), &cfg.to_json()?)?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    let s = serde_json::to_string_pretty(v).map_err(Error::from)?;
    write(path, &(s + "\n"))
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            e.code
        }
    }
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Prep { input, format } => {
            if let Some(i) = input {
                cfg.data.input = Some(i.clone());
                cfg.data.synth = None;
            }
            if let Some(f) = format {
                cfg.data.format = Some(match f {
                    FormatArg::Tsv => LogFormat::Tsv,
                    FormatArg::TsvNoRating => LogFormat::TsvNoRating,
                    FormatArg::Jsonl => LogFormat::Jsonl,
                });
            }
            let dir = make_run_dir(cli, &cfg)?;
            let p = prepare(&cfg.data, cfg.seed)?;
            write(&dir.join("sequences.tsv"), &p.corpus.to_tsv())?;
            let mut map = String::from("item\traw_item\n");
            for (i, raw) in p.corpus.item_ids.iter().enumerate() {
                let _ = writeln!(map, "{}\t{raw}", i + 1);
            }
            write(&dir.join("item_map.tsv"), &map)?;
            write_json(&dir.join("stats.json"), &p.split.stats())?;
            write(&dir.join("prep.log"), &(p.notes.join("\n") + "\n"))?;
            println!("{}", serde_json::to_string(&p.split.stats()).map_err(Error::from)?);
            println!("wrote {}", dir.display());
        }
        Command::Synth => {
            let synth = cfg.data.synth.clone().unwrap_or_default();
            cfg.data.synth = Some(synth.clone());
            let dir = make_run_dir(cli, &cfg)?;
            let d = crate::datasets::synth_generate(&synth, cfg.seed, cfg.data.max_len)?;
            let mut log = String::new();
            for s in &d.corpus.sequences {
                for (t, &v) in s.items.iter().enumerate() {
                    let _ = writeln!(log, "{}\t{}\t{t}", s.user_id, d.corpus.item_ids[v - 1]);
                }
            }
            write(&dir.join("interactions.tsv"), &log)?;
            #[derive(Serialize)]
            struct Planted<'a> {
                intents: &'a [usize],
                modes: &'a [Vec<Vec<usize>>],
            }
            write_json(
                &dir.join("planted.json"),
                &Planted {
                    intents: &d.intents,
                    modes: &d.modes,
                },
            )?;
            write_json(&dir.join("stats.json"), &d.split.stats())?;
            println!("wrote {}", dir.display());
        }
        Command::Train { resume } => {
            let dir = make_run_dir(cli, &cfg)?;
            let p = prepare(&cfg.data, cfg.seed)?;
            write_json(&dir.join("stats.json"), &p.split.stats())?;
            let paths = RunPaths::new(&dir);
            let res = train(&p.split, &cfg.model, &cfg.train, Some(&paths), resume.as_deref())?;
            let test = test_report(&res.best, &p.split, &cfg.train)?;
            write_json(&dir.join("test_metrics.json"), &test.metrics)?;
            println!(
                "best epoch {:?}: valid {} = {:?}",
                res.best_epoch, cfg.train.select_metric, res.best_metric
            );
            println!("test {}", serde_json::to_string(&test.metrics).map_err(Error::from)?);
            println!("wrote {}", dir.display());
        }
        Command::Eval {
            checkpoint,
            split,
            stages,
            baseline,
            trajectories,
        } => {
            let ck = Checkpoint::load(checkpoint)?;
            cfg.model = ck.meta.model.clone();
            let dir = make_run_dir(cli, &cfg)?;
            let p = prepare(&cfg.data, cfg.seed)?;
            if p.split.n_items != ck.meta.n_items {
                return Err(Error::invalid(format!(
                    "checkpoint has {} items, data has {}",
                    ck.meta.n_items, p.split.n_items
                ))
                .into());
            }
            let model = ck.model()?;
            let which = match split {
                SplitArg::Valid => EvalSplit::Valid,
                SplitArg::Test => EvalSplit::Test,
            };
            let src = RandomSource::new(cfg.seed);
            let t0 = Instant::now();
            let rep = full_rank_eval(&model.arch, &model.store, &p.split, which, &src, &cfg.eval)?;
            let infer_seconds = t0.elapsed().as_secs_f64();
            write_json(&dir.join("metrics.json"), &rep)?;
            write_json(
                &dir.join("eval_timing.json"),
                &serde_json::json!({ "infer_seconds": infer_seconds, "users": rep.n_users }),
            )?;
            println!("{}", serde_json::to_string(&rep.metrics).map_err(Error::from)?);
            if *stages {
                let st = stage_eval(&model.arch, &model.store, &p.split, which, &src, &cfg.eval)?;
                let map: std::collections::BTreeMap<&str, _> =
                    st.iter().map(|(n, r)| (n.as_str(), &r.metrics)).collect();
                write_json(&dir.join("stages.json"), &map)?;
            }
            if let Some(b) = baseline {
                let bm = Checkpoint::load(b)?.model()?;
                let brep = full_rank_eval(&bm.arch, &bm.store, &p.split, which, &src, &cfg.eval)?;
                let table = sparsity_groups(&p.split, &brep, &rep, &cfg.eval.ks)?;
                write(&dir.join("groups.csv"), &table.to_csv())?;
            }
            if *trajectories > 0 {
                let mut reports = Vec::new();
                for (i, u) in p.split.users.iter().take(*trajectories).enumerate() {
                    let r = trajectory_report(&model.arch, &model.store, which.example(u), &src, which.noise_key(i))?;
                    write_similarity_csv(&dir.join(format!("similarity_user{}.csv", u.user_id)), &r)?;
                    reports.push((u.user_id, r));
                }
                write_stage_ranks_csv(&dir.join("stage_ranks.csv"), &reports)?;
            }
            println!("wrote {}", dir.display());
        }
        Command::Tokenize { embeddings } => {
            let dir = make_run_dir(cli, &cfg)?;
            let rows = read_embeddings(embeddings)?;
            let (tok, rep) = train_tokenizer(&rows, &cfg.tokenizer)?;
            let codes = tok.codes(&rows)?;
            let ids: Vec<u64> = (1..=rows.len() as u64).collect();
            write(&dir.join("sids.tsv"), &sid_table(&ids, &codes).to_text())?;
            write_json(&dir.join("tokenizer_report.json"), &rep)?;
            println!(
                "reconstruction MSE {:.6} -> {:.6}; collisions {}; utilization {:?}",
                rep.initial_mse, rep.final_mse, rep.collisions, rep.utilization
            );
            println!("wrote {}", dir.display());
        }
        Command::Ablate => {
            let dir = make_run_dir(cli, &cfg)?;
            let p = prepare(&cfg.data, cfg.seed)?;
            let variants = ablation_variants(&cfg.model, &cfg.train);
            let table = run_ablation(&p.split, &variants, Some(&dir))?;
            write(&dir.join("ablation.csv"), &table.to_csv())?;
            write_json(&dir.join("ablation.json"), &table)?;
            print!("{}", table.to_csv());
            println!("wrote {}", dir.display());
        }
        Command::Report { metrics, timing } => {
            let timing = timing
                .clone()
                .unwrap_or_else(|| metrics.with_file_name("timing.jsonl"));
            let csv = report_csv(metrics, &timing)?;
            let dir = make_run_dir(cli, &cfg)?;
            write(&dir.join("report.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path, keep: impl Fn(&serde_json::Value) -> bool) -> CliResult<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| perr(e.to_string()))?;
        if keep(&v) {
            out.push(serde_json::from_value(v).map_err(|e| perr(e.to_string()))?);
        }
    }
    Ok(out)
}

/// Per-epoch curves joined with the timing stream (empty timing columns
/// when the timing file is absent).
pub fn report_csv(metrics: &Path, timing: &Path) -> CliResult<String> {
    let epochs: Vec<EpochRecord> = read_jsonl(metrics, |v| v.get("kind").and_then(|k| k.as_str()) == Some("epoch"))?
        .into_iter()
        .map(|mut v: serde_json::Value| {
            if let Some(o) = v.as_object_mut() {
                o.remove("kind");
            }
            serde_json::from_value(v).map_err(|e| Error::from(e).into())
        })
        .collect::<CliResult<_>>()?;
    let times: Vec<TimingRecord> = if timing.exists() {
        read_jsonl(timing, |_| true)?
    } else {
        Vec::new()
    };
    let cols: Vec<String> = epochs.first().map(|e| e.valid.keys().cloned().collect()).unwrap_or_default();
    let mut s = String::from("epoch,beta,l_rec,l_prefix,l_diff,l_align,l_total,reward_mean");
    for c in &cols {
        let _ = write!(s, ",{c}");
    }
    s.push_str(",train_ms_per_batch,infer_seconds\n");
    for e in &epochs {
        let _ = write!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            e.epoch,
            e.beta,
            e.l_rec,
            e.l_prefix,
            e.l_diff,
            e.l_align,
            e.l_total,
            e.reward_mean.map(|r| format!("{r:.6}")).unwrap_or_default()
        );
        for c in &cols {
            let _ = write!(s, ",{:.6}", e.valid.get(c).copied().unwrap_or(f64::NAN));
        }
        match times.iter().find(|t| t.epoch == e.epoch) {
            Some(t) => {
                let _ = writeln!(s, ",{:.3},{:.4}", t.train_ms_per_batch, t.infer_seconds);
            }
            None => s.push_str(",,\n"),
        }
    }
    Ok(s)
}

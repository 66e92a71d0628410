//! Command-line interface. Exit codes: 0 success, 1 runtime error, 2 usage
//! error.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::geom::Metric;
use crate::pointio::{dataset, read_cloud, write_cloud, Dataset, DatasetEntry, Split};
use crate::training::check::{end_to_end, END_TO_END_TOLERANCE};
use crate::training::eval::evaluate;
use crate::training::train::{prepare, train, TrainState, FINAL_CHECKPOINT};

#[derive(Parser, Debug)]
#[command(name = "snowflake", version, about = "Point cloud completion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Complete one partial cloud.
    Complete(CompleteArgs),
    /// Chamfer table of a checkpoint on a dataset.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "SNOWFLAKE_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Entries per category.
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: u64,
    /// Point counts and split fraction come from the `[data]` section.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Required unless resuming; when resuming it may only change `[train]`.
    #[arg(long, required_unless_present = "resume")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub skip_gradcheck: bool,
    /// Overrides `train.seed` for a fresh run.
    #[arg(long, env = "SNOWFLAKE_SEED")]
    pub seed: Option<u64>,
    /// Print a progress line every this many steps (0 disables).
    #[arg(long, default_value_t = 100)]
    pub progress: u64,
}

#[derive(Args, Debug)]
pub struct CompleteArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// `.ply` writes PLY, anything else XYZ.
    #[arg(long)]
    pub output: PathBuf,
    /// Also write `P_c`, `P_0`, `P_1`, `P_2` with `_pc`, `_p0`, `_p1`, `_p2`
    /// suffixes.
    #[arg(long)]
    pub levels: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "l2")]
    pub metric: Metric,
    #[arg(long, default_value = "test")]
    pub split: SplitArg,
    /// Defaults to `eval.csv` beside the checkpoint.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Score the ground truth against itself.
    #[arg(long)]
    pub sanity_gt: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<crate::Error> for Failure {
    fn from(e: crate::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult = Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn run(command: Command) -> CliResult {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Complete(a) => complete(a),
        Command::Eval(a) => eval(a),
    }
}

fn synth(a: SynthArgs) -> CliResult {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let manifest = dataset::generate(&a.out, &cfg.data, a.seed, a.count as usize)
        .with_context(|| format!("generating dataset in {}", a.out.display()))?;
    println!(
        "wrote {} entries to {}",
        manifest.entries.len(),
        a.out.display()
    );
    Ok(())
}

fn load_split(root: &Path, split: Option<Split>) -> Result<Vec<DatasetEntry>, Failure> {
    let ds = Dataset::load(root)?;
    let entries: Vec<DatasetEntry> = ds
        .entries
        .into_iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .collect();
    if entries.is_empty() {
        let which = split.map_or("any".to_string(), |s| s.to_string());
        return Err(Failure::Usage(format!(
            "dataset {} has no {which} entries",
            root.display()
        )));
    }
    Ok(entries)
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let mut state = match &a.resume {
        Some(ckpt) => {
            let mut state = TrainState::load(ckpt)?;
            if let Some(path) = &a.config {
                let mut cfg = RunConfig::load(path)?;
                if let Some(seed) = a.seed {
                    cfg.train.seed = seed;
                }
                let mut expected = cfg.clone();
                expected.train = state.config.train.clone();
                if expected != state.config {
                    return Err(anyhow!(
                        "{} differs from the checkpoint config outside [train]",
                        path.display()
                    )
                    .into());
                }
                if cfg.train.seed != state.config.train.seed
                    || cfg.train.batch_size != state.config.train.batch_size
                {
                    return Err(
                        anyhow!("train.seed and train.batch_size cannot change on resume").into(),
                    );
                }
                state.config.train.steps = cfg.train.steps;
                state.config.train.checkpoint_every = cfg.train.checkpoint_every;
            }
            state
        }
        None => {
            let path = a.config.as_ref().expect("clap requires --config");
            let mut cfg = RunConfig::load(path)?;
            if let Some(seed) = a.seed {
                cfg.train.seed = seed;
            }
            TrainState::new(cfg)?
        }
    };

    if a.skip_gradcheck {
        eprintln!("gradient check skipped");
    } else {
        let report = end_to_end(&state.config, 0, None)?;
        if !report.passes(END_TO_END_TOLERANCE) {
            return Err(anyhow!(
                "micro-model gradient check failed: relative error {:e} ≥ {:e} over {} coordinates \
                 (rerun with --skip-gradcheck to override)",
                report.relative_error,
                END_TO_END_TOLERANCE,
                report.analytic.len()
            )
            .into());
        }
        eprintln!(
            "gradient check passed: relative error {:e} over {} coordinates",
            report.relative_error,
            report.analytic.len()
        );
    }

    let entries = load_split(&a.data, Some(Split::Train))?;
    let samples = prepare(&entries, &state.net)?;
    let until = state.config.train.steps;
    let start = Instant::now();
    let first = state.step;
    let every = a.progress;
    train(&mut state, &samples, &a.out, until, |m| {
        if every > 0 && (m.step + 1) % every == 0 {
            let rate = (m.step + 1 - first) as f64 / start.elapsed().as_secs_f64();
            eprintln!(
                "step {} total {:.6} cd_3 {:.6} ({rate:.2} steps/s)",
                m.step + 1,
                m.total,
                m.cd[3]
            );
        }
    })?;
    println!(
        "trained to step {}; wrote {}",
        state.step,
        a.out.join(FINAL_CHECKPOINT).display()
    );
    Ok(())
}

/// `dir/stem{suffix}.ext` for `path = dir/stem.ext`.
pub fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy())
        .unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}{suffix}.{}", ext.to_string_lossy()),
        None => format!("{stem}{suffix}"),
    };
    path.with_file_name(name)
}

fn complete(a: CompleteArgs) -> CliResult {
    let state = TrainState::load(&a.ckpt)?;
    let partial = read_cloud(&a.input)?;
    let out = state.net.complete(&partial)?;
    write_cloud(&a.output, out.output())?;
    let mut written = vec![a.output.clone()];
    if a.levels {
        let extra = [
            ("_pc", &out.coarse),
            ("_p0", &out.seeds),
            ("_p1", &out.levels[0]),
            ("_p2", &out.levels[1]),
        ];
        for (suffix, cloud) in extra {
            let path = suffixed(&a.output, suffix);
            write_cloud(&path, cloud)?;
            written.push(path);
        }
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let state = TrainState::load(&a.ckpt)?;
    let split = match a.split {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Test => Some(Split::Test),
        SplitArg::All => None,
    };
    let entries = load_split(&a.data, split)?;
    let refs: Vec<&DatasetEntry> = entries.iter().collect();
    let table = evaluate(&state.net, &refs, a.metric, a.sanity_gt)?;
    print!("{}", table.render());
    let csv = a.csv.unwrap_or_else(|| a.ckpt.with_file_name("eval.csv"));
    std::fs::write(&csv, table.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    Ok(())
}

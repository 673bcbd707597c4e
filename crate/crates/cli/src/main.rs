use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use vidmix::harness::experiment::{RunData, RunSeeds};
use vidmix::harness::scaling::SCALING_CSV_HEADER;
use vidmix::harness::{
    mac_scaling_experiment, run_eval, synth_videos, train_toy, AttentionModel, ExperimentConfig,
};
use vidmix::heads::write_annotations;
use vidmix::suites::{gradient_suite, oracle_suite, Check};

#[derive(Parser)]
#[command(
    name = "vidmix",
    version,
    about = "Space-time mixing attention and Gate-Shift-Fuse at desk scale"
)]
struct Cli {
    /// Seed for every random stream of the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare the optimised kernels against the naive loop oracles.
    Verify,
    /// Compare tape gradients against central differences.
    Gradcheck,
    /// Count attention MACs against the number of frames.
    Bench {
        #[arg(long, value_enum, default_value_t = BenchModel::Both)]
        model: BenchModel,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
        frames: Vec<usize>,
        #[arg(long, default_value_t = 49)]
        tokens: usize,
        #[arg(long, default_value_t = 64)]
        head_dim: usize,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one toy model on the synthetic training split.
    TrainToy {
        #[arg(long, value_enum)]
        model: Member,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Save the trained parameters here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the ensemble members, score the test split over six views and
    /// report verb, noun and action accuracy.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the `task,top1,top5` CSV here; otherwise it follows the table.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write the synthetic training split as tensor dumps plus annotations.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the default experiment configuration.
    DefaultConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchModel {
    Stm,
    Full,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Member {
    GsfToy,
    XvitToy,
}

impl Member {
    fn name(self) -> &'static str {
        match self {
            Member::GsfToy => "gsf_toy",
            Member::XvitToy => "xvit_toy",
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::toy_default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ExperimentConfig::from_json(&text).with_context(|| format!("in {}", path.display()))
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn report(checks: &[Check]) -> bool {
    for c in checks {
        println!("{c}");
    }
    checks.iter().all(Check::passed)
}

fn bench(
    model: BenchModel,
    frames: &[usize],
    tokens: usize,
    head_dim: usize,
    seed: u64,
) -> Result<String> {
    let models = match model {
        BenchModel::Stm => vec![AttentionModel::Stm],
        BenchModel::Full => vec![AttentionModel::Full],
        BenchModel::Both => vec![AttentionModel::Stm, AttentionModel::Full],
    };
    let reports = models
        .into_iter()
        .map(|m| mac_scaling_experiment(m, frames, tokens, head_dim, seed))
        .collect::<vidmix::Result<Vec<_>>>()?;
    let mut csv = String::from(SCALING_CSV_HEADER);
    for r in &reports {
        csv.push_str(&r.csv_rows());
    }
    for r in &reports {
        csv.push_str(&r.slope_line());
    }
    Ok(csv)
}

fn train(
    model: Member,
    cfg: &ExperimentConfig,
    seed: u64,
    checkpoint: Option<&Path>,
) -> Result<()> {
    cfg.validate()?;
    let (toy, spec) = cfg.member(model.name())?;
    let seeds = RunSeeds::from_seed(seed);
    let data = RunData::generate(cfg, seeds)?;
    let set = data.train_set(cfg.sampling.frames, cfg.views.side)?;
    let outcome = train_toy(&toy, &set, spec, seeds.model)?;
    println!("epoch,loss,verb_top1,noun_top1,action_top1");
    for e in &outcome.history {
        println!(
            "{},{:.6},{:.2},{:.2},{:.2}",
            e.epoch, e.loss, e.verb_top1, e.noun_top1, e.action_top1
        );
    }
    if let Some(path) = checkpoint {
        fs::write(path, outcome.params.to_checkpoint())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn synth(out: &Path, cfg: &ExperimentConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    let data = synth_videos(&cfg.train.data, RunSeeds::from_seed(seed).train_data)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for v in &data.videos {
        fs::write(out.join(format!("{}.txt", v.id)), v.frames.to_text())?;
    }
    fs::write(
        out.join("annotations.csv"),
        write_annotations(&data.annotations()),
    )?;
    println!("wrote {} videos to {}", data.videos.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let seed = cli.seed;
    match cli.command {
        Command::Verify => return Ok(report(&oracle_suite(seed)?)),
        Command::Gradcheck => return Ok(report(&gradient_suite(seed)?)),
        Command::Bench {
            model,
            frames,
            tokens,
            head_dim,
            out,
        } => emit(
            &bench(model, &frames, tokens, head_dim, seed)?,
            out.as_deref(),
        )?,
        Command::TrainToy {
            model,
            config,
            checkpoint,
        } => train(
            model,
            &load_config(config.as_deref())?,
            seed,
            checkpoint.as_deref(),
        )?,
        Command::Eval { config, csv } => {
            let cfg = load_config(config.as_deref())?;
            let report = run_eval(&cfg, seed)?;
            print!("{}", report.table());
            match csv {
                Some(path) => emit(&report.csv(), Some(&path))?,
                None => print!("\n{}", report.csv()),
            }
        }
        Command::Synth { out, config } => synth(&out, &load_config(config.as_deref())?, seed)?,
        Command::DefaultConfig => println!("{}", ExperimentConfig::toy_default().to_json()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

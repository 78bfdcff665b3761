use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use neuroswap::harness::{
    evaluate, run_ablation, train_to, write_reports_csv, EvalOptions, Task, TrainConfig, Trained, METRICS_FILE,
};
use neuroswap::preprocess::{delta_f_over_f, register_stack, RegistrationConfig, DEFAULT_DFF_WINDOW};
use neuroswap::synthdata::{disk, generate_world, WorldConfig};
use neuroswap::tensor::{io, Tensor};
use neuroswap::{gradcheck, par};

// Training allocates and frees the same large buffers every step; glibc hands
// them back to the kernel each time, which costs more than the arithmetic.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const WORLD_SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "neuroswap", version, about = "Contrastive pose/calcium-imaging representation learning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-domain world.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an encoder (or baseline), checkpointing every epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint already in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Linear-probe benchmarks on a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = TaskArg::All)]
        task: TaskArg,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        /// Permute labels first (chance-level sanity check).
        #[arg(long)]
        shuffle_labels: bool,
        /// CSV report path (default: CKPT/eval_<task>_<fraction>.csv).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long)]
        op: Option<String>,
        /// List the available checks and exit.
        #[arg(long)]
        list: bool,
    },
    /// Cumulative augmentation ladder over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Base training config (method and augmentations are set per rung).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Register an imaging stack and convert it to ΔF/F.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        ref_frame: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_DFF_WINDOW)]
        window: usize,
        #[arg(long)]
        lambda: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Single,
    Across,
    Identity,
    All,
}

impl TaskArg {
    fn tasks(self) -> Vec<Task> {
        match self {
            TaskArg::Single => vec![Task::Single],
            TaskArg::Across => vec![Task::Across],
            TaskArg::Identity => vec![Task::Identity],
            TaskArg::All => Task::ALL.to_vec(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            TaskArg::Single => "single",
            TaskArg::Across => "across",
            TaskArg::Identity => "identity",
            TaskArg::All => "all",
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(default)]
struct WorldFile {
    schema_version: u32,
    seed: u64,
    world: WorldConfig,
}

impl Default for WorldFile {
    fn default() -> Self {
        Self { schema_version: WORLD_SCHEMA_VERSION, seed: 0, world: WorldConfig::default() }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&s).with_context(|| format!("parsing {}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let threads = par::init_from_env();
    log::debug!("{threads} worker thread(s)");
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Generate { config, out } => {
            let wf: WorldFile = match config {
                Some(p) => read_json(&p)?,
                None => WorldFile::default(),
            };
            if wf.schema_version != WORLD_SCHEMA_VERSION {
                bail!("unsupported world config schema_version {}", wf.schema_version);
            }
            let ds = generate_world(&wf.world, wf.seed)?;
            disk::save(&out, &ds)?;
            info!("wrote {} trials over {} domains to {}", ds.trials.len(), ds.domains(), out.display());
        }
        Cmd::Train { config, data, out, resume } => {
            let cfg = TrainConfig::from_json(&fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?)?;
            let ds = disk::load(&data)?;
            let trained = train_to(&ds, &cfg, Some(&out), resume.then_some(out.as_path()))?;
            info!(
                "trained {} for {} epochs; checkpoint and {METRICS_FILE} in {}",
                cfg.method,
                trained.epochs_done,
                out.display()
            );
        }
        Cmd::Eval { ckpt, data, task, fraction, shuffle_labels, csv } => {
            let model = Trained::load(&ckpt)?;
            let ds = disk::load(&data)?;
            let opts = EvalOptions { fraction, shuffle_labels, ..Default::default() };
            let reports = evaluate(&model, &ds, &task.tasks(), &opts)?;
            let mut stdout = std::io::stdout().lock();
            for r in &reports {
                writeln!(stdout, "{}", serde_json::to_string(r)?)?;
            }
            let path = csv.unwrap_or_else(|| ckpt.join(format!("eval_{}_{fraction}.csv", task.name())));
            write_reports_csv(fs::File::create(&path)?, &reports)?;
            info!("report written to {}", path.display());
        }
        Cmd::Gradcheck { op, list } => {
            if list {
                for n in gradcheck::case_names() {
                    println!("{n}");
                }
                return Ok(ExitCode::SUCCESS);
            }
            let reports = gradcheck::suite(op.as_deref())?;
            let mut failed = 0;
            for r in &reports {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!("{status:4} {:28} max rel err {:.2e} (tol {:.0e}, {} entries)", r.name, r.max_rel_err, r.tolerance, r.checked);
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                eprintln!("{failed} of {} checks failed", reports.len());
                return Ok(ExitCode::FAILURE);
            }
        }
        Cmd::Ablate { data, seeds, config, out } => {
            let ds = disk::load(&data)?;
            let base = match config {
                Some(p) => TrainConfig::from_json(&fs::read_to_string(&p)?)?,
                None => TrainConfig::default(),
            };
            let seeds: Vec<u64> = (0..seeds).collect();
            let table = run_ablation(&ds, &base, &seeds, &EvalOptions::default())?;
            fs::create_dir_all(&out)?;
            table.write_csv(fs::File::create(out.join("ablation.csv"))?)?;
            table.write_deltas_csv(fs::File::create(out.join("deltas.csv"))?)?;
            for d in &table.deltas {
                println!("{:10} single {:+6.1}  across {:+6.1}  identity {:+6.1}", d.rung, d.single, d.across, d.identity);
            }
        }
        Cmd::Preprocess { input, ref_frame, out, window, lambda } => {
            let stack: Tensor<f32> = io::load(&input)?;
            let mut cfg = RegistrationConfig::default();
            if let Some(l) = lambda {
                cfg.lambda = l;
            }
            let (registered, flows) = register_stack(&stack, ref_frame, &cfg)?;
            let dff = delta_f_over_f(&registered, window)?;
            let out = out.unwrap_or_else(|| input.with_extension("dff.nswt"));
            io::save(&out, &dff)?;
            let mean_shift: f64 = flows.iter().map(|f| {
                let (x, y) = f.mean();
                (x * x + y * y).sqrt()
            }).sum::<f64>() / flows.len().max(1) as f64;
            info!("registered {} frames (mean |flow| {mean_shift:.3} px), ΔF/F written to {}", flows.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

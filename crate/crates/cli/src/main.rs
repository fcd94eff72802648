use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use litformer::checkpoint::Checkpoint;
use litformer::complexity::table_rows;
use litformer::data::{simulate_dataset, simulate_pairs, Manifest, Volume, MANIFEST_FILE};
use litformer::eval::evaluate;
use litformer::net::{network_gradcheck, ModelConfig};
use litformer::tensor::gradcheck::{Probe, GRADCHECK_TOL};
use litformer::train::{patches_from_pairs, restore_model, RunConfig, RunRecord, Trainer};

const LOG_FILE: &str = "train.jsonl";
const CKPT_FILE: &str = "checkpoint.litckpt";
const CONFIG_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(name = "litformer", version, about = "3D CT denoising and through-plane deblurring toolkit")]
struct Cli {
    /// Run all parallel work on one thread.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self, fallback: fn() -> RunConfig) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => fallback(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write simulated low/normal-dose volume pairs and a manifest.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, writing a JSONL log and an atomically replaced checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory with a manifest; simulated in memory if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stop after this many total steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a checkpoint (or only the trilinear baseline) on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory with a manifest; simulated in memory if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write the JSON lines here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Whole-network finite-difference gradient check in f64.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Input shape N,1,D,H,W.
        #[arg(long, value_delimiter = ',', default_value = "1,1,4,16,16")]
        input: Vec<usize>,
        /// Elements probed per tensor.
        #[arg(long, default_value_t = 4)]
        probe: usize,
    },
    /// Parameter and MAC accounting with formula checks.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Print the full reports as JSON.
        #[arg(long)]
        json: bool,
    },
}

fn micro_run() -> RunConfig {
    RunConfig { model: ModelConfig::micro(), ..RunConfig::desk() }
}

fn load_pairs(data: Option<&Path>, cfg: &RunConfig) -> Result<Vec<(String, Volume, Volume)>> {
    match data {
        Some(dir) => {
            let m = Manifest::load(&dir.join(MANIFEST_FILE))?;
            Ok(m.load_pairs(dir)?)
        }
        None => Ok(simulate_pairs(&cfg.data.simulate, cfg.seed)?),
    }
}

/// Keeps only log lines up to `step`, so a resumed log stays increasing.
fn truncate_log(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r = RunRecord::from_json_line(line).with_context(|| format!("bad log line in {}", path.display()))?;
        if r.step <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

fn simulate(common: &Common, out: &Path) -> Result<bool> {
    let cfg = common.load(RunConfig::desk)?;
    let m = simulate_dataset(out, &cfg.data.simulate, cfg.seed)?;
    println!("wrote {} pairs to {} ({})", m.pairs.len(), out.display(), m.noise_model);
    Ok(true)
}

fn train(
    common: &Common,
    out: &Path,
    data: Option<&Path>,
    checkpoint: Option<&Path>,
    steps: Option<usize>,
) -> Result<bool> {
    fs::create_dir_all(out)?;
    let log_path = out.join(LOG_FILE);
    let ckpt_path = out.join(CKPT_FILE);
    let mut trainer = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            let cfg = RunConfig::from_toml(&ck.config)?;
            let patches = patches_from_pairs(&load_pairs(data, &cfg)?, &cfg.data, cfg.seed)?;
            truncate_log(&log_path, ck.step as usize)?;
            Trainer::from_checkpoint(&ck, patches)?
        }
        None => {
            let cfg = common.load(RunConfig::desk)?;
            let patches = patches_from_pairs(&load_pairs(data, &cfg)?, &cfg.data, cfg.seed)?;
            if log_path.exists() {
                fs::remove_file(&log_path)?;
            }
            Trainer::new(cfg, patches)?
        }
    };
    fs::write(out.join(CONFIG_FILE), trainer.cfg.to_toml())?;
    let until = steps.unwrap_or(usize::MAX);
    let start = trainer.step;
    let mut log = OpenOptions::new().create(true).append(true).open(&log_path)?;
    let mut last = None;
    trainer.run(until, Some(&ckpt_path), |r| {
        writeln!(log, "{}", r.to_json_line())?;
        eprintln!("step {:>6}  lr {:.3e}  loss {:.6}", r.step, r.lr, r.loss);
        last = Some(r.clone());
        Ok(())
    })?;
    if trainer.step == start {
        trainer.checkpoint().save(&ckpt_path)?;
    }
    println!(
        "trained {} -> {} of {} steps; checkpoint {}{}",
        start,
        trainer.step,
        trainer.total_steps(),
        ckpt_path.display(),
        last.map(|r| format!("; final loss {:.6}", r.loss)).unwrap_or_default()
    );
    Ok(true)
}

fn eval(common: &Common, checkpoint: Option<&Path>, data: Option<&Path>, out: Option<&Path>) -> Result<bool> {
    let (cfg, trained) = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            let (cfg, model, params) = restore_model(&ck)?;
            (cfg, Some((model, params)))
        }
        None => (common.load(RunConfig::desk)?, None),
    };
    let pairs = load_pairs(data, &cfg)?;
    let report = evaluate(trained.as_ref().map(|(m, p)| (m, p)), cfg.model.r, &pairs)?;
    let lines = report.to_json_lines();
    print!("{lines}");
    if let Some(p) = out {
        fs::write(p, &lines)?;
    }
    Ok(true)
}

fn gradcheck(common: &Common, input: &[usize], probe: usize) -> Result<bool> {
    let cfg = common.load(micro_run)?;
    let r = network_gradcheck(&cfg.model, cfg.seed, input, &Probe::Strided(probe))?;
    let ok = r.passed(GRADCHECK_TOL);
    println!(
        "gradcheck: {} entries, max rel err {:.3e} (tol {:.0e}) worst {:?} -> {}",
        r.checked,
        r.max_rel_err,
        GRADCHECK_TOL,
        r.worst,
        if ok { "PASS" } else { "FAIL" }
    );
    Ok(ok)
}

fn analyze(common: &Common, json: bool) -> Result<bool> {
    let cfg = common.load(RunConfig::full)?;
    let reports = table_rows(&cfg.model, cfg.seed)?;
    println!("{:<14} {:>8} {:>10}", "model", "params M", "MACs G");
    for r in &reports {
        println!("{}", r.table_row());
    }
    for r in &reports {
        println!();
        if json {
            println!("{}", r.to_json());
        } else {
            print!("{}", r.to_table());
        }
    }
    Ok(reports.iter().all(|r| r.passed()))
}

fn run(cli: Cli) -> Result<bool> {
    if cli.deterministic {
        rayon::ThreadPoolBuilder::new().num_threads(1).build_global().context("configuring thread pool")?;
    }
    match &cli.cmd {
        Cmd::Simulate { common, out } => simulate(common, out),
        Cmd::Train { common, out, data, checkpoint, steps } => {
            if checkpoint.is_some() && common.config.is_some() {
                bail!("--config conflicts with --checkpoint; the checkpoint carries its own configuration");
            }
            train(common, out, data.as_deref(), checkpoint.as_deref(), *steps)
        }
        Cmd::Eval { common, checkpoint, data, out } => eval(common, checkpoint.as_deref(), data.as_deref(), out.as_deref()),
        Cmd::Gradcheck { common, input, probe } => gradcheck(common, input, *probe),
        Cmd::Analyze { common, json } => analyze(common, *json),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more checks failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

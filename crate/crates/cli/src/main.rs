use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use stvg::synth_data::{read_dataset, write_dataset};
use stvg::trainer::{self, Checkpoint, Trainer, ABLATION_ROWS};
use stvg::{GradCheckOptions, RunConfig};

#[derive(Parser)]
#[command(name = "stvg-cli", version, about = "Two-branch spatio-temporal video grounding on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on a generated dataset and write a checkpoint, loss log and config to DIR.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_s2d: bool,
        #[arg(long)]
        no_d2s: bool,
    },
    /// Evaluate a checkpoint on a dataset file and write a JSON-lines report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Generate the dataset described by a config file.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the training loss against every parameter.
    Gradcheck,
    /// Train every interaction setting over several seeds and print the median table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Also write per-run results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn run_train(config: &Path, out: &Path, no_s2d: bool, no_d2s: bool) -> Result<()> {
    let mut cfg = load_config(config)?;
    cfg.train.no_s2d |= no_s2d;
    cfg.train.no_d2s |= no_d2s;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.txt"), cfg.to_kv())?;

    let data = stvg::synth_data::generate_dataset(&cfg.gen)?;
    info!("generated {} training samples", data.len());
    let mut log = BufWriter::new(File::create(out.join("loss.jsonl"))?);
    let mut t = Trainer::new(cfg)?;
    let every = t.config.train.log_every.max(1);
    while t.step < t.config.train.steps {
        let s = t.train_step(&data)?;
        writeln!(log, "{}", serde_json::to_string(&s)?)?;
        if s.step % every == 0 {
            info!("step {} loss {:.4}", s.step, s.loss.total);
        }
    }
    log.flush()?;
    let path = out.join("model.ckpt");
    t.checkpoint().save(&path)?;
    println!("wrote {} after {} steps", path.display(), t.step);
    Ok(())
}

fn run_eval(checkpoint: &Path, data: &Path, report: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let samples = read_dataset(data).with_context(|| format!("loading {}", data.display()))?;
    let r = trainer::evaluate(&ckpt.model, &samples, ckpt.config.train.test_frames)?;
    let mut w = BufWriter::new(File::create(report)?);
    r.write_jsonl(&mut w)?;
    w.flush()?;
    let a = &r.aggregate;
    println!("m_vIoU {:.4}  vIoU@0.3 {:.4}  vIoU@0.5 {:.4}  ({} samples)", a.m_viou, a.viou_03, a.viou_05, a.count);
    Ok(())
}

fn run_gen(config: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let data = stvg::synth_data::generate_dataset(&cfg.gen)?;
    write_dataset(&data, out)?;
    println!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

fn run_gradcheck() -> Result<()> {
    let opts = GradCheckOptions::default();
    let mut failed = false;
    for layers in [1, 2] {
        let mut cfg = trainer::grad_check_config();
        cfg.arch.layers = layers;
        let r = trainer::loss_grad_check(&cfg, &opts)?;
        println!(
            "[{}] total loss, {layers} layer(s): {} gradients, max rel err {:.2e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.checked,
            r.max_rel_err
        );
        failed |= !r.passed;
    }
    if failed {
        bail!("gradient check failed");
    }
    Ok(())
}

fn run_ablate(config: &Path, seeds: &[u64], out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    let names: Vec<&str> = ABLATION_ROWS.iter().map(|r| r.0).collect();
    let rows = trainer::run_ablation(&cfg, seeds, &names, |name, seed, a| {
        info!("{name} seed {seed}: m_vIoU {:.4}", a.m_viou);
    })?;
    print!("{}", trainer::render_ablation_table(&rows));
    if let Some(p) = out {
        fs::write(p, serde_json::to_string_pretty(&rows)?)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Train { config, out, no_s2d, no_d2s } => run_train(config, out, *no_s2d, *no_d2s),
        Cmd::Eval { checkpoint, data, report } => run_eval(checkpoint, data, report),
        Cmd::GenData { config, out } => run_gen(config, out),
        Cmd::Gradcheck => run_gradcheck(),
        Cmd::Ablate { config, seeds, out } => run_ablate(config, seeds, out.as_deref()),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

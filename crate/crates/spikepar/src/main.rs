//! Command-line driver: dataset generation, teacher/student training,
//! evaluation, gradient checking, and energy reporting.

use clap::{Args, Parser, Subcommand};
use spikepar::data::{generate_synthetic, InMemoryDataset, Manifest};
use spikepar::distill::{train_mock_teacher, MockTeacherConfig, TeacherArtifact};
use spikepar::energy::{estimate_energy, EnergyReport};
use spikepar::error::{Error, Result};
use spikepar::model::{LayerStat, Probe, Spikingformer};
use spikepar::neuron::SpikeMode;
use spikepar::runcfg::RunConfig;
use spikepar::tape::Tape;
use spikepar::train::{evaluate, grad_check, train_student};
use std::cell::RefCell;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_OK: u8 = 0;
const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_GRAD: u8 = 3;

#[derive(Parser)]
#[command(
    name = "spikepar",
    about = "Spiking-transformer pedestrian attribute recognition",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to a key=value run-configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override `key=value` pairs applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Random seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic banded-attribute dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory for manifests and tensor files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the dense mock teacher and write its artifact file.
    TrainTeacher {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Training-split manifest.
        #[arg(long)]
        dataset: PathBuf,
        /// Output path for the teacher artifact.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the spiking student, optionally with distillation.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory holding train.manifest and test.manifest.
        #[arg(long)]
        dataset: PathBuf,
        /// Teacher artifact enabling distillation losses.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Run directory (resolved config, NDJSON log, checkpoints).
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a manifest split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest of the split to evaluate.
        #[arg(long)]
        dataset: PathBuf,
        /// Optional directory for report.txt / report.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the backward pass (exit 3 on failure).
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Minimum number of sampled parameter coordinates.
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Optional directory for the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer SOP/MAC counts and energy estimate over a split.
    EnergyReport {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest of the split to measure.
        #[arg(long)]
        dataset: PathBuf,
        /// Optional directory for energy.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        None => RunConfig::default(),
    };
    for pair in &args.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got '{pair}'")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.data.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Usage(_) | Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.resolved"), cfg.to_text())?;
    Ok(())
}

/// Generates into a temporary sibling directory and renames it into place,
/// so a failure never leaves a partial dataset at the target path.
fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    if out.exists() {
        return Err(Error::Usage(format!(
            "output directory {} already exists",
            out.display()
        )));
    }
    let name = out
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Usage(format!("invalid output path {}", out.display())))?;
    let tmp = out.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    let result = generate_synthetic(&cfg.data, &tmp).and_then(|()| {
        std::fs::write(tmp.join("config.resolved"), cfg.to_text())?;
        std::fs::rename(&tmp, out).map_err(Error::from)
    });
    if result.is_err() && tmp.exists() {
        let _ = std::fs::remove_dir_all(&tmp);
    }
    result?;
    println!(
        "wrote {} train / {} val / {} test samples to {}",
        cfg.data.train,
        cfg.data.val,
        cfg.data.test,
        out.display()
    );
    Ok(())
}

fn cmd_train_teacher(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<()> {
    let manifest = Manifest::load(dataset)?;
    let ds: InMemoryDataset<f32> = InMemoryDataset::load(&manifest)?;
    let tc = MockTeacherConfig { seed: cfg.seed, ..Default::default() };
    let teacher = train_mock_teacher(&ds.images, &ds.labels, &ds.ids, &tc)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    teacher.save(out)?;
    println!(
        "teacher artifact: {} samples, {} attributes, feature dim {} -> {}",
        ds.len(),
        teacher.num_attributes(),
        teacher.teacher_dim(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    dataset: &Path,
    teacher: Option<&Path>,
    out: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let train_ds: InMemoryDataset<f32> =
        InMemoryDataset::load(&Manifest::load(&dataset.join("train.manifest"))?)?;
    let test_ds: InMemoryDataset<f32> =
        InMemoryDataset::load(&Manifest::load(&dataset.join("test.manifest"))?)?;
    let teacher = teacher.map(TeacherArtifact::<f32>::load).transpose()?;
    let result = train_student(cfg, &train_ds, &test_ds, teacher.as_ref(), Some(out), resume, true)?;
    if let Some(last) = result.history.last() {
        println!(
            "done: epoch {} mA {:.5} F1 {:.5} (checkpoint in {})",
            last.epoch,
            last.ma,
            last.f1,
            out.display()
        );
    }
    Ok(())
}

fn load_checked(checkpoint: &Path, manifest: &Manifest) -> Result<Spikingformer<f32>> {
    let (model, _) = Spikingformer::<f32>::load_checkpoint(checkpoint)?;
    if model.attr_names != manifest.attr_names {
        return Err(Error::Validation(format!(
            "attribute vocabulary mismatch: checkpoint has {:?}, dataset has {:?}",
            model.attr_names, manifest.attr_names
        )));
    }
    Ok(model)
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, out: Option<&Path>) -> Result<()> {
    let manifest = Manifest::load(dataset)?;
    let ds: InMemoryDataset<f32> = InMemoryDataset::load(&manifest)?;
    let model = load_checked(checkpoint, &manifest)?;
    let report = evaluate(
        &model,
        &ds,
        cfg.batch_size.max(64),
        cfg.threshold,
        cfg.eval_strict,
        cfg.zero_denominator,
    )?;
    print!("{}", report.to_text());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), report.to_text())?;
        std::fs::write(dir.join("report.json"), report.to_json())?;
        echo_config(cfg, dir)?;
    }
    Ok(())
}

fn cmd_grad_check(cfg: &RunConfig, samples: usize, out: Option<&Path>) -> Result<bool> {
    let report = grad_check(cfg.seed, samples, false)?;
    print!("{}", report.to_text());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("grad_check.json"),
            serde_json::to_string_pretty(&report).expect("report serialize"),
        )?;
        echo_config(cfg, dir)?;
    }
    Ok(report.pass)
}

fn merged_layers(probe: &Probe) -> Probe {
    let mut merged: Vec<LayerStat> = Vec::new();
    for l in &probe.layers {
        match merged.iter_mut().find(|m| m.name == l.name) {
            Some(m) => {
                m.input_binary &= l.input_binary;
                m.input_nnz += l.input_nnz;
                m.input_elems += l.input_elems;
                m.sops += l.sops;
                m.macs += l.macs;
            }
            None => merged.push(l.clone()),
        }
    }
    Probe { layers: merged, assert_binary: false }
}

fn cmd_energy_report(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: &Path,
    out: Option<&Path>,
) -> Result<EnergyReport> {
    let manifest = Manifest::load(dataset)?;
    let ds: InMemoryDataset<f32> = InMemoryDataset::load(&manifest)?;
    let model = load_checked(checkpoint, &manifest)?;
    let probe = RefCell::new(Probe::asserting());
    for batch in spikepar::data::batch_iter(&ds, cfg.batch_size.max(64), None)? {
        let tape: Tape<f32> = Tape::no_grad();
        let bound = model.bind(&tape, false);
        model.forward(&tape, &bound, &batch.images, false, SpikeMode::Hard, Some(&probe))?;
    }
    let merged = merged_layers(&probe.borrow());
    let report = estimate_energy(&merged, model.cfg.time_steps, &cfg.energy)?;
    println!(
        "{} samples: {} SOPs, {} dense MACs; SNN {:.3} uJ vs ANN {:.3} uJ (ratio {:.4})",
        ds.len(),
        report.total_sops,
        report.total_macs,
        report.snn_pj / 1e6,
        report.ann_pj / 1e6,
        report.ratio
    );
    for l in &report.layers {
        println!(
            "  {:<28} sops {:>12}  macs {:>12}  rate {:.4}",
            l.name, l.sops, l.macs, l.firing_rate
        );
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("energy.json"), report.to_json())?;
        echo_config(cfg, dir)?;
    }
    Ok(report)
}

fn run(cli: Cli) -> std::result::Result<u8, Error> {
    match &cli.command {
        Command::GenData { cfg, out } => {
            cmd_gen_data(&load_config(cfg)?, out)?;
            Ok(EXIT_OK)
        }
        Command::TrainTeacher { cfg, dataset, out } => {
            cmd_train_teacher(&load_config(cfg)?, dataset, out)?;
            Ok(EXIT_OK)
        }
        Command::Train { cfg, dataset, teacher, out, checkpoint } => {
            cmd_train(&load_config(cfg)?, dataset, teacher.as_deref(), out, checkpoint.as_deref())?;
            Ok(EXIT_OK)
        }
        Command::Eval { cfg, checkpoint, dataset, out } => {
            cmd_eval(&load_config(cfg)?, checkpoint, dataset, out.as_deref())?;
            Ok(EXIT_OK)
        }
        Command::GradCheck { cfg, samples, out } => {
            let pass = cmd_grad_check(&load_config(cfg)?, *samples, out.as_deref())?;
            Ok(if pass { EXIT_OK } else { EXIT_GRAD })
        }
        Command::EnergyReport { cfg, checkpoint, dataset, out } => {
            cmd_energy_report(&load_config(cfg)?, checkpoint, dataset, out.as_deref())?;
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

//! `acelora`: synthesize data, train, evaluate, check gradients, sweep
//! ablations and dump similarity maps or incidence matrices.
//!
//! Every command that writes files writes them into the `--out` run
//! directory together with a `manifest.json`; `acelora replay` re-runs a
//! manifest and compares output hashes. Log verbosity follows `RUST_LOG`.

mod error;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acelora::config::RunConfig;
use acelora::data::{generate, read_dataset, split, write_dataset, Dataset};
use acelora::eval::{class_text_embeddings, default_templates, evaluate, similarity_map};
use acelora::gradcheck::{check_model, MODEL_EPSILON};
use acelora::hgnn::Variant;
use acelora::lora::Modality;
use acelora::loss::LossKind;
use acelora::model::Model;
use acelora::sweep::{sweep, Axis};
use acelora::train::{check_dataset, state_from_checkpoint, Checkpoint, Trainer};
use clap::{Args, Parser, Subcommand};

use crate::error::{CliError, Result};
use crate::manifest::{file_hash, RunManifest, MANIFEST_FILE};

#[derive(Parser, Debug)]
#[command(name = "acelora", version, about = "LoRA + hypergraph adaptation of dual encoders on synthetic paired data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic paired dataset.
    Synth {
        #[command(flatten)]
        run: RunArgs,
        /// Also write stratified train/val/test files.
        #[arg(long)]
        split: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train adapters (and the hypergraph module) on a dataset file.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        data: PathBuf,
        /// Continue from a checkpoint; its stored config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs. The checkpoint stays resumable.
        #[arg(long)]
        until: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare backward() against finite differences on a freshly initialized model.
    Gradcheck {
        #[command(flatten)]
        run: RunArgs,
        /// Number of consecutive seeds, starting at the run seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value_t = 3)]
        batch: usize,
        /// Corrupt one backward rule (negative control).
        #[arg(long, hide = true)]
        inject_fault: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate once per value of an ablation axis.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// k, r, components, variant or encoder_toggle.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; the axis defaults when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Comma-separated seeds averaged per row; the run seed when omitted.
        #[arg(long = "seed-list", value_delimiter = ',')]
        seed_list: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Similarity map of one image against a text query.
    Simmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: usize,
        /// Query with this class's prompt ensemble instead of the paired caption.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the incidence matrix built for one input.
    Incidence {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: usize,
        #[arg(long, default_value = "image")]
        modality: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run the command recorded in a manifest and compare output hashes.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Config file plus command-line overrides.
#[derive(Args, Debug, Clone, Default)]
struct RunArgs {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// label_guided or clip.
    #[arg(long)]
    loss: Option<String>,
    /// ours, gat, gatv2 or gnn.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    /// LoRA rank.
    #[arg(long)]
    r: Option<usize>,
    /// Hypergraph bottleneck width.
    #[arg(long)]
    dprime: Option<usize>,
    #[arg(long)]
    hgnn_image: Option<bool>,
    #[arg(long)]
    hgnn_text: Option<bool>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(l) = &self.loss {
            cfg.train.loss = LossKind::parse(l)?;
        }
        if let Some(v) = &self.variant {
            cfg.model.variant = Variant::parse(v)?;
        }
        if let Some(k) = self.k {
            cfg.model.k = k;
        }
        if let Some(r) = self.r {
            cfg.model.rank = r;
        }
        if let Some(d) = self.dprime {
            cfg.model.d_prime = d;
        }
        if let Some(b) = self.hgnn_image {
            cfg.model.hgnn_image = b;
        }
        if let Some(b) = self.hgnn_text {
            cfg.model.hgnn_text = b;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn has_model_overrides(&self) -> bool {
        self.config.is_some()
            || self.seed.is_some()
            || self.loss.is_some()
            || self.variant.is_some()
            || self.k.is_some()
            || self.r.is_some()
            || self.dprime.is_some()
            || self.hgnn_image.is_some()
            || self.hgnn_text.is_some()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn load_checkpoint(path: &Path) -> Result<(RunConfig, Model)> {
    let ckpt = Checkpoint::load(path)?;
    let run = RunConfig::from_toml(&ckpt.config)?;
    let model = state_from_checkpoint(&ckpt)?.model;
    Ok((run, model))
}

fn sample_index(data: &Dataset, index: usize) -> Result<usize> {
    if index >= data.len() {
        return Err(CliError::Usage(format!("sample index {index} out of range for {} samples", data.len())));
    }
    Ok(index)
}

/// Arguments with input paths made absolute, so a manifest replays from
/// any working directory.
fn recorded_args(args: &[String]) -> Vec<String> {
    const INPUTS: [&str; 4] = ["--config", "--data", "--resume", "--checkpoint"];
    let mut out = Vec::with_capacity(args.len());
    let mut absolute_next = false;
    for a in args {
        if absolute_next {
            out.push(fs::canonicalize(a).map_or_else(|_| a.clone(), |p| p.display().to_string()));
        } else {
            out.push(a.clone());
        }
        absolute_next = INPUTS.contains(&a.as_str());
    }
    out
}

fn run(cli: Cli, args: &[String]) -> Result<()> {
    let recorded = recorded_args(args);
    match cli.command {
        Command::Synth { run, split: do_split, out } => cmd_synth(&run, do_split, &out, recorded),
        Command::Train {
            run,
            data,
            resume,
            until,
            out,
        } => cmd_train(&run, &data, resume.as_deref(), until, &out, recorded),
        Command::Eval { checkpoint, data, out } => cmd_eval(&checkpoint, &data, out.as_deref(), recorded),
        Command::Gradcheck {
            run,
            seeds,
            batch,
            inject_fault,
            out,
        } => cmd_gradcheck(&run, seeds, batch, inject_fault, out.as_deref(), recorded),
        Command::Sweep {
            run,
            axis,
            values,
            seed_list,
            out,
        } => cmd_sweep(&run, &axis, values, &seed_list, &out, recorded),
        Command::Simmap {
            checkpoint,
            data,
            index,
            class,
            out,
        } => cmd_simmap(&checkpoint, &data, index, class, &out, recorded),
        Command::Incidence {
            checkpoint,
            data,
            index,
            modality,
            out,
        } => cmd_incidence(&checkpoint, &data, index, &modality, out.as_deref(), recorded),
        Command::Replay { manifest, out } => cmd_replay(&manifest, &out),
    }
}

fn cmd_synth(args: &RunArgs, do_split: bool, out: &Path, recorded: Vec<String>) -> Result<()> {
    let cfg = args.resolve()?;
    let data = generate(&cfg.synth())?;
    create_dir(out)?;
    let mut manifest = RunManifest::new("synth", recorded);
    manifest.config = Some(cfg.to_toml());
    let mut write = |name: &str, d: &Dataset| -> Result<()> {
        let path = out.join(name);
        write_dataset(&path, d)?;
        manifest.outputs.insert(name.to_string(), file_hash(&path)?);
        Ok(())
    };
    write("dataset.txt", &data)?;
    println!("dataset.txt: {} records, per class {:?}", data.len(), data.class_counts());
    if do_split {
        let (train, val, test) = split(&data, cfg.fractions(), cfg.seed)?;
        for (name, part) in [("train.txt", &train), ("val.txt", &val), ("test.txt", &test)] {
            write(name, part)?;
            println!("{name}: {} records, per class {:?}", part.len(), part.class_counts());
        }
    }
    manifest.dataset_hash = manifest.outputs.get("dataset.txt").cloned();
    manifest.save(out)?;
    Ok(())
}

fn cmd_train(args: &RunArgs, data_path: &Path, resume: Option<&Path>, until: Option<usize>, out: &Path, recorded: Vec<String>) -> Result<()> {
    let data = read_dataset(data_path)?;
    let mut trainer = match resume {
        Some(path) => {
            if args.has_model_overrides() {
                log::warn!("resuming: only --epochs is taken from the command line; the rest comes from the checkpoint");
            }
            let mut t = Trainer::from_checkpoint(&Checkpoint::load(path)?, &data)?;
            if let Some(e) = args.epochs {
                t.run.train.epochs = e;
            }
            t
        }
        None => Trainer::new(&args.resolve()?, &data)?,
    };
    let total = trainer.run.train.epochs;
    let stop = until.unwrap_or(total).min(total);
    let initial = trainer.mean_loss()?;
    trainer.run_until(stop, |t| {
        if let Some(r) = t.state().log.last() {
            log::info!("epoch {} step {} lr {:.3e} loss {:.6}", r.epoch, r.step, r.lr, r.loss);
        }
        Ok(())
    })?;
    let last = trainer.mean_loss()?;
    println!(
        "trained to epoch {}/{total}: mean loss {initial:.6} -> {last:.6}",
        trainer.state().epoch
    );

    create_dir(out)?;
    let mut manifest = RunManifest::new("train", recorded);
    manifest.config = Some(trainer.run.to_toml());
    manifest.dataset_hash = Some(file_hash(data_path)?);
    let ckpt = manifest.write_output(out, "checkpoint.acel", &trainer.checkpoint().to_bytes())?;
    let log: String = trainer.state().log.iter().map(|r| r.to_line() + "\n").collect();
    manifest.write_output(out, "epochs.log", log.as_bytes())?;
    manifest.checkpoint = Some(ckpt);
    manifest.save(out)?;
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data_path: &Path, out: Option<&Path>, recorded: Vec<String>) -> Result<()> {
    let (run, model) = load_checkpoint(checkpoint)?;
    let data = read_dataset(data_path)?;
    check_dataset(&run, &data)?;
    let report = evaluate(&model, &data, &default_templates())?;
    println!("{}", report.summary());
    if !report.auc_excluded_classes.is_empty() {
        println!("classes without both positives and negatives: {:?}", report.auc_excluded_classes);
    }
    if let Some(out) = out {
        create_dir(out)?;
        let mut manifest = RunManifest::new("eval", recorded);
        manifest.config = Some(run.to_toml());
        manifest.dataset_hash = Some(file_hash(data_path)?);
        manifest.checkpoint = Some(checkpoint.to_path_buf());
        manifest.write_output(out, "report.json", report.to_json().as_bytes())?;
        manifest.save(out)?;
    }
    Ok(())
}

fn cmd_gradcheck(args: &RunArgs, seeds: u64, batch: usize, inject_fault: bool, out: Option<&Path>, recorded: Vec<String>) -> Result<()> {
    let cfg = args.resolve()?;
    let model_cfg = cfg.model_config();
    acelora::autodiff::inject_backward_fault(inject_fault);
    let mut lines = String::from("seed\tgroup\tmax_rel_err\n");
    let mut failed = Vec::new();
    let mut worst = 0.0f64;
    for seed in cfg.seed..cfg.seed + seeds.max(1) {
        let r = check_model(&model_cfg, seed, batch, cfg.train.loss, MODEL_EPSILON)?;
        for (group, err) in &r.groups {
            lines.push_str(&format!("{seed}\t{group}\t{err:.3e}\n"));
        }
        worst = worst.max(r.worst);
        if !r.passed() {
            failed.push(format!("seed {seed}: {} at {:.3e}", r.worst_param, r.worst));
        }
    }
    acelora::autodiff::inject_backward_fault(false);
    print!("{lines}");
    println!("worst relative error {worst:.3e}");
    if let Some(out) = out {
        create_dir(out)?;
        let mut manifest = RunManifest::new("gradcheck", recorded);
        manifest.config = Some(cfg.to_toml());
        manifest.write_output(out, "gradcheck.tsv", lines.as_bytes())?;
        manifest.save(out)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient mismatch: {}", failed.join("; "))))
    }
}

fn cmd_sweep(args: &RunArgs, axis: &str, values: Vec<String>, seeds: &[u64], out: &Path, recorded: Vec<String>) -> Result<()> {
    let cfg = args.resolve()?;
    let axis = Axis::parse(axis)?;
    let values = if values.is_empty() { axis.default_values() } else { values };
    let table = sweep(&cfg, axis, &values, seeds)?;
    let text = table.to_text();
    print!("{text}");
    create_dir(out)?;
    let mut manifest = RunManifest::new("sweep", recorded);
    manifest.config = Some(cfg.to_toml());
    manifest.write_output(out, "table.tsv", text.as_bytes())?;
    manifest.save(out)?;
    Ok(())
}

fn cmd_simmap(checkpoint: &Path, data_path: &Path, index: usize, class: Option<usize>, out: &Path, recorded: Vec<String>) -> Result<()> {
    let (run, model) = load_checkpoint(checkpoint)?;
    let data = read_dataset(data_path)?;
    check_dataset(&run, &data)?;
    let sample = &data.samples[sample_index(&data, index)?];
    let query = match class {
        Some(c) if c >= data.config.num_classes => {
            return Err(CliError::Usage(format!("class {c} out of range for {} classes", data.config.num_classes)));
        }
        Some(c) => {
            let embeds = class_text_embeddings(&model, &[data.config.class_tokens(c)], &default_templates())?;
            embeds.row(0).to_vec()
        }
        None => model.embed_text(&sample.tokens)?,
    };
    let map = similarity_map(&model, &sample.image, &query)?;
    let grid = map.to_text_grid(false);
    print!("{grid}");
    let motif = &data.motifs()[sample.label];
    let margin = map.localization_margin(&motif.locations);
    println!("label {} motif patches {:?} margin {margin:.6}", sample.label, motif.locations);

    create_dir(out)?;
    let mut manifest = RunManifest::new("simmap", recorded);
    manifest.config = Some(run.to_toml());
    manifest.dataset_hash = Some(file_hash(data_path)?);
    manifest.checkpoint = Some(checkpoint.to_path_buf());
    manifest.write_output(out, "simmap.pgm", &map.to_pgm())?;
    manifest.write_output(out, "simmap.txt", grid.as_bytes())?;
    manifest.save(out)?;
    Ok(())
}

fn cmd_incidence(checkpoint: &Path, data_path: &Path, index: usize, modality: &str, out: Option<&Path>, recorded: Vec<String>) -> Result<()> {
    let (run, model) = load_checkpoint(checkpoint)?;
    let data = read_dataset(data_path)?;
    check_dataset(&run, &data)?;
    let modality = match modality {
        "image" => Modality::Image,
        "text" => Modality::Text,
        other => return Err(CliError::Usage(format!("unknown modality `{other}` (expected image or text)"))),
    };
    let sample = &data.samples[sample_index(&data, index)?];
    let input = model.prepare(modality, sample)?;
    let (_, incidence) = model.refine(modality, &input)?;
    let Some(incidence) = incidence else {
        return Err(CliError::Usage(format!("the hypergraph module is disabled for {}", modality.as_str())));
    };
    let text = incidence.to_debug_text();
    print!("{text}");
    if let Some(out) = out {
        create_dir(out)?;
        let mut manifest = RunManifest::new("incidence", recorded);
        manifest.config = Some(run.to_toml());
        manifest.dataset_hash = Some(file_hash(data_path)?);
        manifest.checkpoint = Some(checkpoint.to_path_buf());
        manifest.write_output(out, "incidence.txt", text.as_bytes())?;
        manifest.save(out)?;
    }
    Ok(())
}

fn cmd_replay(path: &Path, out: &Path) -> Result<()> {
    let original = RunManifest::load(path)?;
    let mut args = original.args.clone();
    let Some(pos) = args.iter().position(|a| a == "--out") else {
        return Err(CliError::Usage("manifest command has no --out directory".into()));
    };
    if pos + 1 >= args.len() {
        return Err(CliError::Usage("manifest --out has no value".into()));
    }
    args[pos + 1] = out.display().to_string();
    let cli = Cli::try_parse_from(std::iter::once("acelora".to_string()).chain(args.iter().cloned()))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if matches!(cli.command, Command::Replay { .. }) {
        return Err(CliError::Usage("a replay manifest cannot replay another replay".into()));
    }
    run(cli, &args)?;
    let replayed = RunManifest::load(&out.join(MANIFEST_FILE))?;
    let differing = original.differing_outputs(&replayed);
    if differing.is_empty() {
        println!("replay matches: {} outputs", original.outputs.len());
        Ok(())
    } else {
        Err(CliError::Check(format!("replayed outputs differ: {}", differing.join(", "))))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    match run(cli, &args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

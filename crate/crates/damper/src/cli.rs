//! Command-line front end. Exit codes: 0 success, 1 usage, 2 runtime failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use damper_core::corpus::SyntheticSpec;

use crate::checkpoint::load_checkpoint;
use crate::dataset::load_dataset;
use crate::error::{DamperError, Result};
use crate::formats::{
    metrics_json, read_generations, write_generations, write_json, GENERATIONS_FILE, MATCHING_FILE, METRICS_FILE,
};
use crate::pipeline::{build_trainer, evaluate_generations, generate_split, matching_dump, synthesize, train_into};
use crate::run::{create_run_dir, parse_split, write_resolved_config, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "damper", version, about = "Two-stage chest X-ray report generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus in the dataset format.
    SynthData(SynthArgs),
    /// Train a model and write a checkpoint plus a per-step loss log.
    Train(TrainArgs),
    /// Decode MeSH terms and reports for one split.
    Generate(GenerateArgs),
    /// Score generations against reference reports.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Flat `key = value` config file; flags override it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; defaults to `<output_root>/<timestamp>-<hash>`.
    #[arg(long, value_name = "DIR")]
    pub run_dir: Option<PathBuf>,
    /// Dataset file (JSON lines).
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub records: usize,
    #[arg(long, default_value_t = 2)]
    pub views: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub motifs: usize,
    /// Size of the descriptor-word pool.
    #[arg(long, default_value_t = 8)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = damper_core::corpus::DEFAULT_IMAGE_SIZE)]
    pub image_size: usize,
    /// Output directory; defaults to a fresh run directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub no_mca: bool,
    #[arg(long)]
    pub no_cmg: bool,
    #[arg(long)]
    pub no_intra_rca: bool,
    #[arg(long)]
    pub no_inter_rca: bool,
    /// Pairwise KNN graph with GCN instead of hypergraph convolution.
    #[arg(long)]
    pub graph: bool,
    /// `ground_truth` or `rule_labeler`.
    #[arg(long, value_name = "SOURCE")]
    pub mesh_source: Option<String>,
    /// Continue from a checkpoint with a compatible config.
    #[arg(long, value_name = "CHECKPOINT")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// train, val, test or all.
    #[arg(long)]
    pub split: Option<String>,
    /// Also write report-node × patch-node cosine matrices per study.
    #[arg(long)]
    pub dump_matching: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_name = "FILE")]
    pub generations: PathBuf,
    #[arg(long)]
    pub split: Option<String>,
}

/// Parses `args` (program name first), runs the command and maps the outcome
/// to an exit code. Messages go to `out` and `err`.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version also arrive here, on stdout with success
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return ExitCode::from(1);
            }
            let _ = write!(out, "{}", e.render());
            return ExitCode::SUCCESS;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::SynthData(a) => cmd_synth_data(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Generate(a) => cmd_generate(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
    }
}

fn say(out: &mut dyn Write, msg: std::fmt::Arguments) {
    let _ = writeln!(out, "{msg}");
}

/// Defaults, then the config file, then `--set`, then `--data`.
fn resolve(common: &CommonArgs, base: RunConfig) -> Result<RunConfig> {
    let mut rc = base;
    if let Some(path) = &common.config {
        rc.apply_file(path)?;
    }
    for kv in &common.overrides {
        rc.apply_override(kv)?;
    }
    if let Some(d) = &common.data {
        rc.data = Some(d.clone());
    }
    Ok(rc)
}

fn data_path(rc: &RunConfig) -> Result<&Path> {
    rc.data
        .as_deref()
        .ok_or_else(|| DamperError::Usage("no dataset given (use --data or the `data` key)".into()))
}

fn finish_dir(common: &CommonArgs, rc: &RunConfig) -> Result<PathBuf> {
    let dir = create_run_dir(common.run_dir.as_deref(), &rc.output_root, rc.hash())?;
    write_resolved_config(&dir, &rc.to_kv())?;
    Ok(dir)
}

fn cmd_synth_data(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let spec = SyntheticSpec {
        num_records: a.records,
        num_views: a.views,
        num_pathology_motifs: a.motifs,
        vocab_size: a.vocab_size,
        seed: a.seed,
        image_size: a.image_size,
    };
    spec.validate()?;
    let text = format!(
        "records = {}\nviews = {}\nmotifs = {}\nvocab_size = {}\nseed = {}\nimage_size = {}\n",
        spec.num_records, spec.num_views, spec.num_pathology_motifs, spec.vocab_size, spec.seed, spec.image_size
    );
    let dir = match a.out {
        Some(d) => create_run_dir(Some(&d), Path::new(""), 0)?,
        None => {
            let root = RunConfig::default().output_root;
            create_run_dir(None, &root, damper_core::config::fnv1a64(text.as_bytes()))?
        }
    };
    write_resolved_config(&dir, &text)?;
    let (path, n) = synthesize(&spec, &dir)?;
    say(out, format_args!("wrote {n} records to {}", path.display()));
    Ok(())
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut base = RunConfig::default();
    if let Some(path) = &a.resume {
        base.train = load_checkpoint(path)?.config;
    }
    let mut rc = resolve(&a.common, base)?;
    let t = &mut rc.train;
    if let Some(v) = a.steps {
        t.steps = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    t.mca &= !a.no_mca;
    t.cmg &= !a.no_cmg;
    t.intra_rca &= !a.no_intra_rca;
    t.inter_rca &= !a.no_inter_rca;
    if a.graph {
        t.set("hypergraph_vs_graph", "graph")?;
    }
    if let Some(src) = &a.mesh_source {
        t.set("mesh_source", src)?;
    }
    t.validate()?;
    let records = load_dataset(data_path(&rc)?, rc.image_size)?;
    let trainer = build_trainer(&rc.train, &records, a.resume.as_deref())?;
    let dir = finish_dir(&a.common, &rc)?;
    let start = trainer.step;
    let outputs = train_into(trainer, &dir, |_, _| {})?;
    say(
        out,
        format_args!(
            "trained steps {start}..{} ; log {} ; checkpoint {}",
            outputs.trainer.step,
            outputs.loss_log.display(),
            outputs.checkpoint.display()
        ),
    );
    Ok(())
}

fn cmd_generate(a: GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let mut base = RunConfig::default();
    base.train = ckpt.config.clone();
    let mut rc = resolve(&a.common, base)?;
    if let Some(s) = &a.split {
        rc.split = parse_split(s)?;
    }
    let compat = ckpt.compatibility(&rc.train);
    if compat.refuse {
        return Err(DamperError::Incompatible(compat.warnings.join("; ")));
    }
    let records = load_dataset(data_path(&rc)?, Some(ckpt.shape.image_size))?;
    let gens = generate_split(&ckpt, &records, rc.split)?;
    let dir = finish_dir(&a.common, &rc)?;
    let path = dir.join(GENERATIONS_FILE);
    write_generations(&path, &gens)?;
    say(out, format_args!("wrote {} generations to {}", gens.len(), path.display()));
    if a.dump_matching {
        let path = dir.join(MATCHING_FILE);
        write_json(&path, &matching_dump(&ckpt, &records, rc.split)?)?;
        say(out, format_args!("wrote matching matrices to {}", path.display()));
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let mut rc = resolve(&a.common, RunConfig::default())?;
    if let Some(s) = &a.split {
        rc.split = parse_split(s)?;
    }
    let gens = read_generations(&a.generations)?;
    // images are not scored; any size will do
    let records = load_dataset(data_path(&rc)?, rc.image_size)?;
    let report = evaluate_generations(&gens, &records, rc.split)?;
    let dir = finish_dir(&a.common, &rc)?;
    let path = dir.join(METRICS_FILE);
    write_json(&path, &metrics_json(&report))?;
    for (k, v) in report.entries() {
        say(out, format_args!("{k} {v:.4}"));
    }
    say(out, format_args!("wrote {}", path.display()));
    Ok(())
}

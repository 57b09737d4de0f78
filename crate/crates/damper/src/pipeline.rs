//! In-process equivalents of the CLI commands.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use damper_core::config::TrainConfig;
use damper_core::corpus::{generate_synthetic_corpus, PatientRecord, Split, SyntheticSpec};
use damper_core::metrics::{evaluate, LabelLexicon, MetricReport};
use damper_core::report_gen::{generate_report, relational_features, restore_model, LossBreakdown, Trainer};
use damper_core::tensor::cosine_matrix;
use serde_json::{json, Map, Value};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::dataset::write_dataset;
use crate::error::{DamperError, Result};
use crate::formats::{loss_line, Generation, CHECKPOINT_FILE, LOSS_LOG_FILE};

pub fn synthesize(spec: &SyntheticSpec, dir: &Path) -> Result<(PathBuf, usize)> {
    let records = generate_synthetic_corpus(spec)?;
    let path = write_dataset(dir, &records)?;
    Ok((path, records.len()))
}

pub fn in_split(r: &PatientRecord, split: Option<Split>) -> bool {
    split.is_none_or(|s| r.split == s)
}

/// Fresh trainer, or one restored from `resume` after checking that its
/// config is compatible with `config`.
pub fn build_trainer(config: &TrainConfig, records: &[PatientRecord], resume: Option<&Path>) -> Result<Trainer> {
    config.validate()?;
    let Some(path) = resume else {
        return Ok(Trainer::new(config.clone(), records)?);
    };
    let ckpt = load_checkpoint(path)?;
    let compat = ckpt.compatibility(config);
    if compat.refuse {
        return Err(DamperError::Incompatible(compat.warnings.join("; ")));
    }
    Ok(Trainer::restore(
        config.clone(),
        ckpt.vocab,
        ckpt.shape,
        ckpt.store,
        ckpt.adam,
        ckpt.step,
        records,
    )?)
}

pub struct TrainOutputs {
    pub trainer: Trainer,
    pub loss_log: PathBuf,
    pub checkpoint: PathBuf,
}

/// Trains up to `config.steps`, writing one log line per step and the final
/// checkpoint into `dir`.
pub fn train_into(
    trainer: Trainer,
    dir: &Path,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<TrainOutputs> {
    let mut trainer = trainer;
    let loss_log = dir.join(LOSS_LOG_FILE);
    let mut log = fs::File::create(&loss_log).map_err(|e| DamperError::io(&loss_log, e))?;
    let mut io_err = None;
    let until = trainer.config.steps;
    trainer.run(until, |step, b| {
        if io_err.is_none() {
            if let Err(e) = writeln!(log, "{}", loss_line(step, b)) {
                io_err = Some(e);
            }
        }
        on_step(step, b);
    })?;
    if let Some(e) = io_err {
        return Err(DamperError::io(&loss_log, e));
    }
    let checkpoint = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &Checkpoint::from_trainer(&trainer))?;
    Ok(TrainOutputs {
        trainer,
        loss_log,
        checkpoint,
    })
}

/// Greedy generations for every record of `split`, in file order.
pub fn generate_split(ckpt: &Checkpoint, records: &[PatientRecord], split: Option<Split>) -> Result<Vec<Generation>> {
    let model = restore_model(&ckpt.store, ckpt.shape.clone(), ckpt.config.seed)?;
    records
        .iter()
        .filter(|r| in_split(r, split))
        .map(|r| {
            let out = generate_report(&model, &ckpt.store, &ckpt.vocab, &ckpt.config, &r.views)?;
            Ok(Generation {
                study_id: r.study_id.clone(),
                generated_mesh: out.mesh_terms,
                generated_report: out.report,
            })
        })
        .collect()
}

/// `study_id → [one report-node × patch-node cosine matrix per view]` for
/// every study with a nonempty reference report.
pub fn matching_dump(ckpt: &Checkpoint, records: &[PatientRecord], split: Option<Split>) -> Result<Value> {
    let model = restore_model(&ckpt.store, ckpt.shape.clone(), ckpt.config.seed)?;
    let mut out = Map::new();
    for r in records.iter().filter(|r| in_split(r, split) && !r.report.trim().is_empty()) {
        let f = relational_features(&model, &ckpt.store, &ckpt.vocab, &ckpt.config, &r.report, &r.views)?;
        let views: Vec<Value> = f
            .visual_nodes
            .iter()
            .map(|v| {
                let c = cosine_matrix(&f.report_nodes, v);
                json!((0..c.rows()).map(|i| c.row(i).to_vec()).collect::<Vec<_>>())
            })
            .collect();
        out.insert(r.study_id.clone(), Value::Array(views));
    }
    Ok(Value::Object(out))
}

/// Scores generations against the references of `split`. Every reference
/// study needs a generation and every generation a reference.
pub fn evaluate_generations(gens: &[Generation], records: &[PatientRecord], split: Option<Split>) -> Result<MetricReport> {
    let by_id: BTreeMap<&str, &Generation> = gens.iter().map(|g| (g.study_id.as_str(), g)).collect();
    let refs: Vec<&PatientRecord> = records.iter().filter(|r| in_split(r, split)).collect();
    let known: BTreeSet<&str> = refs.iter().map(|r| r.study_id.as_str()).collect();
    let mut missing: Vec<String> = refs
        .iter()
        .filter(|r| !by_id.contains_key(r.study_id.as_str()))
        .map(|r| r.study_id.clone())
        .collect();
    missing.extend(gens.iter().filter(|g| !known.contains(g.study_id.as_str())).map(|g| g.study_id.clone()));
    if !missing.is_empty() {
        return Err(DamperError::MissingStudies(missing));
    }
    let ids: Vec<String> = refs.iter().map(|r| r.study_id.clone()).collect();
    let hyps: Vec<&str> = refs.iter().map(|r| by_id[r.study_id.as_str()].generated_report.as_str()).collect();
    let gold: Vec<&str> = refs.iter().map(|r| r.report.as_str()).collect();
    Ok(evaluate(&ids, &hyps, &gold, &LabelLexicon::default())?)
}

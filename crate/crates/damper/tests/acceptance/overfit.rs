//! One shared training run on the default synthetic corpus, then the
//! convergence, alignment and missing-view checks that read it.

use std::sync::OnceLock;

use damper::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use damper::dataset::{load_dataset, write_dataset};
use damper::pipeline::generate_split;
use damper_core::config::TrainConfig;
use damper_core::corpus::{generate_synthetic_corpus, PatientRecord, SyntheticSpec, BOS, EOS, PAD, UNK};
use damper_core::hfg::node_match_score;
use damper_core::report_gen::{generate_report, relational_features, teacher_forced_accuracy, GeneratedReport, Trainer};

use crate::support::{ensure, Check, Checks, Fail};

const CHECK_EVERY: usize = 100;
const HALVING_STEP: usize = 500;
const MAX_STEPS: usize = 2000;
const ACCURACY: f64 = 0.95;
const MIN_EXACT: usize = 7;

struct Run {
    records: Vec<PatientRecord>,
    trainer: Trainer,
    totals: Vec<f64>,
}

struct Quality {
    mesh_accuracy: f64,
    report_accuracy: f64,
    exact_reports: usize,
    exact_mesh: usize,
}

fn quality(t: &Trainer) -> Result<Quality, Fail> {
    let (mut mesh_acc, mut report_acc, mut exact_reports, mut exact_mesh) = (0.0, 0.0, 0, 0);
    for study in t.studies() {
        let (m, r) = teacher_forced_accuracy(&t.model, &t.store, &t.vocab, &t.config, study)?;
        mesh_acc += m.ok_or("MeSH decoder disabled")?;
        report_acc += r;
        let out = generate_report(&t.model, &t.store, &t.vocab, &t.config, &study.views)?;
        exact_reports += (out.report_tokens == study.report_target) as usize;
        exact_mesh += (out.mesh_tokens == study.mesh_target) as usize;
    }
    let n = t.studies().len() as f64;
    Ok(Quality { mesh_accuracy: mesh_acc / n, report_accuracy: report_acc / n, exact_reports, exact_mesh })
}

fn converged(q: &Quality) -> bool {
    q.mesh_accuracy > ACCURACY && q.report_accuracy > ACCURACY && q.exact_reports >= MIN_EXACT && q.exact_mesh >= MIN_EXACT
}

/// Trains to step 500, then in chunks until the decoders converge or the
/// step budget runs out.
fn train() -> Result<Run, String> {
    let records = generate_synthetic_corpus(&SyntheticSpec::default()).map_err(|e| e.to_string())?;
    let mut config = TrainConfig::default();
    config.batch_size = records.len();
    config.steps = MAX_STEPS;
    let mut trainer = Trainer::new(config, &records).map_err(|e| e.to_string())?;
    let mut totals = Vec::new();
    let mut step = HALVING_STEP;
    loop {
        trainer.run(step, |_, b| totals.push(b.total)).map_err(|e| e.to_string())?;
        let done = quality(&trainer).map(|q| converged(&q)).unwrap_or(false);
        if done || step >= MAX_STEPS {
            break;
        }
        step = (step + CHECK_EVERY).min(MAX_STEPS);
    }
    Ok(Run { records, trainer, totals })
}

fn shared() -> Result<&'static Run, Fail> {
    static RUN: OnceLock<Result<Run, String>> = OnceLock::new();
    RUN.get_or_init(train).as_ref().map_err(|e| Fail(format!("training failed: {e}")))
}

pub fn run_overfit(c: &mut Checks) {
    c.run("loss halves by step 500", || {
        let run = shared()?;
        let (first, at) = (run.totals[0], run.totals[HALVING_STEP - 1]);
        ensure!(at < 0.5 * first, "L_total {first:.4} at step 0, {at:.4} at step {}", HALVING_STEP - 1);
        Ok(())
    });
    c.run("teacher-forced accuracy above 0.95 for both decoders", || {
        let run = shared()?;
        let q = quality(&run.trainer)?;
        ensure!(
            q.mesh_accuracy > ACCURACY && q.report_accuracy > ACCURACY,
            "MeSH {:.3}, report {:.3} after {} steps",
            q.mesh_accuracy,
            q.report_accuracy,
            run.trainer.step
        );
        Ok(())
    });
    c.run("greedy decoding reproduces at least 7 of 8 studies", || {
        let run = shared()?;
        let q = quality(&run.trainer)?;
        ensure!(
            q.exact_reports >= MIN_EXACT && q.exact_mesh >= MIN_EXACT,
            "{} reports and {} MeSH sequences of {} after {} steps",
            q.exact_reports,
            q.exact_mesh,
            run.records.len(),
            run.trainer.step
        );
        Ok(())
    });
    c.run("step budget respected", || {
        let run = shared()?;
        ensure!(run.trainer.step <= MAX_STEPS, "{} steps", run.trainer.step);
        println!("    overfit converged at step {}", run.trainer.step);
        Ok(())
    });
}

pub fn run_alignment(c: &mut Checks) {
    c.run("matched pairs score higher than mismatched pairs", || {
        let run = shared()?;
        let t = &run.trainer;
        let features = t
            .studies()
            .iter()
            .map(|s| relational_features(&t.model, &t.store, &t.vocab, &t.config, &s.report, &s.views))
            .collect::<Result<Vec<_>, _>>()?;
        let (mut matched, mut mismatched) = (Vec::new(), Vec::new());
        for (a, fa) in features.iter().enumerate() {
            for (b, fb) in features.iter().enumerate() {
                for visual in &fb.visual_nodes {
                    let s = node_match_score(&fa.report_nodes, visual, t.config.m_node_mode)?;
                    if a == b { matched.push(s) } else { mismatched.push(s) }
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mut wins = 0.0;
        for p in &matched {
            for n in &mismatched {
                wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        let auc = wins / (matched.len() * mismatched.len()) as f64;
        let (mp, mn) = (mean(&matched), mean(&mismatched));
        println!("    m_node matched {mp:.4}, mismatched {mn:.4}, AUC {auc:.3}");
        ensure!(mp > mn, "matched mean {mp:.4} vs mismatched {mn:.4}");
        ensure!(auc > 0.8, "AUC {auc:.3}");
        Ok(())
    });
}

fn well_formed(out: &GeneratedReport, vocab_len: usize, max_len: usize) -> Check {
    let body = match out.report_tokens.split_last() {
        Some((&EOS, body)) => body,
        _ => {
            ensure!(out.report_tokens.len() == max_len, "report stops before EOS at {} tokens", out.report_tokens.len());
            &out.report_tokens[..]
        }
    };
    ensure!(!body.is_empty() && !out.report.trim().is_empty(), "empty report");
    ensure!(
        body.iter().all(|&t| t < vocab_len && ![PAD, BOS, EOS, UNK].contains(&t)),
        "special or unknown token inside the report: {:?}",
        body
    );
    Ok(())
}

fn single_view(records: &[PatientRecord]) -> Vec<PatientRecord> {
    records
        .iter()
        .map(|r| PatientRecord { views: r.views[..1].to_vec(), ..r.clone() })
        .collect()
}

pub fn run_missing_view(c: &mut Checks) {
    c.run("single-view studies decode to well-formed reports", || {
        let run = shared()?;
        let t = &run.trainer;
        ensure!(t.model.shape.num_views == 2, "model built for {} views", t.model.shape.num_views);
        let mut exact = 0;
        for study in t.studies() {
            let out = generate_report(&t.model, &t.store, &t.vocab, &t.config, &study.views[..1])?;
            well_formed(&out, t.vocab.len(), t.model.shape.max_report_len)?;
            exact += (out.report_tokens == study.report_target) as usize;
        }
        println!("    single-view exact reports {exact}/{}", t.studies().len());
        Ok(())
    });
    c.run("single-view dataset through a saved checkpoint", || {
        let run = shared()?;
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &Checkpoint::from_trainer(&run.trainer))?;
        let ckpt = load_checkpoint(&path)?;
        let data = write_dataset(&dir.path().join("one-view"), &single_view(&run.records))?;
        let records = load_dataset(&data, None)?;
        ensure!(records.iter().all(|r| r.views.len() == 1), "dataset kept a second view");
        let gens = generate_split(&ckpt, &records, None)?;
        ensure!(gens.len() == records.len(), "{} generations for {} records", gens.len(), records.len());
        for g in &gens {
            ensure!(!g.generated_report.trim().is_empty(), "{}: empty report", g.study_id);
        }
        Ok(())
    });
}

//! Corpus scoring: BLEU-1..4, ROUGE-L, simplified METEOR, and clinical
//! efficacy over labels from a keyword labeler.
//!
//! METEOR here is the exact-match stage only (no stemming or synonyms), so
//! its values are labelled `meteor` (simplified) wherever they are written.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::corpus::{segment_phrases, tokenize};
use crate::error::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;
pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_PENALTY_GAMMA: f64 = 0.5;
pub const METEOR_PENALTY_BETA: f64 = 3.0;

fn check_corpus<A, B>(hyps: &[A], refs: &[B]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::Empty("metric corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::shape(
            "metric corpus",
            alloc::format!("{} hypotheses for {} references", hyps.len(), refs.len()),
        ));
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and hypothesis n-gram total for one order.
fn clipped(hyp: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

/// BLEU on pre-tokenized text: corpus-level clipped precisions for orders
/// `1..=n`, geometric mean, brevity penalty. An order with no matches scores 0.
pub fn bleu_tokens(hyps: &[Vec<String>], refs: &[Vec<String>], n: usize) -> Result<f64> {
    check_corpus(hyps, refs)?;
    if !(1..=4).contains(&n) {
        return Err(Error::invalid(alloc::format!("BLEU order {n} outside 1..=4")));
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let (mut m, mut t) = (0, 0);
        for (h, rf) in hyps.iter().zip(refs) {
            let (a, b) = clipped(h, rf, order);
            m += a;
            t += b;
        }
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += libm::log(m as f64 / t as f64);
    }
    let bp = if c > r { 1.0 } else { libm::exp(1.0 - r as f64 / c as f64) };
    Ok(bp * libm::exp(log_sum / n as f64))
}

pub fn bleu_n<S: AsRef<str>, T: AsRef<str>>(hyps: &[S], refs: &[T], n: usize) -> Result<f64> {
    let h: Vec<_> = hyps.iter().map(|s| tokenize(s.as_ref())).collect();
    let r: Vec<_> = refs.iter().map(|s| tokenize(s.as_ref())).collect();
    bleu_tokens(&h, &r, n)
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = alloc::vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = alloc::vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// LCS F-measure of one pair.
pub fn rouge_l_pair(hyp: &[String], reference: &[String]) -> f64 {
    let l = lcs_len(hyp, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / hyp.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean per-pair ROUGE-L.
pub fn rouge_l<S: AsRef<str>, T: AsRef<str>>(hyps: &[S], refs: &[T]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| rouge_l_pair(&tokenize(h.as_ref()), &tokenize(r.as_ref())))
        .sum();
    Ok(total / hyps.len() as f64)
}

/// Exact-match unigram alignment as `(hyp index, ref index)` pairs in hypothesis
/// order. Each hypothesis token prefers the reference slot right after the
/// previous match (extending a chunk), else the earliest unused one.
pub fn align_exact(hyp: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut used = alloc::vec![false; reference.len()];
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (i, tok) in hyp.iter().enumerate() {
        let follow = out
            .last()
            .filter(|&&(pi, _)| pi + 1 == i)
            .map(|&(_, pj)| pj + 1)
            .filter(|&j| j < reference.len() && !used[j] && &reference[j] == tok);
        let pick = follow.or_else(|| (0..reference.len()).find(|&j| !used[j] && &reference[j] == tok));
        if let Some(j) = pick {
            used[j] = true;
            out.push((i, j));
        }
    }
    out
}

/// Number of runs of alignment pairs adjacent in both strings.
pub fn count_chunks(alignment: &[(usize, usize)]) -> usize {
    let mut chunks = 0;
    for (k, &(i, j)) in alignment.iter().enumerate() {
        let continues = k > 0 && {
            let (pi, pj) = alignment[k - 1];
            pi + 1 == i && pj + 1 == j
        };
        if !continues {
            chunks += 1;
        }
    }
    chunks
}

/// Simplified METEOR of one pair.
pub fn meteor_pair(hyp: &[String], reference: &[String]) -> f64 {
    let alignment = align_exact(hyp, reference);
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let frag = count_chunks(&alignment) as f64 / m as f64;
    let penalty = METEOR_PENALTY_GAMMA * libm::pow(frag, METEOR_PENALTY_BETA);
    f_mean * (1.0 - penalty)
}

pub fn meteor_simplified<S: AsRef<str>, T: AsRef<str>>(hyps: &[S], refs: &[T]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| meteor_pair(&tokenize(h.as_ref()), &tokenize(r.as_ref())))
        .sum();
    Ok(total / hyps.len() as f64)
}

/// Finding labels with their trigger phrases, plus negation words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelLexicon {
    pub entries: Vec<(String, Vec<Vec<String>>)>,
    pub negations: Vec<String>,
}

const DEFAULT_LEXICON: [(&str, &[&str]); 14] = [
    ("atelectasis", &["atelectasis"]),
    ("cardiomegaly", &["cardiomegaly", "enlarged heart"]),
    ("consolidation", &["consolidation"]),
    ("edema", &["edema"]),
    ("enlarged cardiomediastinum", &["enlarged cardiomediastinum", "widened mediastinum"]),
    ("fracture", &["fracture"]),
    ("hernia", &["hernia"]),
    ("lung lesion", &["lung lesion", "nodule", "mass"]),
    ("lung opacity", &["opacity", "opacities"]),
    ("pleural effusion", &["pleural effusion", "effusion"]),
    ("pleural other", &["pleural thickening"]),
    ("pneumonia", &["pneumonia"]),
    ("pneumothorax", &["pneumothorax"]),
    ("support devices", &["pacemaker", "catheter", "tube"]),
];

impl Default for LabelLexicon {
    fn default() -> Self {
        Self {
            entries: DEFAULT_LEXICON
                .iter()
                .map(|(label, triggers)| (label.to_string(), triggers.iter().map(|t| tokenize(t)).collect()))
                .collect(),
            negations: alloc::vec!["no".into(), "without".into()],
        }
    }
}

fn contains_seq(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Labels whose trigger occurs in some phrase that has no negation word.
pub fn extract_labels(report: &str, lexicon: &LabelLexicon) -> BTreeSet<String> {
    let mut labels = BTreeSet::new();
    for phrase in segment_phrases(report) {
        if phrase.iter().any(|t| lexicon.negations.contains(t)) {
            continue;
        }
        for (label, triggers) in &lexicon.entries {
            if triggers.iter().any(|t| contains_seq(&phrase, t)) {
                labels.insert(label.clone());
            }
        }
    }
    labels
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CeScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LabelCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn label_counts(predicted: &BTreeSet<String>, reference: &BTreeSet<String>) -> LabelCounts {
    let tp = predicted.intersection(reference).count();
    LabelCounts {
        tp,
        fp: predicted.len() - tp,
        fn_: reference.len() - tp,
    }
}

/// Micro-averaged P/R/F1. Undefined ratios are 0, except that a corpus with
/// no labels on either side scores (1, 1, 1).
pub fn ce_metrics(predicted: &[BTreeSet<String>], reference: &[BTreeSet<String>]) -> Result<CeScores> {
    if predicted.len() != reference.len() {
        return Err(Error::shape("ce_metrics", "label set counts differ"));
    }
    let mut total = LabelCounts::default();
    for (p, r) in predicted.iter().zip(reference) {
        let c = label_counts(p, r);
        total.tp += c.tp;
        total.fp += c.fp;
        total.fn_ += c.fn_;
    }
    if total.tp + total.fp + total.fn_ == 0 {
        return Ok(CeScores {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        });
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(total.tp, total.tp + total.fp);
    let recall = ratio(total.tp, total.tp + total.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(CeScores { precision, recall, f1 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyScore {
    pub study_id: String,
    pub bleu_4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub labels: LabelCounts,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// BLEU-1..4
    pub bleu: [f64; 4],
    pub meteor: f64,
    pub rouge_l: f64,
    pub ce: CeScores,
    pub per_study: Vec<StudyScore>,
}

impl MetricReport {
    /// Flat `(key, value)` pairs in the fixed output order.
    pub fn entries(&self) -> [(&'static str, f64); 9] {
        [
            ("bleu_1", self.bleu[0]),
            ("bleu_2", self.bleu[1]),
            ("bleu_3", self.bleu[2]),
            ("bleu_4", self.bleu[3]),
            ("meteor", self.meteor),
            ("rouge_l", self.rouge_l),
            ("ce_precision", self.ce.precision),
            ("ce_recall", self.ce.recall),
            ("ce_f1", self.ce.f1),
        ]
    }
}

/// Scores `hyps` against `refs` (parallel to `study_ids`).
pub fn evaluate<S: AsRef<str>, T: AsRef<str>>(
    study_ids: &[String],
    hyps: &[S],
    refs: &[T],
    lexicon: &LabelLexicon,
) -> Result<MetricReport> {
    check_corpus(hyps, refs)?;
    if study_ids.len() != hyps.len() {
        return Err(Error::shape("evaluate", "one study id per hypothesis is required"));
    }
    let ht: Vec<Vec<String>> = hyps.iter().map(|s| tokenize(s.as_ref())).collect();
    let rt: Vec<Vec<String>> = refs.iter().map(|s| tokenize(s.as_ref())).collect();
    let mut bleu = [0.0; 4];
    for (n, b) in bleu.iter_mut().enumerate() {
        *b = bleu_tokens(&ht, &rt, n + 1)?;
    }
    let pred: Vec<_> = hyps.iter().map(|h| extract_labels(h.as_ref(), lexicon)).collect();
    let gold: Vec<_> = refs.iter().map(|r| extract_labels(r.as_ref(), lexicon)).collect();
    let per_study: Vec<StudyScore> = (0..hyps.len())
        .map(|i| StudyScore {
            study_id: study_ids[i].clone(),
            bleu_4: bleu_tokens(&ht[i..=i], &rt[i..=i], 4).unwrap_or(0.0),
            meteor: meteor_pair(&ht[i], &rt[i]),
            rouge_l: rouge_l_pair(&ht[i], &rt[i]),
            labels: label_counts(&pred[i], &gold[i]),
        })
        .collect();
    let n = hyps.len() as f64;
    Ok(MetricReport {
        bleu,
        meteor: per_study.iter().map(|s| s.meteor).sum::<f64>() / n,
        rouge_l: per_study.iter().map(|s| s.rouge_l).sum::<f64>() / n,
        ce: ce_metrics(&pred, &gold)?,
        per_study,
    })
}

//! Studies, tokenization, vocabulary, and the synthetic corpus.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_IMAGE_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One grayscale view, square, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Matrix,
    pub view_label: String,
}

impl Image {
    pub fn new(pixels: Matrix, view_label: impl Into<String>) -> Result<Self> {
        if pixels.rows() != pixels.cols() || pixels.rows() == 0 {
            return Err(Error::invalid(format!(
                "image must be square and nonempty, got {}x{}",
                pixels.rows(),
                pixels.cols()
            )));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            pixels,
            view_label: view_label.into(),
        })
    }

    pub fn side(&self) -> usize {
        self.pixels.rows()
    }

    pub fn pixels(&self) -> &Matrix {
        &self.pixels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub study_id: String,
    pub views: Vec<Image>,
    pub report: String,
    pub mesh_terms: Vec<String>,
    pub split: Split,
}

impl PatientRecord {
    /// Checks the record invariants and normalises MeSH terms to lowercase.
    pub fn validated(mut self) -> Result<Self> {
        if self.views.is_empty() {
            return Err(self.field_error("views", "at least one view is required"));
        }
        if self.split == Split::Train && self.report.trim().is_empty() {
            return Err(self.field_error("report", "missing or empty in train split"));
        }
        self.mesh_terms = self
            .mesh_terms
            .iter()
            .map(|t| normalize_mesh_term(t))
            .filter(|t| !t.is_empty())
            .collect();
        Ok(self)
    }

    fn field_error(&self, field: &'static str, reason: &str) -> Error {
        Error::Record {
            study_id: self.study_id.clone(),
            field,
            reason: reason.to_string(),
        }
    }
}

/// Lowercases and collapses internal whitespace; multi-word terms stay whole.
pub fn normalize_mesh_term(term: &str) -> String {
    term.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Lowercase; whitespace separates; every other non-alphanumeric char is its
/// own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(core::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(|t| t.as_ref())
        .collect::<Vec<_>>()
        .join(" ")
}

const PHRASE_TERMINATORS: [&str; 3] = [".", ";", "!"];

/// Splits a report into phrases ending at `.`, `;` or `!` (terminator kept).
pub fn segment_phrases(report: &str) -> Vec<Vec<String>> {
    let mut phrases = Vec::new();
    let mut current = Vec::new();
    for tok in tokenize(report) {
        let end = PHRASE_TERMINATORS.contains(&tok.as_str());
        current.push(tok);
        if end {
            phrases.push(core::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        phrases.push(current);
    }
    phrases
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Separator between MeSH terms in decoder sequences.
pub const MESH_SEPARATOR: &str = ",";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenVocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl TokenVocabulary {
    /// Vocabulary from an explicit token list; reserved tokens are prepended
    /// and duplicates dropped.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Self {
        let mut vocab = Self {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        for t in RESERVED.iter().copied().chain(tokens.iter().map(|t| t.as_ref())) {
            if !vocab.index.contains_key(t) {
                vocab.index.insert(t.to_string(), vocab.tokens.len());
                vocab.tokens.push(t.to_string());
            }
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Decodes ids, stopping at EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }

    /// Target ids for a MeSH list: term tokens joined by the separator, then EOS.
    pub fn encode_mesh(&self, terms: &[String]) -> Vec<usize> {
        let mut ids: Vec<usize> = tokenize(&mesh_sequence_text(terms))
            .iter()
            .map(|t| self.id(t))
            .collect();
        ids.push(EOS);
        ids
    }

    /// Target ids for a report: its tokens, then EOS.
    pub fn encode_report(&self, report: &str) -> Vec<usize> {
        let mut ids = self.encode(report);
        ids.push(EOS);
        ids
    }
}

pub fn mesh_sequence_text(terms: &[String]) -> String {
    terms.join(&format!(" {MESH_SEPARATOR} "))
}

/// Splits decoded MeSH tokens back into terms.
pub fn mesh_terms_from_tokens(tokens: &[String]) -> Vec<String> {
    tokens
        .split(|t| t == MESH_SEPARATOR)
        .filter(|chunk| !chunk.is_empty())
        .map(detokenize)
        .collect()
}

/// Counts report and MeSH tokens and keeps those seen at least `min_freq` times.
pub fn build_vocabulary(records: &[PatientRecord], min_freq: usize) -> Result<TokenVocabulary> {
    if records.is_empty() {
        return Err(Error::Empty("build_vocabulary corpus"));
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        let mesh = mesh_sequence_text(&r.mesh_terms);
        for tok in tokenize(&r.report).into_iter().chain(tokenize(&mesh)) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let kept: Vec<&String> = counts
        .iter()
        .filter(|(_, &c)| c >= min_freq.max(1))
        .map(|(t, _)| t)
        .collect();
    Ok(TokenVocabulary::from_tokens(&kept))
}

/// Parameters of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub num_records: usize,
    pub num_views: usize,
    pub num_pathology_motifs: usize,
    /// Size of the descriptor-word pool used by phrase templates.
    pub vocab_size: usize,
    pub seed: u64,
    pub image_size: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_records: 8,
            num_views: 2,
            num_pathology_motifs: 4,
            vocab_size: 8,
            seed: 7,
            image_size: DEFAULT_IMAGE_SIZE,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_records", self.num_records),
            ("num_views", self.num_views),
            ("num_pathology_motifs", self.num_pathology_motifs),
            ("vocab_size", self.vocab_size),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::Config {
                    key: key.into(),
                    reason: "must be at least 1".into(),
                });
            }
        }
        if self.num_pathology_motifs > MOTIFS.len() {
            return Err(Error::Config {
                key: "num_pathology_motifs".into(),
                reason: format!("at most {} motifs are defined", MOTIFS.len()),
            });
        }
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return Err(Error::Config {
                key: "image_size".into(),
                reason: "must be a positive multiple of 16".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disk,
    Ring,
    HBar,
    VBar,
    Cross,
    Square,
    Diagonal,
    Dots,
}

struct MotifDef {
    label: &'static str,
    body: &'static str,
    shape: Shape,
    centre: (f64, f64),
}

const MOTIFS: [MotifDef; 8] = [
    MotifDef { label: "cardiomegaly", body: "cardiomegaly is present .", shape: Shape::Disk, centre: (0.55, 0.6) },
    MotifDef { label: "pleural effusion", body: "pleural effusion is seen at the base .", shape: Shape::HBar, centre: (0.85, 0.3) },
    MotifDef { label: "pneumothorax", body: "pneumothorax is noted at the apex .", shape: Shape::Ring, centre: (0.2, 0.75) },
    MotifDef { label: "atelectasis", body: "atelectasis is evident .", shape: Shape::VBar, centre: (0.6, 0.2) },
    MotifDef { label: "consolidation", body: "consolidation is identified .", shape: Shape::Square, centre: (0.25, 0.25) },
    MotifDef { label: "edema", body: "edema is suspected .", shape: Shape::Cross, centre: (0.45, 0.85) },
    MotifDef { label: "fracture", body: "rib fracture is visible .", shape: Shape::Diagonal, centre: (0.8, 0.8) },
    MotifDef { label: "lung lesion", body: "lung lesion is observed .", shape: Shape::Dots, centre: (0.35, 0.5) },
];

const DESCRIPTORS: [&str; 16] = [
    "mild", "moderate", "small", "large", "subtle", "minimal", "marked", "focal",
    "patchy", "diffuse", "new", "stable", "prominent", "faint", "trace", "extensive",
];

const PREAMBLE: &str = "the mediastinal contours are stable .";
const NORMAL_FINDING: &str = "no acute cardiopulmonary abnormality .";
pub const NORMAL_MESH: &str = "normal";
const VIEW_LABELS: [&str; 3] = ["frontal", "lateral", "oblique"];

/// Label and phrase template of one planted motif.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotifTemplate {
    pub label: String,
    pub phrase: String,
}

/// The motifs a given spec plants, with their corpus-bound phrase templates.
pub fn synthetic_catalog(spec: &SyntheticSpec) -> Vec<MotifTemplate> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6d6f_7469_6673);
    let pool = spec.vocab_size.min(DESCRIPTORS.len()).max(1);
    MOTIFS[..spec.num_pathology_motifs.min(MOTIFS.len())]
        .iter()
        .map(|m| MotifTemplate {
            label: m.label.to_string(),
            phrase: format!("{} {}", DESCRIPTORS[rng.random_range(0..pool)], m.body),
        })
        .collect()
}

/// Motif index sets planted in each record (distinct while subsets last).
pub fn planted_motif_sets(spec: &SyntheticSpec) -> Vec<Vec<usize>> {
    let m = spec.num_pathology_motifs.min(MOTIFS.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7375_6273_6574);
    let mut subsets: Vec<u32> = (0..(1u32 << m)).collect();
    subsets.shuffle(&mut rng);
    (0..spec.num_records)
        .map(|i| {
            let mask = subsets[i % subsets.len()];
            (0..m).filter(|k| mask & (1 << k) != 0).collect()
        })
        .collect()
}

/// Deterministic corpus where each planted motif appears as an image pattern,
/// a report phrase, and a MeSH term.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<Vec<PatientRecord>> {
    spec.validate()?;
    let catalog = synthetic_catalog(spec);
    let sets = planted_motif_sets(spec);
    let mut records = Vec::with_capacity(spec.num_records);
    for (i, motifs) in sets.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(
            spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (i as u64 + 1),
        );
        let mut report = String::from(PREAMBLE);
        let mut mesh = Vec::new();
        if motifs.is_empty() {
            report.push(' ');
            report.push_str(NORMAL_FINDING);
            mesh.push(NORMAL_MESH.to_string());
        }
        for &k in motifs {
            report.push(' ');
            report.push_str(&catalog[k].phrase);
            mesh.push(catalog[k].label.clone());
        }
        let views = (0..spec.num_views)
            .map(|v| render_view(spec.image_size, motifs, v, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let split = match i % 10 {
            8 => Split::Val,
            9 => Split::Test,
            _ => Split::Train,
        };
        records.push(PatientRecord {
            study_id: format!("synth-{}-{i:04}", spec.seed),
            views,
            report,
            mesh_terms: mesh,
            split,
        });
    }
    Ok(records)
}

fn render_view(side: usize, motifs: &[usize], view: usize, rng: &mut ChaCha8Rng) -> Result<Image> {
    let s = side as f64;
    let mut px = Matrix::zeros(side, side);
    for r in 0..side {
        for c in 0..side {
            let (y, x) = ((r as f64 + 0.5) / s, (c as f64 + 0.5) / s);
            // two darker lung fields on a mid-gray body
            let lung = |cx: f64| {
                let dx = (x - cx) / 0.18;
                let dy = (y - 0.5) / 0.32;
                if dx * dx + dy * dy < 1.0 { -0.2 } else { 0.0 }
            };
            let base = 0.45 + lung(0.3) + lung(0.7) + rng.random_range(-0.03..0.03);
            px.set(r, c, base);
        }
    }
    let mirror = view % 2 == 1;
    for &k in motifs {
        let m = &MOTIFS[k];
        let (cy, mut cx) = m.centre;
        if mirror {
            cx = 1.0 - cx;
        }
        let shade = 0.45 + 0.05 * view as f64;
        for r in 0..side {
            for c in 0..side {
                let dy = ((r as f64 + 0.5) / s - cy) * 16.0;
                let dx = ((c as f64 + 0.5) / s - cx) * 16.0;
                if shape_covers(m.shape, dx, dy) {
                    let v = px.get(r, c) + shade;
                    px.set(r, c, v);
                }
            }
        }
    }
    for v in px.data_mut() {
        *v = libm::round(v.clamp(0.0, 1.0) * 255.0) / 255.0;
    }
    Image::new(px, VIEW_LABELS[view % VIEW_LABELS.len()])
}

/// Whether offset `(dx, dy)` (in sixteenths of the image side) lies on the shape.
fn shape_covers(shape: Shape, dx: f64, dy: f64) -> bool {
    let r2 = dx * dx + dy * dy;
    match shape {
        Shape::Disk => r2 <= 2.2 * 2.2,
        Shape::Ring => (1.4 * 1.4..=2.4 * 2.4).contains(&r2),
        Shape::HBar => dx.abs() <= 2.5 && dy.abs() <= 0.6,
        Shape::VBar => dx.abs() <= 0.6 && dy.abs() <= 2.5,
        Shape::Cross => (dx.abs() <= 0.5 && dy.abs() <= 2.0) || (dy.abs() <= 0.5 && dx.abs() <= 2.0),
        Shape::Square => dx.abs() <= 1.6 && dy.abs() <= 1.6,
        Shape::Diagonal => (dx - dy).abs() <= 0.7 && dx.abs() <= 2.0,
        Shape::Dots => {
            let d = |ox: f64, oy: f64| (dx - ox) * (dx - ox) + (dy - oy) * (dy - oy) <= 0.5;
            d(-1.2, -1.2) || d(1.2, -1.2) || d(0.0, 1.2)
        }
    }
}

/// Sorted, deduplicated labels of all planted motifs (handy for labeler checks).
pub fn motif_labels(spec: &SyntheticSpec) -> BTreeSet<String> {
    synthetic_catalog(spec).into_iter().map(|m| m.label).collect()
}

//! Training configuration as flat `key = value` pairs.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::hfg::{NodeMatchMode, RelationMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshSource {
    GroundTruth,
    /// MeSH terms replaced by labels the keyword labeler extracts from the report.
    RuleLabeler,
}

/// Which fine features the report decoder attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FineMemory {
    /// Concatenated patch features.
    Raw,
    /// Concatenated visual-hypergraph node outputs.
    Convolved,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub tau: f64,
    pub gamma: f64,
    pub keep_prob: f64,
    pub knn_k: usize,
    pub mca: bool,
    pub cmg: bool,
    pub intra_rca: bool,
    pub inter_rca: bool,
    pub relation: RelationMode,
    pub mesh_source: MeshSource,
    pub m_node_mode: NodeMatchMode,
    pub fine_memory: FineMemory,
    pub freeze_encoders: bool,
    pub dim: usize,
    pub noise_dim: usize,
    pub patch_size: usize,
    pub decoder_layers: usize,
    pub max_mesh_len: usize,
    pub max_report_len: usize,
    pub min_freq: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            batch_size: 4,
            steps: 500,
            seed: 0,
            tau: 0.2,
            gamma: 0.2,
            keep_prob: 0.85,
            knn_k: 2,
            mca: true,
            cmg: true,
            intra_rca: true,
            inter_rca: true,
            relation: RelationMode::Hypergraph,
            mesh_source: MeshSource::GroundTruth,
            m_node_mode: NodeMatchMode::PerNodeMax,
            fine_memory: FineMemory::Raw,
            freeze_encoders: false,
            dim: 32,
            noise_dim: 16,
            patch_size: 16,
            decoder_layers: 3,
            max_mesh_len: 24,
            max_report_len: 64,
            min_freq: 1,
        }
    }
}

/// Every accepted key, in canonical order.
pub const CONFIG_KEYS: [&str; 24] = [
    "lr",
    "batch_size",
    "steps",
    "seed",
    "tau",
    "gamma",
    "keep_prob",
    "knn_k",
    "mca",
    "cmg",
    "intra_rca",
    "inter_rca",
    "hypergraph_vs_graph",
    "mesh_source",
    "m_node_mode",
    "fine_memory",
    "freeze_encoders",
    "dim",
    "noise_dim",
    "patch_size",
    "decoder_layers",
    "max_mesh_len",
    "max_report_len",
    "min_freq",
];

fn bad(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

fn parse_num<T: core::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, format!("cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(bad(key, format!("expected true/false, got `{v}`"))),
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "lr" => self.lr = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "tau" => self.tau = parse_num(key, v)?,
            "gamma" => self.gamma = parse_num(key, v)?,
            "keep_prob" => self.keep_prob = parse_num(key, v)?,
            "knn_k" => self.knn_k = parse_num(key, v)?,
            "mca" => self.mca = parse_bool(key, v)?,
            "cmg" => self.cmg = parse_bool(key, v)?,
            "intra_rca" => self.intra_rca = parse_bool(key, v)?,
            "inter_rca" => self.inter_rca = parse_bool(key, v)?,
            "hypergraph_vs_graph" => {
                self.relation = match v {
                    "hypergraph" => RelationMode::Hypergraph,
                    "graph" => RelationMode::Graph,
                    _ => return Err(bad(key, "expected hypergraph or graph")),
                }
            }
            "mesh_source" => {
                self.mesh_source = match v {
                    "ground_truth" => MeshSource::GroundTruth,
                    "rule_labeler" => MeshSource::RuleLabeler,
                    _ => return Err(bad(key, "expected ground_truth or rule_labeler")),
                }
            }
            "m_node_mode" => {
                self.m_node_mode = match v {
                    "per_node_max" => NodeMatchMode::PerNodeMax,
                    "double_sum" => NodeMatchMode::DoubleSum,
                    _ => return Err(bad(key, "expected per_node_max or double_sum")),
                }
            }
            "fine_memory" => {
                self.fine_memory = match v {
                    "raw" => FineMemory::Raw,
                    "convolved" => FineMemory::Convolved,
                    _ => return Err(bad(key, "expected raw or convolved")),
                }
            }
            "freeze_encoders" => self.freeze_encoders = parse_bool(key, v)?,
            "dim" => self.dim = parse_num(key, v)?,
            "noise_dim" => self.noise_dim = parse_num(key, v)?,
            "patch_size" => self.patch_size = parse_num(key, v)?,
            "decoder_layers" => self.decoder_layers = parse_num(key, v)?,
            "max_mesh_len" => self.max_mesh_len = parse_num(key, v)?,
            "max_report_len" => self.max_report_len = parse_num(key, v)?,
            "min_freq" => self.min_freq = parse_num(key, v)?,
            _ => return Err(bad(key, "unknown key")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "steps" => self.steps.to_string(),
            "seed" => self.seed.to_string(),
            "tau" => self.tau.to_string(),
            "gamma" => self.gamma.to_string(),
            "keep_prob" => self.keep_prob.to_string(),
            "knn_k" => self.knn_k.to_string(),
            "mca" => self.mca.to_string(),
            "cmg" => self.cmg.to_string(),
            "intra_rca" => self.intra_rca.to_string(),
            "inter_rca" => self.inter_rca.to_string(),
            "hypergraph_vs_graph" => match self.relation {
                RelationMode::Hypergraph => "hypergraph".into(),
                RelationMode::Graph => "graph".into(),
            },
            "mesh_source" => match self.mesh_source {
                MeshSource::GroundTruth => "ground_truth".into(),
                MeshSource::RuleLabeler => "rule_labeler".into(),
            },
            "m_node_mode" => match self.m_node_mode {
                NodeMatchMode::PerNodeMax => "per_node_max".into(),
                NodeMatchMode::DoubleSum => "double_sum".into(),
            },
            "fine_memory" => match self.fine_memory {
                FineMemory::Raw => "raw".into(),
                FineMemory::Convolved => "convolved".into(),
            },
            "freeze_encoders" => self.freeze_encoders.to_string(),
            "dim" => self.dim.to_string(),
            "noise_dim" => self.noise_dim.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "decoder_layers" => self.decoder_layers.to_string(),
            "max_mesh_len" => self.max_mesh_len.to_string(),
            "max_report_len" => self.max_report_len.to_string(),
            "min_freq" => self.min_freq.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Canonical `key = value` text, one line per key.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.get(key).expect("known key"));
            out.push('\n');
        }
        out
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(&format!("line {}", n + 1), "expected key = value"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(text)?;
        Ok(c)
    }

    /// Hash of everything that shapes the model and its training except the
    /// step budget, so a longer run can resume a shorter one.
    pub fn hash(&self) -> u64 {
        let text: Vec<String> = CONFIG_KEYS
            .iter()
            .filter(|&&k| k != "steps")
            .map(|k| format!("{k}={}", self.get(k).expect("known key")))
            .collect();
        fnv1a64(text.join("\n").as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be at least 1"));
        }
        if self.inter_rca && self.batch_size < 2 {
            return Err(bad("batch_size", "inter_rca needs at least 2 studies per batch"));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(bad("keep_prob", "must lie in (0, 1]"));
        }
        if !(self.tau >= 0.0) {
            return Err(bad("tau", "must be non-negative"));
        }
        if !(self.gamma >= 0.0) {
            return Err(bad("gamma", "must be non-negative"));
        }
        for (key, v) in [
            ("knn_k", self.knn_k),
            ("dim", self.dim),
            ("noise_dim", self.noise_dim),
            ("patch_size", self.patch_size),
            ("decoder_layers", self.decoder_layers),
            ("max_mesh_len", self.max_mesh_len),
            ("max_report_len", self.max_report_len),
            ("min_freq", self.min_freq),
        ] {
            if v == 0 {
                return Err(bad(key, "must be at least 1"));
            }
        }
        Ok(())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// SplitMix64 finaliser over a combination of words.
pub fn mix_seed(words: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &w in words {
        let mut z = h ^ w;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

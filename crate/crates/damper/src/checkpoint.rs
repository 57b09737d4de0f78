//! Single-file binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, then tagged sections in a
//! fixed order. Each section is `tag[4] | u64 length | payload | u64 FNV-1a`
//! of the payload. Integers and floats are little-endian; strings are
//! `u32` length + UTF-8.

use std::fs;
use std::path::Path;

use damper_core::config::{fnv1a64, TrainConfig};
use damper_core::corpus::TokenVocabulary;
use damper_core::params::{Adam, AdamSlot, ParamGroup, ParamStore};
use damper_core::report_gen::{ModelShape, Trainer};
use damper_core::tensor::Matrix;

use crate::error::{DamperError, Result};

pub const MAGIC: &[u8; 8] = b"DAMPRCKP";
pub const VERSION: u32 = 1;
pub const SECTIONS: [&str; 7] = ["CONF", "SHAP", "VOCB", "PARM", "ADAM", "STEP", "HASH"];

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub shape: ModelShape,
    pub vocab: TokenVocabulary,
    pub store: ParamStore,
    pub adam: Adam,
    pub step: usize,
    pub config_hash: u64,
}

/// Outcome of checking a checkpoint against the config a command resolved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Compatibility {
    pub warnings: Vec<String>,
    pub refuse: bool,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            config: t.config.clone(),
            shape: t.model.shape.clone(),
            vocab: t.vocab.clone(),
            store: t.store.clone(),
            adam: t.adam.clone(),
            step: t.step,
            config_hash: t.config.hash(),
        }
    }

    /// Differences that make `config` unsafe to use with this checkpoint.
    pub fn compatibility(&self, config: &TrainConfig) -> Compatibility {
        let wanted = config.hash();
        if wanted == self.config_hash {
            return Compatibility {
                warnings: Vec::new(),
                refuse: false,
            };
        }
        let mut warnings = vec![format!(
            "config hash {wanted:016x} differs from checkpoint hash {:016x}",
            self.config_hash
        )];
        for key in damper_core::config::CONFIG_KEYS {
            if key == "steps" {
                continue;
            }
            let (a, b) = (self.config.get(key), config.get(key));
            if a != b {
                warnings.push(format!(
                    "{key}: checkpoint {} vs requested {}",
                    a.unwrap_or_default(),
                    b.unwrap_or_default()
                ));
            }
        }
        Compatibility { warnings, refuse: true }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());

        let mut w = Writer::default();
        w.str(&self.config.to_kv());
        section(&mut out, "CONF", w.0);

        let mut w = Writer::default();
        let s = &self.shape;
        for v in [
            s.vocab_size,
            s.num_views,
            s.image_size,
            s.dim,
            s.noise_dim,
            s.patch_size,
            s.decoder_layers,
            s.max_mesh_len,
            s.max_report_len,
        ] {
            w.u64(v as u64);
        }
        section(&mut out, "SHAP", w.0);

        let mut w = Writer::default();
        w.u32(self.vocab.len() as u32);
        for t in self.vocab.tokens() {
            w.str(t);
        }
        section(&mut out, "VOCB", w.0);

        let mut w = Writer::default();
        w.u32(self.store.len() as u32);
        for e in self.store.entries() {
            w.str(&e.name);
            w.str(e.group.name());
            w.matrix(&e.value);
        }
        section(&mut out, "PARM", w.0);

        let mut w = Writer::default();
        for v in [self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.eps] {
            w.f64(v);
        }
        w.u32(self.adam.slots.len() as u32);
        for slot in &self.adam.slots {
            w.u64(slot.t);
            w.matrix(&slot.m);
            w.matrix(&slot.v);
        }
        section(&mut out, "ADAM", w.0);

        let mut w = Writer::default();
        w.u64(self.step as u64);
        section(&mut out, "STEP", w.0);

        let mut w = Writer::default();
        w.u64(self.config_hash);
        section(&mut out, "HASH", w.0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = |reason: &str| DamperError::Checkpoint {
            section: "header",
            reason: reason.into(),
        };
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(header("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(header(&format!("unsupported version {version}")));
        }
        let mut pos = 12;
        let mut payloads = Vec::with_capacity(SECTIONS.len());
        for tag in SECTIONS {
            payloads.push(read_section(bytes, &mut pos, tag)?);
        }
        if pos != bytes.len() {
            return Err(DamperError::Checkpoint {
                section: "HASH",
                reason: format!("{} trailing bytes", bytes.len() - pos),
            });
        }

        let mut r = Reader::new("CONF", payloads[0]);
        let config = TrainConfig::from_kv(&r.str()?).map_err(|e| r.fail(e.to_string()))?;
        r.finish()?;

        let mut r = Reader::new("SHAP", payloads[1]);
        let mut dims = [0usize; 9];
        for d in &mut dims {
            *d = r.u64()? as usize;
        }
        r.finish()?;
        let shape = ModelShape {
            vocab_size: dims[0],
            num_views: dims[1],
            image_size: dims[2],
            dim: dims[3],
            noise_dim: dims[4],
            patch_size: dims[5],
            decoder_layers: dims[6],
            max_mesh_len: dims[7],
            max_report_len: dims[8],
        };

        let mut r = Reader::new("VOCB", payloads[2]);
        let n = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            tokens.push(r.str()?);
        }
        r.finish()?;
        let vocab = TokenVocabulary::from_tokens(&tokens);
        if vocab.tokens() != tokens.as_slice() || vocab.len() != shape.vocab_size {
            return Err(r.fail("token list is not a valid vocabulary for the model".into()));
        }

        let mut r = Reader::new("PARM", payloads[3]);
        let n = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name = r.str()?;
            let group_name = r.str()?;
            let group = ParamGroup::from_name(&group_name).ok_or_else(|| r.fail(format!("unknown group `{group_name}`")))?;
            let value = r.matrix()?;
            if store.id(&name).is_some() {
                return Err(r.fail(format!("duplicate parameter `{name}`")));
            }
            store.add(&name, group, value);
        }
        r.finish()?;

        let mut r = Reader::new("ADAM", payloads[4]);
        let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let n = r.u32()? as usize;
        if n != store.len() {
            return Err(r.fail(format!("{n} slots for {} parameters", store.len())));
        }
        let mut slots = Vec::with_capacity(n);
        for e in store.entries() {
            let t = r.u64()?;
            let (m, v) = (r.matrix()?, r.matrix()?);
            if m.shape() != e.value.shape() || v.shape() != e.value.shape() {
                return Err(r.fail(format!("moment shape mismatch for `{}`", e.name)));
            }
            slots.push(AdamSlot { m, v, t });
        }
        r.finish()?;
        let adam = Adam {
            lr,
            beta1,
            beta2,
            eps,
            slots,
        };

        let mut r = Reader::new("STEP", payloads[5]);
        let step = r.u64()? as usize;
        r.finish()?;

        let mut r = Reader::new("HASH", payloads[6]);
        let config_hash = r.u64()?;
        r.finish()?;
        if config_hash != config.hash() {
            return Err(r.fail(format!(
                "stored hash {config_hash:016x} does not match the stored config ({:016x})",
                config.hash()
            )));
        }

        Ok(Self {
            config,
            shape,
            vocab,
            store,
            adam,
            step,
            config_hash,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| DamperError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| DamperError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn section(out: &mut Vec<u8>, tag: &str, payload: Vec<u8>) {
    out.extend_from_slice(tag.as_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
}

fn read_section<'a>(bytes: &'a [u8], pos: &mut usize, tag: &'static str) -> Result<&'a [u8]> {
    let fail = |reason: String| DamperError::Checkpoint { section: tag, reason };
    let rest = &bytes[*pos..];
    if rest.len() < 12 {
        return Err(fail("truncated header".into()));
    }
    if &rest[..4] != tag.as_bytes() {
        return Err(fail(format!("found tag {:?}", String::from_utf8_lossy(&rest[..4]))));
    }
    let len = u64::from_le_bytes(rest[4..12].try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| fail("length overflows".into()))?;
    if rest.len() - 12 < len.saturating_add(8) {
        return Err(fail("truncated payload".into()));
    }
    let payload = &rest[12..12 + len];
    let sum = u64::from_le_bytes(rest[12 + len..20 + len].try_into().expect("8 bytes"));
    if sum != fnv1a64(payload) {
        return Err(fail("checksum mismatch".into()));
    }
    *pos += 20 + len;
    Ok(payload)
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn matrix(&mut self, m: &Matrix) {
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        for &v in m.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    tag: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(tag: &'static str, buf: &'a [u8]) -> Self {
        Self { tag, buf, pos: 0 }
    }

    fn fail(&self, reason: String) -> DamperError {
        DamperError::Checkpoint {
            section: self.tag,
            reason,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail("unexpected end of section".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.fail("invalid UTF-8".into()))
    }
    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let n = rows.checked_mul(cols).filter(|n| n.saturating_mul(8) <= self.buf.len() - self.pos);
        let n = n.ok_or_else(|| self.fail(format!("matrix {rows}x{cols} exceeds the section")))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        Matrix::new(rows, cols, data).map_err(|e| self.fail(e.to_string()))
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail(format!("{} unread bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

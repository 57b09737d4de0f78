//! Layers shared by the encoders and decoders.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Matrix;

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_xavier(&format!("{name}.weight"), group, input, output, rng);
        let bias = bias.then(|| store.add_zeros(&format!("{name}.bias"), group, 1, output));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        Self {
            gain: store.add_ones(&format!("{name}.gain"), group, 1, dim),
            bias: store.add_zeros(&format!("{name}.bias"), group, 1, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x, LN_EPS);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Single-head scaled dot-product attention with an output projection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    dim: usize,
}

impl Attention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.q"), group, dim, dim, false, rng),
            key: Linear::new(store, &format!("{name}.k"), group, dim, dim, false, rng),
            value: Linear::new(store, &format!("{name}.v"), group, dim, dim, false, rng),
            output: Linear::new(store, &format!("{name}.o"), group, dim, dim, true, rng),
            dim,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        causal: bool,
    ) -> Var {
        let q = self.query.forward(g, store, queries);
        let k = self.key.forward(g, store, keys);
        let v = self.value.forward(g, store, keys);
        let scores = g.matmul_t(q, k);
        let scores = g.scale(scores, 1.0 / libm::sqrt(self.dim as f64));
        let scores = if causal {
            let (n, m) = g.shape(scores);
            g.add_const(scores, &causal_mask(n, m))
        } else {
            scores
        };
        let weights = g.softmax_rows(scores);
        let mixed = g.matmul(weights, v);
        self.output.forward(g, store, mixed)
    }
}

/// Additive mask hiding key `j > i` from query `i`.
pub fn causal_mask(n: usize, m: usize) -> Matrix {
    let mut mask = Matrix::zeros(n, m);
    for i in 0..n {
        for j in (i + 1)..m {
            mask.set(i, j, MASKED);
        }
    }
    mask
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.fc1"), group, dim, hidden, true, rng),
            outer: Linear::new(store, &format!("{name}.fc2"), group, hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.inner.forward(g, store, x);
        let h = g.relu(h);
        self.outer.forward(g, store, h)
    }
}

/// Pre-norm self-attention block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Clone, Debug)]
pub struct SelfAttentionBlock {
    pub norm_attn: LayerNorm,
    pub attn: Attention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl SelfAttentionBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.ln1"), group, dim),
            attn: Attention::new(store, &format!("{name}.attn"), group, dim, rng),
            norm_ffn: LayerNorm::new(store, &format!("{name}.ln2"), group, dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), group, dim, 2 * dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = self.norm_attn.forward(g, store, x);
        let a = self.attn.forward(g, store, n, n, false);
        let x = g.add(x, a);
        let n = self.norm_ffn.forward(g, store, x);
        let f = self.ffn.forward(g, store, n);
        g.add(x, f)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: Attention,
    pub norm_cross: LayerNorm,
    pub cross_attn: Attention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm_self: LayerNorm::new(store, &format!("{name}.ln1"), group, dim),
            self_attn: Attention::new(store, &format!("{name}.self"), group, dim, rng),
            norm_cross: LayerNorm::new(store, &format!("{name}.ln2"), group, dim),
            cross_attn: Attention::new(store, &format!("{name}.cross"), group, dim, rng),
            norm_ffn: LayerNorm::new(store, &format!("{name}.ln3"), group, dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), group, dim, 2 * dim, rng),
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, memory: Var) -> Var {
        let n = self.norm_self.forward(g, store, x);
        let a = self.self_attn.forward(g, store, n, n, true);
        let x = g.add(x, a);
        let n = self.norm_cross.forward(g, store, x);
        let c = self.cross_attn.forward(g, store, n, memory, false);
        let x = g.add(x, c);
        let n = self.norm_ffn.forward(g, store, x);
        let f = self.ffn.forward(g, store, n);
        g.add(x, f)
    }
}

/// Causal transformer decoder cross-attending to a memory sequence.
#[derive(Clone, Debug)]
pub struct TransformerDecoder {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
    pub head: Linear,
    pub vocab_size: usize,
    pub max_positions: usize,
}

/// Teacher-forced pass output.
#[derive(Clone, Copy, Debug)]
pub struct DecoderPass {
    /// `T × |V|` unnormalised scores.
    pub logits: Var,
    /// `T × d` final-layer hidden features.
    pub hidden: Var,
}

#[derive(Clone, Copy, Debug)]
pub enum DecodeMode<'a> {
    /// Condition on the given target ids (which end with EOS).
    TeacherForced(&'a [usize]),
    Greedy { max_len: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    /// Greedy: generated ids, ending with EOS unless `max_len` was hit.
    /// Teacher-forced: the argmax prediction at every step.
    pub tokens: Vec<usize>,
    /// One probability row per step.
    pub distributions: Matrix,
    /// Final-layer hidden features, one row per step.
    pub hidden: Matrix,
}

/// Decoder inputs for teacher forcing: BOS followed by all targets but the last.
pub fn teacher_inputs(bos: usize, targets: &[usize]) -> Vec<usize> {
    let mut inputs = alloc::vec![bos];
    inputs.extend_from_slice(&targets[..targets.len().saturating_sub(1)]);
    inputs
}

impl TransformerDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        vocab_size: usize,
        dim: usize,
        num_layers: usize,
        max_positions: usize,
        rng: &mut R,
    ) -> Self {
        let token_embedding =
            store.add_uniform(&format!("{name}.tok"), group, vocab_size, dim, 0.1, rng);
        let position_embedding =
            store.add_uniform(&format!("{name}.pos"), group, max_positions, dim, 0.1, rng);
        let layers = (0..num_layers)
            .map(|i| DecoderLayer::new(store, &format!("{name}.layer{i}"), group, dim, rng))
            .collect();
        Self {
            token_embedding,
            position_embedding,
            layers,
            final_norm: LayerNorm::new(store, &format!("{name}.ln_f"), group, dim),
            head: Linear::new(store, &format!("{name}.head"), group, dim, vocab_size, true, rng),
            vocab_size,
            max_positions,
        }
    }

    /// Runs the decoder over `inputs` (already starting with BOS).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &[usize],
        memory: Var,
    ) -> Result<DecoderPass> {
        if inputs.is_empty() {
            return Err(Error::Empty("decoder input"));
        }
        if inputs.len() > self.max_positions {
            return Err(Error::invalid(format!(
                "decoder input length {} exceeds {} positions",
                inputs.len(),
                self.max_positions
            )));
        }
        if let Some(&bad) = inputs.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} out of vocabulary")));
        }
        let tok = g.param(store, self.token_embedding);
        let pos = g.param(store, self.position_embedding);
        let x = g.select_rows(tok, inputs);
        let positions: Vec<usize> = (0..inputs.len()).collect();
        let p = g.select_rows(pos, &positions);
        let mut x = g.add(x, p);
        for layer in &self.layers {
            x = layer.forward(g, store, x, memory);
        }
        let hidden = self.final_norm.forward(g, store, x);
        let logits = self.head.forward(g, store, hidden);
        Ok(DecoderPass { logits, hidden })
    }

    /// Runs the decoder over a constant memory in either mode.
    pub fn decode(
        &self,
        store: &ParamStore,
        memory: &Matrix,
        bos: usize,
        eos: usize,
        mode: DecodeMode<'_>,
    ) -> Result<DecodeOutput> {
        match mode {
            DecodeMode::Greedy { max_len } => self.greedy(store, memory, bos, eos, max_len),
            DecodeMode::TeacherForced(targets) => {
                if targets.is_empty() {
                    return Err(Error::Empty("teacher-forced targets"));
                }
                let mut g = Graph::new();
                let mem = g.constant(memory.clone());
                let pass = self.forward(&mut g, store, &teacher_inputs(bos, targets), mem)?;
                let probs = g.softmax_rows(pass.logits);
                let distributions = g.value(probs).clone();
                let tokens = (0..distributions.rows())
                    .map(|r| argmax(distributions.row(r)))
                    .collect();
                Ok(DecodeOutput {
                    tokens,
                    distributions,
                    hidden: g.value(pass.hidden).clone(),
                })
            }
        }
    }

    /// Greedy decoding from `bos` until `eos` or `max_len` tokens.
    pub fn greedy(
        &self,
        store: &ParamStore,
        memory: &Matrix,
        bos: usize,
        eos: usize,
        max_len: usize,
    ) -> Result<DecodeOutput> {
        if max_len < 1 {
            return Err(Error::invalid("max_len must be at least 1"));
        }
        let max_len = max_len.min(self.max_positions);
        let mut inputs = alloc::vec![bos];
        let mut tokens = Vec::new();
        let mut dists = Vec::new();
        let mut hidden_rows = Vec::new();
        loop {
            let mut g = Graph::new();
            let mem = g.constant(memory.clone());
            let pass = self.forward(&mut g, store, &inputs, mem)?;
            let last = inputs.len() - 1;
            let logits = g.value(pass.logits).row(last).to_vec();
            let probs = crate::tensor::softmax(&logits);
            let next = argmax(&probs);
            hidden_rows.push(g.value(pass.hidden).row(last).to_vec());
            dists.push(probs);
            tokens.push(next);
            if next == eos || tokens.len() >= max_len {
                break;
            }
            inputs.push(next);
        }
        Ok(DecodeOutput {
            tokens,
            distributions: Matrix::from_rows(&dists)?,
            hidden: Matrix::from_rows(&hidden_rows)?,
        })
    }
}

/// `-Σ_t log p_t[y_t]` over probability rows.
pub fn sequence_nll(distributions: &Matrix, targets: &[usize]) -> Result<f64> {
    if distributions.rows() != targets.len() {
        return Err(Error::shape(
            "sequence_nll",
            format!("{} distributions for {} targets", distributions.rows(), targets.len()),
        ));
    }
    let mut total = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        if y >= distributions.cols() {
            return Err(Error::invalid(format!("target id {y} out of range")));
        }
        total -= libm::log(distributions.get(t, y));
    }
    Ok(total)
}

/// Tape version of [`sequence_nll`] on raw logits.
pub fn sequence_nll_from_logits(g: &mut Graph, logits: Var, targets: &[usize]) -> Var {
    let logp = g.log_softmax_rows(logits);
    let picked = g.pick(logp, targets);
    let total = g.sum_all(picked);
    g.scale(total, -1.0)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

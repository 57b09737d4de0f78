//! Coarse alignment: per-view conditional GANs pulling whole-image features
//! toward the MeSH graph embedding, masked attention fusion across views, the
//! MeSH decoder, and SoftPool.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{sequence_nll, Linear, TransformerDecoder};
use crate::params::{Adam, ParamGroup, ParamId, ParamStore};
use crate::tensor::Matrix;

/// Discriminator logits are clamped to this magnitude before taking logs.
pub const LOGIT_CLAMP: f64 = 15.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    MeshStage,
    ReportStage,
}

/// Per-view keep/drop indicator; at least one view is always kept.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewMask {
    keep: Vec<bool>,
    pub kind: MaskKind,
}

impl ViewMask {
    pub fn new(keep: Vec<bool>, kind: MaskKind) -> Result<Self> {
        if !keep.iter().any(|&k| k) {
            return Err(Error::invalid("view mask must keep at least one view"));
        }
        Ok(Self { keep, kind })
    }

    pub fn all(views: usize, kind: MaskKind) -> Result<Self> {
        Self::new(alloc::vec![true; views], kind)
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn keeps(&self, view: usize) -> bool {
        self.keep[view]
    }

    pub fn weight(&self, view: usize) -> f64 {
        if self.keep[view] { 1.0 } else { 0.0 }
    }

    pub fn bits(&self) -> &[bool] {
        &self.keep
    }

    pub fn kept(&self) -> impl Iterator<Item = usize> + '_ {
        self.keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i)
    }
}

/// I.i.d. Bernoulli(`keep_prob`) per view, redrawn until one view survives.
pub fn sample_view_mask<R: Rng>(
    views: usize,
    keep_prob: f64,
    kind: MaskKind,
    rng: &mut R,
) -> Result<ViewMask> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::invalid(format!("keep probability {keep_prob} outside (0, 1]")));
    }
    if views == 0 {
        return Err(Error::Empty("view mask"));
    }
    loop {
        let keep: Vec<bool> = (0..views).map(|_| rng.random::<f64>() < keep_prob).collect();
        if keep.iter().any(|&k| k) {
            return ViewMask::new(keep, kind);
        }
    }
}

/// Generator and discriminator for one view.
///
/// The generator maps `[z; V_im]` through one ReLU hidden layer to a `d_g`
/// vector; the discriminator maps `[candidate; V_im]` to a probability. The
/// concatenations are realised as split weight matrices.
#[derive(Clone, Debug)]
pub struct GanPair {
    pub gen_noise: ParamId,
    pub gen_feature: Linear,
    pub gen_out: Linear,
    pub disc_candidate: ParamId,
    pub disc_feature: Linear,
    pub disc_out: Linear,
    pub noise_dim: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
}

impl GanPair {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        view: usize,
        noise_dim: usize,
        feature_dim: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Self {
        let hidden = 2 * embed_dim;
        let (gg, dg) = (ParamGroup::Generator, ParamGroup::Discriminator);
        Self {
            gen_noise: store.add_xavier(&format!("gan{view}.g.noise"), gg, noise_dim, hidden, rng),
            gen_feature: Linear::new(store, &format!("gan{view}.g.feat"), gg, feature_dim, hidden, true, rng),
            gen_out: Linear::new(store, &format!("gan{view}.g.out"), gg, hidden, embed_dim, true, rng),
            disc_candidate: store.add_xavier(&format!("gan{view}.d.cand"), dg, embed_dim, embed_dim, rng),
            disc_feature: Linear::new(store, &format!("gan{view}.d.feat"), dg, feature_dim, embed_dim, true, rng),
            disc_out: Linear::new(store, &format!("gan{view}.d.out"), dg, embed_dim, 1, true, rng),
            noise_dim,
            feature_dim,
            embed_dim,
        }
    }

    pub fn sample_noise<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.noise_dim).map(|_| StandardNormal.sample(rng)).collect()
    }

    /// `V*_im = G(z, V_im)`
    pub fn generate(&self, g: &mut Graph, store: &ParamStore, v_im: Var, z: &[f64]) -> Result<Var> {
        if z.len() != self.noise_dim {
            return Err(Error::shape(
                "generator",
                format!("noise has {} entries, expected {}", z.len(), self.noise_dim),
            ));
        }
        if g.shape(v_im) != (1, self.feature_dim) {
            return Err(Error::shape(
                "generator",
                format!("feature shape {:?}, expected (1, {})", g.shape(v_im), self.feature_dim),
            ));
        }
        let z = g.constant(Matrix::row_vector(z.to_vec()));
        let wz = g.param(store, self.gen_noise);
        let hz = g.matmul(z, wz);
        let hv = self.gen_feature.forward(g, store, v_im);
        let h = g.add(hz, hv);
        let h = g.relu(h);
        Ok(self.gen_out.forward(g, store, h))
    }

    /// Clamped discriminator logit for `candidate` conditioned on `v_im`.
    pub fn discriminate(&self, g: &mut Graph, store: &ParamStore, candidate: Var, v_im: Var) -> Var {
        let wc = g.param(store, self.disc_candidate);
        let hc = g.matmul(candidate, wc);
        let hv = self.disc_feature.forward(g, store, v_im);
        let h = g.add(hc, hv);
        let h = g.relu(h);
        let logit = self.disc_out.forward(g, store, h);
        g.clamp(logit, -LOGIT_CLAMP, LOGIT_CLAMP)
    }
}

/// Value-level generator output.
pub fn generator_forward(pair: &GanPair, store: &ParamStore, v_im: &Matrix, z: &[f64]) -> Result<Matrix> {
    let mut g = Graph::new();
    let v = g.constant(v_im.clone());
    let out = pair.generate(&mut g, store, v, z)?;
    Ok(g.value(out).clone())
}

/// Tape nodes of one view's adversarial loss.
#[derive(Clone, Copy, Debug)]
pub struct GanLossTerms {
    /// `log D(F_m | V_im)`
    pub adv_real: Var,
    /// `log(1 - D(G(z, V_im) | V_im))`
    pub adv_fake: Var,
    /// `‖F_m - G(z, V_im)‖²`
    pub mse: Var,
    pub total: Var,
}

/// Builds the three GAN terms for `generated = G(z, V_im)` against `f_m`.
pub fn gan_loss_terms(
    g: &mut Graph,
    store: &ParamStore,
    pair: &GanPair,
    v_im: Var,
    generated: Var,
    f_m: Var,
) -> GanLossTerms {
    let real_logit = pair.discriminate(g, store, f_m, v_im);
    let neg = g.scale(real_logit, -1.0);
    let sp = g.softplus(neg);
    let adv_real = g.scale(sp, -1.0);
    let fake_logit = pair.discriminate(g, store, generated, v_im);
    let sp = g.softplus(fake_logit);
    let adv_fake = g.scale(sp, -1.0);
    let diff = g.sub(f_m, generated);
    let sq = g.mul(diff, diff);
    let mse = g.sum_all(sq);
    let adv = g.add(adv_real, adv_fake);
    let total = g.add(adv, mse);
    GanLossTerms {
        adv_real,
        adv_fake,
        mse,
        total,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanLossBreakdown {
    pub adv_real: f64,
    pub adv_fake: f64,
    pub mse: f64,
    pub total: f64,
}

/// Value-level GAN loss for one view.
pub fn gan_loss(
    pair: &GanPair,
    store: &ParamStore,
    v_im: &Matrix,
    z: &[f64],
    f_m: &Matrix,
) -> Result<GanLossBreakdown> {
    let mut g = Graph::new();
    let v = g.constant(v_im.clone());
    let generated = pair.generate(&mut g, store, v, z)?;
    if f_m.shape() != (1, pair.embed_dim) {
        return Err(Error::shape("gan_loss", "MeSH embedding must be a 1 x d_g row"));
    }
    let f = g.constant(f_m.clone());
    let terms = gan_loss_terms(&mut g, store, pair, v, generated, f);
    let breakdown = GanLossBreakdown {
        adv_real: g.scalar_value(terms.adv_real),
        adv_fake: g.scalar_value(terms.adv_fake),
        mse: g.scalar_value(terms.mse),
        total: g.scalar_value(terms.total),
    };
    let finite = [breakdown.adv_real, breakdown.adv_fake].iter().all(|v| v.is_finite() && *v < 0.0);
    if !finite {
        return Err(Error::invalid("discriminator output left (0, 1)"));
    }
    Ok(breakdown)
}

/// Discriminator probability `D(candidate | V_im)`.
pub fn discriminator_probability(pair: &GanPair, store: &ParamStore, candidate: &Matrix, v_im: &Matrix) -> f64 {
    let mut g = Graph::new();
    let c = g.constant(candidate.clone());
    let v = g.constant(v_im.clone());
    let logit = pair.discriminate(&mut g, store, c, v);
    crate::autodiff::sigmoid(g.scalar_value(logit))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GanMode {
    Discriminator,
    Generator,
}

/// One view of one study, as seen by the GAN alternation.
#[derive(Clone, Debug)]
pub struct GanSample {
    pub view: usize,
    pub v_im: Matrix,
    pub f_m: Matrix,
    pub z: Vec<f64>,
}

/// One alternation half-step over `samples`.
///
/// Discriminator mode ascends `adv_real + adv_fake` and touches only
/// discriminator parameters; generator mode descends `adv_fake + mse` and
/// touches only generator parameters. Returns the mean objective before the update.
pub fn train_gan_step(
    store: &mut ParamStore,
    pairs: &[GanPair],
    adam: &mut Adam,
    samples: &[GanSample],
    mode: GanMode,
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let mut objectives = Vec::with_capacity(samples.len());
    for s in samples {
        let pair = pairs
            .get(s.view)
            .ok_or_else(|| Error::invalid(format!("no GAN pair for view {}", s.view)))?;
        let v = g.constant(s.v_im.clone());
        let f = g.constant(s.f_m.clone());
        let generated = pair.generate(&mut g, store, v, &s.z)?;
        let terms = gan_loss_terms(&mut g, store, pair, v, generated, f);
        let objective = match mode {
            GanMode::Discriminator => {
                let adv = g.add(terms.adv_real, terms.adv_fake);
                g.scale(adv, -1.0)
            }
            GanMode::Generator => g.add(terms.adv_fake, terms.mse),
        };
        objectives.push(objective);
    }
    let sum = g.add_all(&objectives).expect("nonempty");
    let mean = g.scale(sum, 1.0 / samples.len() as f64);
    let value = g.scalar_value(mean);
    let grads = g.backward(mean);
    let group = match mode {
        GanMode::Discriminator => ParamGroup::Discriminator,
        GanMode::Generator => ParamGroup::Generator,
    };
    adam.step(store, &grads, |grp| grp == group);
    Ok(value)
}

/// Query/key/value projections of the view-fusion attention.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub key_dim: usize,
}

impl FusionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, embed_dim: usize, key_dim: usize, rng: &mut R) -> Self {
        let grp = ParamGroup::Fusion;
        Self {
            query: store.add_xavier("fusion.wq", grp, embed_dim, key_dim, rng),
            key: store.add_xavier("fusion.wk", grp, embed_dim, key_dim, rng),
            value: store.add_xavier("fusion.wv", grp, embed_dim, key_dim, rng),
            key_dim,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    /// `1 × d_k`
    pub v_m: Var,
    /// `H × H` attention weights.
    pub attention: Var,
}

/// `X = [δ₁V*₁; …; δ_H V*_H]`, `softmax(QKᵀ/√d_k)·V`, mean over the H rows.
/// Dropped views enter as zero rows, so their stored values never matter.
pub fn fuse_views_attention(
    g: &mut Graph,
    store: &ParamStore,
    views: &[Var],
    mask: &ViewMask,
    params: &FusionParams,
) -> Result<FusionOutput> {
    if views.is_empty() || views.len() != mask.len() {
        return Err(Error::shape(
            "fuse_views_attention",
            format!("{} views for a mask of length {}", views.len(), mask.len()),
        ));
    }
    let dim = g.shape(views[0]).1;
    let rows: Vec<Var> = views
        .iter()
        .enumerate()
        .map(|(i, &v)| if mask.keeps(i) { v } else { g.constant(Matrix::zeros(1, dim)) })
        .collect();
    let x = g.concat_rows(&rows);
    let wq = g.param(store, params.query);
    let wk = g.param(store, params.key);
    let wv = g.param(store, params.value);
    let q = g.matmul(x, wq);
    let k = g.matmul(x, wk);
    let v = g.matmul(x, wv);
    let scores = g.matmul_t(q, k);
    let scores = g.scale(scores, 1.0 / libm::sqrt(params.key_dim as f64));
    let attention = g.softmax_rows(scores);
    let mixed = g.matmul(attention, v);
    let v_m = g.mean_rows(mixed);
    Ok(FusionOutput { v_m, attention })
}

/// The MeSH decoder: a causal transformer decoder attending to the single
/// memory row `V_m`.
#[derive(Clone, Debug)]
pub struct MeshDecoder {
    pub decoder: TransformerDecoder,
}

impl MeshDecoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        vocab_size: usize,
        dim: usize,
        layers: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            decoder: TransformerDecoder::new(store, "mesh_dec", ParamGroup::MeshDecoder, vocab_size, dim, layers, max_len, rng),
        }
    }
}

/// Runs the MeSH decoder on `V_m` in teacher-forced or greedy mode.
pub fn mesh_decode(
    decoder: &MeshDecoder,
    store: &ParamStore,
    v_m: &Matrix,
    mode: crate::nn::DecodeMode<'_>,
) -> Result<crate::nn::DecodeOutput> {
    if v_m.rows() != 1 || !v_m.is_finite() {
        return Err(Error::invalid("V_m must be a single finite row"));
    }
    decoder.decoder.decode(store, v_m, crate::corpus::BOS, crate::corpus::EOS, mode)
}

/// `L_md = -Σ_t log P(y_t | y_<t, V_m)`
pub fn mesh_nll_loss(distributions: &Matrix, targets: &[usize]) -> Result<f64> {
    sequence_nll(distributions, targets)
}

/// `D_m[c] = Σ_t softmax_t(h[·, c])_t · h[t, c]`
pub fn softpool(g: &mut Graph, hidden: Var) -> Var {
    let cols_as_rows = g.transpose(hidden);
    let weights = g.softmax_rows(cols_as_rows);
    let weights = g.transpose(weights);
    let weighted = g.mul(weights, hidden);
    g.sum_rows(weighted)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeshSummary {
    /// `1 × d_g`
    pub d_m: Matrix,
}

pub fn softpool_summary(hidden: &Matrix) -> Result<MeshSummary> {
    if hidden.rows() == 0 {
        return Err(Error::Empty("softpool input"));
    }
    let mut g = Graph::new();
    let h = g.constant(hidden.clone());
    let d = softpool(&mut g, h);
    Ok(MeshSummary {
        d_m: g.value(d).clone(),
    })
}

/// `L_MCG = Σ_i δ^M_i · L_GANi + L_md`
pub fn mcg_loss(gan_losses: &[f64], mask: &ViewMask, l_md: f64) -> Result<f64> {
    if gan_losses.len() != mask.len() {
        return Err(Error::shape("mcg_loss", "one GAN loss per view is required"));
    }
    Ok(gan_losses
        .iter()
        .enumerate()
        .map(|(i, l)| mask.weight(i) * l)
        .sum::<f64>()
        + l_md)
}

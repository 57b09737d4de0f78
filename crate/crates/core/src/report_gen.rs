//! Report generation: the decoder memory, the joint objective, the training
//! loop with its module switches, and greedy inference.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::{fnv1a64, mix_seed, FineMemory, MeshSource, TrainConfig};
use crate::corpus::{
    build_vocabulary, detokenize, mesh_terms_from_tokens, Image, PatientRecord, Split, TokenVocabulary, BOS, EOS,
    NORMAL_MESH,
};
use crate::encoders::{CoarseImageEncoder, PatchEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::hfg::{
    build_report_hypergraph, build_visual_hypergraph, embedding_matching_loss_graph, node_matching_loss_graph,
    HypergraphEmbedding, RelationalConv,
};
use crate::mca_cmg::{
    fuse_views_attention, gan_loss_terms, sample_view_mask, softpool, train_gan_step, FusionParams, GanMode, GanPair,
    GanSample, MaskKind, MeshDecoder, ViewMask,
};
use crate::mesh_graph::{build_mesh_graph, gcn_forward, MeshGcn};
use crate::metrics::{extract_labels, LabelLexicon};
use crate::nn::{argmax, sequence_nll, sequence_nll_from_logits, teacher_inputs, DecodeMode, DecodeOutput, TransformerDecoder};
use crate::params::{Adam, ParamGroup, ParamId, ParamStore};
use crate::tensor::Matrix;

/// Where a decoder memory row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemorySource {
    /// Fused whole-image feature `V_m`.
    Fused = 0,
    /// SoftPool summary `D_m` of the MeSH decoder.
    MeshSummary = 1,
    /// One patch row of `V_r`.
    Patch = 2,
}

/// Untagged memory rows for the report decoder and their sources.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderContext {
    pub rows: Matrix,
    pub sources: Vec<MemorySource>,
}

impl DecoderContext {
    /// `[V_m; D_m; V_r]`, with `D_m` absent when the MeSH stage is off.
    pub fn new(v_m: &Matrix, d_m: Option<&Matrix>, v_r: &Matrix) -> Result<Self> {
        let mut parts = alloc::vec![v_m];
        let mut sources = alloc::vec![MemorySource::Fused; v_m.rows()];
        if let Some(d) = d_m {
            parts.push(d);
            sources.extend(core::iter::repeat_n(MemorySource::MeshSummary, d.rows()));
        }
        parts.push(v_r);
        sources.extend(core::iter::repeat_n(MemorySource::Patch, v_r.rows()));
        let rows = Matrix::concat_rows(&parts)?;
        if rows.rows() == 0 {
            return Err(Error::Empty("decoder memory"));
        }
        Ok(Self { rows, sources })
    }
}

/// Sizes that fix the parameter layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelShape {
    pub vocab_size: usize,
    pub num_views: usize,
    pub image_size: usize,
    pub dim: usize,
    pub noise_dim: usize,
    pub patch_size: usize,
    pub decoder_layers: usize,
    pub max_mesh_len: usize,
    pub max_report_len: usize,
}

impl ModelShape {
    pub fn new(config: &TrainConfig, vocab_size: usize, num_views: usize, image_size: usize) -> Self {
        Self {
            vocab_size,
            num_views,
            image_size,
            dim: config.dim,
            noise_dim: config.noise_dim,
            patch_size: config.patch_size,
            decoder_layers: config.decoder_layers,
            max_mesh_len: config.max_mesh_len,
            max_report_len: config.max_report_len,
        }
    }
}

/// Every trainable module. All modules exist regardless of the switches, so
/// the parameter layout never depends on them.
#[derive(Clone, Debug)]
pub struct DamperModel {
    pub shape: ModelShape,
    pub text: TextEncoder,
    pub coarse: CoarseImageEncoder,
    pub patch: PatchEncoder,
    pub mesh_gcn: MeshGcn,
    pub gans: Vec<GanPair>,
    pub fusion: FusionParams,
    pub mesh_decoder: MeshDecoder,
    pub report_conv: RelationalConv,
    pub visual_conv: RelationalConv,
    pub report_decoder: TransformerDecoder,
    /// `3 × d` source-tag rows added to the memory.
    pub source_tags: ParamId,
}

impl DamperModel {
    pub fn new(store: &mut ParamStore, shape: ModelShape, seed: u64) -> Result<Self> {
        if shape.num_views == 0 {
            return Err(Error::invalid("model needs at least one view"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x6d6f_6465_6c]));
        let d = shape.dim;
        let text = TextEncoder::new(store, shape.vocab_size, d, &mut rng);
        let coarse = CoarseImageEncoder::new(store, shape.image_size, d, &mut rng)?;
        let patch = PatchEncoder::new(store, shape.image_size, shape.patch_size, d, &mut rng)?;
        let mesh_gcn = MeshGcn::new(store, d, &mut rng);
        let gans = (0..shape.num_views)
            .map(|v| GanPair::new(store, v, shape.noise_dim, d, d, &mut rng))
            .collect();
        let fusion = FusionParams::new(store, d, d, &mut rng);
        let mesh_decoder = MeshDecoder::new(
            store,
            shape.vocab_size,
            d,
            shape.decoder_layers,
            shape.max_mesh_len,
            &mut rng,
        );
        let report_conv = RelationalConv::new(store, "hyper.report", d, &mut rng);
        let visual_conv = RelationalConv::new(store, "hyper.visual", d, &mut rng);
        let report_decoder = TransformerDecoder::new(
            store,
            "report_dec",
            ParamGroup::ReportDecoder,
            shape.vocab_size,
            d,
            shape.decoder_layers,
            shape.max_report_len,
            &mut rng,
        );
        let source_tags = store.add_uniform("report_dec.source_tags", ParamGroup::ReportDecoder, 3, d, 0.1, &mut rng);
        Ok(Self {
            shape,
            text,
            coarse,
            patch,
            mesh_gcn,
            gans,
            fusion,
            mesh_decoder,
            report_conv,
            visual_conv,
            report_decoder,
            source_tags,
        })
    }

    /// Tagged memory `[V_m + t₀; D_m + t₁; V_r + t₂]`.
    pub fn memory(&self, g: &mut Graph, store: &ParamStore, v_m: Var, d_m: Option<Var>, v_r: Var) -> Var {
        let tags = g.param(store, self.source_tags);
        let mut parts = Vec::with_capacity(3);
        let mut tagged = |g: &mut Graph, x: Var, source: MemorySource| {
            let t = g.select_rows(tags, &[source as usize]);
            parts.push(g.add_row(x, t));
        };
        tagged(g, v_m, MemorySource::Fused);
        if let Some(d) = d_m {
            tagged(g, d, MemorySource::MeshSummary);
        }
        tagged(g, v_r, MemorySource::Patch);
        g.concat_rows(&parts)
    }

    fn tagged_memory(&self, store: &ParamStore, ctx: &DecoderContext) -> Result<Matrix> {
        if ctx.rows.rows() == 0 || ctx.rows.rows() != ctx.sources.len() {
            return Err(Error::Empty("decoder memory"));
        }
        let tags = store.get(self.source_tags);
        let mut rows = ctx.rows.clone();
        for (r, s) in ctx.sources.iter().enumerate() {
            let tag = tags.row(*s as usize).to_vec();
            for (v, t) in rows.row_mut(r).iter_mut().zip(tag) {
                *v += t;
            }
        }
        Ok(rows)
    }
}

/// Runs the report decoder over `ctx` in teacher-forced or greedy mode.
pub fn report_decode(
    model: &DamperModel,
    store: &ParamStore,
    ctx: &DecoderContext,
    mode: DecodeMode<'_>,
) -> Result<DecodeOutput> {
    let memory = model.tagged_memory(store, ctx)?;
    model.report_decoder.decode(store, &memory, BOS, EOS, mode)
}

/// `L_rd = -Σ_t log P(y_t | y_<t, D_m, V_m, V_r)`
pub fn report_nll_loss(distributions: &Matrix, targets: &[usize]) -> Result<f64> {
    sequence_nll(distributions, targets)
}

/// `L_total = L_MCG + L_HFG`
pub fn total_loss(l_mcg: f64, l_hfg: f64) -> Result<f64> {
    if !(l_mcg.is_finite() && l_hfg.is_finite()) {
        return Err(Error::invalid("stage losses must be finite"));
    }
    Ok(l_mcg + l_hfg)
}

/// Batch means of every loss term. Disabled terms are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub gan: Option<f64>,
    pub gan_adv_real: Option<f64>,
    pub gan_adv_fake: Option<f64>,
    pub gan_mse: Option<f64>,
    pub mesh_nll: Option<f64>,
    pub node_matching: Option<f64>,
    pub embedding_matching: Option<f64>,
    pub report_nll: f64,
    pub mcg: f64,
    pub hfg: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `(key, value)` pairs of the present terms, in log order.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        let opt = [
            ("L_GAN", self.gan),
            ("L_GAN_adv_real", self.gan_adv_real),
            ("L_GAN_adv_fake", self.gan_adv_fake),
            ("L_GAN_mse", self.gan_mse),
            ("L_md", self.mesh_nll),
        ];
        out.extend(opt.iter().filter_map(|&(k, v)| v.map(|v| (k, v))));
        out.push(("L_MCG", self.mcg));
        let opt = [("L_N", self.node_matching), ("L_S", self.embedding_matching)];
        out.extend(opt.iter().filter_map(|&(k, v)| v.map(|v| (k, v))));
        out.push(("L_rd", self.report_nll));
        out.push(("L_HFG", self.hfg));
        out.push(("L_total", self.total));
        out
    }

    /// Sum of the leaf terms (`L_GAN`, `L_md`, `L_N`, `L_S`, `L_rd`).
    pub fn leaf_sum(&self) -> f64 {
        [self.gan, self.mesh_nll, self.node_matching, self.embedding_matching]
            .iter()
            .flatten()
            .sum::<f64>()
            + self.report_nll
    }
}

/// A training study with its targets resolved against the vocabulary.
#[derive(Clone, Debug)]
pub struct PreparedStudy {
    pub study_id: String,
    pub views: Vec<Image>,
    pub report: String,
    pub mesh_terms: Vec<String>,
    /// Report ids ending with EOS.
    pub report_target: Vec<usize>,
    /// MeSH-sequence ids ending with EOS.
    pub mesh_target: Vec<usize>,
}

/// MeSH terms the stage-1 branch trains on, per `source`. Empty lists become
/// the sentinel term.
pub fn resolve_mesh_terms(record: &PatientRecord, source: MeshSource) -> Vec<String> {
    let terms: Vec<String> = match source {
        MeshSource::GroundTruth => record.mesh_terms.clone(),
        MeshSource::RuleLabeler => extract_labels(&record.report, &LabelLexicon::default()).into_iter().collect(),
    };
    if terms.is_empty() {
        alloc::vec![NORMAL_MESH.to_string()]
    } else {
        terms
    }
}

/// Training records with MeSH terms resolved, and the vocabulary built from them.
pub fn prepare_corpus(records: &[PatientRecord], config: &TrainConfig) -> Result<(Vec<PatientRecord>, TokenVocabulary)> {
    let train: Vec<PatientRecord> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| {
            let mut r = r.clone();
            r.mesh_terms = resolve_mesh_terms(&r, config.mesh_source);
            r
        })
        .collect();
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let vocab = build_vocabulary(&train, config.min_freq)?;
    Ok((train, vocab))
}

fn prepare_study(record: &PatientRecord, vocab: &TokenVocabulary, shape: &ModelShape) -> Result<PreparedStudy> {
    let report_target = vocab.encode_report(&record.report);
    let mesh_target = vocab.encode_mesh(&record.mesh_terms);
    let too_long = |field: &'static str, len: usize, max: usize| Error::Record {
        study_id: record.study_id.clone(),
        field,
        reason: format!("{len} target tokens exceed the limit of {max}"),
    };
    if report_target.len() > shape.max_report_len {
        return Err(too_long("report", report_target.len(), shape.max_report_len));
    }
    if mesh_target.len() > shape.max_mesh_len {
        return Err(too_long("mesh", mesh_target.len(), shape.max_mesh_len));
    }
    if record.views.is_empty() || record.views.len() > shape.num_views {
        return Err(Error::Record {
            study_id: record.study_id.clone(),
            field: "views",
            reason: format!("{} views, model has {}", record.views.len(), shape.num_views),
        });
    }
    Ok(PreparedStudy {
        study_id: record.study_id.clone(),
        views: record.views.clone(),
        report: record.report.clone(),
        mesh_terms: record.mesh_terms.clone(),
        report_target,
        mesh_target,
    })
}

/// Per-study randomness of one step: masks and noise.
#[derive(Clone, Debug)]
pub struct StudyDraw {
    pub mesh_mask: ViewMask,
    pub report_mask: ViewMask,
    pub noise: Vec<Vec<f64>>,
}

impl StudyDraw {
    /// All views kept, zero noise: the evaluation setting.
    pub fn evaluation(views: usize, noise_dim: usize) -> Result<Self> {
        Ok(Self {
            mesh_mask: ViewMask::all(views, MaskKind::MeshStage)?,
            report_mask: ViewMask::all(views, MaskKind::ReportStage)?,
            noise: alloc::vec![alloc::vec![0.0; noise_dim]; views],
        })
    }
}

/// Seed of the stream owned by one study at one step.
pub fn study_seed(seed: u64, study_id: &str, step: usize) -> u64 {
    mix_seed(&[seed, fnv1a64(study_id.as_bytes()), step as u64])
}

pub fn draw_for_study(config: &TrainConfig, model: &DamperModel, study_id: &str, views: usize, step: usize) -> Result<StudyDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(study_seed(config.seed, study_id, step));
    let mesh_mask = sample_view_mask(views, config.keep_prob, MaskKind::MeshStage, &mut rng)?;
    let report_mask = sample_view_mask(views, config.keep_prob, MaskKind::ReportStage, &mut rng)?;
    let noise = (0..views).map(|v| model.gans[v].sample_noise(&mut rng)).collect();
    Ok(StudyDraw {
        mesh_mask,
        report_mask,
        noise,
    })
}

/// Tape nodes of one study's forward pass.
#[derive(Clone, Debug)]
pub struct StudyForward {
    pub gan: Option<[Var; 4]>,
    pub mesh_nll: Option<Var>,
    pub mesh_logits: Option<Var>,
    pub report_nll: Var,
    pub report_logits: Var,
    pub report_graph: Option<HypergraphEmbedding>,
    pub visual_graphs: Vec<HypergraphEmbedding>,
    pub report_mask: ViewMask,
}

fn needs_relations(config: &TrainConfig) -> bool {
    config.intra_rca || config.inter_rca || config.fine_memory == FineMemory::Convolved
}

fn weighted_sum(g: &mut Graph, terms: &[Var], mask: &ViewMask) -> Var {
    let kept: Vec<Var> = mask.kept().map(|i| terms[i]).collect();
    g.add_all(&kept).expect("mask keeps a view")
}

/// Builds every enabled per-study term on `g`.
pub fn forward_study(
    g: &mut Graph,
    store: &ParamStore,
    model: &DamperModel,
    config: &TrainConfig,
    vocab: &TokenVocabulary,
    study: &PreparedStudy,
    draw: &StudyDraw,
) -> Result<StudyForward> {
    let h = study.views.len();
    let v_im: Vec<Var> = study
        .views
        .iter()
        .map(|img| model.coarse.forward(g, store, img))
        .collect::<Result<_>>()?;

    let mut gan = None;
    let v_star: Vec<Var> = if config.mca {
        let mesh = build_mesh_graph(g, store, &study.mesh_terms, &model.text, vocab)?;
        // F_m is the real sample; the generator's objective must not move it
        let f_m = gcn_forward(g, store, &model.mesh_gcn, &mesh).pooled;
        let f_m = g.detach(f_m);
        let mut generated = Vec::with_capacity(h);
        let mut parts: [Vec<Var>; 4] = Default::default();
        for i in 0..h {
            let gi = model.gans[i].generate(g, store, v_im[i], &draw.noise[i])?;
            // the encoder sits upstream of the generator, not the discriminator
            let cond = g.detach(v_im[i]);
            let t = gan_loss_terms(g, store, &model.gans[i], cond, gi, f_m);
            for (p, v) in parts.iter_mut().zip([t.total, t.adv_real, t.adv_fake, t.mse]) {
                p.push(v);
            }
            generated.push(gi);
        }
        gan = Some(parts.map(|p| weighted_sum(g, &p, &draw.mesh_mask)));
        generated
    } else {
        v_im.clone()
    };

    let (v_m, d_m, mesh_nll, mesh_logits) = if config.cmg {
        let fused = fuse_views_attention(g, store, &v_star, &draw.mesh_mask, &model.fusion)?;
        let inputs = teacher_inputs(BOS, &study.mesh_target);
        let pass = model.mesh_decoder.decoder.forward(g, store, &inputs, fused.v_m)?;
        let nll = sequence_nll_from_logits(g, pass.logits, &study.mesh_target);
        let d_m = softpool(g, pass.hidden);
        (fused.v_m, Some(d_m), Some(nll), Some(pass.logits))
    } else {
        let kept: Vec<Var> = draw.mesh_mask.kept().map(|i| v_star[i]).collect();
        let stacked = g.concat_rows(&kept);
        (g.mean_rows(stacked), None, None, None)
    };

    let patches: Vec<Var> = study
        .views
        .iter()
        .map(|img| model.patch.forward(g, store, img))
        .collect::<Result<_>>()?;

    let (report_graph, visual_graphs) = if needs_relations(config) {
        let rh = build_report_hypergraph(g, store, &study.report, &model.text, vocab, config.knn_k)?;
        let re = model.report_conv.forward(g, store, &rh, config.relation)?;
        let grid = model.patch.grid();
        let mut visual = Vec::with_capacity(h);
        for &p in &patches {
            let vh = build_visual_hypergraph(g, p, grid, grid, config.knn_k)?;
            visual.push(model.visual_conv.forward(g, store, &vh, config.relation)?);
        }
        (Some(re), visual)
    } else {
        (None, Vec::new())
    };

    let fine: Vec<Var> = match config.fine_memory {
        FineMemory::Raw => draw.report_mask.kept().map(|i| patches[i]).collect(),
        FineMemory::Convolved => draw.report_mask.kept().map(|i| visual_graphs[i].nodes).collect(),
    };
    let v_r = g.concat_rows(&fine);
    let memory = model.memory(g, store, v_m, d_m, v_r);
    let inputs = teacher_inputs(BOS, &study.report_target);
    let pass = model.report_decoder.forward(g, store, &inputs, memory)?;
    let report_nll = sequence_nll_from_logits(g, pass.logits, &study.report_target);

    Ok(StudyForward {
        gan,
        mesh_nll,
        mesh_logits,
        report_nll,
        report_logits: pass.logits,
        report_graph: if config.intra_rca || config.inter_rca { report_graph } else { None },
        visual_graphs: if config.intra_rca || config.inter_rca { visual_graphs } else { Vec::new() },
        report_mask: draw.report_mask.clone(),
    })
}

/// Single-writer training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub vocab: TokenVocabulary,
    pub model: DamperModel,
    pub store: ParamStore,
    pub adam: Adam,
    pub step: usize,
    studies: Vec<PreparedStudy>,
}

fn corpus_geometry(records: &[PatientRecord]) -> Result<(usize, usize)> {
    let num_views = records.iter().map(|r| r.views.len()).max().unwrap_or(0);
    let side = records
        .first()
        .and_then(|r| r.views.first())
        .map(Image::side)
        .ok_or(Error::Empty("training images"))?;
    for r in records {
        if let Some(img) = r.views.iter().find(|i| i.side() != side) {
            return Err(Error::Record {
                study_id: r.study_id.clone(),
                field: "views",
                reason: format!("image side {} differs from {side}", img.side()),
            });
        }
    }
    Ok((num_views, side))
}

impl Trainer {
    /// Fresh model on the training split of `records`.
    pub fn new(config: TrainConfig, records: &[PatientRecord]) -> Result<Self> {
        config.validate()?;
        let (train, vocab) = prepare_corpus(records, &config)?;
        let (num_views, side) = corpus_geometry(&train)?;
        let shape = ModelShape::new(&config, vocab.len(), num_views, side);
        let mut store = ParamStore::new();
        let model = DamperModel::new(&mut store, shape, config.seed)?;
        let adam = Adam::new(&store, config.lr);
        Self::assemble(config, vocab, model, store, adam, 0, &train)
    }

    /// Restores saved state; `store` and `adam` must match the layout `shape` implies.
    pub fn restore(
        config: TrainConfig,
        vocab: TokenVocabulary,
        shape: ModelShape,
        store: ParamStore,
        adam: Adam,
        step: usize,
        records: &[PatientRecord],
    ) -> Result<Self> {
        config.validate()?;
        let model = restore_model(&store, shape, config.seed)?;
        if adam.slots.len() != store.len() {
            return Err(Error::invalid("optimizer state does not match the parameters"));
        }
        let train: Vec<PatientRecord> = prepare_corpus(records, &config)?.0;
        Self::assemble(config, vocab, model, store, adam, step, &train)
    }

    fn assemble(
        config: TrainConfig,
        vocab: TokenVocabulary,
        model: DamperModel,
        store: ParamStore,
        adam: Adam,
        step: usize,
        train: &[PatientRecord],
    ) -> Result<Self> {
        let studies: Vec<PreparedStudy> = train
            .iter()
            .map(|r| prepare_study(r, &vocab, &model.shape))
            .collect::<Result<_>>()?;
        if config.inter_rca && studies.len() < 2 {
            return Err(Error::Config {
                key: "inter_rca".into(),
                reason: "needs at least 2 training studies".into(),
            });
        }
        Ok(Self {
            config,
            vocab,
            model,
            store,
            adam,
            step,
            studies,
        })
    }

    pub fn studies(&self) -> &[PreparedStudy] {
        &self.studies
    }

    /// Indices of the studies in the batch of `step`: a seeded shuffle per step.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.studies.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, 0x6261_7463_68, step as u64]));
        order.shuffle(&mut rng);
        order.truncate(self.config.batch_size.min(self.studies.len()));
        order
    }

    /// One GAN alternation and one joint step; returns the pre-update losses.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let config = &self.config;
        let batch = self.batch_indices(self.step);
        if config.inter_rca && batch.len() < 2 {
            return Err(Error::Config {
                key: "batch_size".into(),
                reason: "inter_rca needs at least 2 studies per batch".into(),
            });
        }
        let draws: Vec<StudyDraw> = batch
            .iter()
            .map(|&b| {
                let s = &self.studies[b];
                draw_for_study(config, &self.model, &s.study_id, s.views.len(), self.step)
            })
            .collect::<Result<_>>()?;

        if config.mca {
            let samples = self.gan_samples(&batch, &draws)?;
            train_gan_step(&mut self.store, &self.model.gans, &mut self.adam, &samples, GanMode::Discriminator)?;
            train_gan_step(&mut self.store, &self.model.gans, &mut self.adam, &samples, GanMode::Generator)?;
        }

        let config = &self.config;
        let mut g = Graph::new();
        let mut forwards = Vec::with_capacity(batch.len());
        for (&b, draw) in batch.iter().zip(&draws) {
            forwards.push(forward_study(&mut g, &self.store, &self.model, config, &self.vocab, &self.studies[b], draw)?);
        }
        let n = batch.len();

        let mut node_terms = Vec::new();
        let mut embed_terms = Vec::new();
        for (b, f) in forwards.iter().enumerate() {
            if config.intra_rca {
                let neg = &forwards[(b + 1) % n];
                let rr = f.report_graph.expect("relations built");
                let nr = neg.report_graph.expect("relations built");
                let per_view: Vec<Var> = (0..f.visual_graphs.len())
                    .map(|i| {
                        let neg_view = &neg.visual_graphs[i.min(neg.visual_graphs.len() - 1)];
                        node_matching_loss_graph(
                            &mut g,
                            rr.nodes,
                            f.visual_graphs[i].nodes,
                            nr.nodes,
                            neg_view.nodes,
                            config.tau,
                            config.m_node_mode,
                        )
                    })
                    .collect();
                node_terms.push(weighted_sum(&mut g, &per_view, &f.report_mask));
            }
            if config.inter_rca {
                let rr = f.report_graph.expect("relations built");
                let report_pool: Vec<Var> = forwards
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != b)
                    .map(|(_, o)| o.report_graph.expect("relations built").pooled)
                    .collect();
                let mut per_view = Vec::with_capacity(f.visual_graphs.len());
                for (i, vg) in f.visual_graphs.iter().enumerate() {
                    let visual_pool: Vec<Var> = forwards
                        .iter()
                        .enumerate()
                        .filter(|&(j, o)| j != b && i < o.visual_graphs.len())
                        .map(|(_, o)| o.visual_graphs[i].pooled)
                        .collect();
                    let m = embedding_matching_loss_graph(&mut g, rr.pooled, vg.pooled, &report_pool, &visual_pool, config.gamma)?;
                    per_view.push(m.loss);
                }
                embed_terms.push(weighted_sum(&mut g, &per_view, &f.report_mask));
            }
        }

        let mut study_totals = Vec::with_capacity(n);
        for (b, f) in forwards.iter().enumerate() {
            let mut terms = Vec::new();
            if let Some(gan) = f.gan {
                terms.push(gan[0]);
            }
            terms.extend(f.mesh_nll);
            if config.intra_rca {
                terms.push(node_terms[b]);
            }
            if config.inter_rca {
                terms.push(embed_terms[b]);
            }
            terms.push(f.report_nll);
            study_totals.push(g.add_all(&terms).expect("report term present"));
        }
        let sum = g.add_all(&study_totals).expect("nonempty batch");
        let objective = g.scale(sum, 1.0 / n as f64);

        let mean = |g: &Graph, vars: &[Var]| vars.iter().map(|&v| g.scalar_value(v)).sum::<f64>() / n as f64;
        let gan_part = |k: usize| -> Option<f64> {
            config
                .mca
                .then(|| mean(&g, &forwards.iter().map(|f| f.gan.expect("mca on")[k]).collect::<Vec<_>>()))
        };
        let gan = gan_part(0);
        let mesh_nll = config
            .cmg
            .then(|| mean(&g, &forwards.iter().map(|f| f.mesh_nll.expect("cmg on")).collect::<Vec<_>>()));
        let node_matching = config.intra_rca.then(|| mean(&g, &node_terms));
        let embedding_matching = config.inter_rca.then(|| mean(&g, &embed_terms));
        let report_nll = mean(&g, &forwards.iter().map(|f| f.report_nll).collect::<Vec<_>>());
        let mcg = gan.unwrap_or(0.0) + mesh_nll.unwrap_or(0.0);
        let hfg = node_matching.unwrap_or(0.0) + embedding_matching.unwrap_or(0.0) + report_nll;
        let breakdown = LossBreakdown {
            gan,
            gan_adv_real: gan_part(1),
            gan_adv_fake: gan_part(2),
            gan_mse: gan_part(3),
            mesh_nll,
            node_matching,
            embedding_matching,
            report_nll,
            mcg,
            hfg,
            total: total_loss(mcg, hfg)?,
        };
        let objective_value = g.scalar_value(objective);
        if !objective_value.is_finite() {
            return Err(Error::invalid(format!("non-finite loss at step {}", self.step)));
        }

        let grads = g.backward(objective);
        let freeze = config.freeze_encoders;
        self.adam
            .step(&mut self.store, &grads, |grp| !grp.is_gan() && !(freeze && grp.is_encoder()));
        self.step += 1;
        Ok(breakdown)
    }

    fn gan_samples(&self, batch: &[usize], draws: &[StudyDraw]) -> Result<Vec<GanSample>> {
        let mut samples = Vec::new();
        for (&b, draw) in batch.iter().zip(draws) {
            let s = &self.studies[b];
            let mut g = Graph::new();
            let mesh = build_mesh_graph(&mut g, &self.store, &s.mesh_terms, &self.model.text, &self.vocab)?;
            let f_m = gcn_forward(&mut g, &self.store, &self.model.mesh_gcn, &mesh).pooled;
            let f_m = g.value(f_m).clone();
            for i in draw.mesh_mask.kept() {
                let v = self.model.coarse.forward(&mut g, &self.store, &s.views[i])?;
                samples.push(GanSample {
                    view: i,
                    v_im: g.value(v).clone(),
                    f_m: f_m.clone(),
                    z: draw.noise[i].clone(),
                });
            }
        }
        Ok(samples)
    }

    /// Steps until `self.step == until`, reporting each breakdown.
    pub fn run(&mut self, until: usize, mut on_step: impl FnMut(usize, &LossBreakdown)) -> Result<()> {
        while self.step < until {
            let step = self.step;
            let b = self.train_step()?;
            on_step(step, &b);
        }
        Ok(())
    }
}

/// Rebuilds module handles over an existing parameter store, checking that
/// names and shapes line up.
pub fn restore_model(store: &ParamStore, shape: ModelShape, seed: u64) -> Result<DamperModel> {
    let mut fresh = ParamStore::new();
    let model = DamperModel::new(&mut fresh, shape, seed)?;
    if fresh.len() != store.len() {
        return Err(Error::invalid(format!(
            "expected {} parameter tensors, found {}",
            fresh.len(),
            store.len()
        )));
    }
    for (a, b) in fresh.entries().iter().zip(store.entries()) {
        if a.name != b.name || a.group != b.group || a.value.shape() != b.value.shape() {
            return Err(Error::invalid(format!("parameter `{}` does not match the model layout", b.name)));
        }
    }
    Ok(model)
}

/// Greedy output of the full inference path.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedReport {
    pub mesh_tokens: Vec<usize>,
    pub report_tokens: Vec<usize>,
    pub mesh_terms: Vec<String>,
    pub report: String,
}

/// Encode views, generate (`z = 0`), fuse, decode MeSH, SoftPool, concatenate
/// patches, decode the report. Every available view is kept.
pub fn generate_report(
    model: &DamperModel,
    store: &ParamStore,
    vocab: &TokenVocabulary,
    config: &TrainConfig,
    views: &[Image],
) -> Result<GeneratedReport> {
    if views.is_empty() {
        return Err(Error::Empty("views"));
    }
    if views.len() > model.shape.num_views {
        return Err(Error::invalid(format!(
            "{} views given, model was built for at most {}",
            views.len(),
            model.shape.num_views
        )));
    }
    let draw = StudyDraw::evaluation(views.len(), model.shape.noise_dim)?;
    let mut g = Graph::new();
    let mut v_star = Vec::with_capacity(views.len());
    for (i, img) in views.iter().enumerate() {
        let v = model.coarse.forward(&mut g, store, img)?;
        v_star.push(if config.mca { model.gans[i].generate(&mut g, store, v, &draw.noise[i])? } else { v });
    }
    let (v_m, mesh) = if config.cmg {
        let fused = fuse_views_attention(&mut g, store, &v_star, &draw.mesh_mask, &model.fusion)?;
        let v_m = g.value(fused.v_m).clone();
        let out = model
            .mesh_decoder
            .decoder
            .decode(store, &v_m, BOS, EOS, DecodeMode::Greedy { max_len: model.shape.max_mesh_len })?;
        (v_m, Some(out))
    } else {
        let stacked = g.concat_rows(&v_star);
        let m = g.mean_rows(stacked);
        (g.value(m).clone(), None)
    };
    let d_m = match &mesh {
        Some(out) => Some(crate::mca_cmg::softpool_summary(&out.hidden)?.d_m),
        None => None,
    };
    let mut fine = Vec::with_capacity(views.len());
    for img in views {
        let p = model.patch.forward(&mut g, store, img)?;
        let rows = match config.fine_memory {
            FineMemory::Raw => p,
            FineMemory::Convolved => {
                let grid = model.patch.grid();
                let vh = build_visual_hypergraph(&mut g, p, grid, grid, config.knn_k)?;
                model.visual_conv.forward(&mut g, store, &vh, config.relation)?.nodes
            }
        };
        fine.push(g.value(rows).clone());
    }
    let fine_refs: Vec<&Matrix> = fine.iter().collect();
    let v_r = Matrix::concat_rows(&fine_refs)?;
    let ctx = DecoderContext::new(&v_m, d_m.as_ref(), &v_r)?;
    let report = report_decode(model, store, &ctx, DecodeMode::Greedy { max_len: model.shape.max_report_len })?;
    let mesh_tokens = mesh.map(|m| m.tokens).unwrap_or_default();
    Ok(GeneratedReport {
        mesh_terms: mesh_terms_from_tokens(&vocab.decode(&mesh_tokens)),
        report: detokenize(&vocab.decode(&report.tokens)),
        mesh_tokens,
        report_tokens: report.tokens,
    })
}

/// Teacher-forced next-token accuracy of the MeSH decoder (if enabled) and
/// the report decoder, with every view kept and zero noise.
pub fn teacher_forced_accuracy(
    model: &DamperModel,
    store: &ParamStore,
    vocab: &TokenVocabulary,
    config: &TrainConfig,
    study: &PreparedStudy,
) -> Result<(Option<f64>, f64)> {
    let draw = StudyDraw::evaluation(study.views.len(), model.shape.noise_dim)?;
    let mut g = Graph::new();
    let f = forward_study(&mut g, store, model, config, vocab, study, &draw)?;
    let acc = |logits: &Matrix, targets: &[usize]| {
        let hits = targets.iter().enumerate().filter(|&(t, &y)| argmax(logits.row(t)) == y).count();
        hits as f64 / targets.len() as f64
    };
    let mesh = f.mesh_logits.map(|l| acc(g.value(l), &study.mesh_target));
    Ok((mesh, acc(g.value(f.report_logits), &study.report_target)))
}

/// Node-level relational features used by the matching losses: report
/// hypergraph outputs and one visual output per view (all views kept).
#[derive(Clone, Debug, PartialEq)]
pub struct RelationalFeatures {
    pub report_nodes: Matrix,
    pub visual_nodes: Vec<Matrix>,
}

pub fn relational_features(
    model: &DamperModel,
    store: &ParamStore,
    vocab: &TokenVocabulary,
    config: &TrainConfig,
    report: &str,
    views: &[Image],
) -> Result<RelationalFeatures> {
    let mut g = Graph::new();
    let rh = build_report_hypergraph(&mut g, store, report, &model.text, vocab, config.knn_k)?;
    let re = model.report_conv.forward(&mut g, store, &rh, config.relation)?;
    let grid = model.patch.grid();
    let mut visual_nodes = Vec::with_capacity(views.len());
    for img in views {
        let p = model.patch.forward(&mut g, store, img)?;
        let vh = build_visual_hypergraph(&mut g, p, grid, grid, config.knn_k)?;
        let ve = model.visual_conv.forward(&mut g, store, &vh, config.relation)?;
        visual_nodes.push(g.value(ve.nodes).clone());
    }
    Ok(RelationalFeatures {
        report_nodes: g.value(re.nodes).clone(),
        visual_nodes,
    })
}

/// Parameter groups a switch setting trains in the joint and GAN steps.
pub fn trained_groups(config: &TrainConfig) -> BTreeSet<ParamGroup> {
    let mut groups = BTreeSet::new();
    if !config.freeze_encoders {
        groups.insert(ParamGroup::CoarseEncoder);
        groups.insert(ParamGroup::PatchEncoder);
        if config.intra_rca || config.inter_rca {
            groups.insert(ParamGroup::TextEncoder);
        }
    }
    groups.insert(ParamGroup::ReportDecoder);
    if config.mca {
        groups.insert(ParamGroup::Generator);
        groups.insert(ParamGroup::Discriminator);
    }
    if config.cmg {
        groups.insert(ParamGroup::Fusion);
        groups.insert(ParamGroup::MeshDecoder);
    }
    if needs_relations(config) {
        groups.insert(ParamGroup::Hypergraph);
    }
    groups
}

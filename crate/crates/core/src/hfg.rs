//! Fine alignment between report phrases and image patches.
//!
//! Both modalities become hypergraphs (phrase or grid-line hyperedges plus one
//! KNN hyperedge per node), pass through one hypergraph convolution, and are
//! matched at node level (hinge on `m_node`) and at embedding level (hinge
//! against the hardest in-batch negatives).

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::corpus::{segment_phrases, TokenVocabulary};
use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::mca_cmg::ViewMask;
use crate::mesh_graph::normalized_adjacency;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{cosine, cosine_matrix, Matrix};

/// How `m_node` aggregates the clamped cosine matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeMatchMode {
    /// Best match for every node of the first set, summed.
    PerNodeMax,
    /// Every clamped pair, summed.
    DoubleSum,
}

/// Relational structure used by the fine-alignment convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelationMode {
    Hypergraph,
    /// Pairwise KNN edges with ordinary graph convolution.
    Graph,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchingConfig {
    pub tau: f64,
    pub gamma: f64,
    pub k: usize,
    pub mode: NodeMatchMode,
}

impl MatchingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::invalid("margins must be non-negative"));
        }
        if self.k == 0 {
            return Err(Error::invalid("KNN neighbour count must be at least 1"));
        }
        Ok(())
    }
}

/// Node-by-hyperedge membership with per-hyperedge weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Incidence {
    pub num_nodes: usize,
    pub hyperedges: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
}

impl Incidence {
    pub fn new(num_nodes: usize, hyperedges: Vec<Vec<usize>>) -> Self {
        let weights = alloc::vec![1.0; hyperedges.len()];
        Self {
            num_nodes,
            hyperedges,
            weights,
        }
    }

    pub fn num_hyperedges(&self) -> usize {
        self.hyperedges.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut covered = alloc::vec![false; self.num_nodes];
        for (e, members) in self.hyperedges.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::invalid(format!("hyperedge {e} is empty")));
            }
            for &v in members {
                if v >= self.num_nodes {
                    return Err(Error::invalid(format!("hyperedge {e} names node {v}")));
                }
                covered[v] = true;
            }
        }
        if let Some(v) = covered.iter().position(|&c| !c) {
            return Err(Error::invalid(format!("node {v} has zero degree")));
        }
        Ok(())
    }

    /// Dense `n × e` 0/1 matrix.
    pub fn matrix(&self) -> Matrix {
        let mut h = Matrix::zeros(self.num_nodes, self.hyperedges.len());
        for (e, members) in self.hyperedges.iter().enumerate() {
            for &v in members {
                h.set(v, e, 1.0);
            }
        }
        h
    }

    /// `Dv^{-1/2} H W De^{-1} Hᵀ Dv^{-1/2}`
    pub fn propagation(&self) -> Result<Matrix> {
        self.validate()?;
        let n = self.num_nodes;
        let mut dv = alloc::vec![0.0; n];
        for (members, &w) in self.hyperedges.iter().zip(&self.weights) {
            for &v in members {
                dv[v] += w;
            }
        }
        let mut p = Matrix::zeros(n, n);
        for (members, &w) in self.hyperedges.iter().zip(&self.weights) {
            let de = members.len() as f64;
            for &i in members {
                for &j in members {
                    let v = p.get(i, j) + w / de / libm::sqrt(dv[i] * dv[j]);
                    p.set(i, j, v);
                }
            }
        }
        Ok(p)
    }
}

#[derive(Clone, Debug)]
pub struct Hypergraph {
    /// `n × d`, in the graph the hypergraph was built in.
    pub features: Var,
    pub incidence: Incidence,
    /// `(i, j)` for every KNN neighbour `j` of node `i`.
    pub knn_pairs: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug)]
pub struct HypergraphEmbedding {
    pub nodes: Var,
    pub pooled: Var,
}

/// The `k` most cosine-similar other nodes of every node, ties to the lower index.
pub fn knn_neighbours(features: &Matrix, k: usize) -> Vec<Vec<usize>> {
    let sims = cosine_matrix(features, features);
    (0..features.rows())
        .map(|i| {
            let mut others: Vec<usize> = (0..features.rows()).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| {
                sims.get(i, b)
                    .partial_cmp(&sims.get(i, a))
                    .unwrap_or(core::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            others.truncate(k);
            others
        })
        .collect()
}

/// One hyperedge per group, then one `{i} ∪ knn(i)` hyperedge per node.
fn with_knn(features: &Matrix, groups: Vec<Vec<usize>>, k: usize) -> (Incidence, Vec<(usize, usize)>) {
    let n = features.rows();
    let mut edges = groups;
    let mut pairs = Vec::new();
    for (i, nbrs) in knn_neighbours(features, k).into_iter().enumerate() {
        let mut e = alloc::vec![i];
        for j in nbrs {
            pairs.push((i, j));
            e.push(j);
        }
        edges.push(e);
    }
    (Incidence::new(n, edges), pairs)
}

/// Phrase hyperedges over token positions, given phrase lengths.
pub fn phrase_groups(phrase_lengths: &[usize]) -> Vec<Vec<usize>> {
    let mut start = 0;
    phrase_lengths
        .iter()
        .map(|&len| {
            let e = (start..start + len).collect();
            start += len;
            e
        })
        .collect()
}

/// One hyperedge per grid row and one per grid column.
pub fn grid_groups(rows: usize, cols: usize) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = (0..rows).map(|r| (0..cols).map(|c| r * cols + c).collect()).collect();
    groups.extend((0..cols).map(|c| (0..rows).map(|r| r * cols + c).collect()));
    groups
}

/// Report hypergraph: token nodes, phrase hyperedges, KNN hyperedges.
pub fn build_report_hypergraph(
    g: &mut Graph,
    store: &ParamStore,
    report: &str,
    text_encoder: &TextEncoder,
    vocab: &TokenVocabulary,
    k: usize,
) -> Result<Hypergraph> {
    let phrases = segment_phrases(report);
    if phrases.is_empty() {
        return Err(Error::Empty("report hypergraph"));
    }
    let ids: Vec<usize> = phrases.iter().flatten().map(|t| vocab.id(t)).collect();
    let features = text_encoder.forward(g, store, &ids)?;
    let lengths: Vec<usize> = phrases.iter().map(Vec::len).collect();
    let (incidence, knn_pairs) = with_knn(g.value(features), phrase_groups(&lengths), k);
    Ok(Hypergraph {
        features,
        incidence,
        knn_pairs,
    })
}

/// Visual hypergraph: patch nodes, grid row/column hyperedges, KNN hyperedges.
pub fn build_visual_hypergraph(
    g: &mut Graph,
    patches: Var,
    grid_rows: usize,
    grid_cols: usize,
    k: usize,
) -> Result<Hypergraph> {
    let n = g.shape(patches).0;
    if n == 0 {
        return Err(Error::Empty("visual hypergraph"));
    }
    if n != grid_rows * grid_cols {
        return Err(Error::shape(
            "build_visual_hypergraph",
            format!("{n} patches for a {grid_rows}x{grid_cols} grid"),
        ));
    }
    let (incidence, knn_pairs) = with_knn(g.value(patches), grid_groups(grid_rows, grid_cols), k);
    Ok(Hypergraph {
        features: patches,
        incidence,
        knn_pairs,
    })
}

/// One convolution layer `relu(P X Θ)`; `P` comes from the hypergraph or,
/// in graph mode, from the symmetric KNN adjacency.
#[derive(Clone, Debug)]
pub struct RelationalConv {
    pub theta: ParamId,
}

impl RelationalConv {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            theta: store.add_xavier(&format!("{name}.theta"), ParamGroup::Hypergraph, dim, dim, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: &Hypergraph,
        mode: RelationMode,
    ) -> Result<HypergraphEmbedding> {
        let propagation = match mode {
            RelationMode::Hypergraph => h.incidence.propagation()?,
            RelationMode::Graph => {
                let mut pairs = h.knn_pairs.clone();
                pairs.extend(h.knn_pairs.iter().map(|&(i, j)| (j, i)));
                normalized_adjacency(h.incidence.num_nodes, &pairs)
            }
        };
        Ok(propagate(g, store, self.theta, propagation, h.features))
    }
}

fn propagate(g: &mut Graph, store: &ParamStore, theta: ParamId, propagation: Matrix, x: Var) -> HypergraphEmbedding {
    let p = g.constant(propagation);
    let theta = g.param(store, theta);
    let h = g.matmul(p, x);
    let h = g.matmul(h, theta);
    let nodes = g.relu(h);
    let pooled = g.mean_rows(nodes);
    HypergraphEmbedding { nodes, pooled }
}

/// Hypergraph convolution `relu(Dv^{-1/2} H W De^{-1} Hᵀ Dv^{-1/2} X Θ)`.
pub fn hgcn_forward(
    g: &mut Graph,
    store: &ParamStore,
    conv: &RelationalConv,
    h: &Hypergraph,
) -> Result<HypergraphEmbedding> {
    conv.forward(g, store, h, RelationMode::Hypergraph)
}

/// Tape `m_node(a, b)`.
pub fn node_match(g: &mut Graph, a: Var, b: Var, mode: NodeMatchMode) -> Var {
    let na = g.l2_normalize_rows(a);
    let nb = g.l2_normalize_rows(b);
    let cos = g.matmul_t(na, nb);
    let clamped = g.relu(cos);
    match mode {
        NodeMatchMode::PerNodeMax => {
            let best = g.row_max(clamped);
            g.sum_all(best)
        }
        NodeMatchMode::DoubleSum => g.sum_all(clamped),
    }
}

pub fn node_match_score(a: &Matrix, b: &Matrix, mode: NodeMatchMode) -> Result<f64> {
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::Empty("node_match_score"));
    }
    if a.cols() != b.cols() {
        return Err(Error::shape("node_match_score", "feature widths differ"));
    }
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let s = node_match(&mut g, va, vb, mode);
    Ok(g.scalar_value(s))
}

fn hinge(g: &mut Graph, margin: f64, positive: Var, negative: Var) -> Var {
    let d = g.sub(negative, positive);
    let d = g.add_const(d, &Matrix::scalar(margin));
    g.relu(d)
}

/// `L_N = [τ - m(N_r, N_ir) + m(N_r⁻, N_ir)]₊ + [τ - m(N_r, N_ir) + m(N_r, N_ir⁻)]₊`
#[allow(clippy::too_many_arguments)]
pub fn node_matching_loss_graph(
    g: &mut Graph,
    report_nodes: Var,
    visual_nodes: Var,
    report_negative: Var,
    visual_negative: Var,
    tau: f64,
    mode: NodeMatchMode,
) -> Var {
    let pos = node_match(g, report_nodes, visual_nodes, mode);
    let neg_r = node_match(g, report_negative, visual_nodes, mode);
    let neg_v = node_match(g, report_nodes, visual_negative, mode);
    let a = hinge(g, tau, pos, neg_r);
    let b = hinge(g, tau, pos, neg_v);
    g.add(a, b)
}

pub fn node_matching_loss(
    report_nodes: &Matrix,
    visual_nodes: &Matrix,
    report_negative: &Matrix,
    visual_negative: &Matrix,
    tau: f64,
    mode: NodeMatchMode,
) -> Result<f64> {
    for m in [report_nodes, visual_nodes, report_negative, visual_negative] {
        if m.rows() == 0 {
            return Err(Error::Empty("node_matching_loss"));
        }
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = [report_nodes, visual_nodes, report_negative, visual_negative]
        .iter()
        .map(|m| g.constant((*m).clone()))
        .collect();
    let l = node_matching_loss_graph(&mut g, vars[0], vars[1], vars[2], vars[3], tau, mode);
    Ok(g.scalar_value(l))
}

/// Index of the pool entry most cosine-similar to `anchor` (ties to the lower index).
pub fn hardest_negative(anchor: &Matrix, pool: &[&Matrix]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, cand) in pool.iter().enumerate() {
        let c = cosine(anchor.data(), cand.data());
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((i, c));
        }
    }
    best.map(|(i, _)| i)
}

fn cos_graph(g: &mut Graph, a: Var, b: Var) -> Var {
    let na = g.l2_normalize_rows(a);
    let nb = g.l2_normalize_rows(b);
    let prod = g.mul(na, nb);
    g.sum_all(prod)
}

/// Chosen hardest negatives (indices into the pools) and the loss node.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingMatch {
    pub loss: Var,
    pub report_negative: usize,
    pub visual_negative: usize,
}

/// `L_S = [γ - cos(F_r, F_ir) + cos(F_r⁻, F_ir)]₊ + [γ - cos(F_r, F_ir) + cos(F_r, F_ir⁻)]₊`
/// with `F_r⁻` the report embedding in `report_pool` closest to `F_ir` and
/// `F_ir⁻` the visual embedding in `visual_pool` closest to `F_r`.
pub fn embedding_matching_loss_graph(
    g: &mut Graph,
    report: Var,
    visual: Var,
    report_pool: &[Var],
    visual_pool: &[Var],
    gamma: f64,
) -> Result<EmbeddingMatch> {
    if report_pool.is_empty() || visual_pool.is_empty() {
        return Err(Error::invalid("embedding matching needs at least one other study in the batch"));
    }
    let visual_value = g.value(visual).clone();
    let report_value = g.value(report).clone();
    let rp: Vec<&Matrix> = report_pool.iter().map(|&v| g.value(v)).collect();
    let report_negative = hardest_negative(&visual_value, &rp).expect("nonempty");
    let vp: Vec<&Matrix> = visual_pool.iter().map(|&v| g.value(v)).collect();
    let visual_negative = hardest_negative(&report_value, &vp).expect("nonempty");
    let pos = cos_graph(g, report, visual);
    let neg_r = cos_graph(g, report_pool[report_negative], visual);
    let neg_v = cos_graph(g, report, visual_pool[visual_negative]);
    let a = hinge(g, gamma, pos, neg_r);
    let b = hinge(g, gamma, pos, neg_v);
    Ok(EmbeddingMatch {
        loss: g.add(a, b),
        report_negative,
        visual_negative,
    })
}

/// Value-level [`embedding_matching_loss_graph`]; returns the loss and the
/// chosen negative indices.
pub fn embedding_matching_loss(
    report: &Matrix,
    visual: &Matrix,
    report_pool: &[Matrix],
    visual_pool: &[Matrix],
    gamma: f64,
) -> Result<(f64, usize, usize)> {
    let mut g = Graph::new();
    let r = g.constant(report.clone());
    let v = g.constant(visual.clone());
    let rp: Vec<Var> = report_pool.iter().map(|m| g.constant(m.clone())).collect();
    let vp: Vec<Var> = visual_pool.iter().map(|m| g.constant(m.clone())).collect();
    let m = embedding_matching_loss_graph(&mut g, r, v, &rp, &vp, gamma)?;
    Ok((g.scalar_value(m.loss), m.report_negative, m.visual_negative))
}

/// Row-concatenation of the kept views' patch features, in view order.
pub fn concat_fine_features_graph(g: &mut Graph, per_view: &[Var], mask: &ViewMask) -> Result<Var> {
    if per_view.len() != mask.len() {
        return Err(Error::shape("concat_fine_features", "one patch set per view is required"));
    }
    let kept: Vec<Var> = mask.kept().map(|i| per_view[i]).collect();
    Ok(g.concat_rows(&kept))
}

pub fn concat_fine_features(per_view: &[Matrix], mask: &ViewMask) -> Result<Matrix> {
    if per_view.len() != mask.len() {
        return Err(Error::shape("concat_fine_features", "one patch set per view is required"));
    }
    let kept: Vec<&Matrix> = mask.kept().map(|i| &per_view[i]).collect();
    Matrix::concat_rows(&kept)
}

/// `L_HFG = Σ_i δ^R_i (L_Ni + L_Si) + L_rd`
pub fn hfg_loss(node_losses: &[f64], embedding_losses: &[f64], mask: &ViewMask, l_rd: f64) -> Result<f64> {
    if node_losses.len() != mask.len() || embedding_losses.len() != mask.len() {
        return Err(Error::shape("hfg_loss", "one loss per view is required"));
    }
    Ok((0..mask.len())
        .map(|i| mask.weight(i) * (node_losses[i] + embedding_losses[i]))
        .sum::<f64>()
        + l_rd)
}

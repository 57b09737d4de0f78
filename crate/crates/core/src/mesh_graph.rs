//! MeSH term graph and its graph-convolution embedding.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::corpus::{TokenVocabulary, NORMAL_MESH};
use crate::encoders::TextEncoder;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct MeshEdge {
    pub src: usize,
    pub dst: usize,
    /// `|f_src - f_dst|`; kept on the graph, not consumed by the convolution.
    pub feature: Matrix,
}

/// Complete graph over a study's MeSH terms. `node_features` lives in the
/// [`Graph`] it was built in.
#[derive(Clone, Debug)]
pub struct MeshGraph {
    pub labels: Vec<String>,
    pub node_features: Var,
    pub edges: Vec<MeshEdge>,
}

impl MeshGraph {
    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    pub fn edge_pairs(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|e| (e.src, e.dst)).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GraphEmbedding {
    /// `n × d_g`
    pub nodes: Var,
    /// `1 × d_g`, mean of node rows.
    pub pooled: Var,
}

/// One node per term (mean of its token encodings), complete directed edges.
/// An empty list becomes the single sentinel node `normal`.
pub fn build_mesh_graph(
    g: &mut Graph,
    store: &ParamStore,
    terms: &[String],
    text_encoder: &TextEncoder,
    vocab: &TokenVocabulary,
) -> Result<MeshGraph> {
    let labels: Vec<String> = if terms.is_empty() {
        alloc::vec![NORMAL_MESH.to_string()]
    } else {
        terms.to_vec()
    };
    let mut rows = Vec::with_capacity(labels.len());
    for term in &labels {
        let ids = vocab.encode(term);
        if ids.is_empty() {
            return Err(Error::invalid(alloc::format!("MeSH term `{term}` has no tokens")));
        }
        let tokens = text_encoder.forward(g, store, &ids)?;
        rows.push(g.mean_rows(tokens));
    }
    let node_features = g.concat_rows(&rows);
    let values = g.value(node_features).clone();
    let n = labels.len();
    let mut edges = Vec::with_capacity(n * n.saturating_sub(1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let feature = Matrix::row_vector(
                    values
                        .row(i)
                        .iter()
                        .zip(values.row(j))
                        .map(|(a, b)| libm::fabs(a - b))
                        .collect(),
                );
                edges.push(MeshEdge { src: i, dst: j, feature });
            }
        }
    }
    Ok(MeshGraph {
        labels,
        node_features,
        edges,
    })
}

/// `D^{-1/2} (A + I) D^{-1/2}` for unit-weight directed `edges` over `n` nodes.
pub fn normalized_adjacency(n: usize, edges: &[(usize, usize)]) -> Matrix {
    let mut a = Matrix::identity(n);
    for &(i, j) in edges {
        a.set(i, j, 1.0);
    }
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j);
            if v != 0.0 {
                a.set(i, j, v / libm::sqrt(deg[i] * deg[j]));
            }
        }
    }
    a
}

/// Two graph-convolution layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct MeshGcn {
    pub layer1: ParamId,
    pub layer2: ParamId,
}

impl MeshGcn {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        Self {
            layer1: store.add_xavier("mesh_gcn.w1", ParamGroup::MeshGcn, dim, dim, rng),
            layer2: store.add_xavier("mesh_gcn.w2", ParamGroup::MeshGcn, dim, dim, rng),
        }
    }

    /// `Â · relu(Â X W₁) · W₂` on explicit node features and edges.
    pub fn forward_on(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        edges: &[(usize, usize)],
    ) -> GraphEmbedding {
        let n = g.shape(features).0;
        let adj = g.constant(normalized_adjacency(n, edges));
        let w1 = g.param(store, self.layer1);
        let w2 = g.param(store, self.layer2);
        let h = g.matmul(adj, features);
        let h = g.matmul(h, w1);
        let h = g.relu(h);
        let h = g.matmul(adj, h);
        let nodes = g.matmul(h, w2);
        let pooled = g.mean_rows(nodes);
        GraphEmbedding { nodes, pooled }
    }
}

pub fn gcn_forward(g: &mut Graph, store: &ParamStore, gcn: &MeshGcn, graph: &MeshGraph) -> GraphEmbedding {
    gcn.forward_on(g, store, graph.node_features, &graph.edge_pairs())
}

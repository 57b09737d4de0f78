//! Trainable text, whole-image, and patch encoders.
//!
//! * text: embedding table followed by one self-attention block;
//! * coarse image: two strided convolutions, global average pool, linear;
//! * patches: linear patch projection, learned positions, one self-attention block.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::corpus::Image;
use crate::error::{Error, Result};
use crate::nn::{Linear, SelfAttentionBlock};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct TextTokenEmbeddings {
    /// `T × d_t`
    pub vectors: Matrix,
    pub token_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoarseVisualFeature {
    /// `1 × d_v`
    pub vector: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureSet {
    /// `P × d_v`, patches in row-major grid order.
    pub features: Matrix,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl PatchFeatureSet {
    pub fn num_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub block: SelfAttentionBlock,
    pub vocab_size: usize,
    pub dim: usize,
}

impl TextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        let group = ParamGroup::TextEncoder;
        Self {
            embedding: store.add_uniform("text.embedding", group, vocab_size, dim, 0.5, rng),
            block: SelfAttentionBlock::new(store, "text.block", group, dim, rng),
            vocab_size,
            dim,
        }
    }

    /// `T × d` contextual token vectors.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Empty("text encoder input"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} out of vocabulary")));
        }
        let table = g.param(store, self.embedding);
        let x = g.select_rows(table, tokens);
        Ok(self.block.forward(g, store, x))
    }
}

pub fn encode_text_tokens(
    encoder: &TextEncoder,
    store: &ParamStore,
    tokens: &[usize],
) -> Result<TextTokenEmbeddings> {
    let mut g = Graph::new();
    let v = encoder.forward(&mut g, store, tokens)?;
    Ok(TextTokenEmbeddings {
        vectors: g.value(v).clone(),
        token_ids: tokens.to_vec(),
    })
}

#[derive(Clone, Debug)]
pub struct CoarseImageEncoder {
    pub conv1: Linear,
    pub conv2: Linear,
    pub project: Linear,
    pub image_size: usize,
    channels: (usize, usize),
}

/// First convolution maps the image onto a 16×16 grid; the second halves it.
const CONV1_GRID: usize = 16;

impl CoarseImageEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        image_size: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if image_size < CONV1_GRID || image_size % CONV1_GRID != 0 {
            return Err(Error::invalid(format!(
                "image size {image_size} must be a multiple of {CONV1_GRID}"
            )));
        }
        let k1 = image_size / CONV1_GRID;
        let (c1, c2) = (16, 32);
        let group = ParamGroup::CoarseEncoder;
        Ok(Self {
            conv1: Linear::new(store, "coarse.conv1", group, k1 * k1, c1, true, rng),
            conv2: Linear::new(store, "coarse.conv2", group, 4 * c1, c2, true, rng),
            project: Linear::new(store, "coarse.proj", group, c2, dim, true, rng),
            image_size,
            channels: (c1, c2),
        })
    }

    fn check(&self, image: &Image) -> Result<()> {
        if image.side() != self.image_size {
            return Err(Error::shape(
                "coarse image encoder",
                format!("expected side {}, got {}", self.image_size, image.side()),
            ));
        }
        Ok(())
    }

    /// Pre-activation output of the first convolution (`256 × c1`).
    pub fn conv1_preactivation(&self, g: &mut Graph, store: &ParamStore, image: &Image) -> Result<Var> {
        self.check(image)?;
        let k1 = self.image_size / CONV1_GRID;
        let cols = g.constant(im2col(image.pixels(), k1));
        Ok(self.conv1.forward(g, store, cols))
    }

    /// `1 × d` whole-image feature.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: &Image) -> Result<Var> {
        let h1 = self.conv1_preactivation(g, store, image)?;
        let h1 = g.relu(h1);
        let c1 = self.channels.0;
        let out_grid = CONV1_GRID / 2;
        let mut index = Vec::with_capacity(out_grid * out_grid * 4 * c1);
        for r in 0..out_grid {
            for c in 0..out_grid {
                for dr in 0..2 {
                    for dc in 0..2 {
                        let src_row = (2 * r + dr) * CONV1_GRID + (2 * c + dc);
                        index.extend((0..c1).map(|ch| src_row * c1 + ch));
                    }
                }
            }
        }
        let cols2 = g.gather(h1, index, out_grid * out_grid, 4 * c1);
        let h2 = self.conv2.forward(g, store, cols2);
        let h2 = g.relu(h2);
        let pooled = g.mean_rows(h2);
        Ok(self.project.forward(g, store, pooled))
    }
}

pub fn encode_image_coarse(
    encoder: &CoarseImageEncoder,
    store: &ParamStore,
    image: &Image,
) -> Result<CoarseVisualFeature> {
    let mut g = Graph::new();
    let v = encoder.forward(&mut g, store, image)?;
    Ok(CoarseVisualFeature {
        vector: g.value(v).clone(),
    })
}

/// Non-overlapping `k × k` blocks of `pixels` as rows, in row-major block order.
pub fn im2col(pixels: &Matrix, k: usize) -> Matrix {
    let grid = pixels.rows() / k;
    let mut out = Matrix::zeros(grid * grid, k * k);
    for br in 0..grid {
        for bc in 0..grid {
            let row = out.row_mut(br * grid + bc);
            for dr in 0..k {
                for dc in 0..k {
                    row[dr * k + dc] = pixels.get(br * k + dr, bc * k + dc);
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct PatchEncoder {
    pub project: Linear,
    pub positions: ParamId,
    pub block: SelfAttentionBlock,
    pub image_size: usize,
    pub patch_size: usize,
    /// Positional vectors are added only when set.
    pub use_positions: bool,
}

impl PatchEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        image_size: usize,
        patch_size: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if patch_size == 0 || image_size % patch_size != 0 {
            return Err(Error::invalid(format!(
                "patch size {patch_size} does not divide image size {image_size}"
            )));
        }
        let grid = image_size / patch_size;
        let group = ParamGroup::PatchEncoder;
        Ok(Self {
            project: Linear::new(store, "patch.proj", group, patch_size * patch_size, dim, true, rng),
            positions: store.add_uniform("patch.pos", group, grid * grid, dim, 0.1, rng),
            block: SelfAttentionBlock::new(store, "patch.block", group, dim, rng),
            image_size,
            patch_size,
            use_positions: true,
        })
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// `P × d` patch features.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: &Image) -> Result<Var> {
        if image.side() % self.patch_size != 0 {
            return Err(Error::invalid(format!(
                "patch size {} does not divide image side {}",
                self.patch_size,
                image.side()
            )));
        }
        if image.side() != self.image_size {
            return Err(Error::shape(
                "patch encoder",
                format!("expected side {}, got {}", self.image_size, image.side()),
            ));
        }
        let patches = g.constant(im2col(image.pixels(), self.patch_size));
        let mut x = self.project.forward(g, store, patches);
        if self.use_positions {
            let pos = g.param(store, self.positions);
            x = g.add(x, pos);
        }
        Ok(self.block.forward(g, store, x))
    }
}

pub fn encode_image_patches(
    encoder: &PatchEncoder,
    store: &ParamStore,
    image: &Image,
) -> Result<PatchFeatureSet> {
    let mut g = Graph::new();
    let v = encoder.forward(&mut g, store, image)?;
    let grid = encoder.grid();
    Ok(PatchFeatureSet {
        features: g.value(v).clone(),
        grid_rows: grid,
        grid_cols: grid,
    })
}

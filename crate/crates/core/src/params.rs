//! Named, grouped parameter storage and the Adam optimizer.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter groups, one per trainable component. Ablation switches and the
/// GAN alternation select which groups an optimizer step may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    TextEncoder,
    CoarseEncoder,
    PatchEncoder,
    MeshGcn,
    Generator,
    Discriminator,
    Fusion,
    MeshDecoder,
    Hypergraph,
    ReportDecoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 10] = [
        ParamGroup::TextEncoder,
        ParamGroup::CoarseEncoder,
        ParamGroup::PatchEncoder,
        ParamGroup::MeshGcn,
        ParamGroup::Generator,
        ParamGroup::Discriminator,
        ParamGroup::Fusion,
        ParamGroup::MeshDecoder,
        ParamGroup::Hypergraph,
        ParamGroup::ReportDecoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::TextEncoder => "text_encoder",
            ParamGroup::CoarseEncoder => "coarse_encoder",
            ParamGroup::PatchEncoder => "patch_encoder",
            ParamGroup::MeshGcn => "mesh_gcn",
            ParamGroup::Generator => "generator",
            ParamGroup::Discriminator => "discriminator",
            ParamGroup::Fusion => "fusion",
            ParamGroup::MeshDecoder => "mesh_decoder",
            ParamGroup::Hypergraph => "hypergraph",
            ParamGroup::ReportDecoder => "report_decoder",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }

    pub fn is_encoder(self) -> bool {
        matches!(
            self,
            ParamGroup::TextEncoder | ParamGroup::CoarseEncoder | ParamGroup::PatchEncoder
        )
    }

    pub fn is_gan(self) -> bool {
        matches!(self, ParamGroup::Generator | ParamGroup::Discriminator)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Matrix,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: Matrix) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            group,
            value,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Adds a `rows × cols` matrix drawn uniformly from ±sqrt(6 / (rows + cols)).
    pub fn add_xavier<R: Rng>(
        &mut self,
        name: &str,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = libm::sqrt(6.0 / (rows + cols) as f64);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.add(name, group, Matrix::new(rows, cols, data).expect("shape"))
    }

    /// Adds a matrix with entries from ±`scale`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        group: ParamGroup,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect();
        self.add(name, group, Matrix::new(rows, cols, data).expect("shape"))
    }

    pub fn add_zeros(&mut self, name: &str, group: ParamGroup, rows: usize, cols: usize) -> ParamId {
        self.add(name, group, Matrix::zeros(rows, cols))
    }

    pub fn add_ones(&mut self, name: &str, group: ParamGroup, rows: usize, cols: usize) -> ParamId {
        self.add(name, group, Matrix::filled(rows, cols, 1.0))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn group_ids(&self, group: ParamGroup) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(move |id| self.entries[id.0].group == group)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.data().len()).sum()
    }

    /// Overwrites the value of `name`, checking that the shape matches.
    pub fn assign(&mut self, name: &str, value: Matrix) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::invalid(alloc::format!("unknown parameter {name}")))?;
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::assign",
                alloc::format!(
                    "{name}: stored {:?}, given {:?}",
                    slot.shape(),
                    value.shape()
                ),
            ));
        }
        *slot = value;
        Ok(())
    }

    /// Groups whose values differ between `self` and `other` (same layout assumed).
    pub fn changed_groups(&self, other: &ParamStore) -> Vec<ParamGroup> {
        let mut out: Vec<ParamGroup> = Vec::new();
        for (a, b) in self.entries.iter().zip(&other.entries) {
            let differs = a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .any(|(x, y)| x.to_bits() != y.to_bits());
            if differs && !out.contains(&a.group) {
                out.push(a.group);
            }
        }
        out.sort();
        out
    }
}

/// Per-parameter Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub m: Matrix,
    pub v: Matrix,
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let slots = store
            .entries()
            .iter()
            .map(|e| AdamSlot {
                m: Matrix::zeros(e.value.rows(), e.value.cols()),
                v: Matrix::zeros(e.value.rows(), e.value.cols()),
                t: 0,
            })
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots,
        }
    }

    /// Applies one update to every parameter that has a gradient and whose
    /// group passes `allow`.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        allow: impl Fn(ParamGroup) -> bool,
    ) {
        for id in store.ids().collect::<Vec<_>>() {
            if !allow(store.entry(id).group) {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            let slot = &mut self.slots[id.0];
            slot.t += 1;
            let t = slot.t as i32;
            let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
            let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
            let value = store.get_mut(id);
            let (b1, b2) = (self.beta1, self.beta2);
            for (((p, gi), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(slot.m.data_mut())
                .zip(slot.v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
        }
    }
}

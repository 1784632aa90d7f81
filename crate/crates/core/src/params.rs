//! Flat parameter storage. Every network keeps its learnable values in one
//! contiguous vector; layers address their tensors through [`Slot`]s. The
//! same layout is used for gradients and optimizer moments, which keeps
//! checkpointing and finite-difference auditing trivial.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    #[inline]
    pub fn of<'a>(&self, v: &'a [f64]) -> &'a [f64] {
        &v[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn of_mut<'a>(&self, v: &'a mut [f64]) -> &'a mut [f64] {
        &mut v[self.offset..self.offset + self.len]
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    pub values: Vec<f64>,
    pub entries: Vec<ParamEntry>,
}

impl Params {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    pub fn slot(&self, name: &str) -> Option<Slot> {
        self.entries.iter().find(|e| e.name == name).map(|e| Slot {
            offset: e.offset,
            len: e.shape.iter().product(),
        })
    }

    /// Layout equality: same names, shapes and offsets.
    pub fn same_layout(&self, other: &Params) -> bool {
        self.entries == other.entries && self.values.len() == other.values.len()
    }
}

/// Allocates named tensors in a [`Params`] block.
pub struct ParamBuilder<'r> {
    params: Params,
    rng: &'r mut Rng,
    prefix: String,
}

impl<'r> ParamBuilder<'r> {
    pub fn new(rng: &'r mut Rng) -> Self {
        Self {
            params: Params::default(),
            rng,
            prefix: String::new(),
        }
    }

    pub fn set_prefix(&mut self, prefix: &str) {
        self.prefix = prefix.to_string();
    }

    fn alloc(&mut self, name: &str, shape: &[usize]) -> Slot {
        let len: usize = shape.iter().product();
        let offset = self.params.values.len();
        self.params.entries.push(ParamEntry {
            name: format!("{}{}", self.prefix, name),
            shape: shape.to_vec(),
            offset,
        });
        self.params.values.resize(offset + len, 0.0);
        Slot { offset, len }
    }

    /// Tensor filled with N(0, std²) draws.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Slot {
        let slot = self.alloc(name, shape);
        for v in slot.of_mut(&mut self.params.values) {
            let z: f64 = StandardNormal.sample(self.rng);
            *v = z * std;
        }
        slot
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Slot {
        let slot = self.alloc(name, shape);
        slot.of_mut(&mut self.params.values).fill(value);
        slot
    }

    pub fn rng(&mut self) -> &mut Rng {
        self.rng
    }

    pub fn finish(self) -> Params {
        self.params
    }
}

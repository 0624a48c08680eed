//! Named parameter storage shared by every learnable module.
//!
//! Values are held as `f64` for computation but are kept exactly
//! representable in `f32` (see [`ParamStore::round_to_f32`]), which makes
//! the `f32` checkpoint payload lossless.

use ndarray::Array2;

use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Non-differentiable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Matrix,
    kind: ParamKind,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(
            self.id_of(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let value = value.mapv(|x| x as f32 as f64);
        self.entries.push(Entry { name, value, kind });
        ParamId(self.entries.len() - 1)
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

    /// Replace a value, rounding it to `f32` precision.
    pub fn set(&mut self, id: ParamId, value: Matrix) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.dim() != value.dim() {
            return Err(Error::ShapeMismatch(format!(
                "{}: expected {:?}, got {:?}",
                e.name,
                e.value.dim(),
                value.dim()
            )));
        }
        e.value = value.mapv(|x| x as f32 as f64);
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids()
            .filter(|id| self.entries[id.0].kind == ParamKind::Trainable)
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).len()).sum()
    }

    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            e.value.mapv_inplace(|x| x as f32 as f64);
        }
    }

    /// True when both stores hold the same names and bitwise-equal values.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.value.dim() == b.value.dim()
                    && a.value
                        .iter()
                        .zip(b.value.iter())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Copy values from `other` for every name present in both stores.
    /// Returns how many entries were copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> Result<usize> {
        let mut n = 0;
        for e in &other.entries {
            if let Some(id) = self.id_of(&e.name) {
                self.set(id, e.value.clone())?;
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Seeded parameter initializer.
pub struct Initializer {
    stream: Stream,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            stream: Stream::new(seed, "init"),
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(&mut self, rows: usize, cols: usize, fan_in: usize) -> Matrix {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Array2::from_shape_fn((rows, cols), |_| self.stream.uniform_range(-bound, bound))
    }
}

//! Named `f32` parameter storage and binding onto a tape.

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;

use super::tape::{Tape, Var};
use super::Real;
use crate::error::{Error, Result};

/// Host tensor: shape plus row-major `f32` data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// (rows, cols) view; rank-1 tensors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [m] => (1, *m),
            [n, rest @ ..] => (*n, rest.iter().product()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameters. Registration order is the
/// binding order and the checkpoint order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.by_name.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// `U(-bound, bound)` with `bound = 1/√fan_in`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        self.add(
            name,
            Tensor {
                shape: vec![rows, cols],
                data,
            },
        )
    }

    pub fn add_const(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f32) -> ParamId {
        self.add(
            name,
            Tensor {
                shape: vec![rows, cols],
                data: vec![v; rows * cols],
            },
        )
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replaces values from a name → tensor list; every parameter must be
    /// present with a matching shape. Extra entries are ignored.
    pub fn load_from(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let map: HashMap<&str, &Tensor> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let t = map
                .get(name.as_str())
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            if t.shape != slot.shape {
                return Err(Error::ShapeMismatch {
                    op: "load",
                    detail: format!("{name}: {:?} vs {:?}", t.shape, slot.shape),
                });
            }
            slot.data.clone_from(&t.data);
        }
        Ok(())
    }

    /// Puts every parameter on `tape` as a leaf, cast to the tape precision.
    pub fn bind<S: Real>(&self, tape: &mut Tape<S>) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                let (r, c) = t.dims2();
                tape.leaf(r, c, t.data.iter().map(|&x| S::from_f64(x as f64)).collect())
            })
            .collect();
        Bound { vars }
    }

    /// Like [`bind`](Self::bind) but with explicit values (used for
    /// finite-difference perturbations at `f64`).
    pub fn bind_values<S: Real>(&self, tape: &mut Tape<S>, values: &[Vec<S>]) -> Bound {
        assert_eq!(values.len(), self.tensors.len());
        let vars = self
            .tensors
            .iter()
            .zip(values)
            .map(|(t, v)| {
                let (r, c) = t.dims2();
                tape.leaf(r, c, v.clone())
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles of bound parameters, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps existing leaves, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

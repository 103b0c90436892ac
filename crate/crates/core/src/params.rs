//! Named parameter collections and their flat binary serialization.
//!
//! Wire layout: `u64` LE header length, a JSON header listing
//! `{name, shape, offset}` per tensor (offset counted in f64 elements), then
//! every value as little-endian f64 in declaration order.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("duplicate parameter `{0}`")]
    Duplicate(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("malformed parameter blob: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Ordered, named tensors belonging to one network (or a union of networks).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), ParamError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn schema(&self) -> Vec<TensorEntry> {
        let mut offset = 0;
        self.iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel();
                e
            })
            .collect()
    }

    pub fn same_schema(&self, other: &ParameterSet) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Appends every tensor of `other` (names must not collide).
    pub fn extend(&mut self, other: &ParameterSet) -> Result<(), ParamError> {
        for (n, t) in other.iter() {
            self.insert(n, t.clone())?;
        }
        Ok(())
    }

    /// Subset of tensors whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParameterSet {
        let mut out = ParameterSet::new();
        for (n, t) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.insert(n, t.clone()).expect("names are unique");
        }
        out
    }

    /// Overwrites values of same-named tensors from `src`.
    pub fn assign_from(&mut self, src: &ParameterSet) -> Result<(), ParamError> {
        for (n, t) in src.iter() {
            let dst = self.get_mut(n).ok_or_else(|| ParamError::Unknown(n.to_string()))?;
            if dst.shape() != t.shape() {
                return Err(ParamError::Schema(format!(
                    "`{n}`: {:?} vs {:?}",
                    dst.shape(),
                    t.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Records every tensor as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t)).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every tensor as a constant (no gradient tracking).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t)).collect(),
            index: self.index.clone(),
        }
    }

    /// Adds the gradients held on `tape` for `bound` into each tensor's
    /// `grad` buffer (allocating zeros for parameters that received none).
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (t, v) in self.tensors.iter_mut().zip(&bound.vars) {
            let n = t.numel();
            let slot = t.grad.get_or_insert_with(|| vec![0.0; n]);
            if let Some(g) = tape.grad(*v) {
                slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.schema()).expect("schema serializes");
        let mut out = Vec::with_capacity(8 + header.len() + 8 * self.numel());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ParamError> {
        let bad = |m: &str| ParamError::Malformed(m.to_string());
        let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("truncated length"))?.try_into().unwrap();
        let hlen = u64::from_le_bytes(len_bytes) as usize;
        let header = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let schema: Vec<TensorEntry> =
            serde_json::from_slice(header).map_err(|e| ParamError::Malformed(e.to_string()))?;
        let body = &bytes[8 + hlen..];
        let total: usize = schema.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if body.len() != total * 8 {
            return Err(ParamError::Malformed(format!(
                "body has {} bytes, schema needs {}",
                body.len(),
                total * 8
            )));
        }
        let mut set = ParameterSet::new();
        for e in schema {
            let n: usize = e.shape.iter().product();
            let start = e.offset * 8;
            let raw = body.get(start..start + n * 8).ok_or_else(|| bad("offset out of range"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|err| ParamError::Malformed(err.to_string()))?;
            set.insert(e.name, t)?;
        }
        Ok(set)
    }
}

/// Tape handles for a bound [`ParameterSet`], looked up by parameter name.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var, ParamError> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

//! Named parameter storage with flat backing data.

use super::Mat;
use crate::error::{Error, Result};
use ndarray::ArrayView2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub type ParamId = usize;

/// Gradient buffer aligned with `ParamSet::data`.
pub type GradBuf = Vec<f64>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, ParamId>,
    pub data: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_with(&mut self, name: &str, rows: usize, cols: usize, mut init: impl FnMut() -> f64) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate param {name}");
        let offset = self.data.len();
        self.data.extend((0..rows * cols).map(|_| init()));
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            rows,
            cols,
            offset,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add_with(name, rows, cols, || 0.0)
    }

    pub fn add_const(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.add_with(name, rows, cols, || value)
    }

    /// Glorot-uniform init, with an output-scale knob for policy heads.
    pub fn add_glorot(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let a = scale * (6.0 / (rows + cols) as f64).sqrt();
        self.add_with(name, rows, cols, || rng.gen_range(-a..a))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Shape(format!("unknown parameter `{name}`")))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    pub fn view(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let e = &self.entries[id];
        ArrayView2::from_shape((e.rows, e.cols), &self.data[e.offset..e.offset + e.rows * e.cols])
            .expect("param view")
    }

    pub fn slice(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id];
        &self.data[e.offset..e.offset + e.rows * e.cols]
    }

    pub fn slice_mut(&mut self, id: ParamId) -> &mut [f64] {
        let e = self.entries[id].clone();
        &mut self.data[e.offset..e.offset + e.rows * e.cols]
    }

    pub fn to_mat(&self, id: ParamId) -> Mat {
        self.view(id).to_owned()
    }

    pub fn zero_grad(&self) -> GradBuf {
        vec![0.0; self.data.len()]
    }

    /// Clone a subset of entries (by name prefix) into a new ParamSet.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for e in &self.entries {
            if e.name.starts_with(prefix) {
                let src = &self.data[e.offset..e.offset + e.rows * e.cols];
                let mut it = src.iter().copied();
                out.add_with(&e.name, e.rows, e.cols, || it.next().unwrap());
            }
        }
        out
    }

    /// Copy values for entries that exist in `other` (matched by name).
    pub fn copy_matching_from(&mut self, other: &ParamSet) -> Result<()> {
        for e in other.entries.clone() {
            let id = self.id(&e.name)?;
            let dst_entry = self.entries[id].clone();
            if dst_entry.rows != e.rows || dst_entry.cols != e.cols {
                return Err(Error::Shape(format!(
                    "parameter `{}` shape {}x{} vs {}x{}",
                    e.name, dst_entry.rows, dst_entry.cols, e.rows, e.cols
                )));
            }
            let src = other.data[e.offset..e.offset + e.rows * e.cols].to_vec();
            self.slice_mut(id).copy_from_slice(&src);
        }
        Ok(())
    }
}

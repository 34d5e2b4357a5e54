//! Named parameter storage with a flat backing buffer.
//!
//! Every network owns one [`ParameterSet`]. Matrices are stored input-major:
//! a `(rows, cols)` weight maps a `rows`-long input to a `cols`-long output and
//! element `(i, j)` lives at `i * cols + j`. The flat view is what the optimizer
//! and the checkpoint format see.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            kind: ParamKind::Weight,
        }
    }

    pub fn bias(name: impl Into<String>, len: usize) -> Self {
        Self {
            name: name.into(),
            rows: 1,
            cols: len,
            kind: ParamKind::Bias,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered list of named tensors and their offsets in the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<ParamSpec>,
    offsets: Vec<usize>,
    len: usize,
}

impl Layout {
    pub fn new(entries: Vec<ParamSpec>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("parameter layout is empty".into()));
        }
        let mut offsets = Vec::with_capacity(entries.len());
        let mut len = 0;
        for spec in &entries {
            if spec.is_empty() {
                return Err(Error::Config(format!(
                    "parameter `{}` has a zero-sized dimension ({}x{})",
                    spec.name, spec.rows, spec.cols
                )));
            }
            offsets.push(len);
            len += spec.len();
        }
        Ok(Self {
            entries,
            offsets,
            len,
        })
    }

    pub fn entries(&self) -> &[ParamSpec] {
        &self.entries
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn range(&self, index: usize) -> std::ops::Range<usize> {
        let start = self.offsets[index];
        start..start + self.entries[index].len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }
}

/// Weights and biases of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    layout: Layout,
    data: Vec<f64>,
}

impl ParameterSet {
    pub fn zeros(layout: Layout) -> Self {
        let data = vec![0.0; layout.len()];
        Self { layout, data }
    }

    /// Weights uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    pub fn init<R: Rng + ?Sized>(layout: Layout, rng: &mut R) -> Self {
        let mut params = Self::zeros(layout);
        for index in 0..params.layout.entries.len() {
            let spec = &params.layout.entries[index];
            if spec.kind == ParamKind::Bias {
                continue;
            }
            let bound = 1.0 / (spec.rows as f64).sqrt();
            let range = params.layout.range(index);
            for w in &mut params.data[range] {
                // (-bound, bound): resample the closed lower endpoint.
                let mut v = rng.random_range(-bound..bound);
                while v == -bound {
                    v = rng.random_range(-bound..bound);
                }
                *w = v;
            }
        }
        params
    }

    pub fn from_flat(layout: Layout, data: Vec<f64>) -> Result<Self> {
        crate::error::check_len("flat parameter vector", layout.len(), data.len())?;
        Ok(Self { layout, data })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tensor(&self, index: usize) -> &[f64] {
        &self.data[self.layout.range(index)]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut [f64] {
        let range = self.layout.range(index);
        &mut self.data[range]
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.layout.index_of(name).map(|i| self.tensor(i))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let index = self.layout.index_of(name)?;
        Some(self.tensor_mut(index))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_checkpoint(&self) -> ParamCheckpoint {
        ParamCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            layout: self.layout.entries.clone(),
            data: self.data.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: ParamCheckpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::format(
                "parameter checkpoint",
                format!("unknown format tag `{}`", ckpt.format),
            ));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                "parameter checkpoint",
                format!("unsupported version {}", ckpt.version),
            ));
        }
        let layout = Layout::new(ckpt.layout)?;
        Self::from_flat(layout, ckpt.data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())
            .map_err(|e| Error::format("parameter checkpoint", e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: ParamCheckpoint = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("checkpoint {}", path.display()), e))?;
        Self::from_checkpoint(ckpt)
    }
}

/// Accumulated gradients, aligned with a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    layout: Layout,
    data: Vec<f64>,
}

impl GradientBuffer {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Self {
            layout: params.layout.clone(),
            data: vec![0.0; params.data.len()],
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tensor(&self, index: usize) -> &[f64] {
        &self.data[self.layout.range(index)]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut [f64] {
        let range = self.layout.range(index);
        &mut self.data[range]
    }

    pub fn reset(&mut self) {
        self.data.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn add_assign(&mut self, other: &GradientBuffer) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::Usage("gradient layouts differ".into()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rescales to at most `max_norm`; returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub const CHECKPOINT_FORMAT: &str = "hsp-params";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk parameter file: JSON with the layout and the flat data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCheckpoint {
    pub format: String,
    pub version: u32,
    pub layout: Vec<ParamSpec>,
    pub data: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout() -> Layout {
        Layout::new(vec![
            ParamSpec::weight("w0", 2, 3),
            ParamSpec::bias("b0", 3),
            ParamSpec::weight("w1", 3, 1),
        ])
        .unwrap()
    }

    #[test]
    fn weights_within_fan_in_bound() {
        let layout = Layout::new(vec![ParamSpec::weight("w", 2, 3)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ParameterSet::init(layout, &mut rng);
        let bound = 1.0 / 2f64.sqrt();
        assert_eq!(p.flat().len(), 6);
        assert!(p.flat().iter().all(|w| w.abs() < bound));
    }

    #[test]
    fn biases_start_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ParameterSet::init(layout(), &mut rng);
        assert!(p.get("b0").unwrap().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = ParameterSet::init(layout(), &mut ChaCha8Rng::seed_from_u64(11));
        let b = ParameterSet::init(layout(), &mut ChaCha8Rng::seed_from_u64(11));
        let bits = |p: &ParameterSet| p.flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn zero_sized_layer_is_config_error() {
        let err = Layout::new(vec![ParamSpec::weight("w", 0, 4)]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(matches!(Layout::new(vec![]), Err(Error::Config(_))));
    }

    #[test]
    fn flat_view_matches_named_view() {
        let p = ParameterSet::init(layout(), &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(p.flat().len(), 6 + 3 + 3);
        let joined: Vec<f64> = (0..3).flat_map(|i| p.tensor(i).to_vec()).collect();
        assert_eq!(joined, p.flat());
        let back = ParameterSet::from_flat(layout(), p.flat().to_vec()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let p = ParameterSet::init(layout(), &mut ChaCha8Rng::seed_from_u64(9));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        p.save(&path).unwrap();
        let q = ParameterSet::load(&path).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn checkpoint_rejects_wrong_version() {
        let p = ParameterSet::zeros(layout());
        let mut ckpt = p.to_checkpoint();
        ckpt.version = 99;
        assert!(ParameterSet::from_checkpoint(ckpt).is_err());
    }

    #[test]
    fn clip_norm_rescales() {
        let p = ParameterSet::zeros(layout());
        let mut g = GradientBuffer::zeros_like(&p);
        g.flat_mut()[0] = 3.0;
        g.flat_mut()[1] = 4.0;
        assert_eq!(g.clip_norm(1.0), 5.0);
        assert!((g.norm() - 1.0).abs() < 1e-12);
    }
}

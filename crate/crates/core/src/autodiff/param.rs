use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: [usize; 2],
    data: String,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument {
                arg: "name",
                reason: format!("parameter `{name}` already exists"),
            });
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    /// Replaces a parameter's values; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!("{:?}", slot.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// `prefix.weight` (`c_in×c_out`) and `prefix.bias` (`1×c_out`), both
    /// uniform in `±1/√c_in`.
    pub fn init_linear<R: Rng>(&mut self, prefix: &str, c_in: usize, c_out: usize, rng: &mut R) -> Result<()> {
        let a = 1.0 / (c_in.max(1) as f64).sqrt();
        let mut sample = |n: usize| (0..n).map(|_| rng.gen_range(-a..a)).collect::<Vec<_>>();
        let w = Tensor::from_vec(c_in, c_out, sample(c_in * c_out))?;
        let b = Tensor::from_vec(1, c_out, sample(c_out))?;
        self.insert(format!("{prefix}.weight"), w)?;
        self.insert(format!("{prefix}.bias"), b)
    }

    /// `prefix.gain` = 1 and `prefix.shift` = 0.
    pub fn init_norm(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.insert(format!("{prefix}.gain"), Tensor::filled(1, c, 1.0))?;
        self.insert(format!("{prefix}.shift"), Tensor::zeros(1, c))
    }

    /// Puts every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Puts every parameter on the tape as a constant, for gradient-free
    /// evaluation.
    pub fn bind_constant(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Adds `delta` to one scalar entry.
    pub fn perturb(&mut self, name: &str, index: usize, delta: f64) -> Result<()> {
        let t = self.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let len = t.len();
        let slot = t.data_mut().get_mut(index).ok_or(Error::LabelOutOfRange {
            op: "ParamStore::perturb",
            label: index,
            count: len,
        })?;
        *slot += delta;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let stored: BTreeMap<&str, StoredTensor> = self
            .entries
            .iter()
            .map(|(k, t)| {
                let bytes: Vec<u8> = t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
                (
                    k.as_str(),
                    StoredTensor {
                        shape: [t.rows(), t.cols()],
                        data: BASE64.encode(bytes),
                    },
                )
            })
            .collect();
        Ok(serde_json::to_string_pretty(&stored)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stored: BTreeMap<String, StoredTensor> = serde_json::from_str(text)?;
        let mut entries = BTreeMap::new();
        for (name, s) in stored {
            let bytes = BASE64.decode(&s.data).map_err(|e| Error::Format {
                offset: 0,
                reason: format!("parameter `{name}`: {e}"),
            })?;
            let [rows, cols] = s.shape;
            if bytes.len() != rows * cols * 4 {
                return Err(Error::Format {
                    offset: bytes.len(),
                    reason: format!("parameter `{name}`: payload does not match shape {rows}x{cols}"),
                });
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            entries.insert(name, Tensor::from_vec(rows, cols, data)?);
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Parameter names mapped to their leaves on one tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds names to existing tape nodes.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn linear(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let w = self.get(&format!("{prefix}.weight"))?;
        let b = self.get(&format!("{prefix}.bias"))?;
        tape.linear(x, w, b)
    }

    pub fn norm(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let g = self.get(&format!("{prefix}.gain"))?;
        let s = self.get(&format!("{prefix}.shift"))?;
        tape.layer_norm(x, g, s, NORM_EPS)
    }

    /// `elu(norm(linear(x)))`.
    pub fn linear_norm_elu(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(tape, prefix, x)?;
        let h = self.norm(tape, &format!("{prefix}.norm"), h)?;
        Ok(tape.elu(h))
    }

    /// Gradient for every bound parameter; zeros where none flowed.
    pub fn grads(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get_or_zeros(tape, v)))
            .collect()
    }
}

//! Trainable parameters and the layers the model language can reference:
//! dense stacks and a GRU cell.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{Activation, Architecture, LayerDef, NNDef};
use crate::tensor::{NodeId, Tape, Tensor};

/// Named trainable tensors keyed `nn_name/layer_i/weight_kind`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter '{name}'")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn extend(&mut self, other: ParameterStore) -> Result<()> {
        for (k, v) in other.params {
            self.insert(k, v)?;
        }
        Ok(())
    }

    /// Records every parameter as a leaf of `tape`.
    pub fn attach(&self, tape: &mut Tape) -> ParamHandles {
        ParamHandles(self.params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect())
    }

    pub fn to_json(&self) -> String {
        let stored: BTreeMap<&String, StoredTensor> = self
            .params
            .iter()
            .map(|(k, t)| {
                (k, StoredTensor { shape: t.shape().to_vec(), values: t.data().to_vec() })
            })
            .collect();
        serde_json::to_string(&stored).expect("parameters serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stored: BTreeMap<String, StoredTensor> =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut store = Self::new();
        for (k, s) in stored {
            let t = Tensor::new(s.shape, s.values).map_err(|e| Error::Checkpoint(format!("{k}: {e}")))?;
            store.insert(k, t)?;
        }
        Ok(store)
    }

    /// Writes the checkpoint through a temporary file in the same directory
    /// followed by a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(self.to_json().as_bytes()).map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Tape nodes of attached parameters.
#[derive(Debug, Clone)]
pub struct ParamHandles(BTreeMap<String, NodeId>);

impl FromIterator<(String, NodeId)> for ParamHandles {
    fn from_iter<I: IntoIterator<Item = (String, NodeId)>>(iter: I) -> Self {
        ParamHandles(iter.into_iter().collect())
    }
}

impl ParamHandles {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.0.iter()
    }
}

pub fn param_name(nn: &str, layer: usize, kind: &str) -> String {
    format!("{nn}/layer_{layer}/{kind}")
}

const GRU_WEIGHTS: [&str; 6] = ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h"];
const GRU_BIASES: [&str; 3] = ["b_z", "b_r", "b_h"];

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot bound");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape")
}

/// Glorot-uniform weights and zero biases for every layer of `nn`.
pub fn build_parameters(nn: &NNDef, input_dim: usize, rng_seed: u64) -> ParameterStore {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut store = ParameterStore::new();
    let mut fan_in = input_dim;
    for (i, layer) in nn.layers.iter().enumerate() {
        match *layer {
            LayerDef::Dense { units, .. } => {
                let w = glorot(&mut rng, fan_in, units);
                store.params.insert(param_name(&nn.name, i, "kernel"), w);
                store.params.insert(param_name(&nn.name, i, "bias"), Tensor::zeros(&[units]));
                fan_in = units;
            }
            LayerDef::GruCell { units } => {
                for (k, kind) in GRU_WEIGHTS.iter().enumerate() {
                    let rows = if k < 3 { fan_in } else { units };
                    store.params.insert(param_name(&nn.name, i, kind), glorot(&mut rng, rows, units));
                }
                for kind in GRU_BIASES {
                    store.params.insert(param_name(&nn.name, i, kind), Tensor::zeros(&[units]));
                }
                fan_in = units;
            }
        }
    }
    store
}

/// Analytic parameter count of `nn` for the given input width.
pub fn expected_parameter_count(nn: &NNDef, input_dim: usize) -> usize {
    let mut fan_in = input_dim;
    let mut total = 0;
    for layer in &nn.layers {
        let u = layer.units();
        total += match layer {
            LayerDef::Dense { .. } => fan_in * u + u,
            LayerDef::GruCell { .. } => 3 * (fan_in * u + u * u + u),
        };
        fan_in = u;
    }
    total
}

fn check_width(tape: &Tape, nn: &str, x: NodeId, expected: usize, what: &str) -> Result<usize> {
    let shape = tape.value(x).shape();
    if shape.len() != 2 || shape[1] != expected {
        return Err(Error::nn(nn, format!("{what} has shape {shape:?}, expected [n, {expected}]")));
    }
    Ok(shape[0])
}

/// `x W + b` with the bias repeated across rows.
fn affine_rows(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId, rows: usize) -> Result<NodeId> {
    let xw = tape.matmul(x, w)?;
    let units = tape.value(b).len();
    let b2 = tape.reshape(b, vec![1, units])?;
    let tiled = tape.gather_rows(b2, &vec![0; rows])?;
    Ok(tape.add(xw, tiled)?)
}

fn activate(tape: &mut Tape, x: NodeId, activation: Activation) -> NodeId {
    match activation {
        Activation::Relu => tape.relu(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Tanh => tape.tanh(x),
        Activation::Selu => tape.selu(x),
        Activation::Linear => x,
    }
}

/// Applies a dense stack row by row.
pub fn apply_feed_forward(tape: &mut Tape, nn: &NNDef, params: &ParamHandles, input: NodeId) -> Result<NodeId> {
    if nn.architecture != Architecture::FeedForward {
        return Err(Error::nn(&nn.name, "not a feed_forward network"));
    }
    let mut x = input;
    for (i, layer) in nn.layers.iter().enumerate() {
        let LayerDef::Dense { units: _, activation } = *layer else {
            return Err(Error::nn(&nn.name, format!("layer {i} is not dense")));
        };
        let w = params.get(&param_name(&nn.name, i, "kernel"))?;
        let b = params.get(&param_name(&nn.name, i, "bias"))?;
        let fan_in = tape.value(w).rows();
        let rows = check_width(tape, &nn.name, x, fan_in, if i == 0 { "input" } else { "hidden" })?;
        let z = affine_rows(tape, x, w, b, rows)?;
        x = activate(tape, z, activation);
    }
    Ok(x)
}

/// One GRU step for every row:
/// `z = σ(x Wz + h Uz + bz)`, `r = σ(x Wr + h Ur + br)`,
/// `h̃ = tanh(x Wh + (r ⊙ h) Uh + bh)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`.
pub fn apply_gru_cell(
    tape: &mut Tape,
    nn: &NNDef,
    params: &ParamHandles,
    state: NodeId,
    input: NodeId,
) -> Result<NodeId> {
    let (idx, units) = match nn.layers.iter().enumerate().find(|(_, l)| matches!(l, LayerDef::GruCell { .. })) {
        Some((i, l)) => (i, l.units()),
        None => return Err(Error::nn(&nn.name, "no gru_cell layer")),
    };
    let p = |kind: &str| params.get(&param_name(&nn.name, idx, kind));
    let (wz, wr, wh) = (p("w_z")?, p("w_r")?, p("w_h")?);
    let (uz, ur, uh) = (p("u_z")?, p("u_r")?, p("u_h")?);
    let (bz, br, bh) = (p("b_z")?, p("b_r")?, p("b_h")?);

    let in_dim = tape.value(wz).rows();
    let rows = check_width(tape, &nn.name, state, units, "state")?;
    let in_rows = check_width(tape, &nn.name, input, in_dim, "input")?;
    if rows != in_rows {
        return Err(Error::nn(&nn.name, format!("state has {rows} rows but input has {in_rows}")));
    }

    let gate = |tape: &mut Tape, w, u, b, h| -> Result<NodeId> {
        let xw = affine_rows(tape, input, w, b, rows)?;
        let hu = tape.matmul(h, u)?;
        Ok(tape.add(xw, hu)?)
    };
    let z_pre = gate(tape, wz, uz, bz, state)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = gate(tape, wr, ur, br, state)?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, state)?;
    let cand_pre = gate(tape, wh, uh, bh, rh)?;
    let cand = tape.tanh(cand_pre);
    let keep = tape.affine(z, -1.0, 1.0);
    let old = tape.mul(keep, state)?;
    let new = tape.mul(z, cand)?;
    Ok(tape.add(old, new)?)
}

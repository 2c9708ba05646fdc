//! Losses, Adam, the train/validate loop and evaluation metrics.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use yaml_rust2::{Yaml, YamlLoader};

use crate::dataset::{infer_schema, list_samples, load_graph_file, HeterogeneousGraph, Label};
use crate::diagnostics::has_errors;
use crate::error::{Error, Result};
use crate::nn::ParameterStore;
use crate::runtime::{CompiledModel, ForwardPass};
use crate::schema::Loss;
use crate::tensor::{NodeId, Tape, Tensor, TensorError};
use crate::validator::validate_dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Samples whose gradients are averaged into one optimizer step.
    pub group_size: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Validate every this many epochs; 0 disables validation.
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            group_size: 16,
            checkpoint_dir: None,
            validate_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.group_size == 0 {
            return Err(Error::Config("group_size must be at least 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Applies overrides from a YAML mapping; unknown keys are rejected.
    pub fn apply_yaml(&mut self, text: &str) -> Result<()> {
        let docs = YamlLoader::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let Some(doc) = docs.into_iter().next() else { return Ok(()) };
        let Yaml::Hash(map) = doc else {
            return Err(Error::Config("expected a mapping of training settings".into()));
        };
        for (k, v) in map {
            let key = k.as_str().ok_or_else(|| Error::Config("setting names must be strings".into()))?;
            let float = || match &v {
                Yaml::Real(_) => v.as_f64(),
                Yaml::Integer(i) => Some(*i as f64),
                _ => None,
            }
            .ok_or_else(|| Error::Config(format!("'{key}' must be a number")));
            let uint = || {
                v.as_i64()
                    .filter(|i| *i >= 0)
                    .map(|i| i as u64)
                    .ok_or_else(|| Error::Config(format!("'{key}' must be a non-negative integer")))
            };
            match key {
                "epochs" => self.epochs = uint()? as usize,
                "learning_rate" => self.learning_rate = float()?,
                "beta1" => self.beta1 = float()?,
                "beta2" => self.beta2 = float()?,
                "epsilon" => self.epsilon = float()?,
                "seed" => self.seed = uint()?,
                "group_size" => self.group_size = uint()? as usize,
                "validate_every" => self.validate_every = uint()? as usize,
                "checkpoint_dir" => {
                    let s = v.as_str().ok_or_else(|| Error::Config("'checkpoint_dir' must be a string".into()))?;
                    self.checkpoint_dir = Some(PathBuf::from(s));
                }
                other => return Err(Error::Config(format!("unknown setting '{other}'"))),
            }
        }
        self.check()
    }
}

/// Builds the scalar loss of `pred` against `target`. Shapes must match.
pub fn compute_loss(tape: &mut Tape, pred: NodeId, target: &Tensor, kind: Loss) -> Result<NodeId> {
    let p = tape.value(pred);
    if p.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "loss",
            left: p.shape().to_vec(),
            right: target.shape().to_vec(),
        }
        .into());
    }
    match kind {
        Loss::Mse | Loss::Mae => {
            let y = tape.leaf(target.clone());
            let d = tape.sub(pred, y)?;
            let e = if kind == Loss::Mse { tape.mul(d, d)? } else { tape.abs(d) };
            Ok(tape.mean_all(e)?)
        }
        Loss::BinaryCrossEntropy => {
            if let Some(bad) = target.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
                return Err(Error::Runtime(format!("binary_cross_entropy needs 0/1 labels, got {bad}")));
            }
            let p = tape.clamp(pred, 1e-12, 1.0 - 1e-12);
            let q = tape.affine(p, -1.0, 1.0);
            let log_p = tape.log(p);
            let log_q = tape.log(q);
            let y = tape.leaf(target.clone());
            let not_y = tape.leaf(target.map(|v| 1.0 - v));
            let a = tape.mul(y, log_p)?;
            let b = tape.mul(not_y, log_q)?;
            let s = tape.add(a, b)?;
            let m = tape.mean_all(s)?;
            Ok(tape.scale(m, -1.0))
        }
    }
}

/// Label values aligned with the rows of a forward pass.
pub fn label_target(graph: &HeterogeneousGraph, label: &str, pass: &ForwardPass) -> Result<Tensor> {
    let value = graph
        .labels()
        .get(label)
        .ok_or_else(|| Error::Dataset(format!("sample has no '{label}' label")))?;
    match (value, &pass.ids) {
        (Label::Global(y), None) => Ok(Tensor::new(vec![1, 1], vec![*y])?),
        (Label::PerNode(map), Some(ids)) => {
            let data = ids
                .iter()
                .map(|id| {
                    map.get(id)
                        .copied()
                        .ok_or_else(|| Error::Dataset(format!("node '{id}' has no '{label}' label")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::new(vec![ids.len(), 1], data)?)
        }
        (Label::Global(_), Some(_)) => Err(Error::Dataset(format!("label '{label}' is global but the readout is per node"))),
        (Label::PerNode(_), None) => Err(Error::Dataset(format!("label '{label}' is per node but the readout is global"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
        }
    }
}

/// Adam moments and step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.v.get(name).map(Vec::as_slice)
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(
    params: &mut ParameterStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    for name in params.names() {
        match grads.get(name) {
            None => return Err(Error::Runtime(format!("no gradient for parameter '{name}'"))),
            Some(g) if g.shape() != params.get(name).map(Tensor::shape).unwrap_or_default() => {
                return Err(Error::Runtime(format!("gradient for '{name}' has shape {:?}", g.shape())));
            }
            Some(_) => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let g = grads[&name].data();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let theta = params.get_mut(&name).expect("name from store").data_mut();
        for i in 0..g.len() {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

/// Aggregate quality of a model over a set of samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    /// Mean per-sample loss.
    pub loss: f64,
    /// Mean over labelled values of `|ŷ − y| / max(|y|, 1e-9)`.
    pub mre: f64,
    /// Thresholded accuracy; present only when every label is 0 or 1.
    pub accuracy: Option<f64>,
    pub samples: usize,
}

impl Metrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Predicted class of a score: 1 at or above 0.5.
pub fn classify(score: f64) -> f64 {
    if score >= 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Metrics from per-sample losses and (prediction, label) pairs.
pub fn summarize(losses: &[f64], pairs: &[(f64, f64)]) -> Metrics {
    let n = losses.len();
    let loss = if n == 0 { 0.0 } else { losses.iter().sum::<f64>() / n as f64 };
    let mre = if pairs.is_empty() {
        0.0
    } else {
        pairs.iter().map(|(p, y)| (p - y).abs() / y.abs().max(1e-9)).sum::<f64>() / pairs.len() as f64
    };
    let binary = !pairs.is_empty() && pairs.iter().all(|(_, y)| *y == 0.0 || *y == 1.0);
    let accuracy = binary.then(|| {
        pairs.iter().filter(|(p, y)| classify(*p) == *y).count() as f64 / pairs.len() as f64
    });
    Metrics {
        loss,
        mre,
        accuracy,
        samples: n,
    }
}

/// A loaded sample tagged with its file name.
#[derive(Debug, Clone)]
pub struct Sample {
    pub file: String,
    pub graph: HeterogeneousGraph,
}

pub fn load_samples(dir: &Path) -> Result<Vec<Sample>> {
    let files = list_samples(dir)?;
    files
        .into_par_iter()
        .map(|p| {
            let graph = load_graph_file(&p)?;
            let file = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(Sample { file, graph })
        })
        .collect()
}

struct SampleResult {
    loss: f64,
    pairs: Vec<(f64, f64)>,
    grads: Option<BTreeMap<String, Tensor>>,
}

fn run_sample(model: &CompiledModel, params: &ParameterStore, sample: &Sample, with_grads: bool) -> Result<SampleResult> {
    let inner = || -> Result<SampleResult> {
        let mut tape = Tape::new();
        let handles = params.attach(&mut tape);
        let pass = model.forward(&mut tape, &handles, &sample.graph)?;
        let target = label_target(&sample.graph, &model.model().readout.output_label, &pass)?;
        let pred = tape.value(pass.output);
        let pairs: Vec<(f64, f64)> = pred.data().iter().copied().zip(target.data().iter().copied()).collect();
        if target.is_empty() {
            return Ok(SampleResult {
                loss: 0.0,
                pairs,
                grads: None,
            });
        }
        let loss = compute_loss(&mut tape, pass.output, &target, model.model().loss)?;
        let loss_value = tape.value(loss).data()[0];
        let grads = if with_grads {
            let mut g = tape.backward(loss)?;
            Some(handles.iter().map(|(name, id)| (name.clone(), g.take(*id))).collect())
        } else {
            None
        };
        Ok(SampleResult {
            loss: loss_value,
            pairs,
            grads,
        })
    };
    inner().map_err(|e| e.in_sample(sample.file.clone()))
}

/// Scores `samples` without touching `params`; order follows the slice.
pub fn evaluate_samples(model: &CompiledModel, params: &ParameterStore, samples: &[Sample]) -> Result<Metrics> {
    let results: Vec<SampleResult> = samples
        .par_iter()
        .map(|s| run_sample(model, params, s, false))
        .collect::<Result<_>>()?;
    let losses: Vec<f64> = results.iter().map(|r| r.loss).collect();
    let pairs: Vec<(f64, f64)> = results.iter().flat_map(|r| r.pairs.iter().copied()).collect();
    Ok(summarize(&losses, &pairs))
}

/// Metrics over every sample of `dir`, in ascending file-name order.
pub fn evaluate(model: &CompiledModel, params: &ParameterStore, dir: &Path) -> Result<Metrics> {
    let samples = load_samples(dir)?;
    if samples.is_empty() {
        return Err(Error::Dataset(format!("no samples found in {}", dir.display())));
    }
    evaluate_samples(model, params, &samples)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_mre: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: ParameterStore,
    pub log: Vec<EpochLog>,
    pub optimizer_steps: u64,
}

/// Trains on `<root>/train`, validating on `<root>/validation` when present.
pub fn train(model: &CompiledModel, root: &Path, config: &TrainConfig) -> Result<TrainReport> {
    train_with(model, root, config, |_| {})
}

pub fn train_with(
    model: &CompiledModel,
    root: &Path,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    config.check()?;
    let train_dir = root.join("train");
    if !train_dir.is_dir() {
        return Err(Error::Dataset(format!("{} has no train/ directory", root.display())));
    }
    let schema = infer_schema(root)?;
    let diags = validate_dataset(model.model(), &schema);
    if has_errors(&diags) {
        return Err(Error::InvalidModel(diags.into_iter().filter(|d| d.is_error()).collect()));
    }
    let train_set = load_samples(&train_dir)?;
    let val_dir = root.join("validation");
    let val_set = if val_dir.is_dir() { load_samples(&val_dir)? } else { Vec::new() };
    let params = model.init_parameters(config.seed);
    train_samples(model, params, &train_set, &val_set, config, &mut on_epoch)
}

/// The training loop over preloaded samples, starting from `params`.
pub fn train_samples(
    model: &CompiledModel,
    mut params: ParameterStore,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainReport> {
    config.check()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let adam = AdamConfig::from(config);
    let mut state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for group in order.chunks(config.group_size) {
            let results: Vec<SampleResult> = group
                .par_iter()
                .map(|&i| run_sample(model, &params, &train_set[i], true))
                .collect::<Result<_>>()?;
            let mut total: BTreeMap<String, Tensor> =
                params.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect();
            let mut contributing = 0usize;
            for r in &results {
                let Some(grads) = &r.grads else { continue };
                contributing += 1;
                loss_sum += r.loss;
                loss_count += 1;
                for (name, g) in grads {
                    let acc = total.get_mut(name).expect("gradient keys match parameters");
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
            if contributing == 0 {
                continue;
            }
            let scale = 1.0 / contributing as f64;
            for t in total.values_mut() {
                t.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            adam_step(&mut params, &total, &mut state, &adam)?;
        }

        let validate = config.validate_every > 0 && epoch % config.validate_every == 0 && !val_set.is_empty();
        let val = if validate { Some(evaluate_samples(model, &params, val_set)?) } else { None };
        let entry = EpochLog {
            epoch,
            train_loss: if loss_count == 0 { 0.0 } else { loss_sum / loss_count as f64 },
            val_loss: val.as_ref().map(|m| m.loss),
            val_mre: val.as_ref().map(|m| m.mre),
            val_accuracy: val.as_ref().and_then(|m| m.accuracy),
            wall_ms: started.elapsed().as_millis() as u64,
        };
        if let Some(dir) = &config.checkpoint_dir {
            write_checkpoint(dir, epoch, &params, &entry)?;
        }
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainReport {
        params,
        log,
        optimizer_steps: state.step,
    })
}

fn write_checkpoint(dir: &Path, epoch: usize, params: &ParameterStore, entry: &EpochLog) -> Result<()> {
    let name = format!("epoch_{epoch}.json");
    params.save(&dir.join(&name))?;
    let latest = dir.join("latest");
    std::fs::write(&latest, format!("{name}\n")).map_err(|e| Error::io(&latest, e))?;
    let metrics = dir.join("metrics.jsonl");
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics)
        .map_err(|e| Error::io(&metrics, e))?;
    let line = serde_json::to_string(entry).expect("log serializes");
    writeln!(f, "{line}").map_err(|e| Error::io(&metrics, e))
}

/// Resolves a checkpoint argument: a parameter file, a `latest` pointer, or
/// a checkpoint directory holding one.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    let pointer = if path.is_dir() { path.join("latest") } else { path.to_path_buf() };
    if pointer.file_name().is_some_and(|n| n == "latest") {
        let text = std::fs::read_to_string(&pointer).map_err(|e| Error::io(&pointer, e))?;
        let dir = pointer.parent().unwrap_or(Path::new("."));
        return Ok(dir.join(text.trim()));
    }
    Ok(pointer)
}

/// Rayon pool sized by `MSMPC_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("MSMPC_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("MSMPC_THREADS must be a positive integer, got '{v}'")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Config(e.to_string()))
}

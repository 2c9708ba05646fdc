//! Shared helpers: a random model/graph generator and a slow, loop-based
//! reference interpreter that shares no code with the runtime.
#![allow(dead_code)]

pub mod checks;
pub mod grad;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write;

use msmp_core::dataset::{FeatureValue, GraphEdge, GraphNode, HeterogeneousGraph, Label};
use msmp_core::nn::ParameterStore;
use msmp_core::schema::{
    parse_model_description, Activation, AggregationKind, LayerDef, MessageSpec, ModelDescription, NNDef,
    OutputLevel, ReadoutKind,
};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const ENTITY_NAMES: [&str; 2] = ["a", "b"];
const ACTIVATIONS: [&str; 5] = ["relu", "sigmoid", "tanh", "selu", "linear"];

#[derive(Debug, Clone, Copy)]
pub struct CaseOptions {
    pub max_nodes: usize,
    /// Allow ordered and concat aggregations.
    pub positional: bool,
    pub max_iterations: usize,
}

impl Default for CaseOptions {
    fn default() -> Self {
        CaseOptions {
            max_nodes: 6,
            positional: true,
            max_iterations: 3,
        }
    }
}

pub struct Case {
    pub yaml: String,
    pub model: ModelDescription,
    pub graph: HeterogeneousGraph,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Need {
    Any,
    AtLeastOne,
    ExactlyOne,
}

struct Builder<'r> {
    rng: &'r mut ChaCha8Rng,
    nns: String,
    next_nn: usize,
}

impl Builder<'_> {
    fn name(&mut self) -> String {
        self.next_nn += 1;
        format!("n{}", self.next_nn - 1)
    }

    fn activation(&mut self) -> &'static str {
        ACTIVATIONS[self.rng.random_range(0..ACTIVATIONS.len())]
    }

    /// Feed-forward net with 1-2 dense layers ending in `out` units.
    fn ff(&mut self, out: usize, last_activation: Option<&'static str>) -> String {
        let name = self.name();
        let _ = writeln!(self.nns, "- name: {name}\n  architecture: feed_forward\n  layers:");
        if self.rng.random_bool(0.5) {
            let hidden = self.rng.random_range(1..=4);
            let act = self.activation();
            let _ = writeln!(self.nns, "  - type: dense\n    units: {hidden}\n    activation: {act}");
        }
        let act = last_activation.unwrap_or_else(|| self.activation());
        let _ = writeln!(self.nns, "  - type: dense\n    units: {out}\n    activation: {act}");
        name
    }

    fn gru(&mut self, units: usize) -> String {
        let name = self.name();
        let _ = writeln!(
            self.nns,
            "- name: {name}\n  architecture: recurrent\n  layers:\n  - type: gru_cell\n    units: {units}"
        );
        name
    }
}

/// A random valid model together with a graph that conforms to it.
pub fn random_case(rng: &mut ChaCha8Rng, opts: CaseOptions) -> Case {
    let n_ent = rng.random_range(1..=2);
    let entities = &ENTITY_NAMES[..n_ent];
    let mut dims = BTreeMap::new();
    let mut features: BTreeMap<&str, Vec<(String, usize)>> = BTreeMap::new();
    let mut yaml = String::from("entities:\n");
    for &e in entities {
        let d = rng.random_range(2..=4);
        dims.insert(e, d);
        let mut used = 0;
        let mut feats = Vec::new();
        for j in 0..rng.random_range(1..=2) {
            let arity = rng.random_range(1..=2).min(d - used);
            if arity == 0 {
                break;
            }
            used += arity;
            feats.push((format!("f{j}"), arity));
        }
        let names: Vec<&str> = feats.iter().map(|(n, _)| n.as_str()).collect();
        let _ = writeln!(
            yaml,
            "- name: {e}\n  state_dimension: {d}\n  initial_state:\n  - type: build_state\n    input: [{}]",
            names.join(", ")
        );
        features.insert(e, feats);
    }

    let mut b = Builder {
        rng,
        nns: String::from("neural_networks:\n"),
        next_nn: 0,
    };
    let mut needs: BTreeMap<(&str, &str), Need> = BTreeMap::new();
    let iterations = b.rng.random_range(1..=opts.max_iterations);
    let _ = writeln!(yaml, "message_passing:\n  num_iterations: {iterations}\n  stages:");
    for _ in 0..b.rng.random_range(1..=2) {
        let _ = writeln!(yaml, "  - stage_message_passings:");
        let mut dests: Vec<&str> = entities.to_vec();
        dests.shuffle(b.rng);
        dests.truncate(b.rng.random_range(1..=dests.len()));
        for dest in dests {
            let mut sources: Vec<&str> = entities.to_vec();
            sources.shuffle(b.rng);
            sources.truncate(b.rng.random_range(1..=sources.len()));
            let kinds: &[&str] = if opts.positional {
                &["sum", "mean", "min", "max", "ordered", "concat"]
            } else {
                &["sum", "mean", "min", "max"]
            };
            let agg = kinds[b.rng.random_range(0..kinds.len())];
            let need = match agg {
                "concat" => Need::ExactlyOne,
                "min" | "max" | "ordered" => Need::AtLeastOne,
                _ => Need::Any,
            };
            let _ = writeln!(yaml, "    - destination_entity: {dest}\n      source_entities:");
            let common = b.rng.random_range(1..=4);
            let mut width = 0;
            for &src in &sources {
                let entry = needs.entry((src, dest)).or_insert(Need::Any);
                *entry = (*entry).max(need);
                let m = if agg == "concat" { b.rng.random_range(1..=3) } else { common };
                let direct = dims[src] == m && b.rng.random_bool(0.6);
                if direct {
                    let _ = writeln!(yaml, "      - name: {src}\n        message:\n          type: direct_assignment");
                } else {
                    let nn = b.ff(m, None);
                    let _ = writeln!(
                        yaml,
                        "      - name: {src}\n        message:\n          type: neural_network\n          nn_name: {nn}"
                    );
                }
                width = if agg == "concat" { width + m } else { m };
            }
            let _ = width;
            let update = if agg == "ordered" || b.rng.random_bool(0.5) {
                b.gru(dims[dest])
            } else {
                b.ff(dims[dest], None)
            };
            let _ = writeln!(
                yaml,
                "      aggregation:\n        type: {agg}\n      update:\n        type: neural_network\n        nn_name: {update}"
            );
        }
    }

    let target = entities[b.rng.random_range(0..n_ent)];
    let other = entities[b.rng.random_range(0..n_ent)];
    let pools = ["pooling_sum", "pooling_mean", "pooling_max"];
    let pool = pools[b.rng.random_range(0..3)];
    let last = if b.rng.random_bool(0.5) { "linear" } else { "sigmoid" };
    let _ = writeln!(yaml, "readout:\n  pipeline:");
    let level = match b.rng.random_range(0..4) {
        0 => {
            let nn = b.ff(1, Some(last));
            let _ = writeln!(yaml, "  - type: neural_network\n    input: [{target}]\n    nn_name: {nn}");
            "per_node"
        }
        1 => {
            let nn = b.ff(1, Some(last));
            let _ = writeln!(yaml, "  - type: {pool}\n    input: [{target}]\n  - type: neural_network\n    nn_name: {nn}");
            "global"
        }
        2 => {
            let gate = b.ff(dims[target], None);
            let nn = b.ff(1, Some(last));
            let _ = writeln!(
                yaml,
                "  - type: {pool}\n    input: [{other}]\n    output_name: pooled\n  - type: neural_network\n    input: [pooled]\n    nn_name: {gate}\n    output_name: gate\n  - type: elementwise_product\n    input: [{target}, gate]\n  - type: neural_network\n    nn_name: {nn}"
            );
            "per_node"
        }
        _ => {
            let nn = b.ff(1, Some(last));
            let _ = writeln!(
                yaml,
                "  - type: {pool}\n    input: [{other}]\n    output_name: pooled\n  - type: concat_states\n    input: [{target}, pooled]\n  - type: neural_network\n    nn_name: {nn}"
            );
            "per_node"
        }
    };
    let _ = writeln!(yaml, "  output_label: y\n  output_level: {level}");
    yaml.push_str(&b.nns);
    yaml.push_str("loss: mse\n");

    let model = parse_model_description(&yaml).unwrap_or_else(|d| panic!("generated model rejected: {d:?}\n{yaml}"));
    let graph = random_graph(b.rng, &features, &needs, opts.max_nodes, level == "global", target);
    Case { yaml, model, graph }
}

fn random_graph(
    rng: &mut ChaCha8Rng,
    features: &BTreeMap<&str, Vec<(String, usize)>>,
    needs: &BTreeMap<(&str, &str), Need>,
    max_nodes: usize,
    global: bool,
    target: &str,
) -> HeterogeneousGraph {
    let per_entity = (max_nodes / features.len()).max(1);
    let mut members: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut nodes = Vec::new();
    for (&e, feats) in features {
        // Ids whose numeric and lexical orders differ.
        let mut labels: Vec<usize> = (0..rng.random_range(1..=per_entity)).map(|k| k * 7 + 3).collect();
        labels.shuffle(rng);
        for k in labels {
            let id = format!("{e}{k}");
            let mut fs = BTreeMap::new();
            for (name, arity) in feats {
                let v = if *arity == 1 && rng.random_bool(0.5) {
                    FeatureValue::Scalar(rng.random_range(-1.0..1.0))
                } else {
                    FeatureValue::Vector((0..*arity).map(|_| rng.random_range(-1.0..1.0)).collect())
                };
                fs.insert(name.clone(), v);
            }
            members.entry(e).or_default().push(id.clone());
            nodes.push(GraphNode {
                id,
                entity: e.to_string(),
                features: fs,
            });
        }
    }

    let mut edges = Vec::new();
    for (&(s, t), &need) in needs {
        for v in &members[t] {
            let mut senders: Vec<&String> = match need {
                Need::ExactlyOne => vec![&members[s][rng.random_range(0..members[s].len())]],
                _ => members[s].iter().filter(|_| rng.random_bool(0.5)).collect(),
            };
            if senders.is_empty() && need == Need::AtLeastOne {
                senders.push(&members[s][rng.random_range(0..members[s].len())]);
            }
            let mut positions: Vec<usize> = (0..senders.len()).map(|p| p * 2 + rng.random_range(0..2)).collect();
            positions.shuffle(rng);
            for (u, p) in senders.into_iter().zip(positions) {
                edges.push(GraphEdge {
                    source: u.clone(),
                    target: v.clone(),
                    position: Some(p),
                });
            }
        }
    }
    nodes.shuffle(rng);
    edges.shuffle(rng);

    let mut labels = BTreeMap::new();
    let label = if global {
        Label::Global(rng.random_range(-1.0..1.0))
    } else {
        Label::PerNode(members[target].iter().map(|id| (id.clone(), rng.random_range(-1.0..1.0))).collect())
    };
    labels.insert("y".to_string(), label);
    HeterogeneousGraph::new(nodes, edges, labels).expect("generated graph is well formed")
}

// ---------------------------------------------------------------------------
// Reference interpreter

const SELU_ALPHA: f64 = 1.6732632423543772848170429916717;
const SELU_LAMBDA: f64 = 1.0507009873554804934193349852946;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => x.max(0.0),
        Activation::Sigmoid => sig(x),
        Activation::Tanh => x.tanh(),
        Activation::Selu => {
            if x > 0.0 {
                SELU_LAMBDA * x
            } else {
                SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
            }
        }
        Activation::Linear => x,
    }
}

fn p<'a>(params: &'a ParameterStore, nn: &str, layer: usize, kind: &str) -> &'a [f64] {
    params
        .get(&format!("{nn}/layer_{layer}/{kind}"))
        .unwrap_or_else(|| panic!("missing {nn}/{layer}/{kind}"))
        .data()
}

/// `x W + b` with `W` stored row-major as `[x.len(), units]`.
fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>, units: usize) -> Vec<f64> {
    (0..units)
        .map(|j| {
            let mut acc = 0.0;
            for (i, xi) in x.iter().enumerate() {
                acc += xi * w[i * units + j];
            }
            acc + b.map_or(0.0, |b| b[j])
        })
        .collect()
}

pub fn ref_ff(nn: &NNDef, params: &ParameterStore, x: &[f64]) -> Vec<f64> {
    let mut x = x.to_vec();
    for (i, layer) in nn.layers.iter().enumerate() {
        let LayerDef::Dense { units, activation } = *layer else { panic!("dense expected") };
        x = affine(&x, p(params, &nn.name, i, "kernel"), Some(p(params, &nn.name, i, "bias")), units)
            .into_iter()
            .map(|v| act(activation, v))
            .collect();
    }
    x
}

pub fn ref_gru(nn: &NNDef, params: &ParameterStore, h: &[f64], x: &[f64]) -> Vec<f64> {
    let units = h.len();
    let q = |k: &str| p(params, &nn.name, 0, k);
    let add = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| x + y).collect::<Vec<f64>>();
    let z: Vec<f64> = add(affine(x, q("w_z"), Some(q("b_z")), units), affine(h, q("u_z"), None, units))
        .into_iter()
        .map(sig)
        .collect();
    let r: Vec<f64> = add(affine(x, q("w_r"), Some(q("b_r")), units), affine(h, q("u_r"), None, units))
        .into_iter()
        .map(sig)
        .collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let c: Vec<f64> = add(affine(x, q("w_h"), Some(q("b_h")), units), affine(&rh, q("u_h"), None, units))
        .into_iter()
        .map(f64::tanh)
        .collect();
    (0..units).map(|k| (1.0 - z[k]) * h[k] + z[k] * c[k]).collect()
}

fn apply_nn(model: &ModelDescription, params: &ParameterStore, name: &str, x: &[f64]) -> Vec<f64> {
    ref_ff(model.nn(name).expect("nn"), params, x)
}

#[derive(Clone, Debug)]
enum Value {
    /// id → row
    Nodes(BTreeMap<String, Vec<f64>>),
    Global(Vec<f64>),
}

/// Predictions per node id (or under the empty id for a global output).
pub fn reference_forward(
    model: &ModelDescription,
    params: &ParameterStore,
    graph: &HeterogeneousGraph,
) -> BTreeMap<String, f64> {
    let entity_of: HashMap<&str, &str> = graph.nodes().iter().map(|n| (n.id.as_str(), n.entity.as_str())).collect();
    let mut states: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for n in graph.nodes() {
        let e = model.entity(&n.entity).expect("entity");
        let mut h = Vec::new();
        for f in e.input_features() {
            h.extend_from_slice(n.features[f].values());
        }
        h.resize(e.state_dimension, 0.0);
        states.insert(n.id.clone(), h);
    }

    for _ in 0..model.message_passing.num_iterations {
        for stage in &model.message_passing.stages {
            let entry = states.clone();
            for mp in &stage.message_passings {
                let dests: Vec<&str> = graph
                    .nodes()
                    .iter()
                    .filter(|n| n.entity == mp.destination_entity)
                    .map(|n| n.id.as_str())
                    .collect();
                for v in dests {
                    // (position, slot, sender id, message)
                    let mut msgs: Vec<(usize, usize, String, Vec<f64>)> = Vec::new();
                    for (slot, src) in mp.sources.iter().enumerate() {
                        for e in graph.edges() {
                            if e.target != v || entity_of[e.source.as_str()] != src.name {
                                continue;
                            }
                            let m = match &src.message {
                                MessageSpec::DirectAssignment => entry[&e.source].clone(),
                                MessageSpec::NeuralNetwork { nn_name } => {
                                    let mut x = entry[&e.source].clone();
                                    x.extend_from_slice(&entry[v]);
                                    apply_nn(model, params, nn_name, &x)
                                }
                            };
                            msgs.push((e.position.unwrap_or(0), slot, e.source.clone(), m));
                        }
                    }
                    let width = message_width(model, mp);
                    let h = &entry[v];
                    let agg: Vec<f64> = match mp.aggregation {
                        AggregationKind::Sum | AggregationKind::Mean => {
                            let mut acc = vec![0.0; width];
                            for (.., m) in &msgs {
                                for (a, x) in acc.iter_mut().zip(m) {
                                    *a += x;
                                }
                            }
                            if mp.aggregation == AggregationKind::Mean && !msgs.is_empty() {
                                acc.iter_mut().for_each(|a| *a /= msgs.len() as f64);
                            }
                            acc
                        }
                        AggregationKind::Min | AggregationKind::Max => {
                            assert!(!msgs.is_empty(), "extremal aggregation over no messages");
                            let max = mp.aggregation == AggregationKind::Max;
                            (0..width)
                                .map(|k| {
                                    msgs.iter()
                                        .map(|m| m.3[k])
                                        .fold(if max { f64::NEG_INFINITY } else { f64::INFINITY }, |a, x| {
                                            if max { a.max(x) } else { a.min(x) }
                                        })
                                })
                                .collect()
                        }
                        AggregationKind::Concat => {
                            let mut out = Vec::new();
                            for slot in 0..mp.sources.len() {
                                let mine: Vec<_> = msgs.iter().filter(|m| m.1 == slot).collect();
                                assert_eq!(mine.len(), 1, "concat needs one message per source");
                                out.extend_from_slice(&mine[0].3);
                            }
                            out
                        }
                        AggregationKind::Ordered => {
                            msgs.sort_by_key(|m| (m.0, m.1));
                            let nn = model.nn(&mp.update.nn_name).expect("update nn");
                            let mut s = h.clone();
                            for (.., m) in &msgs {
                                s = ref_gru(nn, params, &s, m);
                            }
                            states.insert(v.to_string(), s);
                            continue;
                        }
                    };
                    let nn = model.nn(&mp.update.nn_name).expect("update nn");
                    let new = match nn.layers[0] {
                        LayerDef::GruCell { .. } => ref_gru(nn, params, h, &agg),
                        LayerDef::Dense { .. } => {
                            let mut x = h.clone();
                            x.extend_from_slice(&agg);
                            ref_ff(nn, params, &x)
                        }
                    };
                    states.insert(v.to_string(), new);
                }
            }
        }
    }

    let entity_rows = |e: &str| -> BTreeMap<String, Vec<f64>> {
        graph
            .nodes()
            .iter()
            .filter(|n| n.entity == e)
            .map(|n| (n.id.clone(), states[&n.id].clone()))
            .collect()
    };
    let mut named: HashMap<String, Value> = HashMap::new();
    let mut prev: Option<Value> = None;
    for op in &model.readout.pipeline {
        let operands: Vec<Value> = if op.input.is_empty() {
            vec![prev.clone().expect("previous value")]
        } else {
            op.input
                .iter()
                .map(|name| match named.get(name) {
                    Some(v) => v.clone(),
                    None => Value::Nodes(entity_rows(name)),
                })
                .collect()
        };
        let out = match op.kind {
            ReadoutKind::PoolingSum | ReadoutKind::PoolingMean | ReadoutKind::PoolingMax => {
                let rows: Vec<Vec<f64>> = match &operands[0] {
                    Value::Nodes(m) => m.values().cloned().collect(),
                    Value::Global(g) => vec![g.clone()],
                };
                let width = rows.first().map_or(0, Vec::len);
                let pooled = (0..width)
                    .map(|k| {
                        let col = rows.iter().map(|r| r[k]);
                        match op.kind {
                            ReadoutKind::PoolingSum => col.sum(),
                            ReadoutKind::PoolingMean => col.sum::<f64>() / rows.len() as f64,
                            _ => col.fold(f64::NEG_INFINITY, f64::max),
                        }
                    })
                    .collect();
                Value::Global(pooled)
            }
            ReadoutKind::NeuralNetwork => {
                let nn = op.nn_name.as_deref().expect("nn_name");
                match &operands[0] {
                    Value::Nodes(m) => {
                        Value::Nodes(m.iter().map(|(k, r)| (k.clone(), apply_nn(model, params, nn, r))).collect())
                    }
                    Value::Global(g) => Value::Global(apply_nn(model, params, nn, g)),
                }
            }
            ReadoutKind::ElementwiseProduct | ReadoutKind::ConcatStates => {
                let product = op.kind == ReadoutKind::ElementwiseProduct;
                let combine = |rows: Vec<&Vec<f64>>| -> Vec<f64> {
                    if product {
                        let mut acc = rows[0].clone();
                        for r in &rows[1..] {
                            acc.iter_mut().zip(r.iter()).for_each(|(a, b)| *a *= b);
                        }
                        acc
                    } else {
                        rows.into_iter().flatten().copied().collect()
                    }
                };
                let ids: Option<Vec<String>> = operands.iter().find_map(|v| match v {
                    Value::Nodes(m) => Some(m.keys().cloned().collect()),
                    Value::Global(_) => None,
                });
                match ids {
                    None => Value::Global(combine(
                        operands.iter().map(|v| if let Value::Global(g) = v { g } else { unreachable!() }).collect(),
                    )),
                    Some(ids) => Value::Nodes(
                        ids.iter()
                            .map(|id| {
                                let rows = operands
                                    .iter()
                                    .map(|v| match v {
                                        Value::Nodes(m) => &m[id],
                                        Value::Global(g) => g,
                                    })
                                    .collect();
                                (id.clone(), combine(rows))
                            })
                            .collect(),
                    ),
                }
            }
        };
        if let Some(name) = &op.output_name {
            named.insert(name.clone(), out.clone());
        }
        prev = Some(out);
    }
    match prev.expect("readout output") {
        Value::Nodes(m) => m.into_iter().map(|(k, v)| (k, v[0])).collect(),
        Value::Global(g) => BTreeMap::from([(String::new(), g[0])]),
    }
}

fn message_width(model: &ModelDescription, mp: &msmp_core::schema::StageMessagePassing) -> usize {
    let one = |s: &msmp_core::schema::SourceSpec| match &s.message {
        MessageSpec::DirectAssignment => model.entity(&s.name).expect("entity").state_dimension,
        MessageSpec::NeuralNetwork { nn_name } => model.nn(nn_name).and_then(NNDef::output_dim).expect("dim"),
    };
    match mp.aggregation {
        AggregationKind::Concat => mp.sources.iter().map(one).sum(),
        _ => one(&mp.sources[0]),
    }
}

/// Runtime predictions in the same keyed form as [`reference_forward`].
pub fn keyed(prediction: &msmp_core::runtime::Prediction) -> BTreeMap<String, f64> {
    match prediction {
        msmp_core::runtime::Prediction::PerNode(v) => v.iter().cloned().collect(),
        msmp_core::runtime::Prediction::Global(x) => BTreeMap::from([(String::new(), *x)]),
    }
}

pub fn output_level(model: &ModelDescription) -> OutputLevel {
    model.readout.output_level
}

/// Entity names referenced anywhere in a model.
pub fn entity_set(model: &ModelDescription) -> BTreeSet<String> {
    model.entities.iter().map(|e| e.name.clone()).collect()
}

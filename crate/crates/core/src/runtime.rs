//! Staged message passing and readout on a gradient tape.

use std::collections::BTreeMap;

use serde_json::{json, Map, Value};

use crate::dataset::{
    build_staged_adjacency_indexed, initial_states_indexed, GraphIndex, HeterogeneousGraph, MessagePassingAdjacency,
};
use crate::diagnostics::{has_errors, Diagnostic};
use crate::error::{Error, Result};
use crate::nn::{apply_feed_forward, apply_gru_cell, build_parameters, ParamHandles, ParameterStore};
use crate::schema::{
    parse_model_description, AggregationKind, Architecture, MessageSpec, ModelDescription, NNDef, ReadoutKind,
    StageMessagePassing,
};
use crate::tensor::{NodeId, ReduceKind, Tape, Tensor};
use crate::validator::{analyze, ModelAnalysis};

/// A model that passed semantic validation, with every network's input
/// width resolved.
#[derive(Debug, Clone)]
pub struct CompiledModel {
    model: ModelDescription,
    analysis: ModelAnalysis,
    warnings: Vec<Diagnostic>,
}

/// Per-network seed so adding a network does not reshuffle the others.
fn nn_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl CompiledModel {
    pub fn compile(model: ModelDescription) -> Result<Self> {
        let (analysis, diags) = analyze(&model);
        if has_errors(&diags) {
            return Err(Error::InvalidModel(diags.into_iter().filter(Diagnostic::is_error).collect()));
        }
        Ok(Self {
            model,
            analysis,
            warnings: diags,
        })
    }

    pub fn from_yaml(text: &str) -> Result<Self> {
        let model = parse_model_description(text).map_err(Error::InvalidModel)?;
        Self::compile(model)
    }

    pub fn model(&self) -> &ModelDescription {
        &self.model
    }

    pub fn analysis(&self) -> &ModelAnalysis {
        &self.analysis
    }

    pub fn warnings(&self) -> &[Diagnostic] {
        &self.warnings
    }

    /// Fresh parameters for every network the model uses.
    pub fn init_parameters(&self, seed: u64) -> ParameterStore {
        let mut store = ParameterStore::new();
        for (i, nn) in self.model.neural_networks.iter().enumerate() {
            if let Some(&dim) = self.analysis.nn_input_dims.get(&nn.name) {
                store
                    .extend(build_parameters(nn, dim, nn_seed(seed, i)))
                    .expect("network names are unique after validation");
            }
        }
        store
    }

    /// Checks that `params` has exactly the names and shapes this model needs.
    pub fn check_parameters(&self, params: &ParameterStore) -> Result<()> {
        let expected = self.init_parameters(0);
        for (name, t) in expected.iter() {
            match params.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter '{name}'"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter '{name}' has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = params.names().find(|n| expected.get(n).is_none()) {
            return Err(Error::Checkpoint(format!("unexpected parameter '{extra}'")));
        }
        Ok(())
    }

    fn nn(&self, name: &str) -> Result<&NNDef> {
        self.model
            .nn(name)
            .ok_or_else(|| Error::Runtime(format!("neural network '{name}' is not declared")))
    }

    /// Records the full forward computation of `graph` on `tape`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamHandles, graph: &HeterogeneousGraph) -> Result<ForwardPass> {
        let index = GraphIndex::new(graph);
        let adjacency = build_staged_adjacency_indexed(graph, &self.model, &index)?;
        let init = initial_states_indexed(graph, &self.model, &index)?;
        let mut states: BTreeMap<String, NodeId> = init.into_iter().map(|(e, t)| (e, tape.leaf(t))).collect();

        let run = Runner {
            model: self,
            graph,
            index: &index,
            params,
        };
        for _ in 0..self.model.message_passing.num_iterations {
            for (stage, adj) in self.model.message_passing.stages.iter().zip(&adjacency.stages) {
                let entry = states.clone();
                for (mp, a) in stage.message_passings.iter().zip(adj) {
                    let updated = run.message_passing(tape, &entry, mp, a)?;
                    states.insert(mp.destination_entity.clone(), updated);
                }
            }
        }
        let (output, rows) = run.readout(tape, &states)?;
        let ids = rows.map(|entity| index.ids(graph, &entity).into_iter().map(String::from).collect());
        Ok(ForwardPass { output, ids, states })
    }

    pub fn predict(&self, params: &ParameterStore, graph: &HeterogeneousGraph) -> Result<Prediction> {
        let mut tape = Tape::new();
        let handles = params.attach(&mut tape);
        let pass = self.forward(&mut tape, &handles, graph)?;
        Ok(pass.prediction(&tape))
    }
}

/// Tape handles of one forward computation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `[n, 1]` for per-node readouts, `[1, 1]` for global ones.
    pub output: NodeId,
    /// Node ids of the output rows; `None` for a global readout.
    pub ids: Option<Vec<String>>,
    /// Final hidden states per entity.
    pub states: BTreeMap<String, NodeId>,
}

impl ForwardPass {
    pub fn prediction(&self, tape: &Tape) -> Prediction {
        let values = tape.value(self.output).data();
        match &self.ids {
            Some(ids) => Prediction::PerNode(ids.iter().cloned().zip(values.iter().copied()).collect()),
            None => Prediction::Global(values[0]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    /// One value per output node, in ascending id order.
    PerNode(Vec<(String, f64)>),
    Global(f64),
}

impl Prediction {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Prediction::PerNode(v) => v.iter().map(|(_, x)| *x).collect(),
            Prediction::Global(x) => vec![*x],
        }
    }

    pub fn to_json(&self, graph_file: &str) -> Value {
        let predictions = match self {
            Prediction::PerNode(v) => Value::Object(v.iter().map(|(id, x)| (id.clone(), json!(x))).collect::<Map<_, _>>()),
            Prediction::Global(x) => json!(x),
        };
        json!({"graph": graph_file, "predictions": predictions})
    }
}

struct Runner<'a> {
    model: &'a CompiledModel,
    graph: &'a HeterogeneousGraph,
    index: &'a GraphIndex,
    params: &'a ParamHandles,
}

impl Runner<'_> {
    fn node_id(&self, entity: &str, row: usize) -> String {
        self.graph.nodes()[self.index.members(entity)[row]].id.clone()
    }

    fn empty(&self, entity: &str, row: usize, kind: AggregationKind) -> Error {
        Error::EmptyNeighborhood {
            entity: entity.to_string(),
            node: self.node_id(entity, row),
            aggregation: kind.name(),
        }
    }

    /// Messages for a list of (destination row, sender row) pairs of one source.
    fn messages(
        &self,
        tape: &mut Tape,
        states: &BTreeMap<String, NodeId>,
        mp: &StageMessagePassing,
        slot: usize,
        pairs: &[(usize, usize)],
    ) -> Result<NodeId> {
        let src = &mp.sources[slot];
        let senders: Vec<usize> = pairs.iter().map(|&(_, s)| s).collect();
        let sent = tape.gather_rows(states[&src.name], &senders)?;
        match &src.message {
            MessageSpec::DirectAssignment => Ok(sent),
            MessageSpec::NeuralNetwork { nn_name } => {
                let dests: Vec<usize> = pairs.iter().map(|&(d, _)| d).collect();
                let recv = tape.gather_rows(states[&mp.destination_entity], &dests)?;
                let input = tape.concat(&[sent, recv], 1)?;
                apply_feed_forward(tape, self.model.nn(nn_name)?, self.params, input)
            }
        }
    }

    fn message_passing(
        &self,
        tape: &mut Tape,
        states: &BTreeMap<String, NodeId>,
        mp: &StageMessagePassing,
        adj: &MessagePassingAdjacency,
    ) -> Result<NodeId> {
        let dest = &mp.destination_entity;
        let h = states[dest];
        let n = adj.num_destinations;
        let update = self.model.nn(&mp.update.nn_name)?;

        if let Some(sequences) = &adj.sequences {
            return self.ordered(tape, states, mp, sequences, h, update);
        }

        let aggregated = match mp.aggregation {
            AggregationKind::Concat => {
                let mut parts = Vec::with_capacity(adj.sources.len());
                for (slot, src) in adj.sources.iter().enumerate() {
                    let mut pairs = Vec::with_capacity(n);
                    for (d, senders) in src.senders.iter().enumerate() {
                        match senders.as_slice() {
                            [s] => pairs.push((d, *s)),
                            [] => return Err(self.empty(dest, d, mp.aggregation)),
                            many => {
                                return Err(Error::Runtime(format!(
                                    "concat aggregation into {dest} node '{}' got {} messages from '{}', expected one",
                                    self.node_id(dest, d),
                                    many.len(),
                                    src.entity
                                )))
                            }
                        }
                    }
                    parts.push(self.messages(tape, states, mp, slot, &pairs)?);
                }
                tape.concat(&parts, 1)?
            }
            kind => {
                let mut parts = Vec::new();
                let mut segments = Vec::new();
                let mut counts = vec![0usize; n];
                for (slot, src) in adj.sources.iter().enumerate() {
                    let pairs: Vec<(usize, usize)> = src
                        .senders
                        .iter()
                        .enumerate()
                        .flat_map(|(d, ss)| ss.iter().map(move |&s| (d, s)))
                        .collect();
                    if pairs.is_empty() {
                        continue;
                    }
                    for &(d, _) in &pairs {
                        counts[d] += 1;
                        segments.push(d);
                    }
                    parts.push(self.messages(tape, states, mp, slot, &pairs)?);
                }
                if !kind.has_empty_identity() {
                    if let Some(d) = counts.iter().position(|&c| c == 0) {
                        return Err(self.empty(dest, d, kind));
                    }
                }
                let reduce = match kind {
                    AggregationKind::Sum => ReduceKind::Sum,
                    AggregationKind::Mean => ReduceKind::Mean,
                    AggregationKind::Min => ReduceKind::Min,
                    _ => ReduceKind::Max,
                };
                if parts.is_empty() {
                    let width = self.message_width(mp)?;
                    tape.leaf(Tensor::zeros(&[n, width]))
                } else {
                    let all = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
                    tape.segment_reduce(all, &segments, n, reduce)?
                }
            }
        };

        match update.architecture {
            Architecture::FeedForward => {
                let input = tape.concat(&[h, aggregated], 1)?;
                apply_feed_forward(tape, update, self.params, input)
            }
            Architecture::Recurrent => apply_gru_cell(tape, update, self.params, h, aggregated),
        }
    }

    fn message_width(&self, mp: &StageMessagePassing) -> Result<usize> {
        let src = &mp.sources[0];
        let width = match &src.message {
            MessageSpec::DirectAssignment => self.model.model.entity(&src.name).map(|e| e.state_dimension),
            MessageSpec::NeuralNetwork { nn_name } => self.model.nn(nn_name)?.output_dim(),
        };
        width.ok_or_else(|| Error::Runtime(format!("cannot size messages from '{}'", src.name)))
    }

    /// Runs the recurrent update over each destination's position-sorted
    /// sequence; shorter sequences keep their state once exhausted.
    fn ordered(
        &self,
        tape: &mut Tape,
        states: &BTreeMap<String, NodeId>,
        mp: &StageMessagePassing,
        sequences: &[Vec<(usize, usize)>],
        h0: NodeId,
        update: &NNDef,
    ) -> Result<NodeId> {
        let dest = &mp.destination_entity;
        if let Some(d) = sequences.iter().position(Vec::is_empty) {
            return Err(self.empty(dest, d, AggregationKind::Ordered));
        }
        let n = sequences.len();
        if n == 0 {
            return Ok(h0);
        }

        // Message row of every (destination, step), laid out source by source.
        let mut per_slot: Vec<Vec<(usize, usize)>> = vec![Vec::new(); mp.sources.len()];
        let mut at: Vec<Vec<(usize, usize)>> = Vec::with_capacity(n);
        for (d, seq) in sequences.iter().enumerate() {
            let mut row = Vec::with_capacity(seq.len());
            for &(slot, s) in seq {
                row.push((slot, per_slot[slot].len()));
                per_slot[slot].push((d, s));
            }
            at.push(row);
        }
        let mut parts = Vec::new();
        let mut offsets = vec![0; mp.sources.len()];
        let mut total = 0;
        for (slot, pairs) in per_slot.iter().enumerate() {
            offsets[slot] = total;
            if !pairs.is_empty() {
                parts.push(self.messages(tape, states, mp, slot, pairs)?);
                total += pairs.len();
            }
        }
        let all = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };

        let units = tape.value(h0).cols();
        let longest = sequences.iter().map(Vec::len).max().unwrap_or(0);
        let mut h = h0;
        for step in 0..longest {
            let mut rows = Vec::with_capacity(n);
            let mut mask = vec![0.0; n * units];
            let mut all_active = true;
            for (d, row) in at.iter().enumerate() {
                match row.get(step) {
                    Some(&(slot, k)) => {
                        rows.push(offsets[slot] + k);
                        mask[d * units..(d + 1) * units].fill(1.0);
                    }
                    None => {
                        rows.push(0);
                        all_active = false;
                    }
                }
            }
            let x = tape.gather_rows(all, &rows)?;
            let next = apply_gru_cell(tape, update, self.params, h, x)?;
            h = if all_active {
                next
            } else {
                let keep = Tensor::new(vec![n, units], mask.iter().map(|m| 1.0 - m).collect())?;
                let m = tape.leaf(Tensor::new(vec![n, units], mask)?);
                let keep = tape.leaf(keep);
                let a = tape.mul(m, next)?;
                let b = tape.mul(keep, h)?;
                tape.add(a, b)?
            };
        }
        Ok(h)
    }

    /// Returns the final value and the entity its rows belong to.
    fn readout(&self, tape: &mut Tape, states: &BTreeMap<String, NodeId>) -> Result<(NodeId, Option<String>)> {
        let model = &self.model.model;
        let mut named: BTreeMap<&str, (NodeId, Option<String>)> = BTreeMap::new();
        let mut previous: Option<(NodeId, Option<String>)> = None;
        for op in &model.readout.pipeline {
            let mut operands = Vec::new();
            if op.input.is_empty() {
                operands.push(previous.clone().ok_or_else(|| Error::Runtime("readout has no input".into()))?);
            }
            for name in &op.input {
                let v = if let Some(v) = named.get(name.as_str()) {
                    v.clone()
                } else if let Some(&s) = states.get(name) {
                    (s, Some(name.clone()))
                } else {
                    return Err(Error::Runtime(format!("unknown readout operand '{name}'")));
                };
                operands.push(v);
            }

            let result = match op.kind {
                ReadoutKind::PoolingSum | ReadoutKind::PoolingMean | ReadoutKind::PoolingMax => {
                    let (x, rows) = &operands[0];
                    let n = tape.value(*x).rows();
                    let kind = match op.kind {
                        ReadoutKind::PoolingSum => ReduceKind::Sum,
                        ReadoutKind::PoolingMean => ReduceKind::Mean,
                        _ => ReduceKind::Max,
                    };
                    if n == 0 && kind == ReduceKind::Max {
                        return Err(Error::Runtime(format!(
                            "pooling_max over entity '{}' with no nodes",
                            rows.as_deref().unwrap_or("?")
                        )));
                    }
                    (tape.segment_reduce(*x, &vec![0; n], 1, kind)?, None)
                }
                _ => {
                    let (ids, rows) = self.align(tape, &operands)?;
                    match op.kind {
                        ReadoutKind::ElementwiseProduct => (tape.mul(ids[0], ids[1])?, rows),
                        ReadoutKind::ConcatStates => (tape.concat(&ids, 1)?, rows),
                        _ => {
                            let nn_name = op.nn_name.as_deref().unwrap_or_default();
                            let input = if ids.len() == 1 { ids[0] } else { tape.concat(&ids, 1)? };
                            (apply_feed_forward(tape, self.model.nn(nn_name)?, self.params, input)?, rows)
                        }
                    }
                }
            };
            if let Some(name) = &op.output_name {
                named.insert(name, result.clone());
            }
            previous = Some(result);
        }
        previous.ok_or_else(|| Error::Runtime("empty readout pipeline".into()))
    }

    /// Tiles global operands to the row count of the entity operands.
    fn align(&self, tape: &mut Tape, operands: &[(NodeId, Option<String>)]) -> Result<(Vec<NodeId>, Option<String>)> {
        let rows = operands.iter().find_map(|(_, r)| r.clone());
        let Some(entity) = &rows else {
            return Ok((operands.iter().map(|(x, _)| *x).collect(), None));
        };
        let n = self.index.count(entity);
        let mut out = Vec::with_capacity(operands.len());
        for (x, r) in operands {
            match r {
                Some(e) if e != entity => {
                    return Err(Error::Runtime(format!("readout operands range over '{entity}' and '{e}'")));
                }
                Some(_) => out.push(*x),
                None => out.push(tape.gather_rows(*x, &vec![0; n])?),
            }
        }
        Ok((out, rows))
    }
}

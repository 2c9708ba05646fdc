//! Semantic analysis of model descriptions, alone and against a dataset.
//!
//! Dimensions are inferred along the dataflow: a direct-assignment message
//! has the sender's state width, a network message has the network's output
//! width, `concat` aggregation adds up the widths of its sources, and every
//! update must reproduce the destination's state width.

use std::collections::{BTreeMap, BTreeSet};

use crate::diagnostics::Diagnostic;
use crate::schema::{
    AggregationKind, Architecture, LayerDef, MessageSpec, ModelDescription, NNDef, OutputLevel, ReadoutKind,
};

/// Features, labels and edge kinds found in a dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetSchema {
    /// entity → feature name → arity
    pub entities: BTreeMap<String, BTreeMap<String, usize>>,
    pub labels: BTreeMap<String, LabelSchema>,
    /// (source entity, target entity) pairs present among the edges.
    pub edge_kinds: BTreeSet<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSchema {
    pub level: LabelLevel,
    pub arity: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelLevel {
    PerNode { entity: String },
    Global,
}

/// Row space of a readout value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rows {
    Entity(String),
    Global,
}

/// What semantic analysis learns about a model besides its diagnostics.
#[derive(Debug, Clone, Default)]
pub struct ModelAnalysis {
    /// Input width of every referenced network.
    pub nn_input_dims: BTreeMap<String, usize>,
    /// Row space and width of the final readout value.
    pub output: Option<(Rows, usize)>,
}

impl ModelAnalysis {
    pub fn output_entity(&self) -> Option<&str> {
        match &self.output {
            Some((Rows::Entity(e), _)) => Some(e),
            _ => None,
        }
    }
}

/// Every semantic violation in `model`, in document order. An empty result
/// (or warnings only) means the model compiles.
pub fn validate_semantics(model: &ModelDescription) -> Vec<Diagnostic> {
    analyze(model).1
}

pub fn analyze(model: &ModelDescription) -> (ModelAnalysis, Vec<Diagnostic>) {
    let mut a = Analyzer {
        model,
        diags: Vec::new(),
        analysis: ModelAnalysis::default(),
        used: BTreeSet::new(),
        input_sites: BTreeMap::new(),
    };
    a.entities();
    a.stages();
    a.readout();
    a.networks();
    let Analyzer { mut diags, analysis, .. } = a;
    for d in &mut diags {
        d.line = model.spans.line(&d.path);
    }
    (analysis, diags)
}

struct Analyzer<'m> {
    model: &'m ModelDescription,
    diags: Vec<Diagnostic>,
    analysis: ModelAnalysis,
    used: BTreeSet<String>,
    input_sites: BTreeMap<String, String>,
}

impl<'m> Analyzer<'m> {
    fn err(&mut self, code: &'static str, path: String, message: String) {
        self.diags.push(Diagnostic::error(code, path, message));
    }

    fn entity_dim(&mut self, name: &str, path: String) -> Option<usize> {
        match self.model.entity(name) {
            Some(e) => Some(e.state_dimension),
            None => {
                self.err("unknown-entity", path, format!("entity '{name}' is not declared"));
                None
            }
        }
    }

    /// Resolves a network reference and records its input width.
    fn use_nn(
        &mut self,
        name: &str,
        path: String,
        want: Option<Architecture>,
        input_dim: Option<usize>,
    ) -> Option<&'m NNDef> {
        self.used.insert(name.to_string());
        let Some(nn) = self.model.nn(name) else {
            self.err("unknown-nn", path, format!("neural network '{name}' is not declared"));
            return None;
        };
        if let Some(arch) = want {
            if nn.architecture != arch {
                let message = format!(
                    "neural network '{name}' is {} but {} is required here",
                    nn.architecture.name(),
                    arch.name()
                );
                self.err("architecture-mismatch", path, message);
                return None;
            }
        }
        if let Some(dim) = input_dim {
            match self.analysis.nn_input_dims.get(name) {
                Some(&prev) if prev != dim => {
                    let first = self.input_sites[name].clone();
                    let message = format!(
                        "neural network '{name}' receives {dim} inputs here but {prev} inputs at {first}"
                    );
                    self.err("nn-input-conflict", path, message);
                }
                Some(_) => {}
                None => {
                    self.analysis.nn_input_dims.insert(name.to_string(), dim);
                    self.input_sites.insert(name.to_string(), path);
                }
            }
        }
        Some(nn)
    }

    fn entities(&mut self) {
        let mut seen = BTreeSet::new();
        for (i, e) in self.model.entities.iter().enumerate() {
            if !seen.insert(e.name.as_str()) {
                let message = format!("entity '{}' is declared more than once", e.name);
                self.err("duplicate-entity", format!("entities[{i}].name"), message);
            }
        }
    }

    fn stages(&mut self) {
        let model = self.model;
        for (si, stage) in model.message_passing.stages.iter().enumerate() {
            let mut destinations = BTreeSet::new();
            for (mi, mp) in stage.message_passings.iter().enumerate() {
                let base = format!("message_passing.stages[{si}].stage_message_passings[{mi}]");
                let dest_dim = self.entity_dim(&mp.destination_entity, format!("{base}.destination_entity"));
                if !destinations.insert(mp.destination_entity.as_str()) {
                    let message = format!(
                        "entity '{}' is updated twice in stage {}",
                        mp.destination_entity,
                        si + 1
                    );
                    self.err("duplicate-destination", format!("{base}.destination_entity"), message);
                }

                let mut dims: Vec<Option<usize>> = Vec::new();
                for (k, src) in mp.sources.iter().enumerate() {
                    let sp = format!("{base}.source_entities[{k}]");
                    let src_dim = self.entity_dim(&src.name, format!("{sp}.name"));
                    let dim = match &src.message {
                        MessageSpec::DirectAssignment => src_dim,
                        MessageSpec::NeuralNetwork { nn_name } => {
                            let input = src_dim.zip(dest_dim).map(|(a, b)| a + b);
                            self.use_nn(nn_name, format!("{sp}.message"), Some(Architecture::FeedForward), input)
                                .and_then(NNDef::output_dim)
                        }
                    };
                    dims.push(dim);
                }

                let agg_dim = if dims.iter().any(Option::is_none) {
                    None
                } else {
                    let dims: Vec<usize> = dims.into_iter().flatten().collect();
                    if mp.aggregation == AggregationKind::Concat {
                        Some(dims.iter().sum())
                    } else if dims.windows(2).any(|w| w[0] != w[1]) {
                        let message = format!(
                            "{} aggregation needs equally sized messages, got widths {:?}",
                            mp.aggregation.name(),
                            dims
                        );
                        self.err("message-dim-mismatch", format!("{base}.source_entities"), message);
                        None
                    } else {
                        dims.first().copied()
                    }
                };

                let up = format!("{base}.update.nn_name");
                let Some(nn) = self.model.nn(&mp.update.nn_name) else {
                    self.use_nn(&mp.update.nn_name, up, None, None);
                    continue;
                };
                let input = match nn.architecture {
                    Architecture::Recurrent => agg_dim,
                    Architecture::FeedForward => agg_dim.zip(dest_dim).map(|(m, d)| m + d),
                };
                self.use_nn(&mp.update.nn_name, up.clone(), None, input);
                if nn.architecture == Architecture::FeedForward && mp.aggregation == AggregationKind::Ordered {
                    let message = format!(
                        "ordered aggregation needs a recurrent update, but '{}' is feed_forward",
                        nn.name
                    );
                    self.err("ordered-requires-recurrent", format!("{base}.aggregation"), message);
                }
                if let (Some(out), Some(d)) = (nn.output_dim(), dest_dim) {
                    if out != d {
                        let message = format!(
                            "update network '{}' produces {} values but entity '{}' has state_dimension {}",
                            nn.name, out, mp.destination_entity, d
                        );
                        self.err("state-dim-mismatch", up, message);
                    }
                }
            }
        }
    }

    fn combine_rows(&mut self, rows: &[Rows], path: &str) -> Option<Rows> {
        let entities: BTreeSet<&String> = rows
            .iter()
            .filter_map(|r| match r {
                Rows::Entity(e) => Some(e),
                Rows::Global => None,
            })
            .collect();
        match entities.len() {
            0 => Some(Rows::Global),
            1 => Some(Rows::Entity(entities.into_iter().next().cloned().unwrap_or_default())),
            _ => {
                let message = format!("operands range over different entities {entities:?}");
                self.err("operand-row-mismatch", format!("{path}.input"), message);
                None
            }
        }
    }

    fn readout(&mut self) {
        let model = self.model;
        let pipeline = &model.readout.pipeline;
        let mut named: BTreeMap<&str, Option<(Rows, usize)>> = BTreeMap::new();
        let mut previous: Option<Option<(Rows, usize)>> = None;

        for (k, op) in pipeline.iter().enumerate() {
            let path = format!("readout.pipeline[{k}]");
            let mut operands: Vec<Option<(Rows, usize)>> = Vec::new();
            if op.input.is_empty() {
                match &previous {
                    Some(prev) => operands.push(prev.clone()),
                    None => {
                        let message = "the first readout operation must name its input".to_string();
                        self.err("missing-operand", format!("{path}.input"), message);
                        operands.push(None);
                    }
                }
            }
            for (j, name) in op.input.iter().enumerate() {
                let ip = format!("{path}.input[{j}]");
                if let Some(v) = named.get(name.as_str()) {
                    operands.push(v.clone());
                } else if let Some(e) = model.entity(name) {
                    operands.push(Some((Rows::Entity(e.name.clone()), e.state_dimension)));
                } else if pipeline[k..].iter().any(|later| later.output_name.as_deref() == Some(name)) {
                    let message = format!("operand '{name}' refers to its own or a later readout output");
                    self.err("readout-cycle", ip, message);
                    operands.push(None);
                } else {
                    let message = format!("operand '{name}' is neither an entity nor an earlier readout output");
                    self.err("unknown-operand", ip, message);
                    operands.push(None);
                }
            }

            let arity_ok = match op.kind {
                ReadoutKind::ElementwiseProduct => operands.len() == 2,
                k if k.is_pooling() => operands.len() == 1,
                _ => !operands.is_empty(),
            };
            if !arity_ok {
                let message = format!("{} cannot take {} operand(s)", op.kind.name(), operands.len());
                self.err("operand-arity", format!("{path}.input"), message);
            }

            let result = if !arity_ok || operands.iter().any(Option::is_none) {
                if let (ReadoutKind::NeuralNetwork, Some(nn)) = (op.kind, &op.nn_name) {
                    self.use_nn(nn, format!("{path}.nn_name"), Some(Architecture::FeedForward), None);
                }
                None
            } else {
                let ops: Vec<(Rows, usize)> = operands.into_iter().flatten().collect();
                let rows: Vec<Rows> = ops.iter().map(|(r, _)| r.clone()).collect();
                let width: usize = ops.iter().map(|(_, d)| d).sum();
                match op.kind {
                    ReadoutKind::PoolingSum | ReadoutKind::PoolingMean | ReadoutKind::PoolingMax => {
                        Some((Rows::Global, ops[0].1))
                    }
                    ReadoutKind::ElementwiseProduct => {
                        if ops[0].1 != ops[1].1 {
                            let message =
                                format!("elementwise_product operands have widths {} and {}", ops[0].1, ops[1].1);
                            self.err("operand-dim-mismatch", format!("{path}.input"), message);
                            None
                        } else {
                            self.combine_rows(&rows, &path).map(|r| (r, ops[0].1))
                        }
                    }
                    ReadoutKind::ConcatStates => self.combine_rows(&rows, &path).map(|r| (r, width)),
                    ReadoutKind::NeuralNetwork => {
                        let rows = self.combine_rows(&rows, &path);
                        let nn_name = op.nn_name.as_deref().unwrap_or_default();
                        let nn = self.use_nn(
                            nn_name,
                            format!("{path}.nn_name"),
                            Some(Architecture::FeedForward),
                            Some(width),
                        );
                        rows.zip(nn.and_then(NNDef::output_dim))
                    }
                }
            };

            if let Some(name) = &op.output_name {
                if model.entity(name).is_some() || named.contains_key(name.as_str()) {
                    let message = format!("readout output name '{name}' is already in use");
                    self.err("duplicate-name", format!("{path}.output_name"), message);
                } else {
                    named.insert(name, result.clone());
                }
            }
            previous = Some(result);
        }

        let Some(Some((rows, dim))) = previous else { return };
        let level = model.readout.output_level;
        let level_ok = matches!(
            (&rows, level),
            (Rows::Entity(_), OutputLevel::PerNode) | (Rows::Global, OutputLevel::Global)
        );
        if !level_ok {
            let message = format!(
                "readout is declared {} but its final operation yields {}",
                level.name(),
                match &rows {
                    Rows::Entity(e) => format!("one row per '{e}' node"),
                    Rows::Global => "a single global row".into(),
                }
            );
            self.err("output-level-mismatch", "readout.output_level".into(), message);
        }
        if dim != 1 {
            let message = format!(
                "readout produces {dim} values per prediction but label '{}' has arity 1",
                model.readout.output_label
            );
            self.err("label-dim-mismatch", format!("readout.pipeline[{}]", pipeline.len() - 1), message);
        }
        self.analysis.output = Some((rows, dim));
    }

    fn networks(&mut self) {
        let mut seen = BTreeSet::new();
        for (i, nn) in self.model.neural_networks.iter().enumerate() {
            let path = format!("neural_networks[{i}]");
            if !seen.insert(nn.name.as_str()) {
                let message = format!("neural network '{}' is declared more than once", nn.name);
                self.err("duplicate-nn", format!("{path}.name"), message);
            }
            let grus = nn.layers.iter().filter(|l| matches!(l, LayerDef::GruCell { .. })).count();
            let bad = match nn.architecture {
                Architecture::Recurrent => (grus != 1 || nn.layers.len() != 1)
                    .then(|| "a recurrent network must consist of exactly one gru_cell layer".to_string()),
                Architecture::FeedForward => {
                    (grus > 0).then(|| "a feed_forward network may only contain dense layers".to_string())
                }
            };
            if let Some(message) = bad {
                self.err("invalid-architecture", format!("{path}.layers"), message);
            }
            if !self.used.contains(&nn.name) {
                let message = format!("neural network '{}' is never used", nn.name);
                self.diags.push(Diagnostic::warning("unused-nn", path, message));
            }
        }
    }
}

/// Checks a model against the features and labels a dataset provides.
pub fn validate_dataset(model: &ModelDescription, schema: &DatasetSchema) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    for (i, e) in model.entities.iter().enumerate() {
        let Some(features) = schema.entities.get(&e.name) else {
            let message = format!("entity '{}' has no nodes in the dataset", e.name);
            diags.push(Diagnostic::warning("missing-entity", format!("entities[{i}].name"), message));
            continue;
        };
        let mut width = 0;
        for (j, op) in e.initial_state.iter().enumerate() {
            for (k, f) in op.input.iter().enumerate() {
                match features.get(f) {
                    Some(arity) => width += arity,
                    None => {
                        let message = format!("feature '{f}' of entity '{}' is absent from the dataset", e.name);
                        let path = format!("entities[{i}].initial_state[{j}].input[{k}]");
                        diags.push(Diagnostic::error("missing-feature", path, message));
                    }
                }
            }
        }
        if width > e.state_dimension {
            let message = format!(
                "features of entity '{}' need {} values but state_dimension is {} ({} > {})",
                e.name, width, e.state_dimension, width, e.state_dimension
            );
            diags.push(Diagnostic::error("state-overflow", format!("entities[{i}].state_dimension"), message));
        }
    }

    for (si, stage) in model.message_passing.stages.iter().enumerate() {
        for (mi, mp) in stage.message_passings.iter().enumerate() {
            for (k, src) in mp.sources.iter().enumerate() {
                let kind = (src.name.clone(), mp.destination_entity.clone());
                if !schema.edge_kinds.contains(&kind) {
                    let path =
                        format!("message_passing.stages[{si}].stage_message_passings[{mi}].source_entities[{k}].name");
                    let message = format!("the dataset has no '{}' -> '{}' edges", kind.0, kind.1);
                    diags.push(Diagnostic::warning("missing-edge-kind", path, message));
                }
            }
        }
    }

    let label = &model.readout.output_label;
    match schema.labels.get(label) {
        None => {
            let message = format!("label '{label}' is absent from the dataset");
            diags.push(Diagnostic::error("missing-label", "readout.output_label", message));
        }
        Some(ls) => {
            let (analysis, _) = analyze(model);
            let mismatch = match (&ls.level, model.readout.output_level) {
                (LabelLevel::Global, OutputLevel::Global) => None,
                (LabelLevel::PerNode { entity }, OutputLevel::PerNode) => match analysis.output_entity() {
                    Some(out) if out != entity => Some(format!(
                        "label '{label}' is given per '{entity}' node but the readout predicts per '{out}' node"
                    )),
                    _ => None,
                },
                (LabelLevel::Global, OutputLevel::PerNode) => {
                    Some(format!("label '{label}' is global but the readout is per_node"))
                }
                (LabelLevel::PerNode { entity }, OutputLevel::Global) => {
                    Some(format!("label '{label}' is given per '{entity}' node but the readout is global"))
                }
            };
            if let Some(message) = mismatch {
                diags.push(Diagnostic::error("label-level-mismatch", "readout.output_label", message));
            }
        }
    }

    for d in &mut diags {
        d.line = model.spans.line(&d.path);
    }
    diags
}

//! In-memory form of a multi-stage message passing model description.
//!
//! A description names the node entities of a heterogeneous graph, the
//! stages in which entities exchange hidden states, the readout pipeline and
//! the neural networks referenced along the way. [`parse_model_description`]
//! turns YAML text into a [`ModelDescription`]; [`ModelDescription::to_yaml`]
//! and [`export_msmp_dot`] go the other way.

mod dot;
mod emit;
mod parse;
mod yaml;

use std::collections::BTreeMap;
use std::fmt;

pub use dot::export_msmp_dot;
pub use parse::parse_model_description;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityDef {
    pub name: String,
    pub state_dimension: usize,
    pub initial_state: Vec<InitOp>,
}

impl EntityDef {
    /// Features read by the initial-state pipeline, in declaration order.
    pub fn input_features(&self) -> impl Iterator<Item = &str> {
        self.initial_state.iter().flat_map(|op| op.input.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// Concatenate the listed features and zero-pad to the state dimension.
    BuildState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitOp {
    pub kind: InitKind,
    pub input: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessagePassingDef {
    pub num_iterations: usize,
    pub stages: Vec<StageDef>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageDef {
    pub message_passings: Vec<StageMessagePassing>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageMessagePassing {
    pub destination_entity: String,
    pub sources: Vec<SourceSpec>,
    pub aggregation: AggregationKind,
    pub update: UpdateSpec,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceSpec {
    pub name: String,
    pub message: MessageSpec,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MessageSpec {
    DirectAssignment,
    /// `nn(concat(sender_state, receiver_state))`.
    NeuralNetwork { nn_name: String },
}

impl MessageSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            MessageSpec::DirectAssignment => "direct_assignment",
            MessageSpec::NeuralNetwork { .. } => "neural_network",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationKind {
    Sum,
    Mean,
    Min,
    Max,
    Ordered,
    Concat,
}

impl AggregationKind {
    pub const ALL: [(&'static str, AggregationKind); 6] = [
        ("sum", AggregationKind::Sum),
        ("mean", AggregationKind::Mean),
        ("min", AggregationKind::Min),
        ("max", AggregationKind::Max),
        ("ordered", AggregationKind::Ordered),
        ("concat", AggregationKind::Concat),
    ];

    pub fn name(self) -> &'static str {
        Self::ALL.iter().find(|(_, k)| *k == self).map(|(n, _)| *n).unwrap_or("?")
    }

    /// Sum and mean have a zero identity; the others fault on empty input.
    pub fn has_empty_identity(self) -> bool {
        matches!(self, AggregationKind::Sum | AggregationKind::Mean)
    }
}

/// The only update kind is a neural network; it is feed-forward or
/// recurrent depending on the referenced definition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateSpec {
    pub nn_name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputLevel {
    PerNode,
    Global,
}

impl OutputLevel {
    pub fn name(self) -> &'static str {
        match self {
            OutputLevel::PerNode => "per_node",
            OutputLevel::Global => "global",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadoutDef {
    pub pipeline: Vec<ReadoutOp>,
    pub output_label: String,
    pub output_level: OutputLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadoutKind {
    PoolingSum,
    PoolingMean,
    PoolingMax,
    NeuralNetwork,
    ElementwiseProduct,
    ConcatStates,
}

impl ReadoutKind {
    pub const ALL: [(&'static str, ReadoutKind); 6] = [
        ("pooling_sum", ReadoutKind::PoolingSum),
        ("pooling_mean", ReadoutKind::PoolingMean),
        ("pooling_max", ReadoutKind::PoolingMax),
        ("neural_network", ReadoutKind::NeuralNetwork),
        ("elementwise_product", ReadoutKind::ElementwiseProduct),
        ("concat_states", ReadoutKind::ConcatStates),
    ];

    pub fn name(self) -> &'static str {
        Self::ALL.iter().find(|(_, k)| *k == self).map(|(n, _)| *n).unwrap_or("?")
    }

    pub fn is_pooling(self) -> bool {
        matches!(self, ReadoutKind::PoolingSum | ReadoutKind::PoolingMean | ReadoutKind::PoolingMax)
    }
}

/// One readout instruction. An empty `input` consumes the previous op's
/// output. Operands are entity names or the `output_name` of an earlier op.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadoutOp {
    pub kind: ReadoutKind,
    pub input: Vec<String>,
    pub nn_name: Option<String>,
    pub output_name: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    FeedForward,
    Recurrent,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::FeedForward => "feed_forward",
            Architecture::Recurrent => "recurrent",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Selu,
    Linear,
}

impl Activation {
    pub const ALL: [(&'static str, Activation); 5] = [
        ("relu", Activation::Relu),
        ("sigmoid", Activation::Sigmoid),
        ("tanh", Activation::Tanh),
        ("selu", Activation::Selu),
        ("linear", Activation::Linear),
    ];

    pub fn name(self) -> &'static str {
        Self::ALL.iter().find(|(_, k)| *k == self).map(|(n, _)| *n).unwrap_or("?")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerDef {
    Dense { units: usize, activation: Activation },
    GruCell { units: usize },
}

impl LayerDef {
    pub fn units(&self) -> usize {
        match *self {
            LayerDef::Dense { units, .. } | LayerDef::GruCell { units } => units,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NNDef {
    pub name: String,
    pub architecture: Architecture,
    pub layers: Vec<LayerDef>,
}

impl NNDef {
    pub fn output_dim(&self) -> Option<usize> {
        self.layers.last().map(LayerDef::units)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Mse,
    Mae,
    BinaryCrossEntropy,
}

impl Loss {
    pub const ALL: [(&'static str, Loss); 3] = [
        ("mse", Loss::Mse),
        ("mae", Loss::Mae),
        ("binary_cross_entropy", Loss::BinaryCrossEntropy),
    ];

    pub fn name(self) -> &'static str {
        Self::ALL.iter().find(|(_, k)| *k == self).map(|(n, _)| *n).unwrap_or("?")
    }
}

/// Source line of each document path seen while parsing.
#[derive(Debug, Clone, Default)]
pub struct SpanMap(BTreeMap<String, usize>);

impl SpanMap {
    pub fn insert(&mut self, path: impl Into<String>, line: usize) {
        self.0.entry(path.into()).or_insert(line);
    }

    /// Line of `path`, falling back to the closest recorded ancestor.
    pub fn line(&self, path: &str) -> Option<usize> {
        let mut p = path;
        loop {
            if let Some(&line) = self.0.get(p) {
                return Some(line);
            }
            let cut = p.rfind(['.', '['])?;
            p = &p[..cut];
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelDescription {
    pub entities: Vec<EntityDef>,
    pub message_passing: MessagePassingDef,
    pub readout: ReadoutDef,
    pub neural_networks: Vec<NNDef>,
    pub loss: Loss,
    /// Source lines; empty for models built in code.
    pub spans: SpanMap,
}

/// Structural equality; source spans are ignored.
impl PartialEq for ModelDescription {
    fn eq(&self, other: &Self) -> bool {
        self.entities == other.entities
            && self.message_passing == other.message_passing
            && self.readout == other.readout
            && self.neural_networks == other.neural_networks
            && self.loss == other.loss
    }
}

impl ModelDescription {
    pub fn entity(&self, name: &str) -> Option<&EntityDef> {
        self.entities.iter().find(|e| e.name == name)
    }

    pub fn nn(&self, name: &str) -> Option<&NNDef> {
        self.neural_networks.iter().find(|n| n.name == name)
    }

    pub fn stage_count(&self) -> usize {
        self.message_passing.stages.len()
    }
}

impl fmt::Display for ModelDescription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_yaml())
    }
}

/// Identifiers match `[A-Za-z_][A-Za-z0-9_]*`.
pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

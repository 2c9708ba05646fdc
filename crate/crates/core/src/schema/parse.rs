use super::yaml::{self, Node, Value};
use super::*;
use crate::diagnostics::Diagnostic;

/// Parses a YAML model description. All syntactic faults found are
/// reported, each with a document path and line.
pub fn parse_model_description(yaml_text: &str) -> Result<ModelDescription, Vec<Diagnostic>> {
    let root = match yaml::load(yaml_text) {
        Ok(root) => root,
        Err(e) => {
            return Err(vec![Diagnostic::error(
                "yaml-syntax",
                display(""),
                format!("malformed YAML: {}", e.message),
            )
            .at_line(Some(e.line))]);
        }
    };
    let mut p = Reader::default();
    let model = p.model(&root);
    match model {
        Some(m) if p.diags.is_empty() => Ok(m),
        _ => {
            if p.diags.is_empty() {
                p.diags.push(Diagnostic::error("invalid-document", display(""), "model description is incomplete"));
            }
            Err(p.diags)
        }
    }
}

#[derive(Default)]
struct Reader {
    diags: Vec<Diagnostic>,
    spans: SpanMap,
}

type Entries<'n> = &'n [(Node, Node)];

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn scalar_text(node: &Node) -> Option<&str> {
    match &node.value {
        Value::Scalar { text, .. } => Some(text),
        _ => None,
    }
}

impl Reader {
    fn error(&mut self, code: &'static str, path: &str, line: usize, message: String) {
        self.diags.push(Diagnostic::error(code, display(path), message).at_line(Some(line)));
    }

    fn type_error(&mut self, node: &Node, path: &str, expected: &str) {
        let message = format!("expected {expected} at '{}', found {}", display(path), node.kind());
        self.error("type-mismatch", path, node.line, message);
    }

    /// Checks that `node` is a mapping whose keys are all in `allowed`.
    fn map<'n>(&mut self, node: &'n Node, path: &str, allowed: &[&str]) -> Option<Entries<'n>> {
        self.spans.insert(path, node.line);
        let Value::Map(entries) = &node.value else {
            self.type_error(node, path, "a mapping");
            return None;
        };
        let mut seen: Vec<&str> = Vec::new();
        for (k, v) in entries {
            let Some(key) = scalar_text(k) else {
                self.type_error(k, path, "a string key");
                continue;
            };
            let kp = join(path, key);
            if !allowed.contains(&key) {
                self.error("unknown-key", &kp, k.line, format!("unknown key '{key}' in '{}'", display(path)));
            } else if seen.contains(&key) {
                self.error("duplicate-key", &kp, k.line, format!("key '{key}' appears more than once"));
            }
            seen.push(key);
            self.spans.insert(kp, v.line.max(k.line));
        }
        Some(entries)
    }

    fn get<'n>(&mut self, entries: Entries<'n>, key: &str) -> Option<&'n Node> {
        entries
            .iter()
            .find(|(k, _)| scalar_text(k) == Some(key))
            .map(|(_, v)| v)
            .filter(|v| !v.is_null())
    }

    fn required<'n>(&mut self, entries: Entries<'n>, owner: &Node, path: &str, key: &str) -> Option<&'n Node> {
        let found = self.get(entries, key);
        if found.is_none() {
            let message = format!("missing required field '{key}' in '{}'", display(path));
            self.error("missing-field", &join(path, key), owner.line, message);
        }
        found
    }

    fn string(&mut self, node: &Node, path: &str) -> Option<String> {
        match &node.value {
            Value::Scalar { text, .. } if !text.is_empty() => Some(text.clone()),
            _ => {
                self.type_error(node, path, "a non-empty string");
                None
            }
        }
    }

    fn identifier(&mut self, node: &Node, path: &str) -> Option<String> {
        let s = self.string(node, path)?;
        if !is_identifier(&s) {
            let message = format!("'{s}' is not a valid identifier");
            self.error("invalid-identifier", path, node.line, message);
            return None;
        }
        Some(s)
    }

    fn positive_int(&mut self, node: &Node, path: &str) -> Option<usize> {
        let text = match &node.value {
            Value::Scalar { text, plain: true } => text,
            _ => {
                self.type_error(node, path, "a positive integer");
                return None;
            }
        };
        match text.parse::<i64>() {
            Ok(v) if v >= 1 => Some(v as usize),
            Ok(v) => {
                let message = format!("'{path}' must be at least 1, got {v}");
                self.error("invalid-value", path, node.line, message);
                None
            }
            Err(_) => {
                self.type_error(node, path, "a positive integer");
                None
            }
        }
    }

    fn seq<'n>(&mut self, node: &'n Node, path: &str) -> Option<&'n [Node]> {
        self.spans.insert(path, node.line);
        match &node.value {
            Value::Seq(items) => Some(items),
            _ => {
                self.type_error(node, path, "a list");
                None
            }
        }
    }

    fn non_empty_seq<'n>(&mut self, node: &'n Node, path: &str, what: &str) -> Option<&'n [Node]> {
        let items = self.seq(node, path)?;
        if items.is_empty() {
            self.error("empty-list", path, node.line, what.to_string());
            return None;
        }
        Some(items)
    }

    fn kind<T: Copy>(&mut self, node: &Node, path: &str, what: &str, options: &[(&str, T)]) -> Option<T> {
        let s = self.string(node, path)?;
        match options.iter().find(|(name, _)| *name == s) {
            Some((_, k)) => Some(*k),
            None => {
                let message = format!("unknown {what} kind '{s}'");
                self.error("unknown-kind", path, node.line, message);
                None
            }
        }
    }

    /// Accepts a single mapping or a one-entry list of mappings.
    fn single<'n>(&mut self, node: &'n Node, path: &str) -> Option<(&'n Node, String)> {
        match &node.value {
            Value::Seq(items) if items.len() == 1 => Some((&items[0], format!("{path}[0]"))),
            Value::Seq(items) => {
                let message = format!("'{path}' must contain exactly one entry, found {}", items.len());
                self.error("list-length", path, node.line, message);
                None
            }
            _ => Some((node, path.to_string())),
        }
    }

    fn list_of<T>(
        &mut self,
        items: &[Node],
        path: &str,
        mut each: impl FnMut(&mut Self, &Node, &str) -> Option<T>,
    ) -> Option<Vec<T>> {
        let mut out = Vec::with_capacity(items.len());
        let mut ok = true;
        for (i, item) in items.iter().enumerate() {
            match each(self, item, &format!("{path}[{i}]")) {
                Some(v) => out.push(v),
                None => ok = false,
            }
        }
        ok.then_some(out)
    }

    fn model(&mut self, root: &Node) -> Option<ModelDescription> {
        const KEYS: [&str; 5] = ["entities", "message_passing", "readout", "neural_networks", "loss"];
        let top = self.map(root, "", &KEYS)?;

        let entities = match self.required(top, root, "", "entities") {
            Some(n) => self
                .non_empty_seq(n, "entities", "model must declare at least one entity")
                .and_then(|items| self.list_of(items, "entities", Self::entity)),
            None => None,
        };
        let message_passing = self
            .required(top, root, "", "message_passing")
            .and_then(|n| self.message_passing(n, "message_passing"));
        let readout = self.required(top, root, "", "readout").and_then(|n| self.readout(n, "readout"));
        let neural_networks = match self.get(top, "neural_networks") {
            Some(n) => self.seq(n, "neural_networks").and_then(|items| self.list_of(items, "neural_networks", Self::nn)),
            None => Some(Vec::new()),
        };
        let loss = match self.get(top, "loss") {
            Some(n) => self.kind(n, "loss", "loss", &Loss::ALL),
            None => Some(Loss::Mse),
        };

        Some(ModelDescription {
            entities: entities?,
            message_passing: message_passing?,
            readout: readout?,
            neural_networks: neural_networks?,
            loss: loss?,
            spans: std::mem::take(&mut self.spans),
        })
    }

    fn entity(&mut self, node: &Node, path: &str) -> Option<EntityDef> {
        let m = self.map(node, path, &["name", "state_dimension", "initial_state"])?;
        let name = self.required(m, node, path, "name").and_then(|n| self.identifier(n, &join(path, "name")));
        let dim = self
            .required(m, node, path, "state_dimension")
            .and_then(|n| self.positive_int(n, &join(path, "state_dimension")));
        let ip = join(path, "initial_state");
        let init = self.required(m, node, path, "initial_state").and_then(|n| {
            let items = self.non_empty_seq(n, &ip, "entity must declare at least one initial_state operation")?;
            self.list_of(items, &ip, Self::init_op)
        });
        Some(EntityDef {
            name: name?,
            state_dimension: dim?,
            initial_state: init?,
        })
    }

    fn init_op(&mut self, node: &Node, path: &str) -> Option<InitOp> {
        let m = self.map(node, path, &["type", "input"])?;
        let kind = self
            .required(m, node, path, "type")
            .and_then(|n| self.kind(n, &join(path, "type"), "initial_state", &[("build_state", InitKind::BuildState)]));
        let ip = join(path, "input");
        let input = self.required(m, node, path, "input").and_then(|n| {
            let items = self.non_empty_seq(n, &ip, "build_state must read at least one feature")?;
            self.list_of(items, &ip, Self::string)
        });
        Some(InitOp { kind: kind?, input: input? })
    }

    fn message_passing(&mut self, node: &Node, path: &str) -> Option<MessagePassingDef> {
        let m = self.map(node, path, &["num_iterations", "stages"])?;
        let iters = self
            .required(m, node, path, "num_iterations")
            .and_then(|n| self.positive_int(n, &join(path, "num_iterations")));
        let sp = join(path, "stages");
        let stages = self.required(m, node, path, "stages").and_then(|n| {
            let items = self.non_empty_seq(n, &sp, "message passing must declare at least one stage")?;
            self.list_of(items, &sp, Self::stage)
        });
        Some(MessagePassingDef {
            num_iterations: iters?,
            stages: stages?,
        })
    }

    fn stage(&mut self, node: &Node, path: &str) -> Option<StageDef> {
        let m = self.map(node, path, &["stage_message_passings"])?;
        let sp = join(path, "stage_message_passings");
        let mps = self.required(m, node, path, "stage_message_passings").and_then(|n| {
            let items = self.non_empty_seq(n, &sp, "stage must declare at least one message passing")?;
            self.list_of(items, &sp, Self::stage_mp)
        });
        Some(StageDef { message_passings: mps? })
    }

    fn stage_mp(&mut self, node: &Node, path: &str) -> Option<StageMessagePassing> {
        let m = self.map(node, path, &["destination_entity", "source_entities", "aggregation", "update"])?;
        let dest = self
            .required(m, node, path, "destination_entity")
            .and_then(|n| self.identifier(n, &join(path, "destination_entity")));
        let sp = join(path, "source_entities");
        let sources = self.required(m, node, path, "source_entities").and_then(|n| {
            let items = self.non_empty_seq(n, &sp, "message passing must declare at least one source entity")?;
            self.list_of(items, &sp, Self::source)
        });
        let aggregation = self.required(m, node, path, "aggregation").and_then(|n| {
            let (inner, ip) = self.single(n, &join(path, "aggregation"))?;
            let am = self.map(inner, &ip, &["type"])?;
            let t = self.required(am, inner, &ip, "type")?;
            self.kind(t, &join(&ip, "type"), "aggregation", &AggregationKind::ALL)
        });
        let up = join(path, "update");
        let update = self.required(m, node, path, "update").and_then(|n| self.update(n, &up));
        Some(StageMessagePassing {
            destination_entity: dest?,
            sources: sources?,
            aggregation: aggregation?,
            update: update?,
        })
    }

    fn source(&mut self, node: &Node, path: &str) -> Option<SourceSpec> {
        let m = self.map(node, path, &["name", "message"])?;
        let name = self.required(m, node, path, "name").and_then(|n| self.identifier(n, &join(path, "name")));
        let message = self.required(m, node, path, "message").and_then(|n| {
            let (inner, mp) = self.single(n, &join(path, "message"))?;
            self.message(inner, &mp)
        });
        Some(SourceSpec { name: name?, message: message? })
    }

    fn message(&mut self, node: &Node, path: &str) -> Option<MessageSpec> {
        #[derive(Clone, Copy)]
        enum K {
            Direct,
            Nn,
        }
        let m = self.map(node, path, &["type", "nn_name"])?;
        let kind = self.required(m, node, path, "type").and_then(|n| {
            self.kind(n, &join(path, "type"), "message", &[("direct_assignment", K::Direct), ("neural_network", K::Nn)])
        })?;
        match kind {
            K::Direct => {
                if let Some(n) = self.get(m, "nn_name") {
                    let message = "direct_assignment messages take no nn_name".to_string();
                    self.error("unexpected-field", &join(path, "nn_name"), n.line, message);
                    return None;
                }
                Some(MessageSpec::DirectAssignment)
            }
            K::Nn => {
                let nn_name = self
                    .required(m, node, path, "nn_name")
                    .and_then(|n| self.identifier(n, &join(path, "nn_name")))?;
                Some(MessageSpec::NeuralNetwork { nn_name })
            }
        }
    }

    fn update(&mut self, node: &Node, path: &str) -> Option<UpdateSpec> {
        let m = self.map(node, path, &["type", "nn_name"])?;
        let kind = self
            .required(m, node, path, "type")
            .and_then(|n| self.kind(n, &join(path, "type"), "update", &[("neural_network", ())]));
        let nn_name = self
            .required(m, node, path, "nn_name")
            .and_then(|n| self.identifier(n, &join(path, "nn_name")));
        kind?;
        Some(UpdateSpec { nn_name: nn_name? })
    }

    fn readout(&mut self, node: &Node, path: &str) -> Option<ReadoutDef> {
        let m = self.map(node, path, &["pipeline", "output_label", "output_level"])?;
        let pp = join(path, "pipeline");
        let pipeline = self.required(m, node, path, "pipeline").and_then(|n| {
            let items = self.non_empty_seq(n, &pp, "readout pipeline must contain at least one operation")?;
            self.list_of(items, &pp, Self::readout_op)
        });
        let label = self
            .required(m, node, path, "output_label")
            .and_then(|n| self.identifier(n, &join(path, "output_label")));
        let level = match self.get(m, "output_level") {
            Some(n) => self.kind(
                n,
                &join(path, "output_level"),
                "output_level",
                &[("per_node", OutputLevel::PerNode), ("global", OutputLevel::Global)],
            ),
            None => Some(OutputLevel::PerNode),
        };
        Some(ReadoutDef {
            pipeline: pipeline?,
            output_label: label?,
            output_level: level?,
        })
    }

    fn readout_op(&mut self, node: &Node, path: &str) -> Option<ReadoutOp> {
        let m = self.map(node, path, &["type", "input", "nn_name", "output_name"])?;
        let kind = self
            .required(m, node, path, "type")
            .and_then(|n| self.kind(n, &join(path, "type"), "readout operation", &ReadoutKind::ALL));
        let ip = join(path, "input");
        let input = match self.get(m, "input") {
            Some(n) => self.seq(n, &ip).and_then(|items| self.list_of(items, &ip, Self::identifier)),
            None => Some(Vec::new()),
        };
        let nn_name = match self.get(m, "nn_name") {
            Some(n) => self.identifier(n, &join(path, "nn_name")).map(Some),
            None => Some(None),
        };
        let output_name = match self.get(m, "output_name") {
            Some(n) => self.identifier(n, &join(path, "output_name")).map(Some),
            None => Some(None),
        };
        let kind = kind?;
        let nn_name = nn_name?;
        if kind == ReadoutKind::NeuralNetwork && nn_name.is_none() {
            let message = format!("missing required field 'nn_name' in '{path}'");
            self.error("missing-field", &join(path, "nn_name"), node.line, message);
            return None;
        }
        if kind != ReadoutKind::NeuralNetwork {
            if let Some(n) = self.get(m, "nn_name") {
                let message = format!("{} takes no nn_name", kind.name());
                self.error("unexpected-field", &join(path, "nn_name"), n.line, message);
                return None;
            }
        }
        Some(ReadoutOp {
            kind,
            input: input?,
            nn_name,
            output_name: output_name?,
        })
    }

    fn nn(&mut self, node: &Node, path: &str) -> Option<NNDef> {
        let m = self.map(node, path, &["name", "architecture", "layers"])?;
        let name = self.required(m, node, path, "name").and_then(|n| self.identifier(n, &join(path, "name")));
        let arch = self.required(m, node, path, "architecture").and_then(|n| {
            self.kind(
                n,
                &join(path, "architecture"),
                "architecture",
                &[("feed_forward", Architecture::FeedForward), ("recurrent", Architecture::Recurrent)],
            )
        });
        let lp = join(path, "layers");
        let layers = self.required(m, node, path, "layers").and_then(|n| {
            let items = self.non_empty_seq(n, &lp, "neural network must declare at least one layer")?;
            self.list_of(items, &lp, Self::layer)
        });
        Some(NNDef {
            name: name?,
            architecture: arch?,
            layers: layers?,
        })
    }

    fn layer(&mut self, node: &Node, path: &str) -> Option<LayerDef> {
        #[derive(Clone, Copy, PartialEq)]
        enum K {
            Dense,
            Gru,
        }
        let m = self.map(node, path, &["type", "units", "activation"])?;
        let kind = self
            .required(m, node, path, "type")
            .and_then(|n| self.kind(n, &join(path, "type"), "layer", &[("dense", K::Dense), ("gru_cell", K::Gru)]));
        let units = self.required(m, node, path, "units").and_then(|n| self.positive_int(n, &join(path, "units")));
        let activation = match self.get(m, "activation") {
            Some(n) => self.kind(n, &join(path, "activation"), "activation", &Activation::ALL).map(Some),
            None => Some(None),
        };
        let (kind, units, activation) = (kind?, units?, activation?);
        match kind {
            K::Dense => Some(LayerDef::Dense {
                units,
                activation: activation.unwrap_or(Activation::Relu),
            }),
            K::Gru => {
                if activation.is_some() {
                    let message = "gru_cell layers take no activation".to_string();
                    self.error("unexpected-field", &join(path, "activation"), node.line, message);
                    return None;
                }
                Some(LayerDef::GruCell { units })
            }
        }
    }
}

fn display(path: &str) -> &str {
    if path.is_empty() {
        "<document>"
    } else {
        path
    }
}

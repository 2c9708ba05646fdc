use std::fmt::Write;

use super::{MessageSpec, ModelDescription};

/// Double-quoted DOT id. Labels carry `\n` escapes on purpose, so only
/// quotes are escaped.
fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\\\""))
}

/// Renders the message passing scheme as a Graphviz digraph: one node per
/// entity, one edge per source/destination pair per stage. Entities appear
/// in declaration order and edges in stage order.
pub fn export_msmp_dot(model: &ModelDescription) -> String {
    let mut out = String::from("digraph msmp {\n  rankdir=LR;\n  node [shape=box, style=rounded];\n");
    for e in &model.entities {
        let label = format!("{}\\ndim {}", e.name, e.state_dimension);
        let _ = writeln!(out, "  {} [label={}];", quote(&e.name), quote(&label));
    }
    for (s, stage) in model.message_passing.stages.iter().enumerate() {
        for mp in &stage.message_passings {
            for src in &mp.sources {
                let message = match &src.message {
                    MessageSpec::DirectAssignment => "direct_assignment".to_string(),
                    MessageSpec::NeuralNetwork { nn_name } => format!("neural_network({nn_name})"),
                };
                let label = format!(
                    "stage {}\\nmessage: {}\\naggregation: {}\\nupdate: {}",
                    s + 1,
                    message,
                    mp.aggregation.name(),
                    mp.update.nn_name
                );
                let _ = writeln!(
                    out,
                    "  {} -> {} [label={}, stage={}];",
                    quote(&src.name),
                    quote(&mp.destination_entity),
                    quote(&label),
                    s + 1
                );
            }
        }
    }
    out.push_str("}\n");
    out
}

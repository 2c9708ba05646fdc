use std::fmt::Write;

use super::*;

impl ModelDescription {
    /// Canonical YAML rendering; every default is written out explicitly.
    pub fn to_yaml(&self) -> String {
        let mut out = String::new();
        let w = &mut out;
        w.push_str("entities:\n");
        for e in &self.entities {
            let _ = writeln!(w, "  - name: {}", e.name);
            let _ = writeln!(w, "    state_dimension: {}", e.state_dimension);
            w.push_str("    initial_state:\n");
            for op in &e.initial_state {
                let kind = match op.kind {
                    InitKind::BuildState => "build_state",
                };
                let _ = writeln!(w, "      - type: {kind}");
                let _ = writeln!(w, "        input: [{}]", op.input.join(", "));
            }
        }
        w.push_str("message_passing:\n");
        let _ = writeln!(w, "  num_iterations: {}", self.message_passing.num_iterations);
        w.push_str("  stages:\n");
        for stage in &self.message_passing.stages {
            w.push_str("    - stage_message_passings:\n");
            for mp in &stage.message_passings {
                let _ = writeln!(w, "        - destination_entity: {}", mp.destination_entity);
                w.push_str("          source_entities:\n");
                for s in &mp.sources {
                    let _ = writeln!(w, "            - name: {}", s.name);
                    w.push_str("              message:\n");
                    let _ = writeln!(w, "                - type: {}", s.message.kind_name());
                    if let MessageSpec::NeuralNetwork { nn_name } = &s.message {
                        let _ = writeln!(w, "                  nn_name: {nn_name}");
                    }
                }
                w.push_str("          aggregation:\n");
                let _ = writeln!(w, "            - type: {}", mp.aggregation.name());
                w.push_str("          update:\n            type: neural_network\n");
                let _ = writeln!(w, "            nn_name: {}", mp.update.nn_name);
            }
        }
        w.push_str("readout:\n");
        let _ = writeln!(w, "  output_label: {}", self.readout.output_label);
        let _ = writeln!(w, "  output_level: {}", self.readout.output_level.name());
        w.push_str("  pipeline:\n");
        for op in &self.readout.pipeline {
            let _ = writeln!(w, "    - type: {}", op.kind.name());
            if !op.input.is_empty() {
                let _ = writeln!(w, "      input: [{}]", op.input.join(", "));
            }
            if let Some(nn) = &op.nn_name {
                let _ = writeln!(w, "      nn_name: {nn}");
            }
            if let Some(name) = &op.output_name {
                let _ = writeln!(w, "      output_name: {name}");
            }
        }
        if self.neural_networks.is_empty() {
            w.push_str("neural_networks: []\n");
        } else {
            w.push_str("neural_networks:\n");
        }
        for nn in &self.neural_networks {
            let _ = writeln!(w, "  - name: {}", nn.name);
            let _ = writeln!(w, "    architecture: {}", nn.architecture.name());
            w.push_str("    layers:\n");
            for layer in &nn.layers {
                match layer {
                    LayerDef::Dense { units, activation } => {
                        let _ = writeln!(w, "      - type: dense\n        units: {units}");
                        let _ = writeln!(w, "        activation: {}", activation.name());
                    }
                    LayerDef::GruCell { units } => {
                        let _ = writeln!(w, "      - type: gru_cell\n        units: {units}");
                    }
                }
            }
        }
        let _ = writeln!(w, "loss: {}", self.loss.name());
        out
    }
}

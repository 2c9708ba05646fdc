//! Whole-suite checks shared by the integration tests and the acceptance run.
//! Each returns a one-line summary or a description of what failed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use msmp_core::dataset::{GraphEdge, GraphNode, HeterogeneousGraph, Label};
use msmp_core::diagnostics::Diagnostic;
use msmp_core::nn::ParameterStore;
use msmp_core::runtime::CompiledModel;
use msmp_core::schema::parse_model_description;
use msmp_core::validator::validate_semantics;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{keyed, random_case, reference_forward, CaseOptions};

/// Glorot weights plus nonzero biases so every term matters.
fn random_params(model: &CompiledModel, rng: &mut ChaCha8Rng) -> ParameterStore {
    let mut params = model.init_parameters(rng.random());
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        if name.ends_with("bias") || name.contains("/b_") {
            for v in params.get_mut(&name).unwrap().data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    params
}

/// Runtime against the reference interpreter on `cases` random models.
pub fn reference_equivalence(seed: u64, cases: usize) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kinds = BTreeSet::new();
    let mut worst: f64 = 0.0;
    for case_no in 0..cases {
        let case = random_case(&mut rng, CaseOptions::default());
        for stage in &case.model.message_passing.stages {
            for mp in &stage.message_passings {
                kinds.insert(mp.aggregation.name());
            }
        }
        let compiled = CompiledModel::compile(case.model.clone()).map_err(|e| format!("case {case_no}: {e}"))?;
        let params = random_params(&compiled, &mut rng);
        let got = keyed(&compiled.predict(&params, &case.graph).map_err(|e| format!("case {case_no}: {e}"))?);
        let want = reference_forward(&case.model, &params, &case.graph);
        if got.keys().ne(want.keys()) {
            return Err(format!("case {case_no}: output ids differ"));
        }
        for (id, w) in &want {
            let g = got[id];
            worst = worst.max((g - w).abs());
            if !((g - w).abs() <= 1e-12) {
                return Err(format!("case {case_no} node {id}: {g} vs {w}\n{}", case.yaml));
            }
        }
    }
    // The generator should have exercised every aggregation.
    if kinds.len() != 6 {
        return Err(format!("only aggregations {kinds:?} were exercised"));
    }
    Ok(format!("{cases} cases, max abs diff {worst:e}"))
}

/// Shuffles node and edge order and renames every node.
fn relabel(graph: &HeterogeneousGraph, rng: &mut ChaCha8Rng) -> (HeterogeneousGraph, BTreeMap<String, String>) {
    let mut fresh: Vec<usize> = (0..graph.nodes().len()).collect();
    fresh.shuffle(rng);
    let rename: BTreeMap<String, String> = graph
        .nodes()
        .iter()
        .zip(&fresh)
        .map(|(n, k)| (n.id.clone(), format!("x{k}")))
        .collect();
    let mut nodes: Vec<GraphNode> = graph
        .nodes()
        .iter()
        .map(|n| GraphNode {
            id: rename[&n.id].clone(),
            ..n.clone()
        })
        .collect();
    let mut edges: Vec<GraphEdge> = graph
        .edges()
        .iter()
        .map(|e| GraphEdge {
            source: rename[&e.source].clone(),
            target: rename[&e.target].clone(),
            position: e.position,
        })
        .collect();
    nodes.shuffle(rng);
    edges.shuffle(rng);
    let labels = graph
        .labels()
        .iter()
        .map(|(k, l)| {
            let l = match l {
                Label::Global(x) => Label::Global(*x),
                Label::PerNode(m) => Label::PerNode(m.iter().map(|(id, v)| (rename[id].clone(), *v)).collect()),
            };
            (k.clone(), l)
        })
        .collect();
    (HeterogeneousGraph::new(nodes, edges, labels).unwrap(), rename)
}

fn argmax(values: &BTreeMap<String, f64>) -> Option<&String> {
    values.iter().max_by(|a, b| a.1.total_cmp(b.1)).map(|(k, _)| k)
}


/// Shuffled and renamed inputs on models without positional aggregation.
pub fn permutation_invariance(seed: u64, cases: usize) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = CaseOptions {
        positional: false,
        ..CaseOptions::default()
    };
    let mut worst: f64 = 0.0;
    for case_no in 0..cases {
        let case = random_case(&mut rng, opts);
        let compiled = CompiledModel::compile(case.model.clone()).map_err(|e| e.to_string())?;
        let params = random_params(&compiled, &mut rng);
        let before = keyed(&compiled.predict(&params, &case.graph).map_err(|e| e.to_string())?);
        let (shuffled, rename) = relabel(&case.graph, &mut rng);
        let after = keyed(&compiled.predict(&params, &shuffled).map_err(|e| e.to_string())?);
        let mapped: BTreeMap<String, f64> = before
            .iter()
            .map(|(id, v)| (rename.get(id).cloned().unwrap_or_default(), *v))
            .collect();
        for (id, v) in &mapped {
            let w = after[id];
            let rel = if v == &w { 0.0 } else { (v - w).abs() / v.abs().max(w.abs()) };
            worst = worst.max(rel);
            if !(rel < 1e-9) {
                return Err(format!("case {case_no} node {id}: {v} vs {w}"));
            }
        }
        // Ties within float noise make argmax ill-defined; skip those.
        let mut sorted: Vec<f64> = mapped.values().copied().collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if (sorted.len() < 2 || sorted[0] - sorted[1] > 1e-9) && argmax(&mapped) != argmax(&after) {
            return Err(format!("case {case_no}: argmax moved"));
        }
    }
    Ok(format!("{cases} cases, max relative change {worst:e}"))
}

/// Parse diagnostics if parsing fails, semantic diagnostics otherwise.
pub fn diagnose(text: &str) -> Vec<Diagnostic> {
    match parse_model_description(text) {
        Ok(model) => validate_semantics(&model),
        Err(diags) => diags,
    }
}

pub fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/corpus")
}

/// Each corpus file starts with `# expect: <code> [line <n>]` and must yield
/// that error at that line, with every diagnostic located.
pub fn broken_corpus() -> Result<String, String> {
    let mut files: Vec<_> = std::fs::read_dir(corpus_dir()).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    if files.len() < 20 {
        return Err(format!("only {} corpus files", files.len()));
    }
    let mut seen = BTreeSet::new();
    let mut misses = Vec::new();
    for path in &files {
        let text = std::fs::read_to_string(path).unwrap();
        let name = path.file_name().unwrap().to_string_lossy();
        let Some(header) = text.lines().next().and_then(|l| l.strip_prefix("# expect: ")) else {
            misses.push(format!("{name}: no expect header"));
            continue;
        };
        let mut words = header.split_whitespace();
        let code = words.next().unwrap_or_default();
        let line: Option<usize> = match (words.next(), words.next()) {
            (Some("line"), Some(n)) => n.parse().ok(),
            _ => None,
        };
        let diags = diagnose(&text);
        match diags.iter().find(|d| d.code == code && (line.is_none() || d.line == line)) {
            None => {
                let got: Vec<String> = diags.iter().map(|d| format!("{} line {:?}", d.code, d.line)).collect();
                misses.push(format!("{name}: expected {code} at line {line:?}, got {got:?}"));
            }
            Some(hit) if !hit.is_error() => misses.push(format!("{name}: {hit} is not an error")),
            Some(_) => {
                if let Some(d) = diags.iter().find(|d| d.message.is_empty() || d.path.is_empty() || d.line.is_none()) {
                    misses.push(format!("{name}: unlocated or empty diagnostic {d:?}"));
                }
                seen.insert(code.to_string());
            }
        }
    }
    if !misses.is_empty() {
        return Err(misses.join("\n"));
    }
    if seen.len() < 20 {
        return Err(format!("corpus covers only {} codes", seen.len()));
    }
    Ok(format!("{} files, {} distinct codes", files.len(), seen.len()))
}

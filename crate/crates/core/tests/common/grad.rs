//! Catalogue of primitive tape ops and layers for gradient checking.

use msmp_core::nn::{apply_feed_forward, apply_gru_cell, build_parameters};
use msmp_core::schema::{Activation, Architecture, LayerDef, NNDef};
use msmp_core::tensor::{gradient_check_many, NodeId, ReduceKind, Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-5;
pub const POINTS: usize = 100;

pub type Op = Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError>>;
pub type Gen = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Magnitudes in `[0.05, 2)` with random signs.
pub fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Distinct values at least 0.06 apart, so max/min never tie.
pub fn spread(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let data = order.iter().map(|&k| k as f64 * 0.1 - 1.0 + rng.random_range(-0.02..0.02)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=4))
}

/// Checks `Σ c ⊙ op(inputs)` with a random weighting `c`.
fn check_weighted(inputs: &[Tensor], op: &Op, rng: &mut ChaCha8Rng) -> f64 {
    let mut probe = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| probe.leaf(t.clone())).collect();
    let out = op(&mut probe, &ids).expect("op applies");
    let shape = probe.value(out).shape().to_vec();
    let c = off_zero(rng, &shape).map(|v| v.signum() * (1.0 + v.abs() / 4.0));
    gradient_check_many(
        |t, ids| {
            let y = op(t, ids)?;
            let w = t.leaf(c.clone());
            let p = t.mul(y, w)?;
            t.sum_all(p)
        },
        inputs,
        EPS,
    )
    .expect("gradient check runs")
}

pub struct PrimitiveCase {
    pub name: String,
    seed: u64,
    gen: Gen,
    op: Op,
}

impl PrimitiveCase {
    fn new(
        name: impl Into<String>,
        seed: u64,
        gen: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
        op: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            seed,
            gen: Box::new(gen),
            op: Box::new(op),
        }
    }

    /// Worst relative error over `POINTS` random points.
    pub fn worst(&self) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut worst: f64 = 0.0;
        for _ in 0..POINTS {
            let inputs = (self.gen)(&mut rng);
            worst = worst.max(check_weighted(&inputs, &self.op, &mut rng));
        }
        worst
    }
}

fn pair(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (a, b) = dims(r);
    vec![uniform(r, &[a, b], -2.0, 2.0), uniform(r, &[a, b], -2.0, 2.0)]
}

fn single_off_zero(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (a, b) = dims(r);
    vec![off_zero(r, &[a, b])]
}

/// Every differentiable primitive of the tape.
pub fn primitive_cases() -> Vec<PrimitiveCase> {
    let mut cases = vec![
        PrimitiveCase::new("add", 1, pair, |t, x| t.add(x[0], x[1])),
        PrimitiveCase::new("sub", 2, pair, |t, x| t.sub(x[0], x[1])),
        PrimitiveCase::new("mul", 3, pair, |t, x| t.mul(x[0], x[1])),
        PrimitiveCase::new(
            "matmul",
            4,
            |r| {
                let (a, k) = dims(r);
                let c = r.random_range(1..=4);
                vec![uniform(r, &[a, k], -2.0, 2.0), uniform(r, &[k, c], -2.0, 2.0)]
            },
            |t, x| t.matmul(x[0], x[1]),
        ),
        PrimitiveCase::new(
            "concat axis 0",
            5,
            |r| {
                let c = r.random_range(1..=4);
                (0..3)
                    .map(|_| {
                        let rows = r.random_range(1..=3);
                        uniform(r, &[rows, c], -2.0, 2.0)
                    })
                    .collect()
            },
            |t, x| t.concat(x, 0),
        ),
        PrimitiveCase::new(
            "concat axis 1",
            6,
            |r| {
                let rows = r.random_range(1..=4);
                (0..2)
                    .map(|_| {
                        let cols = r.random_range(1..=3);
                        uniform(r, &[rows, cols], -2.0, 2.0)
                    })
                    .collect()
            },
            |t, x| t.concat(x, 1),
        ),
    ];
    for axis in 0..2 {
        cases.push(PrimitiveCase::new(
            format!("slice axis {axis}"),
            7 + axis as u64,
            |r| vec![uniform(r, &[4, 5], -2.0, 2.0)],
            move |t, x| {
                let extent = t.value(x[0]).shape()[axis];
                t.slice(x[0], axis, 1, extent - 1)
            },
        ));
    }
    let kinds = [ReduceKind::Sum, ReduceKind::Mean, ReduceKind::Max, ReduceKind::Min];
    for (i, kind) in kinds.into_iter().enumerate() {
        for axis in 0..2 {
            cases.push(PrimitiveCase::new(
                format!("reduce {kind:?} axis {axis}"),
                20 + (2 * i + axis) as u64,
                |r| {
                    let (a, b) = dims(r);
                    vec![spread(r, &[a, b])]
                },
                move |t, x| t.reduce(x[0], axis, kind),
            ));
        }
    }
    cases.extend([
        PrimitiveCase::new("sum_all", 30, |r| vec![uniform(r, &[3, 2], -2.0, 2.0)], |t, x| t.sum_all(x[0])),
        PrimitiveCase::new("mean_all", 31, |r| vec![uniform(r, &[2, 3], -2.0, 2.0)], |t, x| t.mean_all(x[0])),
        PrimitiveCase::new("sigmoid", 40, single_off_zero, |t, x| Ok(t.sigmoid(x[0]))),
        PrimitiveCase::new("tanh", 41, single_off_zero, |t, x| Ok(t.tanh(x[0]))),
        PrimitiveCase::new("relu", 42, single_off_zero, |t, x| Ok(t.relu(x[0]))),
        PrimitiveCase::new("selu", 43, single_off_zero, |t, x| Ok(t.selu(x[0]))),
        PrimitiveCase::new("abs", 50, single_off_zero, |t, x| Ok(t.abs(x[0]))),
        PrimitiveCase::new("affine", 51, single_off_zero, |t, x| Ok(t.affine(x[0], -1.5, 0.25))),
        PrimitiveCase::new("scale", 52, single_off_zero, |t, x| Ok(t.scale(x[0], 3.0))),
        PrimitiveCase::new("log", 53, |r| vec![uniform(r, &[3, 2], 0.5, 3.0)], |t, x| Ok(t.log(x[0]))),
        // Interior and saturated regions, away from the bounds themselves.
        PrimitiveCase::new(
            "clamp",
            54,
            |r| vec![off_zero(r, &[3, 3]).map(|v| if (v.abs() - 0.5).abs() < 0.02 { v * 1.2 } else { v })],
            |t, x| Ok(t.clamp(x[0], -0.5, 0.5)),
        ),
        PrimitiveCase::new(
            "stack",
            60,
            |r| {
                let (a, b) = dims(r);
                (0..3).map(|_| uniform(r, &[a, b], -2.0, 2.0)).collect()
            },
            |t, x| t.stack(x),
        ),
        PrimitiveCase::new(
            "unstack",
            61,
            |r| {
                let (a, b) = dims(r);
                vec![uniform(r, &[a, b], -2.0, 2.0)]
            },
            |t, x| {
                let parts = t.unstack(x[0])?;
                t.concat(&parts, 0)
            },
        ),
        PrimitiveCase::new("reshape", 62, |r| vec![uniform(r, &[2, 6], -2.0, 2.0)], |t, x| t.reshape(x[0], vec![3, 4])),
        PrimitiveCase::new(
            "gather_rows",
            70,
            |r| vec![uniform(r, &[3, 2], -2.0, 2.0)],
            |t, x| t.gather_rows(x[0], &[2, 0, 2, 1, 2]),
        ),
    ]);
    const SEGMENTS: [usize; 7] = [1, 0, 2, 1, 0, 2, 2];
    for (i, kind) in kinds.into_iter().enumerate() {
        cases.push(PrimitiveCase::new(
            format!("segment_reduce {kind:?}"),
            71 + i as u64,
            |r| vec![spread(r, &[7, 3])],
            move |t, x| t.segment_reduce(x[0], &SEGMENTS, 3, kind),
        ));
    }
    // An empty group contributes nothing for sum and mean.
    cases.push(PrimitiveCase::new(
        "segment_reduce with empty group",
        75,
        |r| vec![uniform(r, &[3, 2], -2.0, 2.0)],
        |t, x| t.segment_reduce(x[0], &[0, 0, 2], 3, ReduceKind::Mean),
    ));
    cases
}

pub fn dense(name: &str, layers: &[(usize, Activation)]) -> NNDef {
    NNDef {
        name: name.into(),
        architecture: Architecture::FeedForward,
        layers: layers
            .iter()
            .map(|&(units, activation)| LayerDef::Dense { units, activation })
            .collect(),
    }
}

pub fn gru(units: usize) -> NNDef {
    NNDef {
        name: "gru".into(),
        architecture: Architecture::Recurrent,
        layers: vec![LayerDef::GruCell { units }],
    }
}

/// `Σ layer(x)` (dense) or `Σ h′` (GRU) checked against the input and state,
/// with parameters held fixed.
pub fn check_layer(nn: &NNDef, input_dim: usize, state_dim: Option<usize>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let mut params = build_parameters(nn, input_dim, rng.random());
        let names: Vec<String> = params.names().cloned().collect();
        for n in &names {
            let t = params.get_mut(n).unwrap();
            if t.rank() == 1 {
                *t = uniform(&mut rng, t.shape(), -0.5, 0.5);
            }
        }
        let rows = rng.random_range(1..=3);
        let mut inputs = vec![off_zero(&mut rng, &[rows, input_dim])];
        if let Some(units) = state_dim {
            inputs.push(uniform(&mut rng, &[rows, units], -1.0, 1.0));
        }
        let err = gradient_check_many(
            |t, ids| {
                let handles = params.attach(t);
                let out = match state_dim {
                    None => apply_feed_forward(t, nn, &handles, ids[0]),
                    Some(_) => apply_gru_cell(t, nn, &handles, ids[1], ids[0]),
                }
                .map_err(|e| TensorError::InvalidShape {
                    op: "layer",
                    shape: vec![],
                    reason: e.to_string(),
                })?;
                t.sum_all(out)
            },
            &inputs,
            EPS,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

pub const ACTIVATIONS: [Activation; 5] =
    [Activation::Relu, Activation::Sigmoid, Activation::Tanh, Activation::Selu, Activation::Linear];

/// Worst errors of a dense layer per activation, then the GRU cell.
pub fn layer_cases() -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = ACTIVATIONS
        .into_iter()
        .enumerate()
        .map(|(i, a)| (format!("dense {}", a.name()), check_layer(&dense(a.name(), &[(3, a)]), 4, None, 80 + i as u64)))
        .collect();
    out.push(("gru_cell".into(), check_layer(&gru(3), 2, Some(3), 90)));
    out
}

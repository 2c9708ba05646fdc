use super::{NodeId, Tape, Tensor, TensorError};

/// Compares tape gradients of a scalar function against central differences.
///
/// Returns the largest component-wise relative error, using
/// `max(|analytic|, |numeric|, 1e-8)` as the denominator. Points sitting on a
/// kink of a piecewise function (relu at 0, max/min ties) are not meaningful
/// inputs here; callers are expected to sample away from them.
pub fn gradient_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, TensorError>,
{
    gradient_check_many(|tape, ids| f(tape, ids[0]), std::slice::from_ref(point), epsilon)
}

/// Multi-input form of [`gradient_check`]; every input is checked.
pub fn gradient_check_many<F>(f: F, points: &[Tensor], epsilon: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, TensorError>,
{
    if !(epsilon > 0.0) {
        return Err(TensorError::InvalidEpsilon(epsilon));
    }
    let eval = |inputs: &[Tensor]| -> Result<(f64, Tape, Vec<NodeId>, NodeId), TensorError> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &ids)?;
        let value = tape
            .value(out)
            .item()
            .ok_or_else(|| TensorError::NonScalarLoss(tape.value(out).shape().to_vec()))?;
        Ok((value, tape, ids, out))
    };

    let (base, tape, ids, out) = eval(points)?;
    let (again, ..) = eval(points)?;
    if base.to_bits() != again.to_bits() {
        return Err(TensorError::NonDeterministic(base, again));
    }
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = points.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id);
        for j in 0..points[k].len() {
            let orig = points[k].data()[j];
            probe[k].data_mut()[j] = orig + epsilon;
            let (plus, ..) = eval(&probe)?;
            probe[k].data_mut()[j] = orig - epsilon;
            let (minus, ..) = eval(&probe)?;
            probe[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

use super::{Graph, Result, Tensor, TensorError, Var};

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.input(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out)
        .item()
        .ok_or_else(|| TensorError::NonScalarLoss {
            shape: g.value(out).shape().to_vec(),
        })
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// Returns the largest `|analytic - numeric| / max(1, |numeric|)` over
/// every coordinate of every parameter.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(TensorError::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let first = evaluate(&f, params)?;
    let second = evaluate(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (p, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            probe[p].data_mut()[i] = orig + epsilon;
            let up = evaluate(&f, &probe)?;
            probe[p].data_mut()[i] = orig - epsilon;
            let down = evaluate(&f, &probe)?;
            probe[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

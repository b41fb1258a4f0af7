use super::{ParamStore, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First/second moment buffers for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam step. Weight decay is coupled: it is added to
/// the gradient before the moment updates.
pub fn adam_update(
    name: &str,
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    config: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || state.m.len() != param.len() {
        return Err(super::shape_err(
            "adam",
            format!("`{name}`: param {:?}, grad {:?}", param.shape(), grad.shape()),
        ));
    }
    if !(lr > 0.0) {
        return Err(TensorError::InvalidArgument(format!("learning rate {lr}")));
    }
    if grad.data().iter().any(|g| g.is_nan()) {
        return Err(TensorError::NonFiniteGradient {
            param: name.to_string(),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - config.beta1.powi(state.t as i32);
    let bc2 = 1.0 - config.beta2.powi(state.t as i32);
    for (i, p) in param.data_mut().iter_mut().enumerate() {
        let g = grad.data()[i] + config.weight_decay * *p;
        let m = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        let v = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        *p -= lr * (m / bc1) / ((v / bc2).sqrt() + config.eps);
    }
    Ok(())
}

/// Adam over every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Self {
            config,
            states: store.iter().map(|(_, t)| AdamState::new(t.len())).collect(),
        }
    }

    /// Descends along `grads` (one per store entry, in store order).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.states.len() {
            return Err(TensorError::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.states.len()
            )));
        }
        for (((name, p), g), s) in store.tensors_mut().zip(grads).zip(&mut self.states) {
            adam_update(name, p, g, s, &self.config, lr)?;
        }
        Ok(())
    }

    pub fn steps_taken(&self) -> u64 {
        self.states.first().map_or(0, |s| s.t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_decay() -> AdamConfig {
        AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(3);
        for _ in 0..5 {
            adam_update("p", &mut p, &Tensor::zeros(&[3]), &mut s, &no_decay(), 0.1).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.t, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        let mut p = Tensor::scalar(1.0);
        let mut s = AdamState::new(1);
        adam_update("p", &mut p, &Tensor::scalar(1.0), &mut s, &no_decay(), 0.1).unwrap();
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.data()[0] - want).abs() < 1e-15);
        assert!((p.data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn weight_decay_acts_as_gradient() {
        let cfg = AdamConfig {
            weight_decay: 0.1,
            ..AdamConfig::default()
        };
        let mut p = Tensor::scalar(1.0);
        let mut s = AdamState::new(1);
        adam_update("p", &mut p, &Tensor::scalar(0.0), &mut s, &cfg, 0.01).unwrap();
        assert!(p.data()[0] < 1.0);
        assert!((s.m[0] - 0.1 * 0.1).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = Tensor::scalar(1.0);
        let mut s = AdamState::new(1);
        let err = adam_update("fc.w", &mut p, &Tensor::scalar(f64::NAN), &mut s, &no_decay(), 0.1)
            .unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient { param: "fc.w".into() });
        assert_eq!(s.t, 0);
    }
}

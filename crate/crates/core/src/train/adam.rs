use crate::error::{Error, Result};
use crate::net::{Gradients, Network};
use crate::scalar::Scalar;
use crate::simd::vectorized;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.epsilon.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(dims: &[usize]) -> Result<Self> {
        Ok(AdamState {
            m: Tensor::zeros(dims)?,
            v: Tensor::zeros(dims)?,
            t: 0,
        })
    }
}

/// One bias-corrected Adam update:
///
/// ```text
/// m <- b1 m + (1 - b1) g
/// v <- b2 v + (1 - b2) g^2
/// p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
pub fn adam_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    grad.expect_dims(param.dims(), "Adam gradient")?;
    state.m.expect_dims(param.dims(), "Adam first moment")?;
    state.v.expect_dims(param.dims(), "Adam second moment")?;
    state.t += 1;
    let t = state.t as f64;
    let c1 = T::lit(1.0 / (1.0 - cfg.beta1.powf(t)));
    let c2 = T::lit(1.0 / (1.0 - cfg.beta2.powf(t)));
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (nb1, nb2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let (lr, eps) = (T::lit(cfg.learning_rate), T::lit(cfg.epsilon));
    vectorized(|| {
        param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(state.m.data_mut())
            .zip(state.v.data_mut())
            .for_each(|(((p, &g), m), v)| {
                *m = b1 * *m + nb1 * g;
                *v = b2 * *v + nb2 * g * g;
                let m_hat = *m * c1;
                let v_hat = *v * c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            })
    });
    Ok(())
}

/// Adam over every tensor of a [`Network`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    pub states: Vec<AdamState<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(net: &Network<T>, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let states = net
            .params()
            .iter()
            .map(|p| AdamState::new(p.dims()))
            .collect::<Result<_>>()?;
        Ok(Adam { config, states })
    }

    /// Updates each parameter that has a gradient; frozen tensors and their
    /// moments are left untouched.
    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>) -> Result<()> {
        if self.states.len() != net.params().len() {
            return Err(Error::shape("optimizer state does not match the network"));
        }
        for (i, (p, s)) in net
            .params_mut()
            .into_iter()
            .zip(&mut self.states)
            .enumerate()
        {
            if let Some(g) = grads.get(i) {
                adam_step(p, g, s, &self.config)?;
            }
        }
        Ok(())
    }
}

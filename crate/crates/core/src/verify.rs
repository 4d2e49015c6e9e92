//! Finite-difference verification of every backward pass, in f64.
//!
//! Each layer is checked in isolation against a random projection of its
//! output, then the whole network is checked end to end on 8x8 inputs.

use std::fmt;

use crate::error::Result;
use crate::layers::gradcheck::{max_relative_error, numeric_gradient, projected_sum};
use crate::layers::{
    conv2d_backward, conv2d_forward, fc_backward, fc_forward, lrn_backward, lrn_forward,
    maxpool_backward, maxpool_forward, relu_backward, relu_forward, softmax, ConvParams, FcParams,
    LrnParams, PoolGeometry,
};
use crate::net::{Gradients, Network, NetworkConfig, Workspace};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::cross_entropy_loss;

/// Bound on the relative error of a single-layer check.
pub const LAYER_TOLERANCE: f64 = 1e-3;
/// Bound on the relative error of the end-to-end network check.
pub const NETWORK_TOLERANCE: f64 = 1e-2;

const EPSILON: f64 = 1e-6;
/// Entries probed per network tensor.
const NETWORK_PROBES: usize = 1024;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Swaps the analytic convolution kernel gradient for its 180-degree
    /// rotation, a classic correlation/convolution mix-up. The report must
    /// then fail.
    pub corrupt_conv: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: &'static str,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    /// NaN errors fail.
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub checks: Vec<GradCheck>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(GradCheck::passed)
    }

    pub fn get(&self, name: &str) -> Option<&GradCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<14} max_rel_error {:.3e}  tolerance {:.0e}  {}",
                c.name,
                c.max_relative_error,
                c.tolerance,
                if c.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Runs every check. Inputs are drawn from `opts.seed`, so the report is
/// reproducible.
pub fn verify_gradients(opts: &VerifyOptions) -> Result<GradReport> {
    let rng = Rng::new(opts.seed);
    let layer = |name, err| GradCheck {
        name,
        max_relative_error: err,
        tolerance: LAYER_TOLERANCE,
    };
    let checks = vec![
        layer("conv", check_conv(&mut rng.fork(0), opts.corrupt_conv)?),
        layer("maxpool", check_pool(&mut rng.fork(1))?),
        layer("relu", check_relu(&mut rng.fork(2))?),
        layer("lrn", check_lrn(&mut rng.fork(3))?),
        layer("fc", check_fc(&mut rng.fork(4))?),
        layer("softmax+loss", check_softmax_loss(&mut rng.fork(5))?),
        GradCheck {
            name: "network",
            max_relative_error: check_network(&mut rng.fork(6))?,
            tolerance: NETWORK_TOLERANCE,
        },
    ];
    Ok(GradReport { checks })
}

fn uniform(rng: &mut Rng, lo: f32, hi: f32, dims: &[usize]) -> Result<Tensor<f64>> {
    Ok(rng.uniform(lo, hi, dims)?.cast())
}

fn worst(errors: impl IntoIterator<Item = f64>) -> f64 {
    errors.into_iter().fold(0.0, |a, e| {
        if e.is_nan() || a.is_nan() {
            f64::NAN
        } else {
            a.max(e)
        }
    })
}

fn check_conv(rng: &mut Rng, corrupt: bool) -> Result<f64> {
    let x = uniform(rng, -1.0, 1.0, &[2, 3, 6, 6])?;
    let weight = uniform(rng, -0.5, 0.5, &[4, 3, 3, 3])?;
    let bias = uniform(rng, -0.5, 0.5, &[4])?;
    let p = ConvParams::from_tensors(weight.clone(), bias.clone(), (1, 1))?;
    let proj = uniform(rng, -1.0, 1.0, &[2, 4, 6, 6])?;
    let mut g = conv2d_backward(&x, &p, &proj, true)?;
    if corrupt {
        for taps in g.dweight.data_mut().chunks_mut(9) {
            taps.reverse();
        }
    }
    let objective = |x: &Tensor<f64>, p: &ConvParams<f64>| {
        projected_sum(&conv2d_forward(x, p).expect("valid shapes"), &proj)
    };
    let ndx = numeric_gradient(&x, EPSILON, |xp| objective(xp, &p));
    let ndw = numeric_gradient(&weight, EPSILON, |wp| {
        objective(
            &x,
            &ConvParams::from_tensors(wp.clone(), bias.clone(), (1, 1)).unwrap(),
        )
    });
    let ndb = numeric_gradient(&bias, EPSILON, |bp| {
        objective(
            &x,
            &ConvParams::from_tensors(weight.clone(), bp.clone(), (1, 1)).unwrap(),
        )
    });
    let dx = g.dx.expect("requested");
    Ok(worst([
        max_relative_error(dx.data(), &ndx),
        max_relative_error(g.dweight.data(), &ndw),
        max_relative_error(g.dbias.data(), &ndb),
    ]))
}

fn check_pool(rng: &mut Rng) -> Result<f64> {
    // distinct values spaced far beyond the step keep windows away from ties
    let dims = [2, 3, 7, 7];
    let mut vals: Vec<f64> = (0..2 * 3 * 7 * 7).map(|v| v as f64 * 0.01).collect();
    rng.shuffle(&mut vals);
    let x = Tensor::from_vec(&dims, vals)?;
    let geom = PoolGeometry::default();
    let (y, idx) = maxpool_forward(&x, geom)?;
    let proj = uniform(rng, -1.0, 1.0, y.dims())?;
    let dx = maxpool_backward(&idx, &proj)?;
    let num = numeric_gradient(&x, EPSILON, |xp| {
        projected_sum(&maxpool_forward(xp, geom).expect("valid shapes").0, &proj)
    });
    Ok(max_relative_error(dx.data(), &num))
}

fn check_relu(rng: &mut Rng) -> Result<f64> {
    // keep every input at least 0.05 away from the kink
    let mut x = uniform(rng, -1.0, 1.0, &[2, 3, 5, 5])?;
    x.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.signum() * (0.05 + v.abs()));
    let proj = uniform(rng, -1.0, 1.0, x.dims())?;
    let dx = relu_backward(&x, &proj)?;
    let num = numeric_gradient(&x, EPSILON, |xp| projected_sum(&relu_forward(xp), &proj));
    Ok(max_relative_error(dx.data(), &num))
}

fn check_lrn(rng: &mut Rng) -> Result<f64> {
    // a larger alpha than the network default makes the cross-channel term
    // significant
    let p = LrnParams {
        alpha: 1e-2,
        ..LrnParams::default()
    };
    let x = uniform(rng, -3.0, 3.0, &[2, 8, 4, 4])?;
    let proj = uniform(rng, -1.0, 1.0, x.dims())?;
    let dx = lrn_backward(&x, &p, &proj)?;
    let num = numeric_gradient(&x, EPSILON, |xp| {
        projected_sum(&lrn_forward(xp, &p).expect("valid shapes"), &proj)
    });
    Ok(max_relative_error(dx.data(), &num))
}

fn check_fc(rng: &mut Rng) -> Result<f64> {
    let x = uniform(rng, -1.0, 1.0, &[3, 10])?;
    let weight = uniform(rng, -0.5, 0.5, &[4, 10])?;
    let bias = uniform(rng, -0.5, 0.5, &[4])?;
    let p = FcParams::from_tensors(weight.clone(), bias.clone())?;
    let proj = uniform(rng, -1.0, 1.0, &[3, 4])?;
    let g = fc_backward(&x, &p, &proj, true)?;
    let objective = |x: &Tensor<f64>, p: &FcParams<f64>| {
        projected_sum(&fc_forward(x, p).expect("valid"), &proj)
    };
    let ndx = numeric_gradient(&x, EPSILON, |xp| objective(xp, &p));
    let ndw = numeric_gradient(&weight, EPSILON, |wp| {
        objective(
            &x,
            &FcParams::from_tensors(wp.clone(), bias.clone()).unwrap(),
        )
    });
    let ndb = numeric_gradient(&bias, EPSILON, |bp| {
        objective(
            &x,
            &FcParams::from_tensors(weight.clone(), bp.clone()).unwrap(),
        )
    });
    Ok(worst([
        max_relative_error(g.dx.expect("requested").data(), &ndx),
        max_relative_error(g.dweight.data(), &ndw),
        max_relative_error(g.dbias.data(), &ndb),
    ]))
}

fn check_softmax_loss(rng: &mut Rng) -> Result<f64> {
    let logits = uniform(rng, -2.0, 2.0, &[4, 5])?;
    let labels: Vec<usize> = (0..4).map(|_| rng.range(0, 5)).collect();
    let loss = cross_entropy_loss(&softmax(&logits)?, &labels)?;
    let num = numeric_gradient(&logits, EPSILON, |l| {
        cross_entropy_loss(&softmax(l).expect("valid"), &labels)
            .expect("valid labels")
            .value
    });
    Ok(max_relative_error(loss.dlogits.data(), &num))
}

fn check_network(rng: &mut Rng) -> Result<f64> {
    let config = NetworkConfig {
        input_dims: [3, 8, 8],
        ..NetworkConfig::standard(3)
    };
    let mut net: Network<f64> = Network::new(config, rng)?.cast();
    // nonzero biases exercise every bias path
    for i in [1, 3, 5, 7] {
        let dims = net.params()[i].dims().to_vec();
        *net.params_mut()[i] = uniform(rng, -0.1, 0.1, &dims)?;
    }
    let x = uniform(rng, 0.0, 1.0, &[2, 3, 8, 8])?;
    let labels = [0, 2];
    let loss_of = |net: &Network<f64>| -> f64 {
        let f = net.forward(&x).expect("valid input");
        cross_entropy_loss(&f.probs, &labels)
            .expect("valid labels")
            .value
    };

    let mut ws = Workspace::new();
    let f = net.forward_train(&x, &mut ws)?;
    let loss = cross_entropy_loss(&f.probs, &labels)?;
    let mut grads = Gradients::new();
    net.backward(&mut ws, &loss.dlogits, false, &mut grads)?;

    let mut errors = vec![];
    for i in 0..8 {
        let analytic = grads.get(i).expect("every tensor is active").clone();
        let len = analytic.len();
        let probes: Vec<usize> = if len <= NETWORK_PROBES {
            (0..len).collect()
        } else {
            (0..NETWORK_PROBES).map(|_| rng.range(0, len)).collect()
        };
        let mut a = Vec::with_capacity(probes.len());
        let mut num = Vec::with_capacity(probes.len());
        for &j in &probes {
            let orig = net.params()[i].data()[j];
            net.params_mut()[i].data_mut()[j] = orig + EPSILON;
            let plus = loss_of(&net);
            net.params_mut()[i].data_mut()[j] = orig - EPSILON;
            let minus = loss_of(&net);
            net.params_mut()[i].data_mut()[j] = orig;
            a.push(analytic.data()[j]);
            num.push((plus - minus) / (2.0 * EPSILON));
        }
        errors.push(max_relative_error(&a, &num));
    }
    Ok(worst(errors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        let report = verify_gradients(&VerifyOptions::default()).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.checks.len(), 7);
    }

    #[test]
    fn corrupted_conv_gradient_is_caught() {
        let report = verify_gradients(&VerifyOptions {
            seed: 0,
            corrupt_conv: true,
        })
        .unwrap();
        assert!(!report.passed());
        assert!(!report.get("conv").unwrap().passed());
        assert!(report.get("fc").unwrap().passed());
    }

    #[test]
    fn report_is_reproducible() {
        let opts = VerifyOptions {
            seed: 9,
            corrupt_conv: false,
        };
        let a = verify_gradients(&opts).unwrap().to_string();
        assert_eq!(a, verify_gradients(&opts).unwrap().to_string());
        assert_eq!(a.lines().count(), 7);
    }

    #[test]
    fn nan_never_passes() {
        let c = GradCheck {
            name: "x",
            max_relative_error: f64::NAN,
            tolerance: 1.0,
        };
        assert!(!c.passed());
        assert!(worst([0.1, f64::NAN, 0.2]).is_nan());
    }
}

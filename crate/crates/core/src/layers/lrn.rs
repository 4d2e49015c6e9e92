use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::simd::vectorized;
use crate::tensor::Tensor;

/// Cross-channel local response normalization:
///
/// `y[c] = x[c] / (bias + alpha * sum_{|c'-c| <= depth_radius} x[c']^2)^beta`
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrnParams {
    pub depth_radius: usize,
    pub bias: f32,
    pub alpha: f32,
    pub beta: f32,
}

impl Default for LrnParams {
    /// Window of five channels, `k = 2`, `alpha = 1e-4`, `beta = 0.75`.
    fn default() -> Self {
        LrnParams {
            depth_radius: 2,
            bias: 2.0,
            alpha: 1e-4,
            beta: 0.75,
        }
    }
}

impl LrnParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.depth_radius >= 1
            && self.bias > 0.0
            && self.alpha >= 0.0
            && self.beta > 0.0
            && self.bias.is_finite()
            && self.alpha.is_finite()
            && self.beta.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid LRN parameters {self:?}")))
        }
    }

    fn window(&self, c: usize, channels: usize) -> std::ops::Range<usize> {
        c.saturating_sub(self.depth_radius)..(c + self.depth_radius + 1).min(channels)
    }
}

/// Pixels processed together; keeps every channel of a tile in cache.
const TILE: usize = 256;

/// Scratch elements needed by [`forward_sample`] and [`backward_sample`]
/// for `c` channels.
pub(crate) fn scratch_len(c: usize) -> usize {
    2 * c * TILE
}

/// `(s^-beta, 1/s)`. The default exponent uses a sqrt-only form that
/// vectorizes.
#[inline(always)]
fn inv_pow<T: Scalar, const THREE_QUARTERS: bool>(s: T, beta: T) -> (T, T) {
    let inv = T::one() / s;
    if THREE_QUARTERS {
        let r = inv.sqrt();
        (r * r.sqrt(), inv)
    } else {
        (s.powf(-beta), inv)
    }
}

/// `dst = sum over the window of channel `ch`` of the `src` rows, where
/// row `cc` of a tile of `len` pixels starts at `cc * TILE`.
#[inline(always)]
fn window_sum<T: Scalar>(
    src: &[T],
    ch: usize,
    channels: usize,
    len: usize,
    p: &LrnParams,
    dst: &mut [T],
) {
    let w = p.window(ch, channels);
    let dst = &mut dst[..len];
    dst.copy_from_slice(&src[w.start * TILE..w.start * TILE + len]);
    for cc in w.start + 1..w.end {
        let row = &src[cc * TILE..cc * TILE + len];
        dst.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
    }
}

/// Copies `x^2` for one tile into rows of `TILE`.
#[inline(always)]
fn squares<T: Scalar>(x: &[T], c: usize, plane: usize, start: usize, len: usize, sq: &mut [T]) {
    for ch in 0..c {
        let src = &x[ch * plane + start..ch * plane + start + len];
        let dst = &mut sq[ch * TILE..ch * TILE + len];
        dst.iter_mut().zip(src).for_each(|(d, &v)| *d = v * v);
    }
}

/// Normalizes one `[c, plane]` sample into `y`.
pub(crate) fn forward_sample<T: Scalar>(
    x: &[T],
    c: usize,
    plane: usize,
    p: &LrnParams,
    scratch: &mut [T],
    y: &mut [T],
) {
    vectorized(|| {
        if p.beta == 0.75 {
            forward_impl::<T, true>(x, c, plane, p, scratch, y)
        } else {
            forward_impl::<T, false>(x, c, plane, p, scratch, y)
        }
    })
}

#[inline(always)]
fn forward_impl<T: Scalar, const FAST: bool>(
    x: &[T],
    c: usize,
    plane: usize,
    p: &LrnParams,
    scratch: &mut [T],
    y: &mut [T],
) {
    let (beta, bias, alpha) = (
        T::lit(p.beta as f64),
        T::lit(p.bias as f64),
        T::lit(p.alpha as f64),
    );
    let (sq, acc) = scratch[..scratch_len(c)].split_at_mut(c * TILE);
    for start in (0..plane).step_by(TILE) {
        let len = TILE.min(plane - start);
        squares(x, c, plane, start, len, sq);
        for ch in 0..c {
            window_sum(sq, ch, c, len, p, acc);
            let r = ch * plane + start..ch * plane + start + len;
            for ((y, &v), &a) in y[r.clone()].iter_mut().zip(&x[r]).zip(&acc[..len]) {
                *y = v * inv_pow::<T, FAST>(bias + alpha * a, beta).0;
            }
        }
    }
}

/// Input gradient for one sample.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_sample<T: Scalar>(
    x: &[T],
    dy: &[T],
    c: usize,
    plane: usize,
    p: &LrnParams,
    scratch: &mut [T],
    dx: &mut [T],
) {
    vectorized(|| {
        if p.beta == 0.75 {
            backward_impl::<T, true>(x, dy, c, plane, p, scratch, dx)
        } else {
            backward_impl::<T, false>(x, dy, c, plane, p, scratch, dx)
        }
    })
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn backward_impl<T: Scalar, const FAST: bool>(
    x: &[T],
    dy: &[T],
    c: usize,
    plane: usize,
    p: &LrnParams,
    scratch: &mut [T],
    dx: &mut [T],
) {
    let (beta, bias, alpha) = (
        T::lit(p.beta as f64),
        T::lit(p.bias as f64),
        T::lit(p.alpha as f64),
    );
    let coeff = T::lit(2.0 * p.alpha as f64 * p.beta as f64);
    let (sq, t) = scratch[..scratch_len(c)].split_at_mut(c * TILE);
    for start in (0..plane).step_by(TILE) {
        let len = TILE.min(plane - start);
        squares(x, c, plane, start, len, sq);
        // t = dy * x * s^(-b-1); dx starts as dy * s^-b
        for ch in 0..c {
            let tr = &mut t[ch * TILE..ch * TILE + len];
            window_sum(sq, ch, c, len, p, tr);
            let r = ch * plane + start..ch * plane + start + len;
            let (dx, xs, g) = (&mut dx[r.clone()], &x[r.clone()], &dy[r]);
            for i in 0..len {
                let (sp, inv) = inv_pow::<T, FAST>(bias + alpha * tr[i], beta);
                let gs = g[i] * sp;
                dx[i] = gs;
                tr[i] = gs * xs[i] * inv;
            }
        }
        // sq is free again; reuse it for the window sums of t
        for ch in 0..c {
            let acc = &mut sq[..len];
            window_sum(t, ch, c, len, p, acc);
            let r = ch * plane + start..ch * plane + start + len;
            let (dx, xs) = (&mut dx[r.clone()], &x[r]);
            for i in 0..len {
                dx[i] = dx[i] - coeff * xs[i] * acc[i];
            }
        }
    }
}

pub fn lrn_forward<T: Scalar>(x: &Tensor<T>, p: &LrnParams) -> Result<Tensor<T>> {
    p.validate()?;
    let (n, c, h, w) = x.nchw("lrn input")?;
    let (plane, len) = (h * w, c * h * w);
    let mut out = vec![T::zero(); n * len];
    out.par_chunks_mut(len)
        .zip(x.data().par_chunks(len))
        .for_each(|(y, x)| forward_sample(x, c, plane, p, &mut vec![T::zero(); scratch_len(c)], y));
    Ok(Tensor::from_parts(x.dims().to_vec(), out))
}

/// Input gradient of [`lrn_forward`]:
///
/// `dx[c] = dy[c] s[c]^-b - 2 a b x[c] sum_{c' near c} dy[c'] x[c'] s[c']^(-b-1)`
pub fn lrn_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &LrnParams,
    dout: &Tensor<T>,
) -> Result<Tensor<T>> {
    p.validate()?;
    let (n, c, h, w) = x.nchw("lrn input")?;
    dout.expect_dims(x.dims(), "lrn upstream gradient")?;
    let (plane, len) = (h * w, c * h * w);
    let mut dx = vec![T::zero(); n * len];
    dx.par_chunks_mut(len)
        .zip(x.data().par_chunks(len))
        .zip(dout.data().par_chunks(len))
        .for_each(|((dx, x), dy)| {
            let mut scratch = vec![T::zero(); scratch_len(c)];
            backward_sample(x, dy, c, plane, p, &mut scratch, dx);
        });
    Ok(Tensor::from_parts(x.dims().to_vec(), dx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::gradcheck::{max_relative_error, numeric_gradient, projected_sum};
    use crate::rng::Rng;

    #[test]
    fn zero_alpha_is_identity() {
        let x = Rng::new(1).uniform(-3.0, 3.0, &[1, 4, 3, 3]).unwrap();
        for beta in [0.5, 0.75, 2.0] {
            let p = LrnParams {
                depth_radius: 2,
                bias: 1.0,
                alpha: 0.0,
                beta,
            };
            assert_eq!(lrn_forward(&x, &p).unwrap(), x);
        }
    }

    #[test]
    fn scalar_evaluation() {
        let x = Tensor::new(&[1, 1, 1, 1], 1.0f32).unwrap();
        let p = LrnParams {
            depth_radius: 1,
            bias: 1.0,
            alpha: 1.0,
            beta: 0.75,
        };
        let y = lrn_forward(&x, &p).unwrap();
        let expect = 1.0 / 2f64.powf(0.75);
        assert!((expect - 0.594604).abs() < 1e-6);
        assert!((y.data()[0] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn window_is_clipped_at_channel_edges() {
        // channels [1, 2, 3], radius 1: sums of squares are 5, 14, 13
        let x = Tensor::from_vec(&[1, 3, 1, 1], vec![1.0f32, 2.0, 3.0]).unwrap();
        let p = LrnParams {
            depth_radius: 1,
            bias: 1.0,
            alpha: 1.0,
            beta: 1.0,
        };
        let y = lrn_forward(&x, &p).unwrap();
        let expect = [1.0 / 6.0, 2.0 / 15.0, 3.0 / 14.0];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let x = Tensor::<f32>::zeros(&[1, 1, 1, 1]).unwrap();
        let p = LrnParams {
            depth_radius: 0,
            ..LrnParams::default()
        };
        assert!(lrn_forward(&x, &p).is_err());
        let p = LrnParams {
            bias: 0.0,
            ..LrnParams::default()
        };
        assert!(lrn_forward(&x, &p).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = Rng::new(23);
        let x = rng.uniform(-2.0, 2.0, &[2, 8, 4, 4]).unwrap().cast::<f64>();
        let proj = rng.uniform(-1.0, 1.0, x.dims()).unwrap().cast::<f64>();
        // strong normalization so the cross-channel term is exercised
        let p = LrnParams {
            depth_radius: 2,
            bias: 1.0,
            alpha: 0.5,
            beta: 0.75,
        };
        let dx = lrn_backward(&x, &p, &proj).unwrap();
        let num = numeric_gradient(&x, 1e-5, |xp| {
            projected_sum(&lrn_forward(xp, &p).unwrap(), &proj)
        });
        let err = max_relative_error(dx.data(), &num);
        assert!(err < 1e-3, "max relative error {err}");
    }
}

use std::hint::select_unpredictable;
use std::ops::Range;

use super::same_pad_geometry;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::simd::vectorized;
use crate::tensor::Tensor;

/// Max-pooling window and stride, both `(y, x)`, with SAME output geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

impl PoolGeometry {
    pub fn new(kernel: (usize, usize), stride: (usize, usize)) -> Self {
        PoolGeometry { kernel, stride }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            same_pad_geometry(h, self.kernel.0, self.stride.0)?.out_size,
            same_pad_geometry(w, self.kernel.1, self.stride.1)?.out_size,
        ))
    }
}

impl Default for PoolGeometry {
    /// 3x3 window, stride 2.
    fn default() -> Self {
        PoolGeometry::new((3, 3), (2, 2))
    }
}

/// Winning input position for every pooled output cell.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolIndices {
    input_dims: Vec<usize>,
    output_dims: Vec<usize>,
    argmax: Vec<usize>,
}

impl PoolIndices {
    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn output_dims(&self) -> &[usize] {
        &self.output_dims
    }

    /// Flat input index chosen for each output cell, in output order.
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

/// Window ranges for pooling a fixed `[c, h, w]` sample, with the
/// per-sample kernels.
pub(crate) struct PoolPlan {
    c: usize,
    h: usize,
    w: usize,
    kernel: (usize, usize),
    sx: usize,
    ys: Vec<Range<usize>>,
    xs: Vec<Range<usize>>,
    /// Output columns whose windows lie fully inside the input.
    full: Range<usize>,
}

impl PoolPlan {
    pub(crate) fn new(geom: PoolGeometry, c: usize, h: usize, w: usize) -> Result<Self> {
        let gy = same_pad_geometry(h, geom.kernel.0, geom.stride.0)?;
        let gx = same_pad_geometry(w, geom.kernel.1, geom.stride.1)?;
        let span = |o: usize, k: usize, s: usize, pad: usize, len: usize| {
            (o * s).saturating_sub(pad)..(o * s + k - pad).min(len)
        };
        let (kw, sx) = (geom.kernel.1, geom.stride.1);
        let inside = |j: usize| j * sx >= gx.pad_before && j * sx + kw - gx.pad_before <= w;
        let first = (0..gx.out_size).find(|&j| inside(j)).unwrap_or(gx.out_size);
        let end = (first..gx.out_size)
            .find(|&j| !inside(j))
            .unwrap_or(gx.out_size);
        Ok(PoolPlan {
            c,
            h,
            w,
            kernel: geom.kernel,
            sx,
            full: first..end,
            ys: (0..gy.out_size)
                .map(|i| span(i, geom.kernel.0, geom.stride.0, gy.pad_before, h))
                .collect(),
            xs: (0..gx.out_size)
                .map(|j| span(j, geom.kernel.1, geom.stride.1, gx.pad_before, w))
                .collect(),
        })
    }

    pub(crate) fn out_dims(&self) -> (usize, usize) {
        (self.ys.len(), self.xs.len())
    }

    pub(crate) fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub(crate) fn out_len(&self) -> usize {
        self.c * self.ys.len() * self.xs.len()
    }

    /// Pools one sample; `argmax` receives sample-local flat input indices.
    ///
    /// Windows are scanned in row-major order with a strict comparison, so
    /// ties keep the smallest index. Rows of full windows are processed one
    /// window offset at a time across all columns.
    pub(crate) fn forward_sample<T: Scalar>(&self, x: &[T], out: &mut [T], argmax: &mut [u32]) {
        vectorized(|| {
            let (h, w) = (self.h, self.w);
            let (ho, wo) = self.out_dims();
            let (kh, kw) = self.kernel;
            let full = self.full.clone();
            let planes = out
                .chunks_mut(ho * wo)
                .zip(argmax.chunks_mut(ho * wo))
                .zip(x.chunks(h * w));
            for (plane, ((out, argmax), src)) in planes.enumerate() {
                let base = plane * h * w;
                for (i, yr) in self.ys.iter().enumerate() {
                    let out = &mut out[i * wo..(i + 1) * wo];
                    let argmax = &mut argmax[i * wo..(i + 1) * wo];
                    let fast = if yr.len() == kh { full.clone() } else { 0..0 };
                    if !fast.is_empty() {
                        let x0 = self.xs[fast.start].start;
                        let n = fast.len();
                        let best = &mut out[fast.clone()];
                        let arg = &mut argmax[fast.clone()];
                        for u in 0..kh {
                            for v in 0..kw {
                                let at = (yr.start + u) * w + x0 + v;
                                let row = &src[at..at + (n - 1) * self.sx + 1];
                                let cand = (base + at) as u32;
                                if u == 0 && v == 0 {
                                    for (k, (b, a)) in
                                        best.iter_mut().zip(arg.iter_mut()).enumerate()
                                    {
                                        *b = row[k * self.sx];
                                        *a = cand + (k * self.sx) as u32;
                                    }
                                    continue;
                                }
                                if self.sx == 2 {
                                    max_step::<T, 2>(row, cand, best, arg);
                                } else {
                                    max_step::<T, 0>(row, cand, best, arg);
                                }
                            }
                        }
                    }
                    for j in (0..wo).filter(|j| !fast.contains(j)) {
                        let xr = &self.xs[j];
                        let mut best_idx = yr.start * w + xr.start;
                        let mut best = src[best_idx];
                        for y in yr.clone() {
                            let row = y * w + xr.start..y * w + xr.end;
                            for (idx, &v) in row.clone().zip(&src[row]) {
                                if v > best {
                                    best = v;
                                    best_idx = idx;
                                }
                            }
                        }
                        out[j] = best;
                        argmax[j] = (base + best_idx) as u32;
                    }
                }
            }
        })
    }

    /// Overwrites `dx` with the routed gradient of one sample.
    pub(crate) fn backward_sample<T: Scalar>(&self, argmax: &[u32], dout: &[T], dx: &mut [T]) {
        dx.fill(T::zero());
        for (&idx, &g) in argmax.iter().zip(dout) {
            dx[idx as usize] = dx[idx as usize] + g;
        }
    }
}

/// One window offset across a row of full windows: `row[k * stride]` competes
/// with `best[k]`. `STRIDE` of 0 reads the stride from the row length.
#[inline(always)]
fn max_step<T: Scalar, const STRIDE: usize>(row: &[T], cand: u32, best: &mut [T], arg: &mut [u32]) {
    let n = best.len();
    let stride = if STRIDE > 0 {
        STRIDE
    } else if n > 1 {
        (row.len() - 1) / (n - 1)
    } else {
        1
    };
    assert!(arg.len() == n && (n == 0 || (n - 1) * stride < row.len()));
    for k in 0..n {
        // SAFETY: `k < n` and the assert bounds `(n - 1) * stride`.
        let (val, b, a) = unsafe {
            (
                *row.get_unchecked(k * stride),
                best.get_unchecked_mut(k),
                arg.get_unchecked_mut(k),
            )
        };
        let gt = val > *b;
        *b = select_unpredictable(gt, val, *b);
        *a = select_unpredictable(gt, cand + (k * stride) as u32, *a);
    }
}

/// Max pooling over in-bounds window cells; padding never wins. Ties go to
/// the smallest flat input index.
pub fn maxpool_forward<T: Scalar>(
    x: &Tensor<T>,
    geom: PoolGeometry,
) -> Result<(Tensor<T>, PoolIndices)> {
    let (n, c, h, w) = x.nchw("maxpool input")?;
    let plan = PoolPlan::new(geom, c, h, w)?;
    if plan.in_len() > u32::MAX as usize {
        return Err(Error::shape(format!(
            "pooling input {:?} is too large",
            x.dims()
        )));
    }
    let (ho, wo) = plan.out_dims();
    let (in_len, out_len) = (plan.in_len(), plan.out_len());
    let mut out = vec![T::zero(); n * out_len];
    let mut local = vec![0u32; out_len];
    let mut argmax = Vec::with_capacity(n * out_len);
    for (s, (x_n, out_n)) in x
        .data()
        .chunks(in_len)
        .zip(out.chunks_mut(out_len))
        .enumerate()
    {
        plan.forward_sample(x_n, out_n, &mut local);
        argmax.extend(local.iter().map(|&i| s * in_len + i as usize));
    }
    let output_dims = vec![n, c, ho, wo];
    Ok((
        Tensor::from_parts(output_dims.clone(), out),
        PoolIndices {
            input_dims: x.dims().to_vec(),
            output_dims,
            argmax,
        },
    ))
}

/// Routes every upstream gradient element to the input cell that won its
/// window.
pub fn maxpool_backward<T: Scalar>(indices: &PoolIndices, dout: &Tensor<T>) -> Result<Tensor<T>> {
    if dout.dims() != indices.output_dims.as_slice() {
        return Err(Error::shape(format!(
            "pool indices were recorded for output {:?}, gradient has {:?}",
            indices.output_dims,
            dout.dims()
        )));
    }
    let mut dx = vec![T::zero(); indices.input_dims.iter().product()];
    for (&idx, &g) in indices.argmax.iter().zip(dout.data()) {
        dx[idx] = dx[idx] + g;
    }
    Ok(Tensor::from_parts(indices.input_dims.clone(), dx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::gradcheck::{max_relative_error, numeric_gradient, projected_sum};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn grid_4x4() -> Tensor {
        Tensor::from_vec(&[1, 1, 4, 4], (1..=16).map(|v| v as f32).collect()).unwrap()
    }

    /// Brute-force window enumeration in signed coordinates.
    fn pool_oracle(x: &Tensor, k: usize, s: usize) -> Vec<f32> {
        let (n, c, h, w) = x.nchw("x").unwrap();
        let gy = same_pad_geometry(h, k, s).unwrap();
        let gx = same_pad_geometry(w, k, s).unwrap();
        let mut out = vec![];
        for p in 0..n * c {
            for i in 0..gy.out_size {
                for j in 0..gx.out_size {
                    let mut vals = vec![];
                    for u in 0..k as isize {
                        for v in 0..k as isize {
                            let y = (i * s) as isize + u - gy.pad_before as isize;
                            let xx = (j * s) as isize + v - gx.pad_before as isize;
                            if (0..h as isize).contains(&y) && (0..w as isize).contains(&xx) {
                                vals.push(x.data()[p * h * w + y as usize * w + xx as usize]);
                            }
                        }
                    }
                    out.push(vals.into_iter().fold(f32::NEG_INFINITY, f32::max));
                }
            }
        }
        out
    }

    /// Flat index of the first maximal in-bounds cell of every window.
    fn first_max_oracle(x: &Tensor, k: usize, s: usize) -> Vec<usize> {
        let (n, c, h, w) = x.nchw("x").unwrap();
        let gy = same_pad_geometry(h, k, s).unwrap();
        let gx = same_pad_geometry(w, k, s).unwrap();
        let mut out = vec![];
        for p in 0..n * c {
            for i in 0..gy.out_size {
                for j in 0..gx.out_size {
                    let mut cells = vec![];
                    for u in 0..k as isize {
                        for v in 0..k as isize {
                            let y = (i * s) as isize + u - gy.pad_before as isize;
                            let xx = (j * s) as isize + v - gx.pad_before as isize;
                            if (0..h as isize).contains(&y) && (0..w as isize).contains(&xx) {
                                cells.push(p * h * w + y as usize * w + xx as usize);
                            }
                        }
                    }
                    let top = cells
                        .iter()
                        .map(|&i| x.data()[i])
                        .fold(f32::NEG_INFINITY, f32::max);
                    out.push(*cells.iter().filter(|&&i| x.data()[i] == top).min().unwrap());
                }
            }
        }
        out
    }

    #[test]
    fn table_row_p1_shape() {
        let x = Tensor::<f32>::zeros(&[1, 16, 228, 228]).unwrap();
        let (y, _) = maxpool_forward(&x, PoolGeometry::default()).unwrap();
        assert_eq!(y.dims(), &[1, 16, 114, 114]);
    }

    #[test]
    fn constant_input_pools_to_constant() {
        let x = Tensor::new(&[2, 3, 7, 7], -2.5f32).unwrap();
        let (y, _) = maxpool_forward(&x, PoolGeometry::default()).unwrap();
        assert!(y.data().iter().all(|&v| v == -2.5));
    }

    #[test]
    fn four_by_four_grid() {
        let x = grid_4x4();
        let (y, idx) = maxpool_forward(&x, PoolGeometry::default()).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[11.0, 12.0, 15.0, 16.0]);
        assert_eq!(y.data(), pool_oracle(&x, 3, 2).as_slice());

        let dx = maxpool_backward(&idx, &Tensor::new(&[1, 1, 2, 2], 1.0f32).unwrap()).unwrap();
        let mut expect = vec![0.0; 16];
        for v in [11, 12, 15, 16] {
            expect[v - 1] = 1.0;
        }
        assert_eq!(dx.data(), expect.as_slice());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let (_, idx) = maxpool_forward(&grid_4x4(), PoolGeometry::default()).unwrap();
        let dx = maxpool_backward(&idx, &Tensor::<f32>::zeros(&[1, 1, 2, 2]).unwrap()).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ties_pick_smallest_index_and_negatives_beat_padding() {
        let x = Tensor::new(&[1, 1, 2, 2], -1.0f32).unwrap();
        let (y, idx) = maxpool_forward(&x, PoolGeometry::default()).unwrap();
        assert_eq!(y.data(), &[-1.0]);
        assert_eq!(idx.argmax(), &[0]);
    }

    #[test]
    fn stale_indices_are_rejected() {
        let (_, idx) = maxpool_forward(&grid_4x4(), PoolGeometry::default()).unwrap();
        assert!(maxpool_backward(&idx, &Tensor::<f32>::zeros(&[1, 1, 3, 3]).unwrap()).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // distinct, well-separated values keep every window away from ties
        let mut rng = Rng::new(5);
        let mut vals: Vec<f32> = (0..25).map(|v| v as f32 * 0.1).collect();
        rng.shuffle(&mut vals);
        let x = Tensor::from_vec(&[1, 1, 5, 5], vals).unwrap();
        let (y, idx) = maxpool_forward(&x, PoolGeometry::default()).unwrap();
        let proj = rng.uniform(-1.0, 1.0, y.dims()).unwrap();
        let dx = maxpool_backward(&idx, &proj).unwrap();
        let num = numeric_gradient(&x, 1e-3, |xp| {
            projected_sum(
                &maxpool_forward(xp, PoolGeometry::default()).unwrap().0,
                &proj,
            )
        });
        assert!(max_relative_error(dx.data(), &num) < 1e-3);
    }

    proptest! {
        #[test]
        fn matches_window_enumeration(seed in any::<u64>(), h in 1usize..10, w in 1usize..10) {
            let x = Rng::new(seed).uniform(-1.0, 1.0, &[1, 2, h, w]).unwrap();
            let (y, _) = maxpool_forward(&x, PoolGeometry::default()).unwrap();
            let expect = pool_oracle(&x, 3, 2);
            prop_assert_eq!(y.data(), expect.as_slice());
        }

        #[test]
        fn ties_and_geometries_match_smallest_index_oracle(
            seed in any::<u64>(),
            h in 1usize..12,
            w in 1usize..12,
            k in 1usize..5,
            s in 1usize..4,
        ) {
            // three levels force frequent ties
            let mut rng = Rng::new(seed);
            let vals: Vec<f32> = (0..2 * h * w).map(|_| rng.range(0, 3) as f32).collect();
            let x = Tensor::from_vec(&[1, 2, h, w], vals).unwrap();
            let (y, idx) = maxpool_forward(&x, PoolGeometry::new((k, k), (s, s))).unwrap();
            prop_assert_eq!(y.data().to_vec(), pool_oracle(&x, k, s));
            prop_assert_eq!(idx.argmax().to_vec(), first_max_oracle(&x, k, s));
        }

        #[test]
        fn unit_gradient_per_output_cell(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
            let x = Rng::new(seed).uniform(-1.0, 1.0, &[2, 2, h, w]).unwrap();
            let (y, idx) = maxpool_forward(&x, PoolGeometry::default()).unwrap();
            let dx = maxpool_backward(&idx, &Tensor::new(y.dims(), 1.0f32).unwrap()).unwrap();
            prop_assert_eq!(dx.sum(), y.len() as f64);
        }
    }
}

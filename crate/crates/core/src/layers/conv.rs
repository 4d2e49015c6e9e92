use rayon::prelude::*;

use super::{gemm_ld, same_pad_geometry, sum_f64, SameGeometry};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::simd::vectorized;
use crate::tensor::Tensor;

/// Weights `[out, in, kh, kw]` and bias `[out]` of a SAME-padded 2-D
/// convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: (usize, usize),
}

impl<T: Scalar> ConvParams<T> {
    /// Zero-initialized parameters. `kernel` and `stride` are `(y, x)`.
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Self> {
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid("convolution stride must be positive"));
        }
        Ok(ConvParams {
            weight: Tensor::zeros(&[out_channels, in_channels, kernel.0, kernel.1])?,
            bias: Tensor::zeros(&[out_channels])?,
            stride,
        })
    }

    pub fn from_tensors(
        weight: Tensor<T>,
        bias: Tensor<T>,
        stride: (usize, usize),
    ) -> Result<Self> {
        if weight.rank() != 4 || bias.dims() != [weight.dims()[0]] {
            return Err(Error::shape(format!(
                "convolution weight {:?} and bias {:?} do not agree",
                weight.dims(),
                bias.dims()
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid("convolution stride must be positive"));
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    /// `(kh, kw)`
    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.dims()[2], self.weight.dims()[3])
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Same shapes and stride at another precision.
    pub fn cast<U: Scalar>(&self) -> ConvParams<U> {
        ConvParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
        }
    }

    fn geometry(&self, h: usize, w: usize) -> Result<(SameGeometry, SameGeometry)> {
        let (kh, kw) = self.kernel();
        Ok((
            same_pad_geometry(h, kh, self.stride.0)?,
            same_pad_geometry(w, kw, self.stride.1)?,
        ))
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (gy, gx) = self.geometry(h, w)?;
        Ok((gy.out_size, gx.out_size))
    }
}

/// Gradients of a convolution. `dx` is `None` when the caller did not ask for
/// the input gradient.
#[derive(Clone, Debug)]
pub struct ConvGrads<T = f32> {
    pub dx: Option<Tensor<T>>,
    pub dweight: Tensor<T>,
    pub dbias: Tensor<T>,
}

/// Geometry of one convolution over a fixed input size, with the per-sample
/// kernels.
pub(crate) struct ConvPlan {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sy: usize,
    sx: usize,
    gy: SameGeometry,
    gx: SameGeometry,
}

impl ConvPlan {
    pub(crate) fn new<T: Scalar>(p: &ConvParams<T>, c: usize, h: usize, w: usize) -> Result<Self> {
        if c != p.in_channels() {
            return Err(Error::shape(format!(
                "conv2d expects {} input channels, got {c}",
                p.in_channels()
            )));
        }
        let (gy, gx) = p.geometry(h, w)?;
        let (kh, kw) = p.kernel();
        Ok(ConvPlan {
            c,
            h,
            w,
            kh,
            kw,
            sy: p.stride.0,
            sx: p.stride.1,
            gy,
            gx,
        })
    }

    /// Rows of the column buffer, `c * kh * kw`.
    pub(crate) fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Output cells per channel.
    pub(crate) fn out_len(&self) -> usize {
        self.gy.out_size * self.gx.out_size
    }

    /// Input column range `[j0, j1)` of output columns whose tap `v` lands
    /// inside the image.
    fn valid_cols(&self, v: usize) -> (usize, usize) {
        let wo = self.gx.out_size;
        let pad = self.gx.pad_before;
        // smallest j with j*sx + v >= pad
        let j0 = if v >= pad {
            0
        } else {
            (pad - v).div_ceil(self.sx)
        };
        // largest j with j*sx + v - pad < w
        let limit = (self.w + pad).saturating_sub(v); // j*sx < limit
        let j1 = limit.div_ceil(self.sx).min(wo);
        (j0.min(j1), j1)
    }

    pub(crate) fn out_dims(&self) -> (usize, usize) {
        (self.gy.out_size, self.gx.out_size)
    }

    /// Output rows unfolded at a time, so a band of columns stays in cache.
    fn band(&self) -> usize {
        const BAND_ELEMS: usize = 48 * 1024;
        (BAND_ELEMS / (self.rows() * self.gx.out_size)).clamp(1, self.gy.out_size)
    }

    /// Scratch elements for one band of columns.
    pub(crate) fn band_len(&self) -> usize {
        self.rows() * self.band() * self.gx.out_size
    }

    /// Output row ranges of every band.
    fn bands(&self) -> impl Iterator<Item = std::ops::Range<usize>> {
        let (ho, band) = (self.gy.out_size, self.band());
        (0..ho).step_by(band).map(move |i| i..(i + band).min(ho))
    }

    /// Forward pass for one `[c, h, w]` sample, with `cols` as band scratch
    /// of [`band_len`](Self::band_len) elements.
    pub(crate) fn forward_sample<T: Scalar>(
        &self,
        p: &ConvParams<T>,
        x: &[T],
        cols: &mut [T],
        out: &mut [T],
    ) {
        let (k, rows, hw, wo) = (
            p.out_channels(),
            self.rows(),
            self.out_len(),
            self.gx.out_size,
        );
        for (ch, b) in p.bias.data().iter().enumerate() {
            out[ch * hw..(ch + 1) * hw].fill(*b);
        }
        for r in self.bands() {
            let px = r.len() * wo;
            let cols = &mut cols[..rows * px];
            self.im2col(x, r.clone(), cols);
            gemm_ld(
                k,
                rows,
                px,
                T::one(),
                (p.weight.data(), rows, false),
                (cols, px, false),
                T::one(),
                (&mut out[r.start * wo..], hw),
            );
        }
    }

    /// Backward pass for one sample given its input `x`. Overwrites `dw` and
    /// `db`; `cols` is band scratch. When `dx` is given, its first buffer is
    /// band scratch too and the second receives the input gradient.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn backward_sample<T: Scalar>(
        &self,
        p: &ConvParams<T>,
        x: &[T],
        dout: &[T],
        dw: &mut [T],
        db: &mut [T],
        cols: &mut [T],
        mut dx: Option<(&mut [T], &mut [T])>,
    ) {
        let (k, rows, hw, wo) = (
            p.out_channels(),
            self.rows(),
            self.out_len(),
            self.gx.out_size,
        );
        for (b, plane) in db.iter_mut().zip(dout.chunks(hw)) {
            *b = T::lit(sum_f64(plane));
        }
        if let Some((_, dx)) = dx.as_mut() {
            dx.fill(T::zero());
        }
        for (i, r) in self.bands().enumerate() {
            let px = r.len() * wo;
            let cols = &mut cols[..rows * px];
            self.im2col(x, r.clone(), cols);
            let dout = &dout[r.start * wo..];
            gemm_ld(
                k,
                px,
                rows,
                T::one(),
                (dout, hw, false),
                (cols, px, true),
                if i == 0 { T::zero() } else { T::one() },
                (dw, rows),
            );
            if let Some((dcols, dx)) = dx.as_mut() {
                let dcols = &mut dcols[..rows * px];
                gemm_ld(
                    rows,
                    k,
                    px,
                    T::one(),
                    (p.weight.data(), rows, true),
                    (dout, hw, false),
                    T::zero(),
                    (dcols, px),
                );
                self.col2im(dcols, r, dx);
            }
        }
    }

    /// Unfolds output rows `band` of one `[c, h, w]` image into
    /// `[c*kh*kw, band.len()*wo]` columns.
    fn im2col<T: Scalar>(&self, x: &[T], band: std::ops::Range<usize>, cols: &mut [T]) {
        vectorized(|| {
            let wo = self.gx.out_size;
            let len = band.len() * wo;
            let plane = self.h * self.w;
            let mut row = 0;
            for c in 0..self.c {
                let img = &x[c * plane..(c + 1) * plane];
                for u in 0..self.kh {
                    for v in 0..self.kw {
                        let dst = &mut cols[row * len..(row + 1) * len];
                        let (j0, j1) = self.valid_cols(v);
                        for (out, i) in dst.chunks_exact_mut(wo).zip(band.clone()) {
                            let y = (i * self.sy + u) as isize - self.gy.pad_before as isize;
                            if y < 0 || y as usize >= self.h {
                                out.fill(T::zero());
                                continue;
                            }
                            let src = &img[y as usize * self.w..(y as usize + 1) * self.w];
                            out[..j0].fill(T::zero());
                            out[j1..].fill(T::zero());
                            if j0 == j1 {
                                continue;
                            }
                            let x0 = j0 * self.sx + v - self.gx.pad_before;
                            if self.sx == 1 {
                                out[j0..j1].copy_from_slice(&src[x0..x0 + (j1 - j0)]);
                            } else {
                                for (k, o) in out[j0..j1].iter_mut().enumerate() {
                                    *o = src[x0 + k * self.sx];
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        })
    }

    /// Adjoint of `im2col`: adds the column gradients of output rows `band`
    /// onto the image, dropping the padding cells.
    fn col2im<T: Scalar>(&self, cols: &[T], band: std::ops::Range<usize>, dx: &mut [T]) {
        vectorized(|| {
            let wo = self.gx.out_size;
            let len = band.len() * wo;
            let plane = self.h * self.w;
            let mut row = 0;
            for c in 0..self.c {
                let img = &mut dx[c * plane..(c + 1) * plane];
                for u in 0..self.kh {
                    for v in 0..self.kw {
                        let src = &cols[row * len..(row + 1) * len];
                        let (j0, j1) = self.valid_cols(v);
                        for (g, i) in src.chunks_exact(wo).zip(band.clone()) {
                            let y = (i * self.sy + u) as isize - self.gy.pad_before as isize;
                            if y < 0 || y as usize >= self.h || j0 == j1 {
                                continue;
                            }
                            let dst = &mut img[y as usize * self.w..(y as usize + 1) * self.w];
                            let x0 = j0 * self.sx + v - self.gx.pad_before;
                            if self.sx == 1 {
                                for (d, s) in dst[x0..x0 + (j1 - j0)].iter_mut().zip(&g[j0..j1]) {
                                    *d = *d + *s;
                                }
                            } else {
                                for (k, s) in g[j0..j1].iter().enumerate() {
                                    dst[x0 + k * self.sx] = dst[x0 + k * self.sx] + *s;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        })
    }
}

/// SAME-padded convolution of an `[n, c, h, w]` batch.
///
/// `out[n,k,i,j] = bias[k] + sum_{c,u,v} xpad[n, c, i*sy+u, j*sx+v] * w[k,c,u,v]`
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.nchw("conv2d input")?;
    let plan = ConvPlan::new(p, c, h, w)?;
    let k = p.out_channels();
    let hw = plan.out_len();
    let mut out = vec![T::zero(); n * k * hw];
    out.par_chunks_mut(k * hw)
        .zip(x.data().par_chunks(c * h * w))
        .for_each_init(
            || vec![T::zero(); plan.band_len()],
            |cols, (out_n, x_n)| plan.forward_sample(p, x_n, cols, out_n),
        );
    let (ho, wo) = plan.out_dims();
    Ok(Tensor::from_parts(vec![n, k, ho, wo], out))
}

/// Backward pass of [`conv2d_forward`].
///
/// Weight and bias gradients are summed over the batch in sample order, so
/// the result does not depend on how samples are scheduled across threads.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    dout: &Tensor<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let (n, c, h, w) = x.nchw("conv2d input")?;
    let plan = ConvPlan::new(p, c, h, w)?;
    let k = p.out_channels();
    let (ho, wo) = plan.out_dims();
    dout.expect_dims(&[n, k, ho, wo], "conv2d upstream gradient")?;
    let (rows, hw) = (plan.rows(), plan.out_len());
    let x_len = c * h * w;

    let per_sample = |x_n: &[T], dout_n: &[T], dx_n: Option<&mut [T]>| {
        let mut cols = vec![T::zero(); plan.band_len()];
        let mut dcols = vec![T::zero(); if dx_n.is_some() { plan.band_len() } else { 0 }];
        let mut dw = vec![T::zero(); k * rows];
        let mut db = vec![T::zero(); k];
        let dx = dx_n.map(|d| (&mut dcols[..], d));
        plan.backward_sample(p, x_n, dout_n, &mut dw, &mut db, &mut cols, dx);
        (dw, db)
    };

    let mut dx = need_dx.then(|| vec![T::zero(); n * x_len]);
    let partials: Vec<(Vec<T>, Vec<T>)> = match dx.as_mut() {
        Some(dx) => dx
            .par_chunks_mut(x_len)
            .zip(x.data().par_chunks(x_len))
            .zip(dout.data().par_chunks(k * hw))
            .map(|((dx_n, x_n), dout_n)| per_sample(x_n, dout_n, Some(dx_n)))
            .collect(),
        None => x
            .data()
            .par_chunks(x_len)
            .zip(dout.data().par_chunks(k * hw))
            .map(|(x_n, dout_n)| per_sample(x_n, dout_n, None))
            .collect(),
    };

    let mut dweight = vec![T::zero(); k * rows];
    let mut dbias = vec![T::zero(); k];
    for (dw, db) in &partials {
        dweight.iter_mut().zip(dw).for_each(|(a, b)| *a = *a + *b);
        dbias.iter_mut().zip(db).for_each(|(a, b)| *a = *a + *b);
    }
    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::from_parts(vec![n, c, h, w], d)),
        dweight: Tensor::from_parts(p.weight.dims().to_vec(), dweight),
        dbias: Tensor::from_parts(vec![k], dbias),
    })
}

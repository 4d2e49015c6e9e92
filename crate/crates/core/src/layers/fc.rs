use super::gemm;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fully connected layer with weights `[out, in]` and bias `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FcParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct FcGrads<T = f32> {
    pub dx: Option<Tensor<T>>,
    pub dweight: Tensor<T>,
    pub dbias: Tensor<T>,
}

impl<T: Scalar> FcParams<T> {
    pub fn zeros(in_features: usize, out_features: usize) -> Result<Self> {
        Ok(FcParams {
            weight: Tensor::zeros(&[out_features, in_features])?,
            bias: Tensor::zeros(&[out_features])?,
        })
    }

    pub fn from_tensors(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 || bias.dims() != [weight.dims()[0]] {
            return Err(Error::shape(format!(
                "fully connected weight {:?} and bias {:?} do not agree",
                weight.dims(),
                bias.dims()
            )));
        }
        Ok(FcParams { weight, bias })
    }

    pub fn cast<U: Scalar>(&self) -> FcParams<U> {
        FcParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        match x.dims() {
            [n, f] if *f == self.in_features() => Ok(*n),
            d => Err(Error::shape(format!(
                "fully connected layer expects [batch, {}], got {d:?}",
                self.in_features()
            ))),
        }
    }
}

/// `y = x W^T + b` for `x` of shape `[n, in]`.
pub fn fc_forward<T: Scalar>(x: &Tensor<T>, p: &FcParams<T>) -> Result<Tensor<T>> {
    let n = p.check_input(x)?;
    let (fin, fout) = (p.in_features(), p.out_features());
    let mut y = Vec::with_capacity(n * fout);
    for _ in 0..n {
        y.extend_from_slice(p.bias.data());
    }
    gemm(
        n,
        fin,
        fout,
        T::one(),
        x.data(),
        false,
        p.weight.data(),
        true,
        T::one(),
        &mut y,
    );
    Ok(Tensor::from_parts(vec![n, fout], y))
}

/// `dW = dY^T x`, `db = sum_n dY`, `dx = dY W`.
pub fn fc_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &FcParams<T>,
    dout: &Tensor<T>,
    need_dx: bool,
) -> Result<FcGrads<T>> {
    let n = p.check_input(x)?;
    let (fin, fout) = (p.in_features(), p.out_features());
    dout.expect_dims(&[n, fout], "fully connected upstream gradient")?;
    let mut dweight = vec![T::zero(); fout * fin];
    let mut dbias = vec![T::zero(); fout];
    let mut dx = need_dx.then(|| vec![T::zero(); n * fin]);
    backward_into(
        x.data(),
        n,
        p,
        dout.data(),
        &mut dweight,
        &mut dbias,
        dx.as_deref_mut(),
    );
    Ok(FcGrads {
        dx: dx.map(|d| Tensor::from_parts(vec![n, fin], d)),
        dweight: Tensor::from_parts(vec![fout, fin], dweight),
        dbias: Tensor::from_parts(vec![fout], dbias),
    })
}

/// Slice form of [`fc_backward`]; overwrites every output buffer.
pub(crate) fn backward_into<T: Scalar>(
    x: &[T],
    n: usize,
    p: &FcParams<T>,
    dout: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    dx: Option<&mut [T]>,
) {
    let (fin, fout) = (p.in_features(), p.out_features());
    gemm(
        fout,
        n,
        fin,
        T::one(),
        dout,
        true,
        x,
        false,
        T::zero(),
        dweight,
    );
    dbias.fill(T::zero());
    for row in dout.chunks(fout) {
        dbias.iter_mut().zip(row).for_each(|(a, b)| *a = *a + *b);
    }
    if let Some(dx) = dx {
        gemm(
            n,
            fout,
            fin,
            T::one(),
            dout,
            false,
            p.weight.data(),
            false,
            T::zero(),
            dx,
        );
    }
}

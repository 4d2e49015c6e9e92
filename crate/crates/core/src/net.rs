//! The crack-detection network: two conv/ReLU/LRN/pool blocks followed by two
//! fully connected layers and a softmax head.
//!
//! ```text
//! Input [3,228,228]
//! C1  conv 16 x 3x3 s1 SAME -> ReLU -> LRN -> P1 max 3x3 s2 SAME   [16,114,114]
//! C2  conv 32 x 3x3 s1 SAME -> ReLU -> LRN -> P2 max 3x3 s2 SAME   [32,57,57]
//! Flatten 103968 -> FC1 128 -> ReLU -> FC2 T -> SoftMax
//! ```

use std::fmt;
use std::sync::{Mutex, MutexGuard};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::conv::ConvPlan;
use crate::layers::pool::PoolPlan;
use crate::layers::{
    conv2d_forward, fc, fc_forward, lrn, lrn_forward, maxpool_forward, relu, relu_forward, softmax,
    ConvParams, FcParams, LrnParams, PoolGeometry,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const CONV_KERNEL: (usize, usize) = (3, 3);
const CONV_STRIDE: (usize, usize) = (1, 1);

/// Parameter tensor names in storage order.
pub const PARAM_NAMES: [&str; 8] = [
    "c1.weight",
    "c1.bias",
    "c2.weight",
    "c2.bias",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
];

/// Indices into [`PARAM_NAMES`] of the convolution tensors.
pub const CONV_PARAMS: std::ops::Range<usize> = 0..4;

/// Architecture hyperparameters. [`NetworkConfig::standard`] gives the
/// full-size network; smaller inputs and widths exist for tests.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// `[channels, height, width]`
    pub input_dims: [usize; 3],
    pub conv_channels: [usize; 2],
    pub fc_hidden: usize,
    pub num_classes: usize,
    /// `None` disables both normalization layers.
    pub lrn: Option<LrnParams>,
}

impl NetworkConfig {
    /// 3x228x228 input, 16 and 32 filters, 128 hidden units, LRN on.
    pub fn standard(num_classes: usize) -> Self {
        NetworkConfig {
            input_dims: [3, 228, 228],
            conv_channels: [16, 32],
            fc_hidden: 128,
            num_classes,
            lrn: Some(LrnParams::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.input_dims.contains(&0) || self.conv_channels.contains(&0) || self.fc_hidden == 0 {
            return Err(Error::invalid(format!("degenerate network size {self:?}")));
        }
        if let Some(p) = &self.lrn {
            p.validate()?;
        }
        Ok(())
    }

    /// Spatial size after each pooling stage, `[(h1, w1), (h2, w2)]`.
    fn pooled_sizes(&self) -> Result<[(usize, usize); 2]> {
        let pool = PoolGeometry::default();
        let p1 = pool.output_size(self.input_dims[1], self.input_dims[2])?;
        let p2 = pool.output_size(p1.0, p1.1)?;
        Ok([p1, p2])
    }

    pub fn flat_features(&self) -> Result<usize> {
        let [_, (h, w)] = self.pooled_sizes()?;
        Ok(self.conv_channels[1] * h * w)
    }

    /// Every layer of the stack with its input and output volume.
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        let [c0, h0, w0] = self.input_dims;
        let [k1, k2] = self.conv_channels;
        let [(h1, w1), (h2, w2)] = self.pooled_sizes()?;
        let flat = k2 * h2 * w2;
        let (fh, t) = (self.fc_hidden, self.num_classes);
        let conv = |c, k| c * k * CONV_KERNEL.0 * CONV_KERNEL.1 + k;
        let pool = PoolGeometry::default();

        let mut out = Vec::with_capacity(14);
        let mut push = |name, kind, input: Vec<usize>, output: Vec<usize>, params| {
            let (filter, stride) = match kind {
                LayerKind::Conv => (Some(CONV_KERNEL), Some(CONV_STRIDE)),
                LayerKind::Pool => (Some(pool.kernel), Some(pool.stride)),
                _ => (None, None),
            };
            out.push(LayerSpec {
                name,
                kind,
                input,
                output,
                filter,
                stride,
                params,
            });
        };
        let img = vec![c0, h0, w0];
        push("Input", LayerKind::Input, img.clone(), img.clone(), 0);
        push("C1", LayerKind::Conv, img, vec![k1, h0, w0], conv(c0, k1));
        push("R1", LayerKind::Relu, vec![k1, h0, w0], vec![k1, h0, w0], 0);
        if self.lrn.is_some() {
            push("N1", LayerKind::Lrn, vec![k1, h0, w0], vec![k1, h0, w0], 0);
        }
        push("P1", LayerKind::Pool, vec![k1, h0, w0], vec![k1, h1, w1], 0);
        push(
            "C2",
            LayerKind::Conv,
            vec![k1, h1, w1],
            vec![k2, h1, w1],
            conv(k1, k2),
        );
        push("R2", LayerKind::Relu, vec![k2, h1, w1], vec![k2, h1, w1], 0);
        if self.lrn.is_some() {
            push("N2", LayerKind::Lrn, vec![k2, h1, w1], vec![k2, h1, w1], 0);
        }
        push("P2", LayerKind::Pool, vec![k2, h1, w1], vec![k2, h2, w2], 0);
        push(
            "Flatten",
            LayerKind::Flatten,
            vec![k2, h2, w2],
            vec![flat],
            0,
        );
        push("FC1", LayerKind::Fc, vec![flat], vec![fh], flat * fh + fh);
        push("R3", LayerKind::Relu, vec![fh], vec![fh], 0);
        push("FC2", LayerKind::Fc, vec![fh], vec![t], fh * t + t);
        push("SoftMax", LayerKind::Softmax, vec![t], vec![t], 0);

        for pair in out.windows(2) {
            if pair[0].output != pair[1].input {
                return Err(Error::shape(format!(
                    "{} produces {:?} but {} expects {:?}",
                    pair[0].name, pair[0].output, pair[1].name, pair[1].input
                )));
            }
        }
        Ok(out)
    }

    /// Total trainable parameters.
    pub fn param_count(&self) -> Result<usize> {
        Ok(self.layers()?.iter().map(|l| l.params).sum())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Input,
    Conv,
    Relu,
    Lrn,
    Pool,
    Flatten,
    Fc,
    Softmax,
}

impl LayerKind {
    /// Whether the layer appears in the compact size/parameter table
    /// (input, convolutions, pools, fully connected).
    pub fn is_tabulated(self) -> bool {
        matches!(
            self,
            LayerKind::Input | LayerKind::Conv | LayerKind::Pool | LayerKind::Fc
        )
    }
}

/// One layer of the stack. Volumes exclude the batch axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: &'static str,
    pub kind: LayerKind,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    /// `(y, x)` window of conv and pool layers.
    pub filter: Option<(usize, usize)>,
    pub stride: Option<(usize, usize)>,
    pub params: usize,
}

/// Network parameters.
#[derive(Clone, PartialEq)]
pub struct Network<T = f32> {
    config: NetworkConfig,
    c1: ConvParams<T>,
    c2: ConvParams<T>,
    fc1: FcParams<T>,
    fc2: FcParams<T>,
}

impl<T> fmt::Debug for Network<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Network")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

/// Uniform draw in `+-sqrt(6 / (fan_in + fan_out))`.
fn glorot(rng: &mut Rng, dims: &[usize], fan_in: usize, fan_out: usize) -> Result<Tensor> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    rng.uniform(-bound, bound, dims)
}

fn init_conv(rng: &mut Rng, c: usize, k: usize) -> Result<ConvParams> {
    let (kh, kw) = CONV_KERNEL;
    let w = glorot(rng, &[k, c, kh, kw], c * kh * kw, k * kh * kw)?;
    ConvParams::from_tensors(w, Tensor::zeros(&[k])?, CONV_STRIDE)
}

fn init_fc(rng: &mut Rng, fin: usize, fout: usize) -> Result<FcParams> {
    let w = glorot(rng, &[fout, fin], fin, fout)?;
    FcParams::from_tensors(w, Tensor::zeros(&[fout])?)
}

impl Network<f32> {
    /// Glorot-uniform weights and zero biases, drawn in layer order.
    pub fn new(config: NetworkConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let [c0, _, _] = config.input_dims;
        let [k1, k2] = config.conv_channels;
        let flat = config.flat_features()?;
        Ok(Network {
            c1: init_conv(rng, c0, k1)?,
            c2: init_conv(rng, k1, k2)?,
            fc1: init_fc(rng, flat, config.fc_hidden)?,
            fc2: init_fc(rng, config.fc_hidden, config.num_classes)?,
            config,
        })
    }

    /// A copy with a freshly initialized `num_classes`-way output layer; every
    /// other tensor is copied verbatim.
    pub fn with_new_head(&self, num_classes: usize, rng: &mut Rng) -> Result<Self> {
        let config = NetworkConfig {
            num_classes,
            ..self.config.clone()
        };
        config.validate()?;
        Ok(Network {
            fc2: init_fc(rng, config.fc_hidden, num_classes)?,
            config,
            ..self.clone()
        })
    }
}

impl<T: Scalar> Network<T> {
    /// All parameters zero. Every input then maps to uniform probabilities.
    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let [c0, _, _] = config.input_dims;
        let [k1, k2] = config.conv_channels;
        let flat = config.flat_features()?;
        Ok(Network {
            c1: ConvParams::zeros(c0, k1, CONV_KERNEL, CONV_STRIDE)?,
            c2: ConvParams::zeros(k1, k2, CONV_KERNEL, CONV_STRIDE)?,
            fc1: FcParams::zeros(flat, config.fc_hidden)?,
            fc2: FcParams::zeros(config.fc_hidden, config.num_classes)?,
            config,
        })
    }

    /// Rebuilds a network from tensors in [`PARAM_NAMES`] order.
    pub fn from_params(config: NetworkConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        let expect = Network::<T>::zeros(config.clone())?;
        if params.len() != PARAM_NAMES.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, got {}",
                PARAM_NAMES.len(),
                params.len()
            )));
        }
        for ((name, want), got) in PARAM_NAMES.iter().zip(expect.params()).zip(&params) {
            if want.dims() != got.dims() {
                return Err(Error::shape(format!(
                    "{name}: expected {:?}, got {:?}",
                    want.dims(),
                    got.dims()
                )));
            }
        }
        let mut it = params.into_iter();
        let mut next = || it.next().expect("length checked");
        Ok(Network {
            c1: ConvParams::from_tensors(next(), next(), CONV_STRIDE)?,
            c2: ConvParams::from_tensors(next(), next(), CONV_STRIDE)?,
            fc1: FcParams::from_tensors(next(), next())?,
            fc2: FcParams::from_tensors(next(), next())?,
            config,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Parameter tensors in [`PARAM_NAMES`] order.
    pub fn params(&self) -> [&Tensor<T>; 8] {
        [
            &self.c1.weight,
            &self.c1.bias,
            &self.c2.weight,
            &self.c2.bias,
            &self.fc1.weight,
            &self.fc1.bias,
            &self.fc2.weight,
            &self.fc2.bias,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 8] {
        [
            &mut self.c1.weight,
            &mut self.c1.bias,
            &mut self.c2.weight,
            &mut self.c2.bias,
            &mut self.fc1.weight,
            &mut self.fc1.bias,
            &mut self.fc2.weight,
            &mut self.fc2.bias,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            c1: self.c1.cast(),
            c2: self.c2.cast(),
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let (n, c, h, w) = x.nchw("network input")?;
        if [c, h, w] != self.config.input_dims {
            return Err(Error::shape(format!(
                "network expects [n, {}, {}, {}] input, got {:?}",
                self.config.input_dims[0],
                self.config.input_dims[1],
                self.config.input_dims[2],
                x.dims()
            )));
        }
        Ok(n)
    }

    /// Logits and softmax probabilities for a batch.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Forward<T>> {
        self.forward_train(x, &mut Workspace::new())
    }

    /// Forward pass that leaves in `ws` what [`Network::backward`] needs.
    pub fn forward_train(&self, x: &Tensor<T>, ws: &mut Workspace<T>) -> Result<Forward<T>> {
        let n = self.check_input(x)?;
        ws.prepare(self, n)?;
        let plans = ws.plans.as_ref().expect("prepared");
        let in_len = x.len() / n;
        let flat_len = plans.flat;
        let lrn = self.config.lrn;
        let scratch = &ws.scratch;
        ws.samples[..n]
            .par_iter_mut()
            .zip(x.data().par_chunks(in_len))
            .zip(ws.flat.data_mut().par_chunks_mut(flat_len))
            .for_each(|((sb, x), flat)| {
                let mut sc = lock_scratch(scratch);
                let sc = &mut *sc;
                sb.input.copy_from_slice(x);
                plans
                    .c1
                    .forward_sample(&self.c1, &sb.input, &mut sc.cols, &mut sb.a1);
                relu::forward_in_place(&mut sb.a1);
                let n1: &[T] = match &lrn {
                    Some(p) => {
                        lrn::forward_sample(
                            &sb.a1,
                            plans.k1,
                            plans.plane1,
                            p,
                            &mut sc.lrn,
                            &mut sc.n1,
                        );
                        &sc.n1
                    }
                    None => &sb.a1,
                };
                plans.p1.forward_sample(n1, &mut sb.p1, &mut sb.idx1);
                plans
                    .c2
                    .forward_sample(&self.c2, &sb.p1, &mut sc.cols, &mut sb.a2);
                relu::forward_in_place(&mut sb.a2);
                let n2: &[T] = match &lrn {
                    Some(p) => {
                        lrn::forward_sample(
                            &sb.a2,
                            plans.k2,
                            plans.plane2,
                            p,
                            &mut sc.lrn,
                            &mut sc.n2,
                        );
                        &sc.n2
                    }
                    None => &sb.a2,
                };
                plans.p2.forward_sample(n2, flat, &mut sb.idx2);
            });
        let h = relu_forward(&fc_forward(&ws.flat, &self.fc1)?);
        let logits = fc_forward(&h, &self.fc2)?;
        let probs = softmax(&logits)?;
        ws.h = Some(h);
        ws.batch = n;
        Ok(Forward { logits, probs })
    }

    /// Parameter gradients for the batch last passed to
    /// [`Network::forward_train`], given the loss gradient with respect to
    /// the logits. With `freeze_conv` the convolution gradients are skipped.
    pub fn backward(
        &self,
        ws: &mut Workspace<T>,
        dlogits: &Tensor<T>,
        freeze_conv: bool,
        grads: &mut Gradients<T>,
    ) -> Result<()> {
        let n = ws.batch;
        let h =
            ws.h.as_ref()
                .ok_or_else(|| Error::invalid("backward called before forward_train"))?;
        dlogits.expect_dims(&[n, self.config.num_classes], "logit gradient")?;
        grads.prepare(self);
        let plans = ws.plans.as_ref().expect("prepared");
        let [_, _, _, _, dw3, db3, dw4, db4] = &mut grads.tensors[..] else {
            unreachable!("prepared with eight tensors")
        };

        let mut dh = vec![T::zero(); n * self.config.fc_hidden];
        fc::backward_into(
            h.data(),
            n,
            &self.fc2,
            dlogits.data(),
            dw4.data_mut(),
            db4.data_mut(),
            Some(&mut dh),
        );
        relu::mask_in_place(h.data(), &mut dh);
        let mut dflat = if freeze_conv {
            None
        } else {
            Some(vec![T::zero(); n * plans.flat])
        };
        fc::backward_into(
            ws.flat.data(),
            n,
            &self.fc1,
            &dh,
            dw3.data_mut(),
            db3.data_mut(),
            dflat.as_deref_mut(),
        );
        grads.active = [
            !freeze_conv,
            !freeze_conv,
            !freeze_conv,
            !freeze_conv,
            true,
            true,
            true,
            true,
        ];
        let Some(dflat) = dflat else {
            return Ok(());
        };

        let lrn = self.config.lrn;
        let scratch = &ws.scratch;
        ws.samples[..n]
            .par_iter_mut()
            .zip(dflat.par_chunks(plans.flat))
            .for_each(|(sb, dflat)| {
                let mut sc = lock_scratch(scratch);
                let sc = &mut *sc;
                plans.p2.backward_sample(&sb.idx2, dflat, &mut sc.n2);
                let d2: &mut [T] = match &lrn {
                    Some(p) => {
                        lrn::backward_sample(
                            &sb.a2,
                            &sc.n2,
                            plans.k2,
                            plans.plane2,
                            p,
                            &mut sc.lrn,
                            &mut sc.d2,
                        );
                        &mut sc.d2
                    }
                    None => &mut sc.n2,
                };
                relu::mask_in_place(&sb.a2, d2);
                plans.c2.backward_sample(
                    &self.c2,
                    &sb.p1,
                    d2,
                    &mut sb.dw2,
                    &mut sb.db2,
                    &mut sc.cols,
                    Some((&mut sc.dcols, &mut sc.dp1)),
                );
                plans.p1.backward_sample(&sb.idx1, &sc.dp1, &mut sc.n1);
                let d1: &mut [T] = match &lrn {
                    Some(p) => {
                        lrn::backward_sample(
                            &sb.a1,
                            &sc.n1,
                            plans.k1,
                            plans.plane1,
                            p,
                            &mut sc.lrn,
                            &mut sc.d1,
                        );
                        &mut sc.d1
                    }
                    None => &mut sc.n1,
                };
                relu::mask_in_place(&sb.a1, d1);
                plans.c1.backward_sample(
                    &self.c1,
                    &sb.input,
                    d1,
                    &mut sb.dw1,
                    &mut sb.db1,
                    &mut sc.cols,
                    None,
                );
            });

        // reduce in sample order so the sum is independent of scheduling
        let [dw1, db1, dw2, db2, ..] = &mut grads.tensors[..] else {
            unreachable!("prepared with eight tensors")
        };
        for t in [&mut *dw1, &mut *db1, &mut *dw2, &mut *db2] {
            t.data_mut().fill(T::zero());
        }
        for sb in &ws.samples[..n] {
            add_assign(dw1.data_mut(), &sb.dw1);
            add_assign(db1.data_mut(), &sb.db1);
            add_assign(dw2.data_mut(), &sb.dw2);
            add_assign(db2.data_mut(), &sb.db2);
        }
        Ok(())
    }

    /// Runs a batch through the layer-level API one layer at a time and
    /// records every intermediate shape, batch axis included.
    pub fn trace_shapes(&self, x: &Tensor<T>) -> Result<Vec<(&'static str, Vec<usize>)>> {
        self.check_input(x)?;
        let pool = PoolGeometry::default();
        let mut shapes = vec![("Input", x.dims().to_vec())];
        let mut record = |name, t: &Tensor<T>| shapes.push((name, t.dims().to_vec()));
        let z1 = conv2d_forward(x, &self.c1)?;
        record("C1", &z1);
        let a1 = relu_forward(&z1);
        record("R1", &a1);
        let n1 = match &self.config.lrn {
            Some(p) => {
                let n1 = lrn_forward(&a1, p)?;
                record("N1", &n1);
                n1
            }
            None => a1,
        };
        let (p1, _) = maxpool_forward(&n1, pool)?;
        record("P1", &p1);
        let z2 = conv2d_forward(&p1, &self.c2)?;
        record("C2", &z2);
        let a2 = relu_forward(&z2);
        record("R2", &a2);
        let n2 = match &self.config.lrn {
            Some(p) => {
                let n2 = lrn_forward(&a2, p)?;
                record("N2", &n2);
                n2
            }
            None => a2,
        };
        let (p2, _) = maxpool_forward(&n2, pool)?;
        record("P2", &p2);
        let flat = p2.flatten_batch();
        record("Flatten", &flat);
        let z3 = fc_forward(&flat, &self.fc1)?;
        record("FC1", &z3);
        let h = relu_forward(&z3);
        record("R3", &h);
        let logits = fc_forward(&h, &self.fc2)?;
        record("FC2", &logits);
        record("SoftMax", &softmax(&logits)?);
        Ok(shapes)
    }
}

fn add_assign<T: Scalar>(acc: &mut [T], v: &[T]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a = *a + *b);
}

/// Output of a forward pass, both `[n, classes]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Forward<T = f32> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

/// Geometry of every per-sample stage for one network configuration.
struct Plans {
    config: NetworkConfig,
    c1: ConvPlan,
    p1: PoolPlan,
    c2: ConvPlan,
    p2: PoolPlan,
    k1: usize,
    k2: usize,
    plane1: usize,
    plane2: usize,
    flat: usize,
}

impl Plans {
    fn new<T: Scalar>(net: &Network<T>) -> Result<Self> {
        let [c0, h0, w0] = net.config.input_dims;
        let [k1, k2] = net.config.conv_channels;
        let pool = PoolGeometry::default();
        let c1 = ConvPlan::new(&net.c1, c0, h0, w0)?;
        let p1 = PoolPlan::new(pool, k1, h0, w0)?;
        let (h1, w1) = p1.out_dims();
        let c2 = ConvPlan::new(&net.c2, k1, h1, w1)?;
        let p2 = PoolPlan::new(pool, k2, h1, w1)?;
        Ok(Plans {
            config: net.config.clone(),
            flat: p2.out_len(),
            c1,
            p1,
            c2,
            p2,
            k1,
            k2,
            plane1: h0 * w0,
            plane2: h1 * w1,
        })
    }
}

/// Activations one sample keeps between the forward and backward pass, and
/// its share of the convolution gradients.
struct SampleBuffers<T> {
    input: Vec<T>,
    a1: Vec<T>,
    idx1: Vec<u32>,
    p1: Vec<T>,
    a2: Vec<T>,
    idx2: Vec<u32>,
    dw1: Vec<T>,
    db1: Vec<T>,
    dw2: Vec<T>,
    db2: Vec<T>,
}

impl<T: Scalar> SampleBuffers<T> {
    fn new(p: &Plans) -> Self {
        let z = |len| vec![T::zero(); len];
        SampleBuffers {
            input: z(p.config.input_dims.iter().product()),
            a1: z(p.k1 * p.plane1),
            idx1: vec![0; p.p1.out_len()],
            p1: z(p.p1.out_len()),
            a2: z(p.k2 * p.plane2),
            idx2: vec![0; p.flat],
            dw1: z(p.c1.rows() * p.k1),
            db1: z(p.k1),
            dw2: z(p.c2.rows() * p.k2),
            db2: z(p.k2),
        }
    }
}

/// Temporaries needed only while one sample is processed.
struct Scratch<T> {
    cols: Vec<T>,
    dcols: Vec<T>,
    n1: Vec<T>,
    d1: Vec<T>,
    n2: Vec<T>,
    d2: Vec<T>,
    dp1: Vec<T>,
    lrn: Vec<T>,
}

impl<T: Scalar> Scratch<T> {
    fn new(p: &Plans) -> Self {
        let z = |len| vec![T::zero(); len];
        let (a1, a2) = (p.k1 * p.plane1, p.k2 * p.plane2);
        Scratch {
            cols: z(p.c1.band_len().max(p.c2.band_len())),
            dcols: z(p.c2.band_len()),
            n1: z(a1),
            d1: z(a1),
            n2: z(a2),
            d2: z(a2),
            dp1: z(p.p1.out_len()),
            lrn: z(lrn::scratch_len(p.k1.max(p.k2))),
        }
    }
}

fn lock_scratch<T>(scratch: &[Mutex<Scratch<T>>]) -> MutexGuard<'_, Scratch<T>> {
    let slot = rayon::current_thread_index().unwrap_or(0) % scratch.len();
    scratch[slot].lock().unwrap_or_else(|e| e.into_inner())
}

/// Buffers reused across forward and backward passes. Sized lazily for the
/// network and the largest batch seen, so steady-state training does not
/// allocate activation memory.
pub struct Workspace<T = f32> {
    plans: Option<Plans>,
    samples: Vec<SampleBuffers<T>>,
    scratch: Vec<Mutex<Scratch<T>>>,
    flat: Tensor<T>,
    h: Option<Tensor<T>>,
    batch: usize,
}

impl<T: Scalar> Default for Workspace<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Workspace<T> {
    pub fn new() -> Self {
        Workspace {
            plans: None,
            samples: Vec::new(),
            scratch: Vec::new(),
            flat: Tensor::from_parts(vec![1], vec![T::zero()]),
            h: None,
            batch: 0,
        }
    }

    fn prepare(&mut self, net: &Network<T>, n: usize) -> Result<()> {
        if self.plans.as_ref().map(|p| &p.config) != Some(&net.config) {
            *self = Workspace::new();
            self.plans = Some(Plans::new(net)?);
        }
        let plans = self.plans.as_ref().expect("just set");
        while self.samples.len() < n {
            self.samples.push(SampleBuffers::new(plans));
        }
        let threads = rayon::current_num_threads().clamp(1, n.max(1));
        while self.scratch.len() < threads {
            self.scratch.push(Mutex::new(Scratch::new(plans)));
        }
        if self.flat.dims() != [n, plans.flat] {
            self.flat = Tensor::zeros(&[n, plans.flat])?;
        }
        self.h = None;
        self.batch = 0;
        Ok(())
    }
}

/// Per-parameter gradients in [`PARAM_NAMES`] order. Buffers are reused
/// across steps.
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    tensors: Vec<Tensor<T>>,
    active: [bool; 8],
}

impl<T: Scalar> Default for Gradients<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn new() -> Self {
        Gradients {
            tensors: Vec::new(),
            active: [false; 8],
        }
    }

    fn prepare(&mut self, net: &Network<T>) {
        let fits = self.tensors.len() == 8
            && self
                .tensors
                .iter()
                .zip(net.params())
                .all(|(g, p)| g.dims() == p.dims());
        if !fits {
            self.tensors = net
                .params()
                .iter()
                .map(|p| Tensor::from_parts(p.dims().to_vec(), vec![T::zero(); p.len()]))
                .collect();
        }
        self.active = [false; 8];
    }

    /// Gradient of parameter `i`, or `None` if it was frozen or never
    /// computed.
    pub fn get(&self, i: usize) -> Option<&Tensor<T>> {
        self.active
            .get(i)
            .copied()
            .unwrap_or(false)
            .then(|| &self.tensors[i])
    }
}

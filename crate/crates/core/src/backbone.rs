//! Feature extractor, sigmoid activation head and the conventional CAM
//! baseline (GAP + 1x1 conv trained with sigmoid cross entropy).
//!
//! The desk-scale extractor is a four layer strided CNN:
//!
//! | layer | kernel | stride | channels | output (64x64 input) |
//! |-------|--------|--------|----------|----------------------|
//! | conv1 | 3x3    | 2      | 3 -> 16  | 16x32x32             |
//! | conv2 | 3x3    | 2      | 16 -> 32 | 32x16x16             |
//! | conv3 | 3x3    | 1      | 32 -> 32 | 32x16x16             |
//! | conv4 | 3x3    | 1      | 32 -> 32 | 32x16x16             |
//!
//! Every conv has a bias and is followed by ReLU; padding is 1 everywhere.
//! The class head is a bias-free 1x1 conv `W: C x K`.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datamodel::{Image, LabelVector, MIN_IMAGE_SIDE};
use crate::error::{shape, Result};

pub const ARCH_TAG: &str = "tiny-cnn-4x-v1";

/// Spatial downsampling factor between image and feature map.
pub const FEATURE_STRIDE: usize = 4;

pub const FEATURE_CHANNELS: usize = 32;

/// (in_channels, out_channels, stride) for every conv layer.
const LAYER_TABLE: [(usize, usize, usize); 4] = [(3, 16, 2), (16, 32, 2), (32, 32, 1), (32, 32, 1)];

const KERNEL: usize = 3;
const PAD: usize = 1;

/// `C x H_f x W_f` backbone output.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap(pub Array3<f64>);

/// Bias-free 1x1 conv weights, one column per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights(pub Array2<f64>);

/// `K x H x W` per-class maps.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMaps(pub Array3<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct ClassLogits(pub Vec<f64>);

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.0.dim().0
    }

    fn flat(&self) -> ArrayView2<'_, f64> {
        let (c, h, w) = self.0.dim();
        self.0
            .view()
            .into_shape_with_order((c, h * w))
            .expect("feature maps are contiguous")
    }
}

impl ClassWeights {
    pub fn channels(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.0.ncols()
    }
}

impl ActivationMaps {
    pub fn num_classes(&self) -> usize {
        self.0.dim().0
    }

    pub fn height(&self) -> usize {
        self.0.dim().1
    }

    pub fn width(&self) -> usize {
        self.0.dim().2
    }

    pub fn flip_horizontal(&self) -> ActivationMaps {
        ActivationMaps(self.0.slice(s![.., .., ..;-1]).to_owned())
    }
}

const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function evaluated without overflow; the result never rounds to
/// exactly 0 or 1.
pub fn sigmoid(x: f64) -> f64 {
    let p = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP)
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check_head_shapes(z: &FeatureMap, w: &ClassWeights) -> Result<()> {
    if z.channels() != w.channels() {
        return Err(shape(format!(
            "feature map has {} channels, class weights expect {}",
            z.channels(),
            w.channels()
        )));
    }
    Ok(())
}

/// Raw per-position class scores `W_k . Z(h, w)`.
pub fn conventional_cam(z: &FeatureMap, w: &ClassWeights) -> Result<ActivationMaps> {
    check_head_shapes(z, w)?;
    let (c, h, wd) = z.0.dim();
    let k = w.num_classes();
    // Plain channel-ordered sums, so results do not depend on the BLAS kernel.
    let mut out = Array3::zeros((k, h, wd));
    for kk in 0..k {
        for y in 0..h {
            for x in 0..wd {
                let mut s = 0.0;
                for cc in 0..c {
                    s += w.0[[cc, kk]] * z.0[[cc, y, x]];
                }
                out[[kk, y, x]] = s;
            }
        }
    }
    Ok(ActivationMaps(out))
}

/// Sigmoid of the per-position class scores.
pub fn activation_head(z: &FeatureMap, w: &ClassWeights) -> Result<ActivationMaps> {
    let mut maps = conventional_cam(z, w)?;
    maps.0.mapv_inplace(sigmoid);
    Ok(maps)
}

/// Given `dL/dP` for the sigmoid head output `p`, returns `(dL/dW, dL/dZ)`.
pub fn activation_head_backward(
    z: &FeatureMap,
    w: &ClassWeights,
    p: &ActivationMaps,
    grad_p: &Array3<f64>,
) -> Result<(Array2<f64>, Array3<f64>)> {
    check_head_shapes(z, w)?;
    if grad_p.dim() != p.0.dim() {
        return Err(shape("gradient and activation maps differ in shape"));
    }
    let grad_logits = grad_p * &p.0.mapv(|v| v * (1.0 - v));
    cam_backward(z, w, &grad_logits)
}

/// Given `dL/dcam` for [`conventional_cam`], returns `(dL/dW, dL/dZ)`.
pub fn cam_backward(
    z: &FeatureMap,
    w: &ClassWeights,
    grad_cam: &Array3<f64>,
) -> Result<(Array2<f64>, Array3<f64>)> {
    let (c, h, wd) = z.0.dim();
    let k = w.num_classes();
    if grad_cam.dim() != (k, h, wd) {
        return Err(shape("cam gradient does not match feature map"));
    }
    let g = grad_cam
        .view()
        .into_shape_with_order((k, h * wd))
        .expect("contiguous gradient");
    let grad_w = z.flat().dot(&g.t());
    let grad_z =
        w.0.dot(&g)
            .into_shape_with_order((c, h, wd))
            .expect("dot output is contiguous");
    Ok((grad_w, grad_z))
}

/// Global-average-pooled classification logits.
pub fn baseline_logits(z: &FeatureMap, w: &ClassWeights) -> Result<ClassLogits> {
    check_head_shapes(z, w)?;
    let pooled = z
        .flat()
        .mean_axis(Axis(1))
        .expect("feature map is nonempty");
    Ok(ClassLogits(w.0.t().dot(&pooled).to_vec()))
}

/// Backward of [`baseline_logits`]: `(dL/dW, dL/dZ)`.
pub fn baseline_logits_backward(
    z: &FeatureMap,
    w: &ClassWeights,
    grad_logits: &[f64],
) -> Result<(Array2<f64>, Array3<f64>)> {
    let (_, h, wd) = z.0.dim();
    let k = w.num_classes();
    if grad_logits.len() != k {
        return Err(shape("logit gradient length differs from class count"));
    }
    let n = (h * wd) as f64;
    let mut grad_cam = Array3::zeros((k, h, wd));
    for (kk, g) in grad_logits.iter().enumerate() {
        grad_cam.index_axis_mut(Axis(0), kk).fill(g / n);
    }
    cam_backward(z, w, &grad_cam)
}

/// Summed sigmoid cross entropy and its gradient with respect to the logits.
pub fn baseline_bce_loss_and_grad(
    logits: &ClassLogits,
    labels: &LabelVector,
) -> Result<(f64, Vec<f64>)> {
    if logits.0.len() != labels.num_classes() {
        return Err(shape(format!(
            "{} logits for {} labels",
            logits.0.len(),
            labels.num_classes()
        )));
    }
    let y = labels.as_f64();
    let loss = logits
        .0
        .iter()
        .zip(&y)
        .map(|(x, yk)| softplus(*x) - yk * x)
        .sum();
    let grad = logits
        .0
        .iter()
        .zip(&y)
        .map(|(x, yk)| sigmoid(*x) - yk)
        .collect();
    Ok((loss, grad))
}

pub fn baseline_bce_loss(logits: &ClassLogits, labels: &LabelVector) -> Result<f64> {
    baseline_bce_loss_and_grad(logits, labels).map(|(l, _)| l)
}

/// Interpolation matrix `out x in` for half-pixel bilinear resampling along
/// one axis.
fn bilinear_matrix(out_len: usize, in_len: usize) -> Array2<f64> {
    let mut m = Array2::zeros((out_len, in_len));
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[[i, i0]] += 1.0 - frac;
        m[[i, i1]] += frac;
    }
    m
}

/// Bilinear resampling operator from one map size to another, with its adjoint.
#[derive(Clone, Debug)]
pub struct Resampler {
    rows: Array2<f64>,
    cols: Array2<f64>,
}

impl Resampler {
    pub fn new(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        Self {
            rows: bilinear_matrix(out_hw.0, in_hw.0),
            cols: bilinear_matrix(out_hw.1, in_hw.1),
        }
    }

    pub fn apply(&self, maps: &Array3<f64>) -> Array3<f64> {
        let (k, _, _) = maps.dim();
        let mut out = Array3::zeros((k, self.rows.nrows(), self.cols.nrows()));
        for (src, mut dst) in maps.outer_iter().zip(out.outer_iter_mut()) {
            dst.assign(&self.rows.dot(&src).dot(&self.cols.t()));
        }
        out
    }

    pub fn adjoint(&self, grad: &Array3<f64>) -> Array3<f64> {
        let (k, _, _) = grad.dim();
        let mut out = Array3::zeros((k, self.rows.ncols(), self.cols.ncols()));
        for (src, mut dst) in grad.outer_iter().zip(out.outer_iter_mut()) {
            dst.assign(&self.rows.t().dot(&src).dot(&self.cols));
        }
        out
    }
}

/// Bilinear upsampling without corner alignment.
pub fn upsample_maps(p: &ActivationMaps, height: usize, width: usize) -> Result<ActivationMaps> {
    if height < p.height() || width < p.width() {
        return Err(shape(format!(
            "cannot upsample {}x{} maps to smaller size {height}x{width}",
            p.height(),
            p.width()
        )));
    }
    let r = Resampler::new((p.height(), p.width()), (height, width));
    Ok(ActivationMaps(r.apply(&p.0)))
}

/// One conv + ReLU layer evaluated through im2col.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `out x (in * 3 * 3)`, row-major over (in, ky, kx).
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
}

struct LayerCache {
    in_dim: (usize, usize, usize),
    cols: Array2<f64>,
    output: Array3<f64>,
}

fn conv_out_len(len: usize, stride: usize) -> usize {
    (len + 2 * PAD - KERNEL) / stride + 1
}

impl ConvLayer {
    fn in_channels(&self) -> usize {
        self.weight.ncols() / (KERNEL * KERNEL)
    }

    fn im2col(&self, input: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = input.dim();
        let (oh, ow) = (conv_out_len(h, self.stride), conv_out_len(w, self.stride));
        let mut cols = Array2::zeros((c * KERNEL * KERNEL, oh * ow));
        let src = input.as_slice().expect("standard layout");
        let dst = cols.as_slice_mut().expect("standard layout");
        for ci in 0..c {
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let row = (ci * KERNEL + ky) * KERNEL + kx;
                    let out_row = &mut dst[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - PAD as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - PAD as isize;
                            if ix >= 0 && ix < w as isize {
                                out_row[oy * ow + ox] = src[base + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, in_dim: (usize, usize, usize)) -> Array3<f64> {
        let (c, h, w) = in_dim;
        let (oh, ow) = (conv_out_len(h, self.stride), conv_out_len(w, self.stride));
        let mut out = Array3::zeros(in_dim);
        let src = cols.as_slice().expect("standard layout");
        let dst = out.as_slice_mut().expect("standard layout");
        for ci in 0..c {
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let row = (ci * KERNEL + ky) * KERNEL + kx;
                    let in_row = &src[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - PAD as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ci * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - PAD as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ix as usize] += in_row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn forward(&self, input: &Array3<f64>) -> (Array2<f64>, Array3<f64>) {
        let (_, h, w) = input.dim();
        let (oh, ow) = (conv_out_len(h, self.stride), conv_out_len(w, self.stride));
        let cols = self.im2col(input);
        let mut out = self.weight.dot(&cols);
        for (mut row, b) in out.outer_iter_mut().zip(self.bias.iter()) {
            row.mapv_inplace(|v| (v + b).max(0.0));
        }
        let out = out
            .into_shape_with_order((self.weight.nrows(), oh, ow))
            .expect("dot output is contiguous");
        (cols, out)
    }

    /// Returns `(dW, db, dInput)` given the gradient at the ReLU output.
    fn backward(
        &self,
        cache: &LayerCache,
        grad_out: &Array3<f64>,
    ) -> (Array2<f64>, Array1<f64>, Array3<f64>) {
        let (oc, oh, ow) = cache.output.dim();
        let mut g = grad_out.clone();
        g.zip_mut_with(&cache.output, |gv, ov| {
            if *ov <= 0.0 {
                *gv = 0.0;
            }
        });
        let g = g
            .into_shape_with_order((oc, oh * ow))
            .expect("contiguous gradient");
        let grad_w = g.dot(&cache.cols.t());
        let grad_b = g.sum_axis(Axis(1));
        let grad_cols = self.weight.t().dot(&g);
        let grad_in = self.col2im(&grad_cols, cache.in_dim);
        (grad_w, grad_b, grad_in)
    }
}

/// Activations kept from a training forward pass.
pub struct ForwardCache {
    layers: Vec<LayerCache>,
}

/// Backbone parameters: conv stack plus class head.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyCnn {
    pub convs: Vec<ConvLayer>,
    pub head: ClassWeights,
}

/// Gradient with the same layout as [`TinyCnn`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub convs: Vec<(Array2<f64>, Array1<f64>)>,
    pub head: Array2<f64>,
}

/// Hook for alternative feature extractors used at inference time.
pub trait FeatureExtractor {
    fn channels(&self) -> usize;
    fn stride(&self) -> usize;
    fn features(&self, image: &Image) -> Result<FeatureMap>;
}

impl TinyCnn {
    /// He-normal conv weights, zero biases and a small random head.
    pub fn new(num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = LAYER_TABLE
            .iter()
            .map(|&(cin, cout, stride)| {
                let fan_in = cin * KERNEL * KERNEL;
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                ConvLayer {
                    weight: Array2::from_shape_simple_fn((cout, fan_in), || {
                        normal.sample(&mut rng)
                    }),
                    bias: Array1::zeros(cout),
                    stride,
                }
            })
            .collect();
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let head = Array2::from_shape_simple_fn((FEATURE_CHANNELS, num_classes), || {
            normal.sample(&mut rng)
        });
        Self {
            convs,
            head: ClassWeights(head),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn feature_size(height: usize, width: usize) -> (usize, usize) {
        LAYER_TABLE
            .iter()
            .fold((height, width), |(h, w), &(_, _, s)| {
                (conv_out_len(h, s), conv_out_len(w, s))
            })
    }

    fn check_input(image: &Image) -> Result<()> {
        if image.height() < MIN_IMAGE_SIDE || image.width() < MIN_IMAGE_SIDE {
            return Err(shape(format!(
                "image {}x{} is below the {MIN_IMAGE_SIDE}px minimum",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    fn to_chw(image: &Image) -> Array3<f64> {
        image
            .pixels()
            .permuted_axes([2, 0, 1])
            .as_standard_layout()
            .into_owned()
    }

    /// Forward pass that keeps what [`TinyCnn::backward`] needs.
    pub fn forward_train(&self, image: &Image) -> Result<(FeatureMap, ForwardCache)> {
        Self::check_input(image)?;
        let mut x = Self::to_chw(image);
        let mut layers = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let in_dim = x.dim();
            debug_assert_eq!(in_dim.0, conv.in_channels());
            let (cols, out) = conv.forward(&x);
            layers.push(LayerCache {
                in_dim,
                cols,
                output: out.clone(),
            });
            x = out;
        }
        Ok((FeatureMap(x), ForwardCache { layers }))
    }

    /// Backpropagates `dL/dZ` through the conv stack. The head gradient is
    /// left at zero; callers add it from the head backward.
    pub fn backward(&self, cache: &ForwardCache, grad_features: &Array3<f64>) -> Gradients {
        let mut convs = Vec::with_capacity(self.convs.len());
        let mut g = grad_features.clone();
        for (conv, layer) in self.convs.iter().zip(&cache.layers).rev() {
            let (gw, gb, gin) = conv.backward(layer, &g);
            convs.push((gw, gb));
            g = gin;
        }
        convs.reverse();
        Gradients {
            convs,
            head: Array2::zeros(self.head.0.dim()),
        }
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for c in &self.convs {
            out.push(c.weight.as_slice().expect("standard layout"));
            out.push(c.bias.as_slice().expect("standard layout"));
        }
        out.push(self.head.0.as_slice().expect("standard layout"));
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.convs {
            out.push(c.weight.as_slice_mut().expect("standard layout"));
            out.push(c.bias.as_slice_mut().expect("standard layout"));
        }
        out.push(self.head.0.as_slice_mut().expect("standard layout"));
        out
    }

    /// Shapes in [`TinyCnn::param_slices`] order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(c.weight.shape().to_vec());
            out.push(c.bias.shape().to_vec());
        }
        out.push(self.head.0.shape().to_vec());
        out
    }

    /// Rebuilds a network from flat parameter arrays.
    pub fn from_params(shapes: &[Vec<usize>], values: Vec<Vec<f64>>) -> Result<Self> {
        let expected = 2 * LAYER_TABLE.len() + 1;
        if shapes.len() != expected || values.len() != expected {
            return Err(shape(format!(
                "expected {expected} parameter arrays, got {}",
                shapes.len()
            )));
        }
        let mut it = shapes.iter().zip(values);
        let mut convs = Vec::new();
        for &(cin, cout, stride) in &LAYER_TABLE {
            let (ws, wv) = it.next().expect("length checked");
            let (bs, bv) = it.next().expect("length checked");
            if ws != &[cout, cin * KERNEL * KERNEL] || bs != &[cout] {
                return Err(shape(format!("unexpected conv shapes {ws:?} / {bs:?}")));
            }
            convs.push(ConvLayer {
                weight: Array2::from_shape_vec((ws[0], ws[1]), wv)
                    .map_err(|e| shape(e.to_string()))?,
                bias: Array1::from_vec(bv),
                stride,
            });
        }
        let (hs, hv) = it.next().expect("length checked");
        if hs.len() != 2 || hs[0] != FEATURE_CHANNELS {
            return Err(shape(format!("unexpected head shape {hs:?}")));
        }
        let head = Array2::from_shape_vec((hs[0], hs[1]), hv).map_err(|e| shape(e.to_string()))?;
        Ok(Self {
            convs,
            head: ClassWeights(head),
        })
    }
}

impl FeatureExtractor for TinyCnn {
    fn channels(&self) -> usize {
        FEATURE_CHANNELS
    }

    fn stride(&self) -> usize {
        FEATURE_STRIDE
    }

    fn features(&self, image: &Image) -> Result<FeatureMap> {
        Self::check_input(image)?;
        let mut x = Self::to_chw(image);
        for conv in &self.convs {
            x = conv.forward(&x).1;
        }
        Ok(FeatureMap(x))
    }
}

/// Conv-stack features for `image`.
pub fn forward_features(model: &impl FeatureExtractor, image: &Image) -> Result<FeatureMap> {
    model.features(image)
}

impl Gradients {
    pub fn zeros_like(model: &TinyCnn) -> Self {
        Self {
            convs: model
                .convs
                .iter()
                .map(|c| (Array2::zeros(c.weight.dim()), Array1::zeros(c.bias.len())))
                .collect(),
            head: Array2::zeros(model.head.0.dim()),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.convs.iter_mut().zip(&other.convs) {
            *w += ow;
            *b += ob;
        }
        self.head += &other.head;
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.convs {
            *w *= factor;
            *b *= factor;
        }
        self.head *= factor;
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (w, b) in &self.convs {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out.push(self.head.as_slice().expect("standard layout"));
        out
    }
}

//! Residual SRCNN denoiser: convolution layers with hand-written backward
//! passes, Adam, early stopping, inference and a checksummed model format.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::csv_error;
use crate::error::{ensure, Error, Result};
use crate::par;
use crate::rng::{rng_for, stream};
use crate::slice::{ComplexSlice, RealSlice};

/// Dense `(n, c, h, w)` tensor, `w` innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(data.len() == n * c * h * w, Dimension, "tensor data length {} != {n}x{c}x{h}x{w}", data.len());
        Ok(Self { n, c, h, w, data })
    }

    pub fn from_slice(s: &RealSlice) -> Self {
        Self { n: 1, c: 1, h: s.height(), w: s.width(), data: s.data().to_vec() }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    fn check_same_shape(&self, other: &Tensor4) -> Result<()> {
        ensure!(self.shape() == other.shape(), Dimension, "tensor shapes {:?} vs {:?}", self.shape(), other.shape());
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
    /// `(c_out, c_in, k, k)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Result<Self> {
        ensure!(k % 2 == 1, Config, "kernel size must be odd, got {k}");
        ensure!(c_out > 0 && c_in > 0, Config, "channel counts must be positive");
        Ok(Self { c_out, c_in, k, weight: vec![0.0; c_out * c_in * k * k], bias: vec![0.0; c_out] })
    }

    pub fn kernel_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.k % 2 == 1, Config, "kernel size must be odd, got {}", self.k);
        ensure!(
            self.weight.len() == self.c_out * self.kernel_len() && self.bias.len() == self.c_out,
            Dimension,
            "layer parameter lengths do not match ({}, {}, {k}, {k})",
            self.c_out,
            self.c_in,
            k = self.k
        );
        ensure!(
            self.weight.iter().chain(&self.bias).all(|v| v.is_finite()),
            Numerical,
            "non-finite layer parameters"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub grad_x: Option<Tensor4>,
    pub grad_kernel: Vec<f64>,
    pub grad_bias: Vec<f64>,
}

/// Safe wrapper over `matrixmultiply::dgemm`: `C = A·B + beta·C` with
/// arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, cdim: usize, rs: usize, cs: usize| (r - 1) * rs + (cdim - 1) * cs;
    assert!(k == 0 || last(m, k, rsa, csa) < a.len());
    assert!(k == 0 || last(k, n, rsb, csb) < b.len());
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: the asserts above bound every index the kernel touches; the
    // output does not alias the inputs (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Output-channel count below which the direct shifted-row algorithm is
/// used instead of im2col + GEMM.
const DIRECT_MAX_COUT: usize = 4;
/// Upper bound on im2col buffer elements per tile.
const IM2COL_BUDGET: usize = 1 << 18;

fn tile_rows(layer: &ConvLayer, h: usize, w: usize) -> usize {
    (IM2COL_BUDGET / (layer.kernel_len() * w)).clamp(1, h)
}

/// Valid output range `[lo, hi)` along one axis for tap offset `d − r`.
fn tap_range(len: usize, d: usize, r: usize) -> (usize, usize) {
    let lo = r.saturating_sub(d);
    let hi = (len + r).saturating_sub(d).min(len);
    (lo, hi.max(lo))
}

fn im2col(x: &[f64], layer: &ConvLayer, h: usize, w: usize, y0: usize, y1: usize, cols: &mut [f64]) {
    let (k, r) = (layer.k, layer.k / 2);
    let t = (y1 - y0) * w;
    cols[..layer.kernel_len() * t].fill(0.0);
    for ci in 0..layer.c_in {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for dy in 0..k {
            for dx in 0..k {
                let row = &mut cols[((ci * k + dy) * k + dx) * t..][..t];
                let (xl, xh) = tap_range(w, dx, r);
                for y in y0..y1 {
                    let iy = y + dy;
                    if iy < r || iy - r >= h {
                        continue;
                    }
                    let src = &plane[(iy - r) * w..][..w];
                    let dst = &mut row[(y - y0) * w..][..w];
                    dst[xl..xh].copy_from_slice(&src[xl + dx - r..xh + dx - r]);
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], layer: &ConvLayer, h: usize, w: usize, y0: usize, y1: usize, gx: &mut [f64]) {
    let (k, r) = (layer.k, layer.k / 2);
    let t = (y1 - y0) * w;
    for ci in 0..layer.c_in {
        let plane = &mut gx[ci * h * w..(ci + 1) * h * w];
        for dy in 0..k {
            for dx in 0..k {
                let row = &cols[((ci * k + dy) * k + dx) * t..][..t];
                let (xl, xh) = tap_range(w, dx, r);
                for y in y0..y1 {
                    let iy = y + dy;
                    if iy < r || iy - r >= h {
                        continue;
                    }
                    let dst = &mut plane[(iy - r) * w..][..w];
                    let src = &row[(y - y0) * w..][..w];
                    for (d, s) in dst[xl + dx - r..xh + dx - r].iter_mut().zip(&src[xl..xh]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn forward_gemm(x: &[f64], layer: &ConvLayer, h: usize, w: usize, out: &mut [f64]) {
    let p = h * w;
    let kl = layer.kernel_len();
    for (co, b) in layer.bias.iter().enumerate() {
        out[co * p..(co + 1) * p].fill(*b);
    }
    let rows = tile_rows(layer, h, w);
    let mut cols = vec![0.0; kl * rows * w];
    for y0 in (0..h).step_by(rows) {
        let y1 = (y0 + rows).min(h);
        let t = (y1 - y0) * w;
        im2col(x, layer, h, w, y0, y1, &mut cols);
        gemm(layer.c_out, kl, t, &layer.weight, (kl, 1), &cols, (t, 1), 1.0, &mut out[y0 * w..], (p, 1));
    }
}

fn forward_direct(x: &[f64], layer: &ConvLayer, h: usize, w: usize, out: &mut [f64]) {
    let (k, r, p) = (layer.k, layer.k / 2, h * w);
    for co in 0..layer.c_out {
        let o = &mut out[co * p..(co + 1) * p];
        o.fill(layer.bias[co]);
        for ci in 0..layer.c_in {
            let plane = &x[ci * p..(ci + 1) * p];
            for dy in 0..k {
                let (yl, yh) = tap_range(h, dy, r);
                for dx in 0..k {
                    let wv = layer.weight[((co * layer.c_in + ci) * k + dy) * k + dx];
                    let (xl, xh) = tap_range(w, dx, r);
                    for y in yl..yh {
                        let src = &plane[(y + dy - r) * w..][..w];
                        let dst = &mut o[y * w..][..w];
                        for (d, s) in dst[xl..xh].iter_mut().zip(&src[xl + dx - r..xh + dx - r]) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Same-size cross-correlation with zero padding plus per-channel bias.
pub fn conv2d_forward(x: &Tensor4, layer: &ConvLayer) -> Result<Tensor4> {
    layer.validate()?;
    ensure!(x.c == layer.c_in, Dimension, "input has {} channels, layer expects {}", x.c, layer.c_in);
    let mut out = Tensor4::zeros(x.n, layer.c_out, x.h, x.w);
    let (ip, op) = (x.c * x.h * x.w, layer.c_out * x.h * x.w);
    for n in 0..x.n {
        let xs = &x.data[n * ip..(n + 1) * ip];
        let os = &mut out.data[n * op..(n + 1) * op];
        if layer.c_out <= DIRECT_MAX_COUT {
            forward_direct(xs, layer, x.h, x.w, os);
        } else {
            forward_gemm(xs, layer, x.h, x.w, os);
        }
    }
    Ok(out)
}

fn backward_gemm(x: &[f64], layer: &ConvLayer, h: usize, w: usize, g: &[f64], gw: &mut [f64], gx: Option<&mut [f64]>) {
    let p = h * w;
    let kl = layer.kernel_len();
    let rows = tile_rows(layer, h, w);
    let mut cols = vec![0.0; kl * rows * w];
    let mut gcols = if gx.is_some() { vec![0.0; kl * rows * w] } else { Vec::new() };
    let mut gx = gx;
    for y0 in (0..h).step_by(rows) {
        let y1 = (y0 + rows).min(h);
        let t = (y1 - y0) * w;
        im2col(x, layer, h, w, y0, y1, &mut cols);
        gemm(layer.c_out, t, kl, &g[y0 * w..], (p, 1), &cols, (1, t), 1.0, gw, (kl, 1));
        if let Some(gx) = gx.as_deref_mut() {
            gemm(kl, layer.c_out, t, &layer.weight, (1, kl), &g[y0 * w..], (p, 1), 0.0, &mut gcols, (t, 1));
            col2im_add(&gcols, layer, h, w, y0, y1, gx);
        }
    }
}

fn backward_direct(x: &[f64], layer: &ConvLayer, h: usize, w: usize, g: &[f64], gw: &mut [f64], gx: Option<&mut [f64]>) {
    let (k, r, p) = (layer.k, layer.k / 2, h * w);
    let mut gx = gx;
    for co in 0..layer.c_out {
        let go = &g[co * p..(co + 1) * p];
        for ci in 0..layer.c_in {
            let plane = &x[ci * p..(ci + 1) * p];
            for dy in 0..k {
                let (yl, yh) = tap_range(h, dy, r);
                for dx in 0..k {
                    let wi = ((co * layer.c_in + ci) * k + dy) * k + dx;
                    let (xl, xh) = tap_range(w, dx, r);
                    let mut acc = 0.0;
                    for y in yl..yh {
                        let src = &plane[(y + dy - r) * w..][..w];
                        let gr = &go[y * w..][..w];
                        acc += gr[xl..xh].iter().zip(&src[xl + dx - r..xh + dx - r]).map(|(a, b)| a * b).sum::<f64>();
                    }
                    gw[wi] += acc;
                    if let Some(gx) = gx.as_deref_mut() {
                        let wv = layer.weight[wi];
                        let gplane = &mut gx[ci * p..(ci + 1) * p];
                        for y in yl..yh {
                            let dst = &mut gplane[(y + dy - r) * w..][..w];
                            let gr = &go[y * w..][..w];
                            for (d, s) in dst[xl + dx - r..xh + dx - r].iter_mut().zip(&gr[xl..xh]) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_impl(x: &Tensor4, layer: &ConvLayer, grad_out: &Tensor4, want_x: bool) -> Result<ConvGrads> {
    layer.validate()?;
    ensure!(x.c == layer.c_in, Dimension, "input has {} channels, layer expects {}", x.c, layer.c_in);
    ensure!(
        grad_out.shape() == [x.n, layer.c_out, x.h, x.w],
        Dimension,
        "output gradient shape {:?} does not match the forward output",
        grad_out.shape()
    );
    let (ip, op, p) = (x.c * x.h * x.w, layer.c_out * x.h * x.w, x.h * x.w);
    let mut gw = vec![0.0; layer.weight.len()];
    let mut gb = vec![0.0; layer.c_out];
    let mut gx = want_x.then(|| Tensor4::zeros(x.n, x.c, x.h, x.w));
    for n in 0..x.n {
        let xs = &x.data[n * ip..(n + 1) * ip];
        let gs = &grad_out.data[n * op..(n + 1) * op];
        for (co, b) in gb.iter_mut().enumerate() {
            *b += gs[co * p..(co + 1) * p].iter().sum::<f64>();
        }
        let gxs = gx.as_mut().map(|t| &mut t.data[n * ip..(n + 1) * ip]);
        if layer.c_out <= DIRECT_MAX_COUT {
            backward_direct(xs, layer, x.h, x.w, gs, &mut gw, gxs);
        } else {
            backward_gemm(xs, layer, x.h, x.w, gs, &mut gw, gxs);
        }
    }
    Ok(ConvGrads { grad_x: gx, grad_kernel: gw, grad_bias: gb })
}

/// Exact gradients of [`conv2d_forward`] with respect to input, kernel and bias.
pub fn conv2d_backward(x: &Tensor4, layer: &ConvLayer, grad_out: &Tensor4) -> Result<ConvGrads> {
    conv_backward_impl(x, layer, grad_out, true)
}

pub fn relu_forward(x: &Tensor4) -> Tensor4 {
    Tensor4 { data: x.data.iter().map(|&v| v.max(0.0)).collect(), ..*x }
}

/// Passes `grad` where `x > 0`; the derivative at 0 is 0.
pub fn relu_backward(x: &Tensor4, grad: &Tensor4) -> Result<Tensor4> {
    x.check_same_shape(grad)?;
    Ok(Tensor4 { data: x.data.iter().zip(&grad.data).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect(), ..*x })
}

fn relu_owned(mut x: Tensor4) -> Tensor4 {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

/// `relu_backward` reusing the gradient buffer; `x` is a post-activation,
/// which is positive exactly where the pre-activation was.
fn relu_gate(x: &Tensor4, mut g: Tensor4) -> Tensor4 {
    g.data.iter_mut().zip(&x.data).for_each(|(g, &v)| {
        if v <= 0.0 {
            *g = 0.0
        }
    });
    g
}

/// Mean squared error and its gradient with respect to `denoised`.
pub fn mse_loss(denoised: &Tensor4, clean: &Tensor4) -> Result<(f64, Tensor4)> {
    denoised.check_same_shape(clean)?;
    let count = denoised.data.len() as f64;
    let mut loss = 0.0;
    let grad = denoised
        .data
        .iter()
        .zip(&clean.data)
        .map(|(d, c)| {
            let e = d - c;
            loss += e * e;
            2.0 * e / count
        })
        .collect();
    Ok((loss / count, Tensor4 { data: grad, ..*denoised }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub n1: usize,
    pub n2: usize,
    pub f1: usize,
    pub f2: usize,
    pub f3: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { n1: 64, n2: 32, f1: 9, f2: 1, f3: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub std: f64,
}

impl Default for Standardization {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl Standardization {
    /// Mean and population std over every pixel of the training inputs.
    pub fn fit(examples: &[Example]) -> Result<Self> {
        ensure!(!examples.is_empty(), Config, "no examples to standardise over");
        let n: usize = examples.iter().map(|e| e.input.len()).sum();
        let mean = examples.iter().flat_map(|e| e.input.data()).sum::<f64>() / n as f64;
        let var = examples.iter().flat_map(|e| e.input.data()).map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        ensure!(var > 0.0 && var.is_finite(), Numerical, "training inputs have zero variance");
        Ok(Self { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub standardization: Standardization,
    pub training_snr: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrcnnModel {
    pub layers: [ConvLayer; 3],
    pub meta: ModelMeta,
}

/// Per-layer `(kernel, bias)` gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: [(Vec<f64>, Vec<f64>); 3],
}

impl Gradients {
    fn zeros_like(model: &SrcnnModel) -> Self {
        Self { layers: model.layers.clone().map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()])) }
    }

    fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for ((a, b), (c, d)) in self.layers.iter_mut().zip(&other.layers) {
            a.iter_mut().zip(c).for_each(|(x, y)| *x += s * y);
            b.iter_mut().zip(d).for_each(|(x, y)| *x += s * y);
        }
    }
}

impl SrcnnModel {
    /// Gaussian weights (std `init_std`), zero biases.
    pub fn init(arch: Architecture, seed: u64, init_std: f64) -> Result<Self> {
        ensure!(init_std >= 0.0 && init_std.is_finite(), Config, "init std must be non-negative");
        let mut layers = [
            ConvLayer::zeros(arch.n1, 1, arch.f1)?,
            ConvLayer::zeros(arch.n2, arch.n1, arch.f2)?,
            ConvLayer::zeros(1, arch.n2, arch.f3)?,
        ];
        if init_std > 0.0 {
            let normal = Normal::new(0.0, init_std).map_err(|e| Error::Config(e.to_string()))?;
            for (i, l) in layers.iter_mut().enumerate() {
                let mut rng = rng_for(seed, &[stream::WEIGHTS, i as u64]);
                l.weight.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
            }
        }
        Ok(Self { layers, meta: ModelMeta { standardization: Standardization::default(), training_snr: None, seed } })
    }

    pub fn architecture(&self) -> Architecture {
        let [a, b, c] = &self.layers;
        Architecture { n1: a.c_out, n2: b.c_out, f1: a.k, f2: b.k, f3: c.k }
    }

    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = &self.layers;
        for l in &self.layers {
            l.validate()?;
        }
        ensure!(
            a.c_in == 1 && b.c_in == a.c_out && c.c_in == b.c_out && c.c_out == 1,
            Dimension,
            "inconsistent SRCNN channel chain"
        );
        let s = self.meta.standardization;
        ensure!(s.std > 0.0 && s.std.is_finite() && s.mean.is_finite(), Config, "invalid input standardisation");
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Network output (noise estimate) for a standardised input tensor.
    pub fn forward(&self, z: &Tensor4) -> Result<Tensor4> {
        let a1 = relu_owned(conv2d_forward(z, &self.layers[0])?);
        let a2 = relu_owned(conv2d_forward(&a1, &self.layers[1])?);
        conv2d_forward(&a2, &self.layers[2])
    }

    /// Loss `MSE(z − f(z), clean)` and exact parameter gradients, all in
    /// standardised units.
    pub fn loss_and_gradients(&self, z: &Tensor4, clean: &Tensor4) -> Result<(f64, Gradients)> {
        let a1 = relu_owned(conv2d_forward(z, &self.layers[0])?);
        let a2 = relu_owned(conv2d_forward(&a1, &self.layers[1])?);
        let out = conv2d_forward(&a2, &self.layers[2])?;
        let denoised = Tensor4 { data: z.data.iter().zip(&out.data).map(|(a, b)| a - b).collect(), ..*z };
        let (loss, mut g_out) = mse_loss(&denoised, clean)?;
        g_out.data.iter_mut().for_each(|v| *v = -*v);
        let g3 = conv_backward_impl(&a2, &self.layers[2], &g_out, true)?;
        let g_a2 = relu_gate(&a2, g3.grad_x.unwrap());
        let g2 = conv_backward_impl(&a1, &self.layers[1], &g_a2, true)?;
        let g_a1 = relu_gate(&a1, g2.grad_x.unwrap());
        let g1 = conv_backward_impl(z, &self.layers[0], &g_a1, false)?;
        Ok((
            loss,
            Gradients {
                layers: [(g1.grad_kernel, g1.grad_bias), (g2.grad_kernel, g2.grad_bias), (g3.grad_kernel, g3.grad_bias)],
            },
        ))
    }

    fn standardize(&self, s: &RealSlice) -> Tensor4 {
        let st = self.meta.standardization;
        Tensor4 { n: 1, c: 1, h: s.height(), w: s.width(), data: s.data().iter().map(|v| (v - st.mean) / st.std).collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: RealSlice,
    pub clean: RealSlice,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_improvement: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub init_std: f64,
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 9,
            max_epochs: 10_000,
            patience: 50,
            min_improvement: 1e-8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            init_std: 0.02,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.eps > 0.0 && self.min_improvement >= 0.0, Config, "learning rate and epsilon must be positive");
        ensure!(self.batch > 0 && self.max_epochs > 0 && self.patience > 0, Config, "batch, epochs and patience must be positive");
        ensure!(self.patience < self.max_epochs, Config, "patience must be below max_epochs");
        ensure!((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), Config, "Adam betas must lie in [0, 1)");
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// Bias-corrected Adam update of one parameter group.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    ensure!(
        params.len() == grads.len() && grads.len() == state.m.len() && state.m.len() == state.v.len(),
        Dimension,
        "Adam parameter/gradient/state lengths differ"
    );
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let (mh, vh) = (state.m[i] / bc1, state.v[i] / bc2);
        params[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Patience-based stopping. The best epoch tracks the strict minimum of
/// the validation loss; patience only resets on an improvement larger than
/// `min_improvement`.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_improvement: f64,
    pub best: f64,
    pub best_epoch: Option<usize>,
    reference: f64,
    since: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_improvement: f64) -> Self {
        Self { patience, min_improvement, best: f64::INFINITY, best_epoch: None, reference: f64::INFINITY, since: 0 }
    }

    /// Records one validation loss; returns `(is_best, stop)`.
    pub fn update(&mut self, epoch: usize, val: f64) -> (bool, bool) {
        let is_best = val < self.best;
        if is_best {
            self.best = val;
            self.best_epoch = Some(epoch);
        }
        if val < self.reference - self.min_improvement {
            self.reference = val;
            self.since = 0;
        } else {
            self.since += 1;
        }
        (is_best, self.since > self.patience)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub is_best: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch).map_or(self.initial_val_loss, |e| e.val_loss)
    }

    /// CSV with `epoch,train_loss,val_loss,is_best`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["epoch", "train_loss", "val_loss", "is_best"]).map_err(|e| csv_error(path, e))?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), format!("{:.17e}", e.train_loss), format!("{:.17e}", e.val_loss), e.is_best.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn example_tensors(model: &SrcnnModel, e: &Example) -> Result<(Tensor4, Tensor4)> {
    e.input.check_same_shape(&e.clean)?;
    Ok((model.standardize(&e.input), model.standardize(&e.clean)))
}

fn validation_loss(model: &SrcnnModel, val: &[Example]) -> Result<f64> {
    let losses = par::map_slice(val, |e| -> Result<f64> {
        let (z, c) = example_tensors(model, e)?;
        let out = model.forward(&z)?;
        let d = Tensor4 { data: z.data.iter().zip(&out.data).map(|(a, b)| a - b).collect(), ..z };
        Ok(mse_loss(&d, &c)?.0)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / val.len() as f64)
}

fn check_finite(v: f64, what: &str, epoch: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("training diverged: {what} is {v} at epoch {epoch}")))
    }
}

/// Mini-batch Adam on `MSE(input − f(input), clean)`. Input standardisation
/// is fitted on the training inputs and stored in the returned model, which
/// carries the weights of the epoch with the lowest validation loss.
pub fn train(model: SrcnnModel, train_set: &[Example], val_set: &[Example], cfg: &TrainConfig) -> Result<(SrcnnModel, TrainHistory)> {
    cfg.validate()?;
    ensure!(!train_set.is_empty() && !val_set.is_empty(), Config, "training and validation sets must be non-empty");
    let mut model = model;
    model.meta.standardization = Standardization::fit(train_set)?;
    model.validate()?;
    let adam = cfg.adam();
    let mut states: Vec<(AdamState, AdamState)> =
        model.layers.iter().map(|l| (AdamState::new(l.weight.len()), AdamState::new(l.bias.len()))).collect();
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_improvement);
    let mut history = TrainHistory { initial_val_loss: validation_loss(&model, val_set)?, ..Default::default() };
    check_finite(history.initial_val_loss, "initial validation loss", 0)?;
    let mut best = model.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let mut rng = rng_for(cfg.seed, &[stream::SHUFFLE, epoch as u64]);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut train_total = 0.0;
        for batch in order.chunks(cfg.batch) {
            let per_example = par::map_slice(batch, |&i| -> Result<(f64, Gradients)> {
                let (z, c) = example_tensors(&model, &train_set[i])?;
                model.loss_and_gradients(&z, &c)
            });
            let mut grads = Gradients::zeros_like(&model);
            let scale = 1.0 / batch.len() as f64;
            for r in per_example {
                let (loss, g) = r?;
                check_finite(loss, "training loss", epoch)?;
                train_total += loss;
                grads.add_scaled(&g, scale);
            }
            for ((layer, (gw, gb)), (sw, sb)) in model.layers.iter_mut().zip(&grads.layers).zip(states.iter_mut()) {
                adam_step(&mut layer.weight, gw, sw, &adam)?;
                adam_step(&mut layer.bias, gb, sb, &adam)?;
            }
        }
        let train_loss = train_total / train_set.len() as f64;
        let val_loss = validation_loss(&model, val_set)?;
        check_finite(val_loss, "validation loss", epoch)?;
        let (is_best, stop) = stopper.update(epoch, val_loss);
        if is_best {
            best = model.clone();
            history.best_epoch = epoch;
        }
        history.epochs.push(EpochRecord { epoch, train_loss, val_loss, is_best });
        log::info!("epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e}{}", if is_best { " *" } else { "" });
        if stop {
            history.stopped_early = true;
            break;
        }
    }
    Ok((best, history))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoised<S> {
    pub denoised: S,
    pub noise_estimate: S,
}

/// `noise_estimate = f(input)` (de-standardised), `denoised = input − noise_estimate`.
pub fn denoise(model: &SrcnnModel, slice: &RealSlice) -> Result<Denoised<RealSlice>> {
    model.validate()?;
    let out = model.forward(&model.standardize(slice))?;
    let std = model.meta.standardization.std;
    let noise_estimate = slice.with_data(out.data.iter().map(|v| v * std).collect());
    let denoised = slice.zip_map(&noise_estimate, |a, b| a - b)?;
    Ok(Denoised { denoised, noise_estimate })
}

/// Real and imaginary parts denoised independently.
pub fn denoise_complex(model: &SrcnnModel, slice: &ComplexSlice) -> Result<Denoised<ComplexSlice>> {
    let parts = par::map_slice(&[slice.re(), slice.im()], |p| denoise(model, p));
    let mut it = parts.into_iter();
    let re = it.next().unwrap()?;
    let im = it.next().unwrap()?;
    Ok(Denoised {
        denoised: ComplexSlice::from_parts(&re.denoised, &im.denoised)?,
        noise_estimate: ComplexSlice::from_parts(&re.noise_estimate, &im.noise_estimate)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerShape {
    c_out: usize,
    c_in: usize,
    k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    layers: Vec<LayerShape>,
    meta: ModelMeta,
    weight_count: usize,
    sha256: String,
}

const MODEL_FORMAT: &str = "srcnn-residual-v1";

/// `<stem>.srcnn.json` and `<stem>.srcnn.bin`.
pub fn model_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_string_lossy();
    (PathBuf::from(format!("{s}.srcnn.json")), PathBuf::from(format!("{s}.srcnn.bin")))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Weights and biases of each layer in order, as little-endian f32.
pub fn save_model(model: &SrcnnModel, stem: &Path) -> Result<()> {
    model.validate()?;
    let (jp, bp) = model_paths(stem);
    let mut bin = Vec::with_capacity(4 * model.parameter_count());
    for l in &model.layers {
        for v in l.weight.iter().chain(&l.bias) {
            bin.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let header = ModelHeader {
        format: MODEL_FORMAT.into(),
        layers: model.layers.iter().map(|l| LayerShape { c_out: l.c_out, c_in: l.c_in, k: l.k }).collect(),
        meta: model.meta.clone(),
        weight_count: model.parameter_count(),
        sha256: hex(&Sha256::digest(&bin)),
    };
    std::fs::write(&bp, &bin).map_err(|e| Error::io(&bp, e))?;
    let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&jp, e))?;
    let mut f = std::fs::File::create(&jp).map_err(|e| Error::io(&jp, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&jp, e))?;
    Ok(())
}

pub fn load_model(stem: &Path) -> Result<SrcnnModel> {
    let (jp, bp) = model_paths(stem);
    let text = std::fs::read_to_string(&jp).map_err(|e| Error::io(&jp, e))?;
    let header: ModelHeader = serde_json::from_str(&text).map_err(|e| Error::json(&jp, e))?;
    ensure!(header.format == MODEL_FORMAT, Format, "{}: unknown model format {:?}", jp.display(), header.format);
    ensure!(header.layers.len() == 3, Format, "{}: expected 3 layers, found {}", jp.display(), header.layers.len());
    let bin = std::fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    let count: usize = header.layers.iter().map(|l| l.c_out * (l.c_in * l.k * l.k + 1)).sum();
    ensure!(count == header.weight_count, Format, "{}: layer shapes imply {count} weights, header says {}", jp.display(), header.weight_count);
    ensure!(bin.len() == 4 * count, Format, "{}: expected {} bytes, found {}", bp.display(), 4 * count, bin.len());
    ensure!(hex(&Sha256::digest(&bin)) == header.sha256, Format, "{}: content hash mismatch (corrupted weights)", bp.display());
    let mut vals = bin.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    let mut take = |shape: &LayerShape| -> Result<ConvLayer> {
        let mut l = ConvLayer::zeros(shape.c_out, shape.c_in, shape.k).map_err(|e| Error::Format(e.to_string()))?;
        l.weight.iter_mut().for_each(|w| *w = vals.next().unwrap());
        l.bias.iter_mut().for_each(|b| *b = vals.next().unwrap());
        Ok(l)
    };
    let layers = [take(&header.layers[0])?, take(&header.layers[1])?, take(&header.layers[2])?];
    let model = SrcnnModel { layers, meta: header.meta };
    model.validate().map_err(|e| Error::Format(format!("{}: {e}", jp.display())))?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SimRng;
    use rand::{Rng, SeedableRng};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn random_tensor(rng: &mut SimRng, n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
        Tensor4 { n, c, h, w, data: (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect() }
    }

    fn random_layer(rng: &mut SimRng, c_out: usize, c_in: usize, k: usize) -> ConvLayer {
        let mut l = ConvLayer::zeros(c_out, c_in, k).unwrap();
        l.weight.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        l.bias.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
        l
    }

    fn naive_conv(x: &Tensor4, l: &ConvLayer) -> Tensor4 {
        let r = (l.k / 2) as isize;
        let mut out = Tensor4::zeros(x.n, l.c_out, x.h, x.w);
        for n in 0..x.n {
            for co in 0..l.c_out {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let mut acc = l.bias[co];
                        for ci in 0..l.c_in {
                            for dy in 0..l.k {
                                for dx in 0..l.k {
                                    let (iy, ix) = (y as isize + dy as isize - r, xx as isize + dx as isize - r);
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    acc += l.weight[((co * l.c_in + ci) * l.k + dy) * l.k + dx]
                                        * x.data[((n * x.c + ci) * x.h + iy as usize) * x.w + ix as usize];
                                }
                            }
                        }
                        out.data[((n * l.c_out + co) * x.h + y) * x.w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn max_abs(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn conv_trivial_kernels() {
        let mut rng = SimRng::seed_from_u64(1);
        let x = random_tensor(&mut rng, 1, 1, 6, 7);
        let mut one = ConvLayer::zeros(1, 1, 1).unwrap();
        one.weight[0] = 2.5;
        let y = conv2d_forward(&x, &one).unwrap();
        assert!(y.data.iter().zip(&x.data).all(|(a, b)| *a == 2.5 * b));
        let mut delta = ConvLayer::zeros(1, 1, 3).unwrap();
        delta.weight[4] = 1.0;
        assert_eq!(conv2d_forward(&x, &delta).unwrap(), x);
        assert!(conv2d_forward(&random_tensor(&mut rng, 1, 2, 4, 4), &delta).is_err());
    }

    #[test]
    fn conv_matches_naive_both_paths() {
        let mut rng = SimRng::seed_from_u64(2);
        let x = random_tensor(&mut rng, 2, 2, 5, 5);
        for c_out in [3, 8] {
            let l = random_layer(&mut rng, c_out, 2, 3);
            let got = conv2d_forward(&x, &l).unwrap();
            let want = naive_conv(&x, &l);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12, "c_out {c_out}");
            }
        }
        // tiles smaller than the image and kernels wider than it
        let x = random_tensor(&mut rng, 1, 3, 9, 2000);
        let l = random_layer(&mut rng, 6, 3, 9);
        assert!(tile_rows(&l, 9, 2000) < 9);
        let got = conv2d_forward(&x, &l).unwrap();
        let err = max_abs(&got.data, &naive_conv(&x, &l).data);
        assert!(err < 1e-12, "{err:e}");
        let tiny = random_tensor(&mut rng, 1, 1, 3, 2);
        let l = random_layer(&mut rng, 5, 1, 5);
        assert!(max_abs(&conv2d_forward(&tiny, &l).unwrap().data, &naive_conv(&tiny, &l).data) < 1e-12);
    }

    #[test]
    fn conv_backward_zero_and_scalar() {
        let mut rng = SimRng::seed_from_u64(3);
        let x = random_tensor(&mut rng, 1, 2, 4, 4);
        let l = random_layer(&mut rng, 3, 2, 3);
        let g = conv2d_backward(&x, &l, &Tensor4::zeros(1, 3, 4, 4)).unwrap();
        assert!(g.grad_x.unwrap().data.iter().chain(&g.grad_kernel).chain(&g.grad_bias).all(|v| *v == 0.0));

        let x = Tensor4::new(1, 1, 1, 1, vec![0.7]).unwrap();
        let l = random_layer(&mut rng, 1, 1, 1);
        let g = conv2d_backward(&x, &l, &Tensor4::new(1, 1, 1, 1, vec![1.0]).unwrap()).unwrap();
        assert_eq!(g.grad_kernel, vec![0.7]);
        assert_eq!(g.grad_bias, vec![1.0]);
        assert_eq!(g.grad_x.unwrap().data, vec![l.weight[0]]);
    }

    /// Loss `Σ u·conv(x)` with random `u`: its gradient wrt the output is `u`.
    fn check_conv_fd(c_out: usize, seed: u64) {
        let mut rng = SimRng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, 2, 2, 5, 6);
        let l = random_layer(&mut rng, c_out, 2, 3);
        let u = random_tensor(&mut rng, 2, c_out, 5, 6);
        let f = |x: &Tensor4, l: &ConvLayer| conv2d_forward(x, l).unwrap().data.iter().zip(&u.data).map(|(a, b)| a * b).sum::<f64>();
        let g = conv2d_backward(&x, &l, &u).unwrap();
        let h = 1e-6;
        let fd = |plus: f64, minus: f64| (plus - minus) / (2.0 * h);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-6);
        for i in 0..l.weight.len() {
            let (mut p, mut m) = (l.clone(), l.clone());
            p.weight[i] += h;
            m.weight[i] -= h;
            assert!(close(fd(f(&x, &p), f(&x, &m)), g.grad_kernel[i]), "weight {i}");
        }
        for i in 0..l.bias.len() {
            let (mut p, mut m) = (l.clone(), l.clone());
            p.bias[i] += h;
            m.bias[i] -= h;
            assert!(close(fd(f(&x, &p), f(&x, &m)), g.grad_bias[i]));
        }
        let gx = g.grad_x.unwrap();
        for i in 0..x.data.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data[i] += h;
            m.data[i] -= h;
            assert!(close(fd(f(&p, &l), f(&m, &l)), gx.data[i]), "x {i}");
        }
    }

    #[test]
    fn conv_backward_finite_differences() {
        check_conv_fd(2, 4);
        check_conv_fd(7, 5);
    }

    #[test]
    fn relu_examples() {
        let x = Tensor4::new(1, 1, 1, 5, vec![-2.0, -0.0, 0.0, 0.5, 3.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data, vec![0.0, 0.0, 0.0, 0.5, 3.0]);
        let g = relu_backward(&x, &Tensor4::new(1, 1, 1, 5, vec![1.0; 5]).unwrap()).unwrap();
        assert_eq!(g.data, vec![0.0, 0.0, 0.0, 1.0, 1.0]);
        let mut rng = SimRng::seed_from_u64(6);
        let x = random_tensor(&mut rng, 2, 3, 4, 4);
        let gr = random_tensor(&mut rng, 2, 3, 4, 4);
        let out = relu_backward(&x, &gr).unwrap();
        for i in 0..x.data.len() {
            assert_eq!(relu_forward(&x).data[i], if x.data[i] > 0.0 { x.data[i] } else { 0.0 });
            assert_eq!(out.data[i], if x.data[i] > 0.0 { gr.data[i] } else { 0.0 });
        }
    }

    #[test]
    fn mse_examples() {
        let mut rng = SimRng::seed_from_u64(7);
        let a = random_tensor(&mut rng, 1, 2, 3, 4);
        assert_eq!(mse_loss(&a, &a).unwrap().0, 0.0);
        let shifted = Tensor4 { data: a.data.iter().map(|v| v + 0.3).collect(), ..a };
        assert!((mse_loss(&shifted, &a).unwrap().0 - 0.09).abs() < 1e-15);
        let b = random_tensor(&mut rng, 1, 2, 3, 4);
        let (loss, grad) = mse_loss(&a, &b).unwrap();
        let oracle = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 24.0;
        assert!((loss - oracle).abs() < 1e-12);
        let h = 1e-6;
        for i in 0..a.data.len() {
            let (mut p, mut m) = (a.clone(), a.clone());
            p.data[i] += h;
            m.data[i] -= h;
            let fd = (mse_loss(&p, &b).unwrap().0 - mse_loss(&m, &b).unwrap().0) / (2.0 * h);
            assert!((fd - grad.data[i]).abs() < 1e-6);
        }
        assert!(mse_loss(&a, &Tensor4::zeros(1, 1, 3, 4)).is_err());
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig::default();
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        st.m = vec![0.5, 0.5];
        st.v = vec![0.25, 0.25];
        adam_step(&mut p, &[0.0, 0.0], &mut st, &cfg).unwrap();
        assert!(st.m.iter().all(|m| (*m - 0.45).abs() < 1e-15));
        assert!(st.v.iter().all(|v| *v < 0.25));

        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut st, &cfg).unwrap();
        // m̂ = v̂ = 1, so Δ = −lr / (1 + ε)
        assert!((p[0] + 0.001 / (1.0 + 1e-8)).abs() < 1e-18);
        assert!((p[0] + 0.001).abs() < 1e-9);

        let (mut a, mut b) = (vec![0.3, 0.1], vec![0.3, 0.1]);
        let (mut sa, mut sb) = (AdamState::new(2), AdamState::new(2));
        for g in [[0.2, -1.0], [0.5, 0.1], [-0.3, 0.0]] {
            adam_step(&mut a, &g, &mut sa, &cfg).unwrap();
            adam_step(&mut b, &g, &mut sb, &cfg).unwrap();
        }
        assert_eq!(a, b);
        assert!(adam_step(&mut a, &[0.0], &mut sa, &cfg).is_err());
    }

    #[test]
    fn early_stopping_rules() {
        let mut es = EarlyStopping::new(5, 1e-8);
        for e in 1..=100 {
            let (best, stop) = es.update(e, 1.0 / e as f64);
            assert!(best && !stop);
        }
        let mut es = EarlyStopping::new(5, 1e-8);
        let mut stopped_at = None;
        for e in 1..=100 {
            if es.update(e, 0.5).1 {
                stopped_at = Some(e);
                break;
            }
        }
        // best at epoch 1, then patience + 1 non-improving evaluations
        assert_eq!(stopped_at, Some(1 + 5 + 1));
        assert_eq!(es.best_epoch, Some(1));

        // sub-threshold decrease still becomes the best epoch
        let mut es = EarlyStopping::new(3, 1e-3);
        es.update(1, 1.0);
        let (best, _) = es.update(2, 1.0 - 1e-6);
        assert!(best);
        assert_eq!(es.best_epoch, Some(2));
    }

    fn small_arch() -> Architecture {
        Architecture { n1: 6, n2: 4, f1: 5, f2: 1, f3: 3 }
    }

    fn full_gradient_check(model: &SrcnnModel, z: &Tensor4, c: &Tensor4) {
        let (_, g) = model.loss_and_gradients(z, c).unwrap();
        let h = 1e-6;
        let loss = |m: &SrcnnModel| m.loss_and_gradients(z, c).unwrap().0;
        let mut worst: f64 = 0.0;
        for li in 0..3 {
            for (pi, analytic) in [(0, &g.layers[li].0), (1, &g.layers[li].1)] {
                for i in 0..analytic.len() {
                    let (mut p, mut m) = (model.clone(), model.clone());
                    if pi == 0 {
                        p.layers[li].weight[i] += h;
                        m.layers[li].weight[i] -= h;
                    } else {
                        p.layers[li].bias[i] += h;
                        m.layers[li].bias[i] -= h;
                    }
                    let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                    let a = analytic[i];
                    let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-7);
                    worst = worst.max(rel);
                    assert!(rel < 1e-4, "layer {li} group {pi} index {i}: fd {fd:e} analytic {a:e}");
                }
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn network_gradient_check_small() {
        let mut rng = SimRng::seed_from_u64(8);
        let mut model = SrcnnModel::init(small_arch(), 3, 0.3).unwrap();
        for l in &mut model.layers {
            l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
        }
        let z = random_tensor(&mut rng, 1, 1, 16, 16);
        let c = random_tensor(&mut rng, 1, 1, 16, 16);
        full_gradient_check(&model, &z, &c);
    }

    fn smoke_examples(seed: u64, count: usize) -> Vec<Example> {
        let mut rng = SimRng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let level = rng.random_range(2.0..4.0);
                let clean = RealSlice::from_fn(8, 8, |_, _| level);
                let input = RealSlice::from_fn(8, 8, |_, _| level + rng.sample::<f64, _>(rand_distr::StandardNormal));
                Example { input, clean }
            })
            .collect()
    }

    fn smoke_config() -> TrainConfig {
        TrainConfig { max_epochs: 200, patience: 50, seed: 11, lr: 3e-3, architecture: small_arch(), init_std: 0.1, ..Default::default() }
    }

    fn smoke_model() -> (SrcnnModel, TrainHistory) {
        let cfg = smoke_config();
        let model = SrcnnModel::init(cfg.architecture, cfg.seed, cfg.init_std).unwrap();
        train(model, &smoke_examples(1, 27), &smoke_examples(2, 9), &cfg).unwrap()
    }

    #[test]
    fn smoke_training() {
        let (model, hist) = smoke_model();
        assert!(hist.best_val_loss() < 0.5 * hist.initial_val_loss, "{} vs {}", hist.best_val_loss(), hist.initial_val_loss);
        let min = hist.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(hist.best_val_loss(), min);
        assert_eq!(hist.epochs.iter().filter(|e| e.is_best).last().unwrap().epoch, hist.best_epoch);

        let mut rng = SimRng::seed_from_u64(99);
        let noisy = RealSlice::from_fn(8, 8, |_, _| 3.0 + rng.sample::<f64, _>(rand_distr::StandardNormal));
        let std = |s: &RealSlice| {
            let m = s.data().iter().sum::<f64>() / 64.0;
            (s.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / 63.0).sqrt()
        };
        let out = denoise(&model, &noisy).unwrap();
        assert!(std(&out.denoised) < std(&noisy));

        let (again, hist2) = smoke_model();
        assert_eq!(again, model);
        assert_eq!(hist2, hist);
    }

    #[test]
    fn training_is_mode_independent() {
        let cfg = TrainConfig { max_epochs: 3, patience: 2, ..smoke_config() };
        let run = || {
            let model = SrcnnModel::init(cfg.architecture, cfg.seed, cfg.init_std).unwrap();
            train(model, &smoke_examples(1, 20), &smoke_examples(2, 4), &cfg).unwrap()
        };
        let _guard = crate::par::tests::MODE_LOCK.lock().unwrap();
        crate::par::set_exec_mode(crate::par::ExecMode::Sequential);
        let a = run();
        crate::par::set_exec_mode(crate::par::ExecMode::Parallel);
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn train_rejects_bad_input() {
        let model = SrcnnModel::init(small_arch(), 0, 0.02).unwrap();
        assert!(train(model.clone(), &[], &smoke_examples(2, 2), &smoke_config()).is_err());
        let bad = TrainConfig { patience: 300, ..smoke_config() };
        assert!(matches!(train(model.clone(), &smoke_examples(1, 2), &smoke_examples(2, 2), &bad), Err(Error::Config(_))));
        let diverge = TrainConfig { lr: 1e200, max_epochs: 20, patience: 5, ..smoke_config() };
        let r = train(model, &smoke_examples(1, 9), &smoke_examples(2, 2), &diverge);
        assert!(matches!(r, Err(Error::Numerical(_))), "{r:?}");
    }

    #[test]
    fn zero_model_is_identity() {
        let model = SrcnnModel::init(small_arch(), 0, 0.0).unwrap();
        let s = RealSlice::from_fn(10, 7, |x, y| (x * y) as f64 - 3.0);
        let out = denoise(&model, &s).unwrap();
        assert!(out.noise_estimate.data().iter().all(|v| *v == 0.0));
        assert_eq!(out.denoised, s);
        let c = ComplexSlice::from_parts(&s, &s.scale(-1.0)).unwrap();
        assert_eq!(denoise_complex(&model, &c).unwrap().denoised, c);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("m");
        let mut model = SrcnnModel::init(small_arch(), 5, 0.05).unwrap();
        model.meta.standardization = Standardization { mean: 1.5, std: 2.25 };
        model.meta.training_snr = Some(3.0);
        save_model(&model, &stem).unwrap();
        let a = load_model(&stem).unwrap();
        for (x, y) in a.layers.iter().zip(&model.layers) {
            for (p, q) in x.weight.iter().zip(&y.weight) {
                assert_eq!(*p, *q as f32 as f64);
            }
        }
        assert_eq!(a.meta, model.meta);
        save_model(&a, &stem).unwrap();
        assert_eq!(load_model(&stem).unwrap(), a);

        let (jp, bp) = model_paths(&stem);
        let bytes = std::fs::read(&bp).unwrap();
        std::fs::write(&bp, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_model(&stem), Err(Error::Format(_))));
        let mut flipped = bytes.clone();
        flipped[10] ^= 1;
        std::fs::write(&bp, &flipped).unwrap();
        assert!(matches!(load_model(&stem), Err(Error::Format(_))));
        std::fs::write(&bp, &bytes).unwrap();
        let text = std::fs::read_to_string(&jp).unwrap().replacen("\"k\": 5", "\"k\": 7", 1);
        std::fs::write(&jp, text).unwrap();
        assert!(load_model(&stem).is_err());
    }

    #[test]
    fn history_csv() {
        let dir = tempfile::tempdir().unwrap();
        let h = TrainHistory {
            initial_val_loss: 2.0,
            epochs: vec![EpochRecord { epoch: 1, train_loss: 1.0, val_loss: 0.5, is_best: true }],
            best_epoch: 1,
            stopped_early: false,
        };
        let p = dir.path().join("h.csv");
        h.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_loss,is_best\n1,"));
        assert!(text.trim_end().ends_with("true"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn residual_identity(seed in 0u64..1000, scale in 0.1f64..100.0) {
            let mut rng = SimRng::seed_from_u64(seed);
            let mut model = SrcnnModel::init(small_arch(), seed, 0.2).unwrap();
            model.meta.standardization = Standardization { mean: rng.random_range(-1.0..1.0), std: rng.random_range(0.5..3.0) };
            let s = RealSlice::from_fn(9, 6, |_, _| scale * rng.random_range(-1.0..1.0));
            let out = denoise(&model, &s).unwrap();
            for ((d, e), x) in out.denoised.data().iter().zip(out.noise_estimate.data()).zip(s.data()) {
                prop_assert!((d + e - x).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn conv_is_linear_in_input(seed in 0u64..1000, a in -3.0f64..3.0) {
            let mut rng = SimRng::seed_from_u64(seed);
            let mut l = random_layer(&mut rng, 5, 2, 3);
            l.bias.iter_mut().for_each(|b| *b = 0.0);
            let x = random_tensor(&mut rng, 1, 2, 6, 5);
            let y = random_tensor(&mut rng, 1, 2, 6, 5);
            let comb = Tensor4 { data: x.data.iter().zip(&y.data).map(|(p, q)| a * p + q).collect(), ..x.clone() };
            let lhs = conv2d_forward(&comb, &l).unwrap();
            let (fx, fy) = (conv2d_forward(&x, &l).unwrap(), conv2d_forward(&y, &l).unwrap());
            for i in 0..lhs.data.len() {
                prop_assert!((lhs.data[i] - (a * fx.data[i] + fy.data[i])).abs() < 1e-10);
            }
        }
    }
}

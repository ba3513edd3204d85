//! A small feed-forward network with hand-written backward passes: just
//! enough layer types to build the fusion-weight heads and train them with
//! momentum SGD.

use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::img::resize_taps;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MFN1";

/// Dense (channels, height, width) tensor stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::DimensionMismatch(format!(
                "tensor {c}x{h}x{w} needs {} values, got {}",
                c * h * w,
                data.len()
            )));
        }
        Ok(Tensor { c, h, w, data })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    /// Stacks tensors of equal spatial size along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let (h, w) = (parts[0].h, parts[0].w);
        if parts.iter().any(|t| t.h != h || t.w != w) {
            return Err(Error::DimensionMismatch("concat needs equal spatial sizes".into()));
        }
        let c = parts.iter().map(|t| t.c).sum();
        let mut data = Vec::with_capacity(c * h * w);
        for t in parts {
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { c, h, w, data })
    }
}

/// Parameters of a convolution or transposed convolution.
///
/// Conv weights are laid out (cout, cin, kh, kw); deconv weights
/// (cin, cout, kh, kw).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    grad_w: Vec<f64>,
    grad_b: Vec<f64>,
    vel_w: Vec<f64>,
    vel_b: Vec<f64>,
}

impl ConvParams {
    fn new(kh: usize, kw: usize, cin: usize, cout: usize, stride: usize, pad: usize) -> Self {
        assert!(kh > 0 && kw > 0 && cin > 0 && cout > 0 && stride > 0);
        let nw = kh * kw * cin * cout;
        ConvParams {
            kh,
            kw,
            cin,
            cout,
            stride,
            pad,
            weight: vec![0.0; nw],
            bias: vec![0.0; cout],
            grad_w: vec![0.0; nw],
            grad_b: vec![0.0; cout],
            vel_w: vec![0.0; nw],
            vel_b: vec![0.0; cout],
        }
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(ConvParams),
    Deconv2d(ConvParams),
    Relu,
    Sigmoid,
    Lrn { n: usize, alpha: f64, beta: f64, k: f64 },
    BilinearResize { h: usize, w: usize },
}

impl Layer {
    pub fn conv2d(kh: usize, kw: usize, cin: usize, cout: usize, stride: usize, pad: usize) -> Layer {
        Layer::Conv2d(ConvParams::new(kh, kw, cin, cout, stride, pad))
    }

    pub fn deconv2d(kh: usize, kw: usize, cin: usize, cout: usize, stride: usize, pad: usize) -> Layer {
        Layer::Deconv2d(ConvParams::new(kh, kw, cin, cout, stride, pad))
    }

    /// Local response normalization with the classical constants.
    pub fn lrn() -> Layer {
        Layer::Lrn {
            n: 5,
            alpha: 1e-4,
            beta: 0.75,
            k: 2.0,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Deconv2d(_) => "deconv2d",
            Layer::Relu => "relu",
            Layer::Sigmoid => "sigmoid",
            Layer::Lrn { .. } => "lrn",
            Layer::BilinearResize { .. } => "bilinear_resize",
        }
    }

    fn tag(&self) -> u32 {
        match self {
            Layer::Conv2d(_) => 1,
            Layer::Deconv2d(_) => 2,
            Layer::Relu => 3,
            Layer::Sigmoid => 4,
            Layer::Lrn { .. } => 5,
            Layer::BilinearResize { .. } => 6,
        }
    }

    pub fn params(&self) -> Option<&ConvParams> {
        match self {
            Layer::Conv2d(p) | Layer::Deconv2d(p) => Some(p),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut ConvParams> {
        match self {
            Layer::Conv2d(p) | Layer::Deconv2d(p) => Some(p),
            _ => None,
        }
    }

    fn output_shape(&self, index: usize, (c, h, w): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let err = |detail: String| Error::LayerShape {
            index,
            kind: self.kind(),
            detail,
        };
        match self {
            Layer::Conv2d(p) => {
                if c != p.cin {
                    return Err(err(format!("expected {} input channels, got {c}", p.cin)));
                }
                if h + 2 * p.pad < p.kh || w + 2 * p.pad < p.kw {
                    return Err(err(format!("input {h}x{w} smaller than kernel {}x{}", p.kh, p.kw)));
                }
                Ok((
                    p.cout,
                    (h + 2 * p.pad - p.kh) / p.stride + 1,
                    (w + 2 * p.pad - p.kw) / p.stride + 1,
                ))
            }
            Layer::Deconv2d(p) => {
                if c != p.cin {
                    return Err(err(format!("expected {} input channels, got {c}", p.cin)));
                }
                let oh = (h - 1) * p.stride + p.kh;
                let ow = (w - 1) * p.stride + p.kw;
                if oh <= 2 * p.pad || ow <= 2 * p.pad {
                    return Err(err("padding consumes the whole output".into()));
                }
                Ok((p.cout, oh - 2 * p.pad, ow - 2 * p.pad))
            }
            Layer::BilinearResize { h: th, w: tw } => {
                if *th == 0 || *tw == 0 {
                    return Err(err("zero target size".into()));
                }
                Ok((c, *th, *tw))
            }
            _ => Ok((c, h, w)),
        }
    }
}

// ---------------------------------------------------------------------------
// Dense kernels

/// `c = a · b + beta · c` for row-major `a` (m×k) and `b` (k×n) given as
/// (row stride, column stride) views, so transposes are free.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: the asserts above bound every index touched by the kernel.
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
            n as isize,
            1,
        );
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

/// Unfolds `x` (c×h×w) into a (c·kh·kw)×(oh·ow) column matrix.
fn im2col(x: &[f64], g: &Geometry) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut cols = vec![0.0; g.c * g.kh * g.kw * p];
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto a c×h×w image.
fn col2im(cols: &[f64], g: &Geometry) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut x = vec![0.0; g.c * g.h * g.w];
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv_geometry(p: &ConvParams, x: (usize, usize, usize), y: (usize, usize, usize)) -> Geometry {
    Geometry {
        c: x.0,
        h: x.1,
        w: x.2,
        kh: p.kh,
        kw: p.kw,
        stride: p.stride,
        pad: p.pad,
        oh: y.1,
        ow: y.2,
    }
}

fn conv_forward(p: &ConvParams, x: &Tensor, out: (usize, usize, usize)) -> Tensor {
    let g = conv_geometry(p, x.shape(), out);
    let cols = im2col(&x.data, &g);
    let k = p.cin * p.kh * p.kw;
    let np = out.1 * out.2;
    let mut y = Tensor::zeros(out.0, out.1, out.2);
    for (o, chunk) in y.data.chunks_exact_mut(np).enumerate() {
        chunk.fill(p.bias[o]);
    }
    gemm(p.cout, k, np, &p.weight, (k, 1), &cols, (np, 1), &mut y.data, 1.0);
    y
}

fn conv_backward(p: &mut ConvParams, x: &Tensor, dy: &Tensor) -> Tensor {
    let g = conv_geometry(p, x.shape(), dy.shape());
    let cols = im2col(&x.data, &g);
    let k = p.cin * p.kh * p.kw;
    let np = dy.h * dy.w;
    for (o, chunk) in dy.data.chunks_exact(np).enumerate() {
        p.grad_b[o] += chunk.iter().sum::<f64>();
    }
    // dW += dy · colsᵀ
    gemm(p.cout, np, k, &dy.data, (np, 1), &cols, (1, np), &mut p.grad_w, 1.0);
    // dcols = Wᵀ · dy
    let mut dcols = vec![0.0; k * np];
    gemm(k, p.cout, np, &p.weight, (1, k), &dy.data, (np, 1), &mut dcols, 0.0);
    Tensor {
        c: x.c,
        h: x.h,
        w: x.w,
        data: col2im(&dcols, &g),
    }
}

fn deconv_geometry(p: &ConvParams, x: (usize, usize, usize), y: (usize, usize, usize)) -> Geometry {
    // A transposed convolution is the adjoint of a convolution mapping the
    // output grid back onto the input grid.
    Geometry {
        c: y.0,
        h: y.1,
        w: y.2,
        kh: p.kh,
        kw: p.kw,
        stride: p.stride,
        pad: p.pad,
        oh: x.1,
        ow: x.2,
    }
}

fn deconv_forward(p: &ConvParams, x: &Tensor, out: (usize, usize, usize)) -> Tensor {
    let g = deconv_geometry(p, x.shape(), out);
    let kd = p.cout * p.kh * p.kw;
    let hw = x.h * x.w;
    // cols = W_matᵀ · x with W_mat (cin × kd)
    let mut cols = vec![0.0; kd * hw];
    gemm(kd, p.cin, hw, &p.weight, (1, kd), &x.data, (hw, 1), &mut cols, 0.0);
    let mut data = col2im(&cols, &g);
    let plane = out.1 * out.2;
    for (o, chunk) in data.chunks_exact_mut(plane).enumerate() {
        chunk.iter_mut().for_each(|v| *v += p.bias[o]);
    }
    Tensor {
        c: out.0,
        h: out.1,
        w: out.2,
        data,
    }
}

fn deconv_backward(p: &mut ConvParams, x: &Tensor, dy: &Tensor) -> Tensor {
    let g = deconv_geometry(p, x.shape(), dy.shape());
    let kd = p.cout * p.kh * p.kw;
    let hw = x.h * x.w;
    let plane = dy.h * dy.w;
    for (o, chunk) in dy.data.chunks_exact(plane).enumerate() {
        p.grad_b[o] += chunk.iter().sum::<f64>();
    }
    let dcols = im2col(&dy.data, &g);
    // dW_mat += x · dcolsᵀ
    gemm(p.cin, hw, kd, &x.data, (hw, 1), &dcols, (1, hw), &mut p.grad_w, 1.0);
    let mut dx = Tensor::zeros(x.c, x.h, x.w);
    gemm(p.cin, kd, hw, &p.weight, (kd, 1), &dcols, (hw, 1), &mut dx.data, 0.0);
    dx
}

fn lrn_scale(x: &Tensor, n: usize, alpha: f64, k: f64) -> Vec<f64> {
    let plane = x.h * x.w;
    let half = n / 2;
    let mut s = vec![0.0; x.data.len()];
    for c in 0..x.c {
        let lo = c.saturating_sub(half);
        let hi = (c + half).min(x.c - 1);
        for i in 0..plane {
            let mut acc = 0.0;
            for cc in lo..=hi {
                let v = x.data[cc * plane + i];
                acc += v * v;
            }
            s[c * plane + i] = k + alpha / n as f64 * acc;
        }
    }
    s
}

fn lrn_forward(x: &Tensor, n: usize, alpha: f64, beta: f64, k: f64) -> Tensor {
    let s = lrn_scale(x, n, alpha, k);
    let data = x.data.iter().zip(&s).map(|(v, s)| v * s.powf(-beta)).collect();
    Tensor { data, ..*x }
}

fn lrn_backward(x: &Tensor, dy: &Tensor, n: usize, alpha: f64, beta: f64, k: f64) -> Tensor {
    let s = lrn_scale(x, n, alpha, k);
    let plane = x.h * x.w;
    let half = n / 2;
    // t_i = g_i · a_i · s_i^(-β-1)
    let t: Vec<f64> = (0..x.data.len())
        .map(|i| dy.data[i] * x.data[i] * s[i].powf(-beta - 1.0))
        .collect();
    let coef = 2.0 * alpha * beta / n as f64;
    let mut dx = Tensor::zeros(x.c, x.h, x.w);
    for c in 0..x.c {
        // Channel j receives from every i whose window contains j.
        let lo = c.saturating_sub(half);
        let hi = (c + half).min(x.c - 1);
        for p in 0..plane {
            let j = c * plane + p;
            let mut acc = 0.0;
            for cc in lo..=hi {
                acc += t[cc * plane + p];
            }
            dx.data[j] = dy.data[j] * s[j].powf(-beta) - coef * x.data[j] * acc;
        }
    }
    dx
}

fn resize_forward(x: &Tensor, th: usize, tw: usize) -> Tensor {
    let ty = resize_taps(x.h, th);
    let tx = resize_taps(x.w, tw);
    let mut y = Tensor::zeros(x.c, th, tw);
    for c in 0..x.c {
        let src = x.plane(c);
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * x.w + x0] * (1.0 - fx) + src[y0 * x.w + x1] * fx;
                let bot = src[y1 * x.w + x0] * (1.0 - fx) + src[y1 * x.w + x1] * fx;
                y.data[(c * th + oy) * tw + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    y
}

fn resize_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let ty = resize_taps(x.h, dy.h);
    let tx = resize_taps(x.w, dy.w);
    let mut dx = Tensor::zeros(x.c, x.h, x.w);
    for c in 0..x.c {
        let base = c * x.h * x.w;
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = dy.data[(c * dy.h + oy) * dy.w + ox];
                dx.data[base + y0 * x.w + x0] += g * (1.0 - fx) * (1.0 - fy);
                dx.data[base + y0 * x.w + x1] += g * fx * (1.0 - fy);
                dx.data[base + y1 * x.w + x0] += g * (1.0 - fx) * fy;
                dx.data[base + y1 * x.w + x1] += g * fx * fy;
            }
        }
    }
    dx
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

// ---------------------------------------------------------------------------

/// Ordered layer stack with parameter, gradient and momentum storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    activations: Option<Vec<Tensor>>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Network {
            layers,
            activations: None,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Kaiming-uniform (fan-in) weights and zero biases from a fixed seed.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            if let Some(p) = layer.params_mut() {
                let fan_in = (p.cin * p.kh * p.kw) as f64;
                let bound = (6.0 / fan_in).sqrt();
                p.weight.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
                p.bias.iter_mut().for_each(|b| *b = 0.0);
            }
        }
    }

    pub fn output_shape(&self, input: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .try_fold(input, |s, (i, l)| l.output_shape(i, s))
    }

    fn layer_forward(layer: &Layer, index: usize, x: &Tensor) -> Result<Tensor> {
        let out = layer.output_shape(index, x.shape())?;
        Ok(match layer {
            Layer::Conv2d(p) => conv_forward(p, x, out),
            Layer::Deconv2d(p) => deconv_forward(p, x, out),
            Layer::Relu => Tensor {
                data: x.data.iter().map(|v| v.max(0.0)).collect(),
                ..*x
            },
            Layer::Sigmoid => Tensor {
                data: x.data.iter().map(|&v| sigmoid(v)).collect(),
                ..*x
            },
            Layer::Lrn { n, alpha, beta, k } => lrn_forward(x, *n, *alpha, *beta, *k),
            Layer::BilinearResize { h, w } => resize_forward(x, *h, *w),
        })
    }

    /// Forward pass that keeps every activation for [`Network::backward`].
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = Self::layer_forward(layer, i, acts.last().expect("non-empty"))?;
            acts.push(next);
        }
        let out = acts.last().expect("non-empty").clone();
        self.activations = Some(acts);
        Ok(out)
    }

    /// Forward pass without caching; usable through a shared reference.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = Self::layer_forward(layer, i, &x)?;
        }
        Ok(x)
    }

    /// Back-propagates `loss_grad` (dL/d output), accumulating parameter
    /// gradients, and returns dL/d input.
    pub fn backward(&mut self, loss_grad: &Tensor) -> Result<Tensor> {
        let acts = self.activations.as_ref().ok_or(Error::BackwardBeforeForward)?;
        let out = acts.last().expect("non-empty");
        if out.shape() != loss_grad.shape() {
            return Err(Error::DimensionMismatch(format!(
                "loss gradient {:?} does not match output {:?}",
                loss_grad.shape(),
                out.shape()
            )));
        }
        let mut g = loss_grad.clone();
        for i in (0..self.layers.len()).rev() {
            let x = &acts[i];
            let y = &acts[i + 1];
            g = match &mut self.layers[i] {
                Layer::Conv2d(p) => conv_backward(p, x, &g),
                Layer::Deconv2d(p) => deconv_backward(p, x, &g),
                Layer::Relu => Tensor {
                    data: g
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect(),
                    ..*x
                },
                Layer::Sigmoid => Tensor {
                    data: g.data.iter().zip(&y.data).map(|(g, s)| g * s * (1.0 - s)).collect(),
                    ..*x
                },
                Layer::Lrn { n, alpha, beta, k } => lrn_backward(x, &g, *n, *alpha, *beta, *k),
                Layer::BilinearResize { .. } => resize_backward(x, &g),
            };
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        for p in self.layers.iter_mut().filter_map(Layer::params_mut) {
            p.grad_w.fill(0.0);
            p.grad_b.fill(0.0);
        }
    }

    /// Momentum SGD with L2 weight decay:
    /// `v ← μ·v − lr·(g + λ·θ)`, `θ ← θ + v`. Clears gradients.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) {
        for p in self.layers.iter_mut().filter_map(Layer::params_mut) {
            let groups = [
                (&mut p.weight, &mut p.grad_w, &mut p.vel_w),
                (&mut p.bias, &mut p.grad_b, &mut p.vel_b),
            ];
            for (theta, grad, vel) in groups {
                for ((t, g), v) in theta.iter_mut().zip(grad.iter_mut()).zip(vel.iter_mut()) {
                    *v = momentum * *v - lr * (*g + weight_decay * *t);
                    *t += *v;
                    *g = 0.0;
                }
            }
        }
    }

    pub fn reset_momentum(&mut self) {
        for p in self.layers.iter_mut().filter_map(Layer::params_mut) {
            p.vel_w.fill(0.0);
            p.vel_b.fill(0.0);
        }
    }

    /// Scales accumulated gradients, e.g. to average over a batch.
    pub fn scale_grad(&mut self, s: f64) {
        for p in self.layers.iter_mut().filter_map(Layer::params_mut) {
            p.grad_w.iter_mut().chain(p.grad_b.iter_mut()).for_each(|g| *g *= s);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().filter_map(Layer::params).map(ConvParams::param_count).sum()
    }

    fn locate(&self, mut i: usize) -> (usize, bool, usize) {
        for (li, layer) in self.layers.iter().enumerate() {
            if let Some(p) = layer.params() {
                if i < p.weight.len() {
                    return (li, true, i);
                }
                i -= p.weight.len();
                if i < p.bias.len() {
                    return (li, false, i);
                }
                i -= p.bias.len();
            }
        }
        panic!("parameter index out of range");
    }

    /// Parameter `i` in flat order (per layer: weights, then biases).
    pub fn param(&self, i: usize) -> f64 {
        let (li, is_w, j) = self.locate(i);
        let p = self.layers[li].params().expect("param layer");
        if is_w {
            p.weight[j]
        } else {
            p.bias[j]
        }
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        let (li, is_w, j) = self.locate(i);
        let p = self.layers[li].params_mut().expect("param layer");
        if is_w {
            p.weight[j] = v;
        } else {
            p.bias[j] = v;
        }
    }

    pub fn grad(&self, i: usize) -> f64 {
        let (li, is_w, j) = self.locate(i);
        let p = self.layers[li].params().expect("param layer");
        if is_w {
            p.grad_w[j]
        } else {
            p.grad_b[j]
        }
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .flat_map(|p| p.weight.iter().chain(&p.bias).copied())
            .collect()
    }

    pub fn grads_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .filter_map(Layer::params)
            .flat_map(|p| p.grad_w.iter().chain(&p.grad_b).copied())
            .collect()
    }

    // -- checkpoint --------------------------------------------------------

    pub(crate) fn write_layers(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            let (dims, params): (Vec<usize>, Vec<f64>) = match layer {
                Layer::Conv2d(p) | Layer::Deconv2d(p) => (
                    vec![p.kh, p.kw, p.cin, p.cout, p.stride, p.pad],
                    p.weight.iter().chain(&p.bias).copied().collect(),
                ),
                Layer::Relu | Layer::Sigmoid => (vec![], vec![]),
                Layer::Lrn { n, alpha, beta, k } => (vec![*n], vec![*alpha, *beta, *k]),
                Layer::BilinearResize { h, w } => (vec![*h, *w], vec![]),
            };
            w.write_all(&layer.tag().to_le_bytes())?;
            w.write_all(&(dims.len() as u32).to_le_bytes())?;
            for d in dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            w.write_all(&(params.len() as u32).to_le_bytes())?;
            for v in params {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub(crate) fn read_layers(r: &mut impl Read) -> Result<Network> {
        let n = read_u32(r)? as usize;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            let tag = read_u32(r)?;
            let nd = read_u32(r)? as usize;
            if nd > 16 {
                return Err(Error::Checkpoint(format!("implausible dimension count {nd}")));
            }
            let dims = (0..nd).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let np = read_u32(r)? as usize;
            let mut buf = vec![0u8; np * 4];
            r.read_exact(&mut buf)?;
            let params: Vec<f64> = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let bad = |what: &str| Error::Checkpoint(format!("malformed {what} layer"));
            let layer = match (tag, dims.as_slice()) {
                (1 | 2, &[kh, kw, cin, cout, stride, pad]) => {
                    if kh * kw * cin * cout == 0 || stride == 0 {
                        return Err(bad("convolution"));
                    }
                    let mut p = ConvParams::new(kh, kw, cin, cout, stride, pad);
                    if params.len() != p.param_count() {
                        return Err(bad("convolution"));
                    }
                    let nw = p.weight.len();
                    p.weight.copy_from_slice(&params[..nw]);
                    p.bias.copy_from_slice(&params[nw..]);
                    if tag == 1 {
                        Layer::Conv2d(p)
                    } else {
                        Layer::Deconv2d(p)
                    }
                }
                (3, []) if params.is_empty() => Layer::Relu,
                (4, []) if params.is_empty() => Layer::Sigmoid,
                (5, &[n]) if params.len() == 3 && n > 0 => Layer::Lrn {
                    n,
                    alpha: params[0],
                    beta: params[1],
                    k: params[2],
                },
                (6, &[h, w]) if params.is_empty() && h > 0 && w > 0 => Layer::BilinearResize { h, w },
                _ => return Err(Error::Checkpoint(format!("unknown or malformed layer tag {tag}"))),
            };
            layers.push(layer);
        }
        Ok(Network::new(layers))
    }

    /// Serializes a single network as a one-section checkpoint.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&1u32.to_le_bytes());
        self.write_layers(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Network> {
        let mut nets = read_checkpoint(bytes)?;
        if nets.len() != 1 {
            return Err(Error::Checkpoint(format!("expected 1 network, found {}", nets.len())));
        }
        Ok(nets.remove(0))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint("unexpected end of checkpoint".into()))?;
    Ok(u32::from_le_bytes(b))
}

/// Writes the checkpoint container: magic, section count, then each
/// network's layers.
pub fn write_checkpoint(nets: &[&Network]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(nets.len() as u32).to_le_bytes());
    for net in nets {
        net.write_layers(&mut out).expect("writing to a Vec cannot fail");
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<Network>> {
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut r = &bytes[4..];
    let n = read_u32(&mut r)? as usize;
    let nets = (0..n).map(|_| Network::read_layers(&mut r)).collect::<Result<Vec<_>>>()?;
    if !r.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
    }
    Ok(nets)
}

/// Above this many parameters, [`grad_check`] tests a seeded random subset.
const GRAD_CHECK_MAX_PARAMS: usize = 10_000;
const GRAD_CHECK_MAX_INPUTS: usize = 2_000;

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Maximum relative error between analytic and central-difference gradients
/// of the scalar probe loss `Σ r ⊙ net(input)`, over parameters and inputs.
pub fn grad_check(net: &mut Network, input: &Tensor, eps: f64) -> Result<f64> {
    let out_shape = net.output_shape(input.shape())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let probe = Tensor {
        c: out_shape.0,
        h: out_shape.1,
        w: out_shape.2,
        data: (0..out_shape.0 * out_shape.1 * out_shape.2)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    };
    let loss = |net: &Network, x: &Tensor| -> Result<f64> {
        Ok(net.infer(x)?.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum())
    };

    net.zero_grad();
    net.forward(input)?;
    let input_grad = net.backward(&probe)?;
    let analytic = net.grads_flat();
    net.zero_grad();

    let n = net.param_count();
    let indices: Vec<usize> = if n > GRAD_CHECK_MAX_PARAMS {
        sample(&mut rng, n, GRAD_CHECK_MAX_PARAMS).into_vec()
    } else {
        (0..n).collect()
    };
    let mut worst: f64 = 0.0;
    for i in indices {
        let orig = net.param(i);
        net.set_param(i, orig + eps);
        let lp = loss(net, input)?;
        net.set_param(i, orig - eps);
        let lm = loss(net, input)?;
        net.set_param(i, orig);
        worst = worst.max(relative_error(analytic[i], (lp - lm) / (2.0 * eps)));
    }

    let ni = input.data.len();
    let input_idx: Vec<usize> = if ni > GRAD_CHECK_MAX_INPUTS {
        sample(&mut rng, ni, GRAD_CHECK_MAX_INPUTS).into_vec()
    } else {
        (0..ni).collect()
    };
    let mut x = input.clone();
    for i in input_idx {
        let orig = x.data[i];
        x.data[i] = orig + eps;
        let lp = loss(net, &x)?;
        x.data[i] = orig - eps;
        let lm = loss(net, &x)?;
        x.data[i] = orig;
        worst = worst.max(relative_error(input_grad.data[i], (lp - lm) / (2.0 * eps)));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor {
            c,
            h,
            w,
            data: (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    /// Nudges values off the relu kink so finite differences stay valid.
    fn away_from_zero(mut t: Tensor) -> Tensor {
        t.data.iter_mut().for_each(|v| {
            if v.abs() < 1e-3 {
                *v += 1e-2
            }
        });
        t
    }

    #[test]
    fn forward_examples() {
        let mut s = Network::new(vec![Layer::Sigmoid]);
        assert_eq!(s.forward(&Tensor::zeros(1, 1, 1)).unwrap().data, vec![0.5]);
        let mut r = Network::new(vec![Layer::Relu]);
        let x = Tensor::new(1, 1, 1, vec![-3.0]).unwrap();
        assert_eq!(r.forward(&x).unwrap().data, vec![0.0]);
        let mut id = Layer::conv2d(1, 1, 2, 2, 1, 0);
        if let Layer::Conv2d(p) = &mut id {
            p.weight = vec![1.0, 0.0, 0.0, 1.0];
        }
        let mut net = Network::new(vec![id]);
        let x = random_tensor(2, 3, 4, 1);
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn forward_reports_offending_layer() {
        let mut net = Network::new(vec![Layer::Relu, Layer::conv2d(3, 3, 4, 1, 1, 1)]);
        let err = net.forward(&Tensor::zeros(2, 5, 5)).unwrap_err();
        assert!(matches!(err, Error::LayerShape { index: 1, kind: "conv2d", .. }));
    }

    #[test]
    fn backward_requires_forward() {
        let mut net = Network::new(vec![Layer::Relu]);
        assert!(matches!(
            net.backward(&Tensor::zeros(1, 1, 1)),
            Err(Error::BackwardBeforeForward)
        ));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_param_gradients() {
        let mut net = Network::new(vec![Layer::conv2d(3, 3, 2, 3, 1, 1), Layer::Relu, Layer::conv2d(1, 1, 3, 1, 1, 0)]);
        net.init_params(5);
        let x = random_tensor(2, 6, 6, 2);
        let y = net.forward(&x).unwrap();
        net.backward(&Tensor::zeros(y.c, y.h, y.w)).unwrap();
        assert!(net.grads_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn conv_on_single_pixel_gradient_is_input_times_loss_grad() {
        let mut net = Network::new(vec![Layer::conv2d(1, 1, 1, 1, 1, 0)]);
        net.init_params(3);
        let x = Tensor::new(1, 1, 1, vec![0.7]).unwrap();
        net.forward(&x).unwrap();
        net.backward(&Tensor::new(1, 1, 1, vec![-2.0]).unwrap()).unwrap();
        assert!((net.grad(0) - 0.7 * -2.0).abs() < 1e-15);
        assert!((net.grad(1) - -2.0).abs() < 1e-15);
    }

    #[test]
    fn grad_check_linear_net_is_exact() {
        let mut net = Network::new(vec![Layer::conv2d(1, 1, 3, 2, 1, 0)]);
        net.init_params(11);
        let err = grad_check(&mut net, &random_tensor(3, 4, 4, 12), 1e-4).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_each_layer_type() {
        let cases: Vec<(Vec<Layer>, (usize, usize, usize))> = vec![
            (vec![Layer::conv2d(3, 3, 2, 3, 2, 1)], (2, 7, 6)),
            (vec![Layer::deconv2d(3, 3, 2, 3, 2, 1)], (2, 4, 5)),
            (vec![Layer::conv2d(3, 3, 2, 3, 1, 1), Layer::Relu], (2, 5, 5)),
            (vec![Layer::conv2d(1, 1, 2, 2, 1, 0), Layer::Sigmoid], (2, 4, 4)),
            (vec![Layer::conv2d(1, 1, 3, 7, 1, 0), Layer::lrn()], (3, 3, 3)),
            (
                vec![Layer::conv2d(1, 1, 2, 2, 1, 0), Layer::BilinearResize { h: 7, w: 3 }],
                (2, 4, 5),
            ),
        ];
        for (i, (layers, shape)) in cases.into_iter().enumerate() {
            let mut net = Network::new(layers);
            net.init_params(100 + i as u64);
            let x = away_from_zero(random_tensor(shape.0, shape.1, shape.2, 200 + i as u64));
            let err = grad_check(&mut net, &x, 1e-4).unwrap();
            assert!(err < 1e-4, "case {i}: {err}");
        }
    }

    #[test]
    fn lrn_with_large_activations_passes_grad_check() {
        // Large inputs make the normalization term dominate k.
        let mut net = Network::new(vec![Layer::conv2d(1, 1, 2, 6, 1, 0), Layer::Lrn { n: 5, alpha: 1.0, beta: 0.75, k: 1.0 }]);
        net.init_params(4);
        let mut x = random_tensor(2, 3, 3, 9);
        x.data.iter_mut().for_each(|v| *v *= 5.0);
        assert!(grad_check(&mut net, &x, 1e-4).unwrap() < 1e-4);
    }

    #[test]
    fn lrn_of_zero_is_zero() {
        let mut net = Network::new(vec![Layer::lrn()]);
        assert!(net.forward(&Tensor::zeros(8, 3, 3)).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deconv_doubles_spatial_size() {
        let net = Network::new(vec![Layer::deconv2d(3, 3, 4, 2, 2, 1)]);
        assert_eq!(net.output_shape((4, 25, 25)).unwrap(), (2, 49, 49));
    }

    #[test]
    fn sgd_examples() {
        let mut net = Network::new(vec![Layer::conv2d(1, 1, 1, 1, 1, 0)]);
        net.set_param(0, 0.3);
        net.sgd_step(0.1, 0.9, 0.0);
        assert_eq!(net.params_flat(), vec![0.3, 0.0]);

        let mut net = Network::new(vec![Layer::conv2d(1, 1, 1, 1, 1, 0)]);
        let x = Tensor::new(1, 1, 1, vec![1.0]).unwrap();
        let g = Tensor::new(1, 1, 1, vec![1.0]).unwrap();
        net.forward(&x).unwrap();
        net.backward(&g).unwrap();
        net.sgd_step(0.1, 0.0, 0.0);
        assert!((net.param(0) + 0.1).abs() < 1e-15);

        // Momentum recurrence by hand: v1 = -0.1, θ1 = -0.1;
        // v2 = 0.9·(-0.1) - 0.1 = -0.19, θ2 = -0.29.
        let mut net = Network::new(vec![Layer::conv2d(1, 1, 1, 1, 1, 0)]);
        let mut trace = vec![];
        for _ in 0..2 {
            net.forward(&x).unwrap();
            net.backward(&g).unwrap();
            net.sgd_step(0.1, 0.9, 0.0);
            trace.push(net.param(0));
        }
        assert!((trace[0] + 0.1).abs() < 1e-12);
        assert!((trace[1] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut net = Network::new(vec![Layer::conv2d(3, 3, 1, 4, 2, 1), Layer::Relu, Layer::lrn(), Layer::Sigmoid]);
        net.init_params(1);
        let x = random_tensor(1, 9, 9, 3);
        let a = net.forward(&x).unwrap();
        let b = net.forward(&x).unwrap();
        assert_eq!(a.data, b.data);
        assert!(a.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn checkpoint_roundtrip_and_validation() {
        let mut net = Network::new(vec![
            Layer::conv2d(3, 3, 2, 4, 2, 1),
            Layer::Relu,
            Layer::lrn(),
            Layer::deconv2d(3, 3, 4, 1, 2, 1),
            Layer::BilinearResize { h: 5, w: 6 },
            Layer::Sigmoid,
        ]);
        net.init_params(8);
        let bytes = net.to_checkpoint_bytes();
        assert_eq!(&bytes[..4], b"MFN1");
        let back = Network::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back.layers().len(), 6);
        for (a, b) in back.params_flat().iter().zip(net.params_flat()) {
            assert_eq!(*a, b as f32 as f64);
        }
        assert_eq!(back.to_checkpoint_bytes(), bytes);
        assert!(Network::from_checkpoint_bytes(b"XXXX\0\0\0\0").is_err());
        assert!(Network::from_checkpoint_bytes(&bytes[..bytes.len() - 2]).is_err());
    }
}

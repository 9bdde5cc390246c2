//! Small fully convolutional change-detection network with hand-written
//! backpropagation.
//!
//! The input stack for a pair `(a, b)` with `C` channels each is
//! `[|a - b|, a, b]` (`3C` channels). It passes through
//! `conv3x3(3C -> 16) + ReLU`, `conv3x3(16 -> 16) + ReLU` and
//! `conv1x1(16 -> 2)`, all zero padded so the logits keep the input
//! resolution.
//!
//! Everything is generic over [`Real`] so the same code can be checked
//! against finite differences in `f64`.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Raster, Real};
use crate::synthdata::ImagePair;

pub const HIDDEN: usize = 16;
pub const CLASSES: usize = 2;

/// Weights `[out][in][ky][kx]` and one bias per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T = f32> {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kernel: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvLayer<T> {
    pub fn zeros(out_ch: usize, in_ch: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        ConvLayer {
            out_ch,
            in_ch,
            kernel,
            weight: vec![T::zero(); out_ch * in_ch * kernel * kernel],
            bias: vec![T::zero(); out_ch],
        }
    }

    /// Uniform in `[-s, s]` with `s = sqrt(6 / (fan_in + fan_out))`; zero bias.
    pub fn glorot<R: Rng + ?Sized>(out_ch: usize, in_ch: usize, kernel: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(out_ch, in_ch, kernel);
        let area = (kernel * kernel) as f64;
        let s = (6.0 / (in_ch as f64 * area + out_ch as f64 * area)).sqrt();
        for w in layer.weight.iter_mut() {
            *w = T::lit(rng.random_range(-s..=s));
        }
        layer
    }

    #[inline]
    fn taps(&self, o: usize, i: usize) -> &[T] {
        let kk = self.kernel * self.kernel;
        &self.weight[(o * self.in_ch + i) * kk..][..kk]
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.out_ch == other.out_ch && self.in_ch == other.in_ch && self.kernel == other.kernel
    }

    fn cast<U: Real>(&self) -> ConvLayer<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::lit(x.to_f64().unwrap())).collect();
        ConvLayer {
            out_ch: self.out_ch,
            in_ch: self.in_ch,
            kernel: self.kernel,
            weight: c(&self.weight),
            bias: c(&self.bias),
        }
    }

    fn transposed_flipped(&self) -> ConvLayer<T> {
        let k = self.kernel;
        let kk = k * k;
        let mut t = ConvLayer::zeros(self.in_ch, self.out_ch, k);
        for o in 0..self.out_ch {
            for i in 0..self.in_ch {
                let src = self.taps(o, i);
                let dst = &mut t.weight[(i * self.out_ch + o) * kk..][..kk];
                for (tap, v) in dst.iter_mut().enumerate() {
                    *v = src[kk - 1 - tap];
                }
            }
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub conv1: ConvLayer<T>,
    pub conv2: ConvLayer<T>,
    pub head: ConvLayer<T>,
}

/// Parameter-shaped gradient accumulator.
pub type Gradients<T = f32> = ModelParams<T>;

pub const TENSOR_NAMES: [&str; 6] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "head.weight",
    "head.bias",
];

impl<T: Real> ModelParams<T> {
    /// All-zero parameters for images with `image_channels` channels.
    pub fn zeros(image_channels: usize) -> Self {
        ModelParams {
            conv1: ConvLayer::zeros(HIDDEN, 3 * image_channels, 3),
            conv2: ConvLayer::zeros(HIDDEN, HIDDEN, 3),
            head: ConvLayer::zeros(CLASSES, HIDDEN, 1),
        }
    }

    pub fn init<R: Rng + ?Sized>(image_channels: usize, rng: &mut R) -> Self {
        ModelParams {
            conv1: ConvLayer::glorot(HIDDEN, 3 * image_channels, 3, rng),
            conv2: ConvLayer::glorot(HIDDEN, HIDDEN, 3, rng),
            head: ConvLayer::glorot(CLASSES, HIDDEN, 1, rng),
        }
    }

    /// Zero-valued tensors with this model's shapes.
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            conv1: ConvLayer::zeros(self.conv1.out_ch, self.conv1.in_ch, self.conv1.kernel),
            conv2: ConvLayer::zeros(self.conv2.out_ch, self.conv2.in_ch, self.conv2.kernel),
            head: ConvLayer::zeros(self.head.out_ch, self.head.in_ch, self.head.kernel),
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.conv1.same_shape(&other.conv1)
            && self.conv2.same_shape(&other.conv2)
            && self.head.same_shape(&other.head)
    }

    pub fn tensors(&self) -> [&[T]; 6] {
        [
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.head.weight,
            &self.head.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 6] {
        [
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scalar at a flat index across [`TENSOR_NAMES`] order.
    pub fn get(&self, mut idx: usize) -> T {
        for t in self.tensors() {
            if idx < t.len() {
                return t[idx];
            }
            idx -= t.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set(&mut self, mut idx: usize, v: T) {
        for t in self.tensors_mut() {
            if idx < t.len() {
                t[idx] = v;
                return;
            }
            idx -= t.len();
        }
        panic!("parameter index out of range")
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            conv1: self.conv1.cast(),
            conv2: self.conv2.cast(),
            head: self.head.cast(),
        }
    }

    /// Channels per temporal image expected by `conv1`.
    pub fn image_channels(&self) -> usize {
        self.conv1.in_ch / 3
    }
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T = f32> {
    pub input: Raster<T>,
    pub hidden1: Raster<T>,
    pub hidden2: Raster<T>,
}

/// `[|a - b|, a, b]` channel stack.
pub fn input_stack<T: Real>(pair: &ImagePair) -> Result<Raster<T>> {
    let (a, b) = (&pair.a, &pair.b);
    if !a.same_shape(b) {
        return Err(Error::dims(a.shape_string(), b.shape_string()));
    }
    let n = a.data.len();
    let mut out = Raster::zeros(a.height, a.width, 3 * a.channels);
    for k in 0..n {
        let (va, vb) = (a.data[k] as f64, b.data[k] as f64);
        out.data[k] = T::lit((va - vb).abs());
        out.data[n + k] = T::lit(va);
        out.data[2 * n + k] = T::lit(vb);
    }
    Ok(out)
}

#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&xa, &xb) in ra.iter().zip(rb) {
        s += xa * xb;
    }
    s
}

/// Column overlap for horizontal offset `dx`: returns `(out_start, in_start, len)`
/// so that `out[out_start + t]` pairs with `in[in_start + t]`.
#[inline]
fn span(width: usize, dx: isize) -> Option<(usize, usize, usize)> {
    let w = width as isize;
    let lo = 0.max(-dx);
    let hi = w.min(w - dx);
    (hi > lo).then(|| (lo as usize, (lo + dx) as usize, (hi - lo) as usize))
}

fn conv_forward<T: Real>(layer: &ConvLayer<T>, input: &Raster<T>) -> Raster<T> {
    let (h, w) = (input.height, input.width);
    let k = layer.kernel;
    let pad = (k / 2) as isize;
    let mut out = Raster::zeros(h, w, layer.out_ch);
    let zero = vec![T::zero(); w];
    for o in 0..layer.out_ch {
        let out_plane = out.plane_mut(o);
        out_plane.iter_mut().for_each(|v| *v = layer.bias[o]);
        for i in 0..layer.in_ch {
            let in_plane = input.plane(i);
            let t = layer.taps(o, i);
            if k == 3 && w >= 3 {
                let n = w - 2;
                for y in 0..h {
                    let row = |yy: isize| {
                        if yy < 0 || yy >= h as isize {
                            &zero[..]
                        } else {
                            &in_plane[yy as usize * w..(yy as usize + 1) * w]
                        }
                    };
                    let (ra, rb, rc) = (row(y as isize - 1), row(y as isize), row(y as isize + 1));
                    let orow = &mut out_plane[y * w..(y + 1) * w];
                    let (a0, a1, a2) = (&ra[..n], &ra[1..n + 1], &ra[2..n + 2]);
                    let (b0, b1, b2) = (&rb[..n], &rb[1..n + 1], &rb[2..n + 2]);
                    let (c0, c1, c2) = (&rc[..n], &rc[1..n + 1], &rc[2..n + 2]);
                    let o = &mut orow[1..n + 1];
                    for x in 0..n {
                        o[x] += (t[0] * a0[x] + t[1] * a1[x] + t[2] * a2[x])
                            + (t[3] * b0[x] + t[4] * b1[x] + t[5] * b2[x])
                            + (t[6] * c0[x] + t[7] * c1[x] + t[8] * c2[x]);
                    }
                    orow[0] += (t[1] * ra[0] + t[2] * ra[1]) + (t[4] * rb[0] + t[5] * rb[1]) + (t[7] * rc[0] + t[8] * rc[1]);
                    orow[w - 1] += (t[0] * ra[w - 2] + t[1] * ra[w - 1])
                        + (t[3] * rb[w - 2] + t[4] * rb[w - 1])
                        + (t[6] * rc[w - 2] + t[7] * rc[w - 1]);
                }
                continue;
            }
            for y in 0..h {
                for ky in 0..k {
                    let yy = y as isize + ky as isize - pad;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    let yy = yy as usize;
                    for kx in 0..k {
                        if let Some((os, is, len)) = span(w, kx as isize - pad) {
                            let (orow, irow) = (y * w + os, yy * w + is);
                            axpy(&mut out_plane[orow..orow + len], t[ky * k + kx], &in_plane[irow..irow + len]);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adds `d[x] * i[x + kx - 1]` into `acc[kx]` elementwise over the interior
/// columns, and the border products into `edge[kx]`.
#[inline]
fn row_taps3<T: Real>(d: &[T], i: &[T], acc: &mut [Vec<T>; 3], edge: &mut [T; 3]) {
    let w = d.len();
    let (dm, l, c, r) = (&d[1..w - 1], &i[..w - 2], &i[1..w - 1], &i[2..]);
    let [a0, a1, a2] = acc;
    for ((((dv, lv), cv), rv), ((x0, x1), x2)) in dm
        .iter()
        .zip(l)
        .zip(c)
        .zip(r)
        .zip(a0.iter_mut().zip(a1.iter_mut()).zip(a2.iter_mut()))
    {
        *x0 += *dv * *lv;
        *x1 += *dv * *cv;
        *x2 += *dv * *rv;
    }
    edge[1] += d[0] * i[0] + d[w - 1] * i[w - 1];
    edge[2] += d[0] * i[1];
    edge[0] += d[w - 1] * i[w - 2];
}

/// Sum with eight interleaved partial sums.
fn dot_ones<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.chunks_exact(8);
    let rest = chunks.remainder();
    for ch in chunks {
        for l in 0..8 {
            acc[l] += ch[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for &v in rest {
        s += v;
    }
    s
}

/// Accumulates weight/bias gradients of one conv layer and, when `din` is
/// given, the gradient with respect to its input.
fn conv_backward<T: Real>(
    layer: &ConvLayer<T>,
    input: &Raster<T>,
    dout: &Raster<T>,
    grad: &mut ConvLayer<T>,
    din: Option<&mut Raster<T>>,
) {
    let (h, w) = (input.height, input.width);
    let k = layer.kernel;
    let kk = k * k;
    let pad = (k / 2) as isize;
    for o in 0..layer.out_ch {
        let d_plane = dout.plane(o);
        grad.bias[o] += d_plane.iter().fold(T::zero(), |s, &v| s + v);
        for i in 0..layer.in_ch {
            let in_plane = input.plane(i);
            let gw = &mut grad.weight[(o * layer.in_ch + i) * kk..][..kk];
            if k == 3 && w >= 3 {
                for ky in 0..3 {
                    let mut acc = [vec![T::zero(); w - 2], vec![T::zero(); w - 2], vec![T::zero(); w - 2]];
                    let mut edge = [T::zero(); 3];
                    for y in 0..h {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        let yy = yy as usize;
                        row_taps3(&d_plane[y * w..(y + 1) * w], &in_plane[yy * w..(yy + 1) * w], &mut acc, &mut edge);
                    }
                    for kx in 0..3 {
                        gw[ky * 3 + kx] += dot_ones(&acc[kx]) + edge[kx];
                    }
                }
                continue;
            }
            for ky in 0..k {
                for kx in 0..k {
                    let Some((os, is, len)) = span(w, kx as isize - pad) else {
                        continue;
                    };
                    let mut acc = T::zero();
                    for y in 0..h {
                        let yy = y as isize + ky as isize - pad;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        let (drow, irow) = (y * w + os, yy as usize * w + is);
                        acc += dot(&d_plane[drow..drow + len], &in_plane[irow..irow + len]);
                    }
                    gw[ky * k + kx] += acc;
                }
            }
        }
    }
    if let Some(din) = din {
        // the input gradient is a convolution of dout with the transposed,
        // spatially flipped kernel bank
        let g = conv_forward(&layer.transposed_flipped(), dout);
        for (a, b) in din.data.iter_mut().zip(&g.data) {
            *a += *b;
        }
    }
}

fn relu_in_place<T: Real>(r: &mut Raster<T>) {
    for v in r.data.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries whose activation was clipped by the ReLU.
fn relu_mask<T: Real>(grad: &mut Raster<T>, activation: &Raster<T>) {
    for (g, &a) in grad.data.iter_mut().zip(&activation.data) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Runs the network on a prepared input stack.
pub fn forward_stack<T: Real>(
    params: &ModelParams<T>,
    input: Raster<T>,
) -> Result<(Raster<T>, ForwardCache<T>)> {
    if input.channels != params.conv1.in_ch {
        return Err(Error::dims(
            format!("{} input channels", params.conv1.in_ch),
            input.channels,
        ));
    }
    let mut hidden1 = conv_forward(&params.conv1, &input);
    relu_in_place(&mut hidden1);
    let mut hidden2 = conv_forward(&params.conv2, &hidden1);
    relu_in_place(&mut hidden2);
    let logits = conv_forward(&params.head, &hidden2);
    Ok((
        logits,
        ForwardCache {
            input,
            hidden1,
            hidden2,
        },
    ))
}

/// Logits (2 channels, input resolution) plus the activations needed by
/// [`backward`].
pub fn forward<T: Real>(params: &ModelParams<T>, pair: &ImagePair) -> Result<(Raster<T>, ForwardCache<T>)> {
    if pair.a.channels * 3 != params.conv1.in_ch {
        return Err(Error::dims(
            format!("{} channels per image", params.conv1.in_ch / 3),
            pair.a.channels,
        ));
    }
    forward_stack(params, input_stack(pair)?)
}

/// Logits only.
pub fn predict(params: &ModelParams, pair: &ImagePair) -> Result<Raster> {
    forward(params, pair).map(|(logits, _)| logits)
}

/// Adds the parameter gradients for one forward pass into `grads`, given the
/// loss gradient at the logits.
pub fn accumulate_backward<T: Real>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    dlogits: &Raster<T>,
    grads: &mut Gradients<T>,
) -> Result<()> {
    let (h, w) = (cache.hidden2.height, cache.hidden2.width);
    if dlogits.height != h || dlogits.width != w || dlogits.channels != params.head.out_ch {
        return Err(Error::dims(
            format!("{h}x{w}x{}", params.head.out_ch),
            dlogits.shape_string(),
        ));
    }
    if !grads.same_shape(params) {
        return Err(Error::dims("gradients shaped like params", "other shape"));
    }
    let mut d2 = Raster::zeros(h, w, params.head.in_ch);
    conv_backward(&params.head, &cache.hidden2, dlogits, &mut grads.head, Some(&mut d2));
    relu_mask(&mut d2, &cache.hidden2);
    let mut d1 = Raster::zeros(h, w, params.conv2.in_ch);
    conv_backward(&params.conv2, &cache.hidden1, &d2, &mut grads.conv2, Some(&mut d1));
    relu_mask(&mut d1, &cache.hidden1);
    conv_backward(&params.conv1, &cache.input, &d1, &mut grads.conv1, None);
    Ok(())
}

pub fn backward<T: Real>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    dlogits: &Raster<T>,
) -> Result<Gradients<T>> {
    let mut g = params.zeros_like();
    accumulate_backward(params, cache, dlogits, &mut g)?;
    Ok(g)
}

/// SGD momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: ModelParams<f32>,
    pub momentum: f32,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, momentum: f32) -> Self {
        OptimizerState {
            velocity: params.zeros_like(),
            momentum,
        }
    }
}

/// `v <- mu * v + g; theta <- theta - lr * v`.
pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, opt: &mut OptimizerState, lr: f32) {
    let mu = opt.momentum;
    for ((p, g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(opt.velocity.tensors_mut())
    {
        for ((pv, &gv), vv) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vv = mu * *vv + gv;
            *pv -= lr * *vv;
        }
    }
}

/// `teacher <- beta * teacher + (1 - beta) * student`, evaluated in `f64`
/// and rounded once per scalar.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, beta: f64) {
    let keep = 1.0 - beta;
    for (t, s) in teacher.tensors_mut().into_iter().zip(student.tensors()) {
        for (tv, &sv) in t.iter_mut().zip(s) {
            *tv = (beta * *tv as f64 + keep * sv as f64) as f32;
        }
    }
}

fn tensor_dims(params: &ModelParams) -> [Vec<usize>; 6] {
    let w = |l: &ConvLayer| vec![l.out_ch, l.in_ch, l.kernel, l.kernel];
    let b = |l: &ConvLayer| vec![l.out_ch];
    [
        w(&params.conv1),
        b(&params.conv1),
        w(&params.conv2),
        b(&params.conv2),
        w(&params.head),
        b(&params.head),
    ]
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

/// Writes `path` (one raster container per tensor, concatenated) and
/// `path.manifest` (one `name dim...` line per tensor).
///
/// A weight tensor `[out, in, k, k]` is stored as a raster with
/// `channels = out * in`, `height = width = k`; a bias as `out x 1 x 1`.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut manifest = String::new();
    for ((name, dims), data) in TENSOR_NAMES.iter().zip(tensor_dims(params)).zip(params.tensors()) {
        let (channels, side) = if dims.len() == 4 {
            (dims[0] * dims[1], dims[2])
        } else {
            (dims[0], 1)
        };
        let r = Raster {
            height: side,
            width: side,
            channels,
            data: data.to_vec(),
        };
        r.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        let dims: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{name} {}\n", dims.join(" ")));
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    fs::write(&mpath, manifest).map_err(|e| Error::io(mpath, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mpath = manifest_path(path);
    let manifest = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let entries: Vec<(String, Vec<usize>)> = manifest
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut it = l.split_whitespace();
            let name = it.next().unwrap_or_default().to_string();
            let dims = it
                .map(|d| d.parse::<usize>().map_err(|_| Error::Format(format!("manifest line `{l}`"))))
                .collect::<Result<Vec<_>>>()?;
            Ok((name, dims))
        })
        .collect::<Result<_>>()?;
    if entries.len() != TENSOR_NAMES.len() || entries.iter().zip(TENSOR_NAMES).any(|(e, n)| e.0 != n) {
        return Err(Error::Format(format!("{}: unexpected tensor list", mpath.display())));
    }
    let layer = |w: &[usize], b: &[usize]| -> Result<ConvLayer> {
        if w.len() != 4 || b.len() != 1 || w[0] != b[0] || w[2] != w[3] || w[2] % 2 == 0 {
            return Err(Error::Format(format!("bad layer shape {w:?} / {b:?}")));
        }
        Ok(ConvLayer::zeros(w[0], w[1], w[2]))
    };
    let mut params = ModelParams {
        conv1: layer(&entries[0].1, &entries[1].1)?,
        conv2: layer(&entries[2].1, &entries[3].1)?,
        head: layer(&entries[4].1, &entries[5].1)?,
    };
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    for (name, t) in TENSOR_NAMES.iter().zip(params.tensors_mut()) {
        let raster = Raster::read_from(&mut r)?;
        if raster.data.len() != t.len() {
            return Err(Error::Format(format!(
                "{name}: expected {} values, found {}",
                t.len(),
                raster.data.len()
            )));
        }
        t.copy_from_slice(&raster.data);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{softmax, softmax_cross_entropy_grad, LabelMask};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_pair(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImagePair {
        let mut img = || {
            Raster::from_vec(h, w, c, (0..h * w * c).map(|_| rng.random::<f32>()).collect()).unwrap()
        };
        ImagePair {
            a: img(),
            b: img(),
            truth: None,
        }
    }

    /// Direct nested-loop convolution with explicit zero padding.
    fn naive_conv(layer: &ConvLayer<f64>, input: &Raster<f64>) -> Raster<f64> {
        let (h, w, k) = (input.height as isize, input.width as isize, layer.kernel as isize);
        let mut out = Raster::zeros(input.height, input.width, layer.out_ch);
        for o in 0..layer.out_ch {
            for y in 0..h {
                for x in 0..w {
                    let mut s = layer.bias[o];
                    for i in 0..layer.in_ch {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (yy, xx) = (y + ky - k / 2, x + kx - k / 2);
                                if yy >= 0 && yy < h && xx >= 0 && xx < w {
                                    let wv = layer.weight[((o * layer.in_ch + i) * layer.kernel + ky as usize)
                                        * layer.kernel
                                        + kx as usize];
                                    s += wv * input.get(i, yy as usize, xx as usize);
                                }
                            }
                        }
                    }
                    out.set(o, y as usize, x as usize, s);
                }
            }
        }
        out
    }

    #[test]
    fn zero_params_give_uniform_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pair = random_pair(&mut rng, 6, 5, 3);
        let params = ModelParams::<f32>::zeros(3);
        let logits = predict(&params, &pair).unwrap();
        assert!(logits.data.iter().all(|&v| v == 0.0));
        let p = softmax(&logits).unwrap();
        assert!(p.probs.iter().all(|q| *q == [0.5, 0.5]));
    }

    #[test]
    fn identical_pair_with_diff_only_kernels_yields_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pair = random_pair(&mut rng, 5, 5, 3);
        pair.b = pair.a.clone();
        let mut params = ModelParams::<f32>::init(3, &mut rng);
        // only the |a-b| channels feed conv1
        for o in 0..HIDDEN {
            for i in 3..9 {
                for t in 0..9 {
                    params.conv1.weight[(o * 9 + i) * 9 + t] = 0.0;
                }
            }
        }
        params.conv1.bias.iter_mut().for_each(|b| *b = 0.0);
        params.conv2.bias = vec![0.0; HIDDEN];
        params.head.bias = vec![0.25, -0.5];
        let logits = predict(&params, &pair).unwrap();
        assert!(logits.plane(0).iter().all(|&v| v == 0.25));
        assert!(logits.plane(1).iter().all(|&v| v == -0.5));
    }

    #[test]
    fn forward_matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (h, w) in [(3, 3), (7, 4), (9, 12), (1, 5)] {
            let pair = random_pair(&mut rng, h, w, 3);
            let params = ModelParams::<f64>::init(3, &mut rng);
            let params = ModelParams {
                conv1: ConvLayer { bias: (0..HIDDEN).map(|i| 0.01 * i as f64).collect(), ..params.conv1 },
                ..params
            };
            let (logits, _) = forward(&params, &pair).unwrap();
            let x = input_stack::<f64>(&pair).unwrap();
            let mut h1 = naive_conv(&params.conv1, &x);
            h1.data.iter_mut().for_each(|v| *v = v.max(0.0));
            let mut h2 = naive_conv(&params.conv2, &h1);
            h2.data.iter_mut().for_each(|v| *v = v.max(0.0));
            let want = naive_conv(&params.head, &h2);
            for (a, b) in logits.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
            let f32_logits = predict(&params.cast(), &pair).unwrap();
            for (a, b) in f32_logits.data.iter().zip(&want.data) {
                assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_keeps_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ModelParams::<f32>::init(3, &mut rng);
        for (h, w) in [(3, 3), (4, 9), (16, 16)] {
            let pair = random_pair(&mut rng, h, w, 3);
            let a = predict(&params, &pair).unwrap();
            let b = predict(&params, &pair).unwrap();
            assert_eq!(a, b);
            assert_eq!((a.height, a.width, a.channels), (h, w, 2));
        }
        let bad = random_pair(&mut rng, 4, 4, 2);
        assert!(predict(&params, &bad).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pair = random_pair(&mut rng, 6, 6, 3);
        let params = ModelParams::<f32>::init(3, &mut rng);
        let (logits, cache) = forward(&params, &pair).unwrap();
        let g = backward(&params, &cache, &Raster::zeros(6, 6, 2)).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert_eq!(logits.channels, 2);
    }

    /// One pixel, one channel per image, 1x1 kernels, hidden width 1 so the
    /// chain rule can be written out by hand.
    #[test]
    fn single_pixel_chain_rule() {
        let (a, b) = (0.8f64, 0.3f64);
        let x = [(a - b).abs(), a, b];
        let w1 = [0.5, -0.2, 0.7];
        let (b1, w2, b2) = (0.1, 1.5, -0.05);
        let (w3, b3) = ([0.9, -0.4], [0.2, -0.1]);
        let params = ModelParams {
            conv1: ConvLayer { out_ch: 1, in_ch: 3, kernel: 1, weight: w1.to_vec(), bias: vec![b1] },
            conv2: ConvLayer { out_ch: 1, in_ch: 1, kernel: 1, weight: vec![w2], bias: vec![b2] },
            head: ConvLayer { out_ch: 2, in_ch: 1, kernel: 1, weight: w3.to_vec(), bias: b3.to_vec() },
        };
        let pair = ImagePair {
            a: Raster::from_vec(1, 1, 1, vec![a as f32]).unwrap(),
            b: Raster::from_vec(1, 1, 1, vec![b as f32]).unwrap(),
            truth: None,
        };
        let (logits, cache) = forward(&params, &pair).unwrap();
        let target = LabelMask::filled(1, 1, 1);
        let mut dz = Raster::zeros(1, 1, 2);
        softmax_cross_entropy_grad(&logits, &target, 1.0, &mut dz).unwrap();
        let g = backward(&params, &cache, &dz).unwrap();

        // hand derivation with the f32-rounded inputs the model sees
        let x: Vec<f64> = x.iter().map(|&v| v as f32 as f64).collect();
        let h1 = (w1[0] * x[0] + w1[1] * x[1] + w1[2] * x[2] + b1).max(0.0);
        let h2 = (w2 * h1 + b2).max(0.0);
        let z = [w3[0] * h2 + b3[0], w3[1] * h2 + b3[1]];
        let p1 = 1.0 / (1.0 + (z[0] - z[1]).exp());
        let dz = [1.0 - p1, p1 - 1.0];
        let dh2 = dz[0] * w3[0] + dz[1] * w3[1];
        let dpre2 = if h2 > 0.0 { dh2 } else { 0.0 };
        let dh1 = dpre2 * w2;
        let dpre1 = if h1 > 0.0 { dh1 } else { 0.0 };
        let close = |a: f64, b: f64| assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        close(g.head.weight[0], dz[0] * h2);
        close(g.head.weight[1], dz[1] * h2);
        close(g.head.bias[0], dz[0]);
        close(g.conv2.weight[0], dpre2 * h1);
        close(g.conv2.bias[0], dpre2);
        for i in 0..3 {
            close(g.conv1.weight[i], dpre1 * x[i]);
        }
        close(g.conv1.bias[0], dpre1);
    }

    #[test]
    fn sgd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = ModelParams::<f32>::init(3, &mut rng);

        let mut p = params.clone();
        let mut opt = OptimizerState::new(&p, 0.9);
        let zero = p.zeros_like();
        sgd_step(&mut p, &zero, &mut opt, 0.01);
        assert_eq!(p, params);

        let mut g = params.zeros_like();
        for (i, t) in g.tensors_mut().into_iter().enumerate() {
            t.iter_mut().for_each(|v| *v = 0.125 * (i as f32 + 1.0));
        }
        let mut p = params.clone();
        let mut opt = OptimizerState::new(&p, 0.0);
        sgd_step(&mut p, &g, &mut opt, 0.5);
        for idx in 0..p.len() {
            assert_eq!(p.get(idx), params.get(idx) - 0.5 * g.get(idx));
        }

        let mut p = params.clone();
        let mut opt = OptimizerState::new(&p, 0.9);
        sgd_step(&mut p, &g, &mut opt, 0.01);
        sgd_step(&mut p, &g, &mut opt, 0.01);
        for idx in 0..p.len() {
            assert_eq!(opt.velocity.get(idx), 0.9 * g.get(idx) + g.get(idx));
            assert_eq!(opt.velocity.get(idx), 1.9 * g.get(idx));
        }
    }

    #[test]
    fn ema_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let student = ModelParams::<f32>::init(3, &mut rng);
        let mut teacher = student.clone();
        ema_update(&mut teacher, &student, 0.996);
        assert_eq!(teacher, student);

        let mut teacher = ModelParams::<f32>::init(3, &mut rng);
        ema_update(&mut teacher, &student, 0.0);
        assert_eq!(teacher, student);

        let mut teacher = student.zeros_like();
        teacher.set(0, 1.0);
        let mut s = student.zeros_like();
        s.set(0, 0.0);
        ema_update(&mut teacher, &s, 0.996);
        assert_eq!(teacher.get(0), 0.996f32);
    }

    #[test]
    fn ema_contracts_toward_student() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let student = ModelParams::<f32>::init(3, &mut rng);
        let teacher0 = ModelParams::<f32>::init(3, &mut rng);
        let mut teacher = teacher0.clone();
        ema_update(&mut teacher, &student, 0.9);
        for idx in 0..teacher.len() {
            let before = (teacher0.get(idx) - student.get(idx)).abs() as f64;
            let after = (teacher.get(idx) - student.get(idx)).abs() as f64;
            assert!((after - 0.9 * before).abs() <= 1e-6, "{after} vs {before}");
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = ModelParams::<f32>::init(3, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("student.ckpt");
        save_checkpoint(&params, &path).unwrap();
        let manifest = fs::read_to_string(dir.path().join("student.ckpt.manifest")).unwrap();
        assert_eq!(manifest.lines().next().unwrap(), "conv1.weight 16 9 3 3");
        assert_eq!(load_checkpoint(&path).unwrap(), params);
        assert!(load_checkpoint(&dir.path().join("missing")).is_err());
    }
}

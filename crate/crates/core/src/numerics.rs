//! Dense rasters, two-class probability maps, label masks, the pixel-wise
//! cross-entropy loss and the changed-class segmentation metrics.
//!
//! All rasters are stored **planar**: channel `c`, row `y`, column `x` lives
//! at `data[(c * height + y) * width + x]`. The same order is used by the
//! binary container format (see [`Raster::write_to`]).

use std::fmt::Debug;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::AddAssign;
use std::path::Path;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point element type used by the model and rasters.
///
/// Training runs in `f32`; gradient verification instantiates the same code
/// in `f64`.
pub trait Real: Float + Default + Debug + Send + Sync + AddAssign + 'static {
    fn lit(v: f64) -> Self;
}

impl Real for f32 {
    #[inline(always)]
    fn lit(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    #[inline(always)]
    fn lit(v: f64) -> Self {
        v
    }
}

/// Label of an unchanged pixel.
pub const UNCHANGED: u8 = 0;
/// Label of a changed pixel.
pub const CHANGED: u8 = 1;
/// Pixel excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Probability clamp applied inside the cross-entropy only.
pub const CE_CLAMP: f64 = 1e-7;

const MAGIC: &[u8; 4] = b"ASCD";

#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T = f32> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Real> Raster<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Raster {
            height,
            width,
            channels,
            data: vec![T::zero(); height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dims(
                format!("{} values ({height}x{width}x{channels})", height * width * channels),
                format!("{} values", data.len()),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Raster {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape<U>(&self, other: &Raster<U>) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.channels)
    }

    pub fn cast<U: Real>(&self) -> Raster<U> {
        Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .map(|v| U::lit(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }
}

impl Raster<f32> {
    /// Writes the `ASCD` container: magic, `u32` LE height, width, channels,
    /// then the planar `f32` LE values.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for dim in [self.height, self.width, self.channels] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads one container from the stream. Trailing bytes are left unread so
    /// several containers can be concatenated.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Format(format!("raster header: {e}")))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|e| Error::Format(format!("raster header: {e}")))?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let [height, width, channels] = dims;
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::Format("raster dimensions overflow".into()))?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Format(format!("raster body ({n} values): {e}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Raster::from_vec(height, width, channels, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Raster::read_from(BufReader::new(f))
    }
}

/// Per-pixel two-class probability field.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    pub height: usize,
    pub width: usize,
    pub probs: Vec<[f32; 2]>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, probs: Vec<[f32; 2]>) -> Result<Self> {
        if probs.len() != height * width {
            return Err(Error::dims(height * width, probs.len()));
        }
        for (index, p) in probs.iter().enumerate() {
            let ok = p.iter().all(|v| (0.0..=1.0).contains(v))
                && ((p[0] + p[1]) as f64 - 1.0).abs() <= 1e-5;
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "pixel {index} is not a probability vector: {p:?}"
                )));
            }
        }
        Ok(ProbMap {
            height,
            width,
            probs,
        })
    }

    /// Same probability vector at every pixel.
    pub fn uniform(height: usize, width: usize, p: [f32; 2]) -> Result<Self> {
        ProbMap::new(height, width, vec![p; height * width])
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Per-pixel argmax; ties go to the unchanged class.
    pub fn argmax(&self) -> LabelMask {
        LabelMask {
            height: self.height,
            width: self.width,
            labels: self
                .probs
                .iter()
                .map(|p| if p[1] > p[0] { CHANGED } else { UNCHANGED })
                .collect(),
        }
    }
}

/// Per-pixel class labels: [`UNCHANGED`], [`CHANGED`] or [`IGNORE`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::dims(height * width, labels.len()));
        }
        if let Some((index, &value)) = labels
            .iter()
            .enumerate()
            .find(|(_, &v)| !matches!(v, UNCHANGED | CHANGED | IGNORE))
        {
            return Err(Error::InvalidLabel { index, value });
        }
        Ok(LabelMask {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMask {
            height,
            width,
            labels: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.labels[y * self.width + x] = v;
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn count(&self, value: u8) -> usize {
        self.labels.iter().filter(|&&v| v == value).count()
    }

    /// Single-channel raster with IGNORE encoded as `-1.0`.
    pub fn to_raster(&self) -> Raster {
        Raster {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self
                .labels
                .iter()
                .map(|&v| if v == IGNORE { -1.0 } else { v as f32 })
                .collect(),
        }
    }

    pub fn from_raster(r: &Raster) -> Result<Self> {
        if r.channels != 1 {
            return Err(Error::dims("1 channel", r.channels));
        }
        let labels = r
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| match v {
                v if v == 0.0 => Ok(UNCHANGED),
                v if v == 1.0 => Ok(CHANGED),
                v if v == -1.0 => Ok(IGNORE),
                _ => Err(Error::Format(format!("pixel {i}: {v} is not a label"))),
            })
            .collect::<Result<Vec<_>>>()?;
        LabelMask::new(r.height, r.width, labels)
    }
}

/// Single-channel `f32` field over the pixel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl ScalarField {
    pub fn constant(height: usize, width: usize, v: f32) -> Self {
        ScalarField {
            height,
            width,
            values: vec![v; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn to_raster(&self) -> Raster {
        Raster {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.values.clone(),
        }
    }
}

/// Softmax over the two channels of a logits raster.
pub fn softmax(logits: &Raster) -> Result<ProbMap> {
    if logits.channels != 2 {
        return Err(Error::dims("2 channels", logits.channels));
    }
    let (z0, z1) = (logits.plane(0), logits.plane(1));
    let mut probs = Vec::with_capacity(logits.pixels());
    for (i, (&a, &b)) in z0.iter().zip(z1).enumerate() {
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        let s = ea + eb;
        probs.push([ea / s, eb / s]);
    }
    Ok(ProbMap {
        height: logits.height,
        width: logits.width,
        probs,
    })
}

/// Mean over non-IGNORE pixels of `-ln p[target]`, with `p` clamped to
/// `[1e-7, 1 - 1e-7]`. Zero when every pixel is ignored.
pub fn cross_entropy(pred: &ProbMap, target: &LabelMask) -> Result<f64> {
    if pred.height != target.height || pred.width != target.width {
        return Err(Error::dims(
            format!("{}x{}", pred.height, pred.width),
            format!("{}x{}", target.height, target.width),
        ));
    }
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for (p, &t) in pred.probs.iter().zip(&target.labels) {
        if t == IGNORE {
            continue;
        }
        let pt = (p[t as usize] as f64).clamp(CE_CLAMP, 1.0 - CE_CLAMP);
        sum -= pt.ln();
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Fused softmax + cross-entropy on raw logits.
///
/// Returns the mean loss over non-IGNORE pixels and writes
/// `scale * dLoss/dlogits` into `grad` (which must have the logits' shape).
/// Where the clamp is active the loss is flat and the gradient is zero.
pub fn softmax_cross_entropy_grad<T: Real>(
    logits: &Raster<T>,
    target: &LabelMask,
    scale: T,
    grad: &mut Raster<T>,
) -> Result<T> {
    if logits.channels != 2 || logits.height != target.height || logits.width != target.width {
        return Err(Error::dims(
            format!("{}x{}x2", target.height, target.width),
            logits.shape_string(),
        ));
    }
    if !grad.same_shape(logits) {
        return Err(Error::dims(logits.shape_string(), grad.shape_string()));
    }
    let n_valid = target.labels.iter().filter(|&&t| t != IGNORE).count();
    grad.data.iter_mut().for_each(|g| *g = T::zero());
    if n_valid == 0 {
        return Ok(T::zero());
    }
    let lo = T::lit(CE_CLAMP);
    let hi = T::lit(1.0 - CE_CLAMP);
    let inv_n = T::one() / T::lit(n_valid as f64);
    let npx = logits.pixels();
    let mut sum = T::zero();
    for i in 0..npx {
        let t = target.labels[i];
        if t == IGNORE {
            continue;
        }
        let (a, b) = (logits.data[i], logits.data[npx + i]);
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        let s = ea + eb;
        let p = [ea / s, eb / s];
        let pt = p[t as usize];
        if pt < lo {
            sum += -lo.ln();
        } else if pt > hi {
            sum += -hi.ln();
        } else {
            sum += -pt.ln();
            let k = scale * inv_n;
            let (o0, o1) = if t == CHANGED {
                (T::zero(), T::one())
            } else {
                (T::one(), T::zero())
            };
            grad.data[i] = k * (p[0] - o0);
            grad.data[npx + i] = k * (p[1] - o1);
        }
    }
    Ok(sum * inv_n)
}

/// Pixel counts of a binary prediction against ground truth, changed class
/// positive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

/// Counts over pixels whose truth is not IGNORE. `pred` must be a hard
/// 0/1 mask.
pub fn confusion(pred: &LabelMask, truth: &LabelMask) -> Result<ConfusionCounts> {
    if pred.height != truth.height || pred.width != truth.width {
        return Err(Error::dims(
            format!("{}x{}", truth.height, truth.width),
            format!("{}x{}", pred.height, pred.width),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (index, (&p, &t)) in pred.labels.iter().zip(&truth.labels).enumerate() {
        match (p, t) {
            (_, IGNORE) => {}
            (CHANGED, CHANGED) => c.tp += 1,
            (CHANGED, UNCHANGED) => c.fp += 1,
            (UNCHANGED, CHANGED) => c.fn_ += 1,
            (UNCHANGED, UNCHANGED) => c.tn += 1,
            (value, _) => return Err(Error::InvalidLabel { index, value }),
        }
    }
    Ok(c)
}

/// `tp / (tp + fp + fn)`; 1.0 when prediction and truth have no changed
/// pixels at all.
pub fn iou_changed(c: &ConfusionCounts) -> f64 {
    let denom = c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        c.tp as f64 / denom as f64
    }
}

/// `(tp + tn) / total`; 1.0 for an empty evaluation.
pub fn oa(c: &ConfusionCounts) -> f64 {
    let total = c.total();
    if total == 0 {
        1.0
    } else {
        (c.tp + c.tn) as f64 / total as f64
    }
}

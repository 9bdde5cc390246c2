//! Procedural bitemporal scenes with ground-truth change masks, dataset
//! splits, and the weak/strong augmentation pipeline.
//!
//! A scene is a smooth background (a base colour plus Gaussian blobs) and a
//! few shared structures that appear in both images. The "post" image then
//! gains new structures and loses some of the "pre" ones; the union of those
//! footprints is the change mask. Both images get independent pixel noise
//! and the post image a global brightness offset.
//!
//! The strong augmentation is the weak geometric pipeline followed by four
//! photometric operations (Gaussian noise, brightness shift, contrast scale,
//! per-channel dropout) standing in for a full RandAugment policy.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{LabelMask, Raster, CHANGED, IGNORE, UNCHANGED};

/// Co-registered pre/post images with an optional change mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub a: Raster,
    pub b: Raster,
    pub truth: Option<LabelMask>,
}

impl ImagePair {
    pub fn new(a: Raster, b: Raster, truth: Option<LabelMask>) -> Result<Self> {
        if !a.same_shape(&b) {
            return Err(Error::dims(a.shape_string(), b.shape_string()));
        }
        if let Some(t) = &truth {
            if t.height != a.height || t.width != a.width {
                return Err(Error::dims(
                    format!("{}x{}", a.height, a.width),
                    format!("{}x{}", t.height, t.width),
                ));
            }
        }
        Ok(ImagePair { a, b, truth })
    }

    pub fn height(&self) -> usize {
        self.a.height
    }

    pub fn width(&self) -> usize {
        self.a.width
    }

    /// Copy without the change mask.
    pub fn without_truth(&self) -> ImagePair {
        ImagePair {
            a: self.a.clone(),
            b: self.b.clone(),
            truth: None,
        }
    }
}

/// Image quadrant, numbered row-major: 0 top-left, 1 top-right,
/// 2 bottom-left, 3 bottom-right.
pub type Quadrant = u8;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_background_blobs: usize,
    /// Mean fraction of changed pixels.
    pub change_density_target: f64,
    pub noise_sigma: f64,
    /// Maximum change structures per scene; 0 disables changes entirely.
    pub max_structures: usize,
    /// Shared structures present in both images.
    pub shared_structures: usize,
    /// Half-width of the uniform global brightness offset on the post image.
    pub brightness_jitter: f64,
    /// Confine change structures to one quadrant.
    pub cluster_quadrant: Option<Quadrant>,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            channels: 3,
            n_background_blobs: 6,
            change_density_target: 0.05,
            noise_sigma: 0.05,
            max_structures: 4,
            shared_structures: 3,
            brightness_jitter: 0.1,
            cluster_quadrant: None,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.height < 3 || self.width < 3 || self.channels == 0 {
            return bad(format!("scene size {}x{}x{}", self.height, self.width, self.channels));
        }
        if !(self.change_density_target > 0.0 && self.change_density_target < 0.5) {
            return bad(format!("change density {} not in (0, 0.5)", self.change_density_target));
        }
        if !(self.noise_sigma >= 0.0) || !(self.brightness_jitter >= 0.0) {
            return bad("noise_sigma and brightness_jitter must be >= 0".into());
        }
        if matches!(self.cluster_quadrant, Some(q) if q > 3) {
            return bad("cluster quadrant must be 0..=3".into());
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for sub-purpose `stream` of master `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix(seed ^ splitmix(stream))
}

/// Independent generator for `(seed, stream)`.
pub fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    cy: f64,
    cx: f64,
    half_h: f64,
    half_w: f64,
    ellipse: bool,
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.half_h;
        let dx = (x as f64 + 0.5 - self.cx) / self.half_w;
        if self.ellipse {
            dy * dy + dx * dx <= 1.0
        } else {
            dy.abs() <= 1.0 && dx.abs() <= 1.0
        }
    }

    /// Random rectangle or ellipse of roughly `area` pixels centred inside
    /// `[y0, y1) x [x0, x1)`.
    fn sample<R: Rng>(rng: &mut R, area: f64, bounds: (f64, f64, f64, f64)) -> Shape {
        let ellipse = rng.random_bool(0.5);
        let aspect: f64 = rng.random_range(0.5..2.0);
        // ellipse of axes (2a, 2b) covers pi*a*b; rectangle 4*a*b
        let k = if ellipse { std::f64::consts::PI } else { 4.0 };
        let half_w = (area * aspect / k).sqrt().max(0.75);
        let half_h = (area / (k * half_w)).max(0.75);
        let (y0, y1, x0, x1) = bounds;
        Shape {
            cy: rng.random_range(y0..y1),
            cx: rng.random_range(x0..x1),
            half_h,
            half_w,
            ellipse,
        }
    }
}

/// Fills `shape` clipped to `clip = (y0, y1, x0, x1)`.
fn paint(
    img: &mut Raster,
    shape: &Shape,
    color: &[f32],
    clip: (f64, f64, f64, f64),
    mask: Option<&mut LabelMask>,
) {
    let y_lo = (shape.cy - shape.half_h).floor().max(clip.0) as usize;
    let y_hi = ((shape.cy + shape.half_h).ceil().min(clip.1)) as usize;
    let x_lo = (shape.cx - shape.half_w).floor().max(clip.2) as usize;
    let x_hi = ((shape.cx + shape.half_w).ceil().min(clip.3)) as usize;
    let mut mask = mask;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            if shape.contains(y, x) {
                for (c, &v) in color.iter().enumerate() {
                    img.set(c, y, x, v);
                }
                if let Some(m) = mask.as_deref_mut() {
                    m.set(y, x, CHANGED);
                }
            }
        }
    }
}

/// Deterministic function of `(spec.seed, index)`.
pub fn generate_pair(spec: &SceneSpec, index: u64) -> ImagePair {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut rng = derived_rng(spec.seed, index);

    let base: Vec<f64> = (0..c).map(|_| rng.random_range(0.3..0.7)).collect();
    let mut a = Raster::zeros(h, w, c);
    for (ch, &v) in base.iter().enumerate() {
        a.plane_mut(ch).iter_mut().for_each(|p| *p = v as f32);
    }
    let dim = h.min(w) as f64;
    for _ in 0..spec.n_background_blobs {
        let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let sigma: f64 = rng.random_range(dim / 10.0..dim / 4.0);
        let amp: Vec<f64> = (0..c).map(|_| rng.random_range(-0.25..0.25)).collect();
        let inv = 1.0 / (2.0 * sigma * sigma);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                let g = (-d2 * inv).exp();
                for (ch, &amp) in amp.iter().enumerate() {
                    let i = a.index(ch, y, x);
                    a.data[i] += (amp * g) as f32;
                }
            }
        }
    }

    let contrast_color = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        base.iter()
            .map(|&b| {
                let delta: f64 = rng.random_range(0.2..0.45);
                let sign = if b > 0.5 { -1.0 } else { 1.0 };
                let sign = if rng.random_bool(0.25) { -sign } else { sign };
                (b + sign * delta).clamp(0.0, 1.0) as f32
            })
            .collect()
    };
    let full = (0.0, h as f64, 0.0, w as f64);
    let mean_area = spec.change_density_target * (h * w) as f64;
    for _ in 0..spec.shared_structures {
        let area = mean_area * rng.random_range(0.3..1.0);
        let s = Shape::sample(&mut rng, area, full);
        let color = contrast_color(&mut rng);
        paint(&mut a, &s, &color, full, None);
    }

    let mut b = a.clone();
    let mut truth = LabelMask::filled(h, w, UNCHANGED);
    if spec.max_structures > 0 {
        let bounds = match spec.cluster_quadrant {
            None => full,
            Some(q) => {
                let (hh, hw) = (h as f64 / 2.0, w as f64 / 2.0);
                let (qy, qx) = ((q / 2) as f64, (q % 2) as f64);
                (qy * hh, (qy + 1.0) * hh, qx * hw, (qx + 1.0) * hw)
            }
        };
        let target = spec.change_density_target * rng.random_range(0.5..1.5);
        let n = rng.random_range(1..=spec.max_structures);
        let per = target * (h * w) as f64 / n as f64;
        for _ in 0..n {
            let area = per * rng.random_range(0.6..1.4);
            let s = Shape::sample(&mut rng, area, bounds);
            let color = contrast_color(&mut rng);
            if rng.random_bool(0.3) {
                // present before, demolished after
                paint(&mut a, &s, &color, bounds, Some(&mut truth));
            } else {
                paint(&mut b, &s, &color, bounds, Some(&mut truth));
            }
        }
    }

    let offset = if spec.brightness_jitter > 0.0 {
        rng.random_range(-spec.brightness_jitter..=spec.brightness_jitter) as f32
    } else {
        0.0
    };
    b.data.iter_mut().for_each(|v| *v += offset);
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
        for v in a.data.iter_mut().chain(b.data.iter_mut()) {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    ImagePair {
        a,
        b,
        truth: Some(truth),
    }
}

/// Labeled, unlabeled and validation pairs with their scene indices.
///
/// Unlabeled pairs keep their masks for evaluation-only metrics; training
/// code receives them through [`DatasetSplit::unlabeled_inputs`].
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub labeled: Vec<ImagePair>,
    pub unlabeled: Vec<ImagePair>,
    pub val: Vec<ImagePair>,
    pub labeled_idx: Vec<usize>,
    pub unlabeled_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

impl DatasetSplit {
    /// Unlabeled pairs with the change masks removed.
    pub fn unlabeled_inputs(&self) -> Vec<ImagePair> {
        self.unlabeled.iter().map(ImagePair::without_truth).collect()
    }

    /// Masks withheld from training, aligned with `unlabeled`.
    pub fn withheld_truth(&self) -> Vec<LabelMask> {
        self.unlabeled
            .iter()
            .map(|p| p.truth.clone().expect("generated pairs carry truth"))
            .collect()
    }
}

/// Sizes of the three partitions.
pub fn split_sizes(n_total: usize, label_ratio: f64, val_fraction: f64) -> Result<(usize, usize, usize)> {
    if n_total < 20 {
        return Err(Error::InvalidArgument(format!("n_total = {n_total} < 20")));
    }
    if !(label_ratio > 0.0 && label_ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("label ratio {label_ratio}")));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("val fraction {val_fraction}")));
    }
    let n_val = (val_fraction * n_total as f64).round() as usize;
    let n_train = n_total - n_val;
    // guard against 0.05 * 80 = 4.000000000000001
    let n_labeled = ((label_ratio * n_train as f64) - 1e-9).ceil().max(1.0) as usize;
    let n_labeled = n_labeled.min(n_train);
    if n_val == 0 || n_train == 0 {
        return Err(Error::InvalidArgument("degenerate split sizes".into()));
    }
    Ok((n_labeled, n_train - n_labeled, n_val))
}

/// Shuffles scene indices `0..n_total` with `seed`; the first `n_train`
/// are training scenes (the first `ceil(label_ratio * n_train)` of them
/// labeled), the rest validation.
pub fn make_splits(
    spec: &SceneSpec,
    n_total: usize,
    label_ratio: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    spec.validate()?;
    let (n_labeled, n_unlabeled, _) = split_sizes(n_total, label_ratio, val_fraction)?;
    let mut order: Vec<usize> = (0..n_total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let labeled_idx = order[..n_labeled].to_vec();
    let unlabeled_idx = order[n_labeled..n_labeled + n_unlabeled].to_vec();
    let val_idx = order[n_labeled + n_unlabeled..].to_vec();
    let gen = |idx: &[usize]| idx.iter().map(|&i| generate_pair(spec, i as u64)).collect();
    Ok(DatasetSplit {
        labeled: gen(&labeled_idx),
        unlabeled: gen(&unlabeled_idx),
        val: gen(&val_idx),
        labeled_idx,
        unlabeled_idx,
        val_idx,
    })
}

/// Flip, rescale and crop shared by both temporal images and the mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricTransform {
    pub flip_h: bool,
    pub flip_v: bool,
    pub scale: f64,
    /// Offset of the output window inside the rescaled image; negative
    /// offsets pad.
    pub crop_y: isize,
    pub crop_x: isize,
}

impl GeometricTransform {
    pub const IDENTITY: GeometricTransform = GeometricTransform {
        flip_h: false,
        flip_v: false,
        scale: 1.0,
        crop_y: 0,
        crop_x: 0,
    };

    /// Flips with probability 0.5 each, scale uniform in `[0.5, 2]`, crop
    /// offset uniform over valid placements.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Self {
        let flip_h = rng.random_bool(0.5);
        let flip_v = rng.random_bool(0.5);
        let scale = rng.random_range(0.5..=2.0);
        let (sh, sw) = scaled_dims(height, width, scale);
        let offset = |rng: &mut R, scaled: usize, out: usize| {
            let d = scaled as i64 - out as i64;
            let v: i64 = if d >= 0 { rng.random_range(0..=d) } else { rng.random_range(d..=0) };
            v as isize
        };
        let crop_y = offset(rng, sh, height);
        let crop_x = offset(rng, sw, width);
        GeometricTransform {
            flip_h,
            flip_v,
            scale,
            crop_y,
            crop_x,
        }
    }

    /// Source pixel coordinates for output pixel `(y, x)`: `None` in padding,
    /// otherwise fractional coordinates for bilinear sampling and the
    /// nearest-neighbour pixel.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> Option<((f64, f64), (usize, usize))> {
        let (sh, sw) = scaled_dims(h, w, self.scale);
        let ys = y as isize + self.crop_y;
        let xs = x as isize + self.crop_x;
        if ys < 0 || xs < 0 || ys >= sh as isize || xs >= sw as isize {
            return None;
        }
        let (fy, fx) = (h as f64 / sh as f64, w as f64 / sw as f64);
        let sy = (ys as f64 + 0.5) * fy - 0.5;
        let sx = (xs as f64 + 0.5) * fx - 0.5;
        let ny = (((ys as f64 + 0.5) * fy).floor() as usize).min(h - 1);
        let nx = (((xs as f64 + 0.5) * fx).floor() as usize).min(w - 1);
        let flip = |v: f64, n: usize, on: bool| if on { (n - 1) as f64 - v } else { v };
        let flipi = |v: usize, n: usize, on: bool| if on { n - 1 - v } else { v };
        Some((
            (flip(sy, h, self.flip_v), flip(sx, w, self.flip_h)),
            (flipi(ny, h, self.flip_v), flipi(nx, w, self.flip_h)),
        ))
    }

    pub fn apply_raster(&self, img: &Raster) -> Raster {
        let (h, w) = (img.height, img.width);
        let mut out = Raster::zeros(h, w, img.channels);
        for y in 0..h {
            for x in 0..w {
                let Some(((sy, sx), _)) = self.source(y, x, h, w) else {
                    continue;
                };
                let sy = sy.clamp(0.0, (h - 1) as f64);
                let sx = sx.clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (ty, tx) = (sy - y0 as f64, sx - x0 as f64);
                for c in 0..img.channels {
                    let v = (1.0 - ty) * ((1.0 - tx) * img.get(c, y0, x0) as f64 + tx * img.get(c, y0, x1) as f64)
                        + ty * ((1.0 - tx) * img.get(c, y1, x0) as f64 + tx * img.get(c, y1, x1) as f64);
                    out.set(c, y, x, v as f32);
                }
            }
        }
        out
    }

    pub fn apply_mask(&self, mask: &LabelMask) -> LabelMask {
        let (h, w) = (mask.height, mask.width);
        let mut out = LabelMask::filled(h, w, IGNORE);
        for y in 0..h {
            for x in 0..w {
                if let Some((_, (ny, nx))) = self.source(y, x, h, w) {
                    out.set(y, x, mask.get(ny, nx));
                }
            }
        }
        out
    }

    pub fn apply(&self, pair: &ImagePair) -> ImagePair {
        ImagePair {
            a: self.apply_raster(&pair.a),
            b: self.apply_raster(&pair.b),
            truth: pair.truth.as_ref().map(|t| self.apply_mask(t)),
        }
    }
}

fn scaled_dims(h: usize, w: usize, scale: f64) -> (usize, usize) {
    (
        ((h as f64 * scale).round() as usize).max(1),
        ((w as f64 * scale).round() as usize).max(1),
    )
}

/// Image-only perturbation of one temporal image.
#[derive(Clone, Debug, PartialEq)]
pub struct PhotometricTransform {
    pub contrast: f32,
    pub brightness: f32,
    pub noise_sigma: f64,
    pub dropped: Vec<bool>,
    pub noise_seed: u64,
}

impl PhotometricTransform {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, channels: usize) -> Self {
        PhotometricTransform {
            contrast: rng.random_range(0.7..=1.3),
            brightness: rng.random_range(-0.2..=0.2),
            noise_sigma: 0.05,
            dropped: (0..channels).map(|_| rng.random_bool(0.1)).collect(),
            noise_seed: rng.random(),
        }
    }

    /// Contrast around the per-channel mean, brightness shift, additive
    /// Gaussian noise, then channel dropout.
    pub fn apply(&self, img: &Raster) -> Raster {
        let mut out = img.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let normal = Normal::new(0.0, self.noise_sigma.max(0.0)).expect("valid sigma");
        for c in 0..img.channels {
            let plane = out.plane_mut(c);
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len().max(1) as f64;
            for v in plane.iter_mut() {
                let centred = (*v as f64 - mean) * self.contrast as f64 + mean;
                let noise = if self.noise_sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                *v = (centred + self.brightness as f64 + noise) as f32;
            }
            if self.dropped.get(c).copied().unwrap_or(false) {
                plane.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        out
    }
}

pub fn weak_augment<R: Rng + ?Sized>(pair: &ImagePair, rng: &mut R) -> ImagePair {
    GeometricTransform::sample(rng, pair.height(), pair.width()).apply(pair)
}

/// Photometric half of the strong augmentation; masks pass through.
///
/// Contrast, brightness and dropped channels are shared by the two dates so
/// that the perturbation does not itself look like a change; only the pixel
/// noise is drawn separately.
pub fn photometric_augment<R: Rng + ?Sized>(pair: &ImagePair, rng: &mut R) -> ImagePair {
    let ta = PhotometricTransform::sample(rng, pair.a.channels);
    let tb = PhotometricTransform {
        noise_seed: rng.random(),
        ..ta.clone()
    };
    ImagePair {
        a: ta.apply(&pair.a),
        b: tb.apply(&pair.b),
        truth: pair.truth.clone(),
    }
}

pub fn strong_augment<R: Rng + ?Sized>(pair: &ImagePair, rng: &mut R) -> ImagePair {
    let weak = weak_augment(pair, rng);
    photometric_augment(&weak, rng)
}

/// Role of a pair in an exported dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Labeled,
    Unlabeled,
    Val,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::Labeled => "labeled",
            Role::Unlabeled => "unlabeled",
            Role::Val => "val",
        }
    }
}

/// Writes `{index}_a.ascd`, `{index}_b.ascd`, `{index}_truth.ascd` per pair
/// and `manifest.txt` with `index role seed` lines in split order.
pub fn export_dataset(split: &DatasetSplit, seed: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("# index role seed\n");
    let groups = [
        (Role::Labeled, &split.labeled, &split.labeled_idx),
        (Role::Unlabeled, &split.unlabeled, &split.unlabeled_idx),
        (Role::Val, &split.val, &split.val_idx),
    ];
    for (role, pairs, idx) in groups {
        for (pair, &i) in pairs.iter().zip(idx.iter()) {
            pair.a.save(&dir.join(format!("{i:05}_a.ascd")))?;
            pair.b.save(&dir.join(format!("{i:05}_b.ascd")))?;
            if let Some(t) = &pair.truth {
                t.to_raster().save(&dir.join(format!("{i:05}_truth.ascd")))?;
            }
            manifest.push_str(&format!("{i} {} {seed}\n", role.as_str()));
        }
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

pub fn import_dataset(dir: &Path) -> Result<DatasetSplit> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut split = DatasetSplit {
        labeled: vec![],
        unlabeled: vec![],
        val: vec![],
        labeled_idx: vec![],
        unlabeled_idx: vec![],
        val_idx: vec![],
    };
    let mut seen = HashSet::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [index, role, _seed] = fields[..] else {
            return Err(Error::Format(format!("manifest line `{line}`")));
        };
        let i: usize = index
            .parse()
            .map_err(|_| Error::Format(format!("manifest index `{index}`")))?;
        if !seen.insert(i) {
            return Err(Error::Format(format!("index {i} listed twice")));
        }
        let a = Raster::load(&dir.join(format!("{i:05}_a.ascd")))?;
        let b = Raster::load(&dir.join(format!("{i:05}_b.ascd")))?;
        let tpath = dir.join(format!("{i:05}_truth.ascd"));
        let truth = if tpath.exists() {
            Some(LabelMask::from_raster(&Raster::load(&tpath)?)?)
        } else {
            None
        };
        let pair = ImagePair::new(a, b, truth)?;
        let (list, idx) = match role {
            "labeled" => (&mut split.labeled, &mut split.labeled_idx),
            "unlabeled" => (&mut split.unlabeled, &mut split.unlabeled_idx),
            "val" => (&mut split.val, &mut split.val_idx),
            other => return Err(Error::Format(format!("unknown role `{other}`"))),
        };
        list.push(pair);
        idx.push(i);
    }
    Ok(split)
}

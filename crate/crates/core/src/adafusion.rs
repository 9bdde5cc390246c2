//! Uncertainty-guided sample fusion.
//!
//! Each unlabeled sample has a window of random size replaced by content from
//! a donor pair. With [`FusionMode::Af`] the window sits on the sample's
//! maximum-uncertainty region; [`FusionMode::AfStar`] places it uniformly at
//! random. The donor is a labeled pair with probability `1 - u`, where `u` is
//! the recipient's mean uncertainty, and otherwise the most certain other
//! member of the unlabeled batch.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{LabelMask, Raster};
use crate::synthdata::ImagePair;
use crate::uncertainty::UncertaintyMap;

/// Axis-aligned window, top-left at `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Region {
    pub fn full(height: usize, width: usize) -> Self {
        Region { x: 0, y: 0, w: width, h: height }
    }

    #[inline]
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.x + self.w <= width && self.y + self.h <= height
    }

    fn check(&self, height: usize, width: usize) -> Result<()> {
        if self.fits(height, width) {
            Ok(())
        } else {
            Err(Error::WindowTooLarge {
                w: self.w,
                h: self.h,
                width,
                height,
            })
        }
    }
}

/// Summed-area table: `at(i, j)` is the sum over rows `[0, i)` and columns
/// `[0, j)`. Accumulated in f64, which is exact for maps of up to 2^16
/// pixels holding f32 values of a common scale.
#[derive(Clone, Debug)]
pub struct IntegralImage {
    pub height: usize,
    pub width: usize,
    table: Vec<f64>,
}

impl IntegralImage {
    pub fn new(u: &UncertaintyMap) -> Self {
        let (h, w) = (u.height, u.width);
        let stride = w + 1;
        let mut table = vec![0.0f64; (h + 1) * stride];
        for y in 0..h {
            let mut row = 0.0f64;
            for x in 0..w {
                row += u.values[y * w + x] as f64;
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
            }
        }
        IntegralImage { height: h, width: w, table }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.table[i * (self.width + 1) + j]
    }

    #[inline]
    pub fn window_sum(&self, r: &Region) -> f64 {
        let (y1, x1) = (r.y + r.h, r.x + r.w);
        self.at(y1, x1) - self.at(r.y, x1) - self.at(y1, r.x) + self.at(r.y, r.x)
    }
}

pub fn integral_image(u: &UncertaintyMap) -> IntegralImage {
    IntegralImage::new(u)
}

/// Window extent `(w, h)`, each side drawn uniformly from
/// `[ratio_lo, ratio_hi]` times the image side and rounded.
pub fn sample_window_size<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    ratio_lo: f64,
    ratio_hi: f64,
) -> Result<(usize, usize)> {
    if !(ratio_lo > 0.0 && ratio_lo <= ratio_hi && ratio_hi <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "window ratios [{ratio_lo}, {ratio_hi}] outside (0, 1]"
        )));
    }
    let mut side = |n: usize| {
        let v: f64 = rng.random_range(ratio_lo * n as f64..=ratio_hi * n as f64);
        (v.round() as usize).clamp(1, n)
    };
    let w = side(width);
    let h = side(height);
    Ok((w, h))
}

/// The `w x h` window with the largest uncertainty sum over all stride-1
/// placements; ties go to the smallest `y`, then the smallest `x`.
pub fn max_uncertainty_region(u: &UncertaintyMap, w: usize, h: usize) -> Result<Region> {
    let probe = Region { x: 0, y: 0, w, h };
    probe.check(u.height, u.width)?;
    let sat = IntegralImage::new(u);
    let mut best = probe;
    let mut best_sum = f64::NEG_INFINITY;
    for y in 0..=u.height - h {
        for x in 0..=u.width - w {
            let r = Region { x, y, w, h };
            let s = sat.window_sum(&r);
            if s > best_sum {
                best_sum = s;
                best = r;
            }
        }
    }
    Ok(best)
}

/// Uniformly random placement of a `w x h` window.
pub fn random_region<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    w: usize,
    h: usize,
) -> Result<Region> {
    Region { x: 0, y: 0, w, h }.check(height, width)?;
    let x = rng.random_range(0..=width - w);
    let y = rng.random_range(0..=height - h);
    Ok(Region { x, y, w, h })
}

/// Source of the pasted content.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Donor {
    /// Index into the labeled batch.
    Labeled(usize),
    /// Index into the unlabeled batch; never the recipient.
    Unlabeled(usize),
    NoFusion,
}

impl Donor {
    pub fn kind(&self) -> &'static str {
        match self {
            Donor::Labeled(_) => "labeled",
            Donor::Unlabeled(_) => "unlabeled",
            Donor::NoFusion => "none",
        }
    }

    pub fn index(&self) -> Option<usize> {
        match *self {
            Donor::Labeled(i) | Donor::Unlabeled(i) => Some(i),
            Donor::NoFusion => None,
        }
    }
}

/// Draws `r` in `[0, 1)`; `r > recipient_u` picks a uniformly random labeled
/// donor, otherwise the lowest-uncertainty unlabeled member other than the
/// recipient (smallest index on ties). `invert` swaps the comparison to
/// `r < recipient_u`. When the preferred source is empty the other is used.
pub fn choose_donor<R: Rng + ?Sized>(
    recipient_u: f64,
    recipient_index: usize,
    batch_uncertainties: &[f64],
    n_labeled: usize,
    invert: bool,
    rng: &mut R,
) -> Donor {
    let r: f64 = rng.random();
    let prefer_labeled = if invert { r < recipient_u } else { r > recipient_u };
    let unlabeled = batch_uncertainties
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != recipient_index)
        .fold(None, |best: Option<(usize, f64)>, (i, &u)| match best {
            Some((_, bu)) if bu <= u => best,
            _ => Some((i, u)),
        })
        .map(|(i, _)| Donor::Unlabeled(i));
    let mut labeled = || (n_labeled > 0).then(|| Donor::Labeled(rng.random_range(0..n_labeled)));
    let choice = if prefer_labeled {
        labeled().or(unlabeled)
    } else {
        unlabeled.or_else(labeled)
    };
    choice.unwrap_or(Donor::NoFusion)
}

fn paste<T: Copy>(dst: &mut [T], src: &[T], width: usize, r: &Region) {
    for y in r.y..r.y + r.h {
        let row = y * width;
        dst[row + r.x..row + r.x + r.w].copy_from_slice(&src[row + r.x..row + r.x + r.w]);
    }
}

pub fn composite_raster(recipient: &Raster, donor: &Raster, region: Region) -> Result<Raster> {
    if !recipient.same_shape(donor) {
        return Err(Error::dims(recipient.shape_string(), donor.shape_string()));
    }
    region.check(recipient.height, recipient.width)?;
    let mut out = recipient.clone();
    for c in 0..out.channels {
        paste(out.plane_mut(c), donor.plane(c), recipient.width, &region);
    }
    Ok(out)
}

pub fn composite_label(recipient: &LabelMask, donor: &LabelMask, region: Region) -> Result<LabelMask> {
    if recipient.height != donor.height || recipient.width != donor.width {
        return Err(Error::dims(
            format!("{}x{}", recipient.height, recipient.width),
            format!("{}x{}", donor.height, donor.width),
        ));
    }
    region.check(recipient.height, recipient.width)?;
    let mut out = recipient.clone();
    paste(&mut out.labels, &donor.labels, recipient.width, &region);
    Ok(out)
}

/// Replaces `region` in both temporal images. Masks are composited only
/// when both sides carry one.
pub fn composite_pair(recipient: &ImagePair, donor: &ImagePair, region: Region) -> Result<ImagePair> {
    let a = composite_raster(&recipient.a, &donor.a, region)?;
    let b = composite_raster(&recipient.b, &donor.b, region)?;
    let truth = match (&recipient.truth, &donor.truth) {
        (Some(t), Some(d)) => Some(composite_label(t, d, region)?),
        _ => None,
    };
    Ok(ImagePair { a, b, truth })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FusionMode {
    #[default]
    Off,
    /// Random window placement.
    AfStar,
    /// Maximum-uncertainty window.
    Af,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Off => "off",
            FusionMode::AfStar => "af_star",
            FusionMode::Af => "af",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(FusionMode::Off),
            "af_star" => Ok(FusionMode::AfStar),
            "af" => Ok(FusionMode::Af),
            _ => Err(Error::Config(format!("unknown fusion mode `{s}` (off, af_star, af)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    pub invert_threshold: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: FusionMode::Af,
            ratio_lo: 0.25,
            ratio_hi: 0.5,
            invert_threshold: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionDecision {
    pub sample_index: usize,
    pub region: Region,
    pub donor: Donor,
    pub recipient_u: f64,
}

pub const FUSION_CSV_HEADER: &str = "iter,sample_index,x,y,w,h,donor_kind,donor_index,recipient_u";

impl FusionDecision {
    pub fn csv_line(&self, iter: u64) -> String {
        let r = self.region;
        let idx = self.donor.index().map(|i| i.to_string()).unwrap_or_default();
        format!(
            "{iter},{},{},{},{},{},{},{idx},{}",
            self.sample_index,
            r.x,
            r.y,
            r.w,
            r.h,
            self.donor.kind(),
            self.recipient_u
        )
    }
}

/// Fused student inputs and supervision for one unlabeled batch.
#[derive(Clone, Debug)]
pub struct FusedBatch {
    pub pairs: Vec<ImagePair>,
    pub labels: Vec<LabelMask>,
    pub decisions: Vec<FusionDecision>,
}

/// Fuses every unlabeled sample. Donor content is always taken from the
/// un-fused batch, so results do not depend on processing order.
///
/// `pairs[i]` is the student input for sample `i`, `labels[i]` its pseudo
/// label, `maps[i]`/`scores[i]` its uncertainty map and mean. Labeled donors
/// contribute their images and ground-truth masks.
pub fn ada_fuse_batch<R: Rng + ?Sized>(
    pairs: &[ImagePair],
    labels: &[LabelMask],
    maps: &[UncertaintyMap],
    scores: &[f64],
    labeled: &[ImagePair],
    cfg: &FusionConfig,
    rng: &mut R,
) -> Result<FusedBatch> {
    let n = pairs.len();
    if labels.len() != n || maps.len() != n || scores.len() != n {
        return Err(Error::dims(n, format!("{}/{}/{}", labels.len(), maps.len(), scores.len())));
    }
    let mut out = FusedBatch {
        pairs: pairs.to_vec(),
        labels: labels.to_vec(),
        decisions: Vec::new(),
    };
    if cfg.mode == FusionMode::Off {
        return Ok(out);
    }
    for i in 0..n {
        let (h, w) = (pairs[i].height(), pairs[i].width());
        let (ww, wh) = sample_window_size(rng, h, w, cfg.ratio_lo, cfg.ratio_hi)?;
        let region = match cfg.mode {
            FusionMode::Af => max_uncertainty_region(&maps[i], ww, wh)?,
            _ => random_region(rng, h, w, ww, wh)?,
        };
        let donor = choose_donor(scores[i], i, scores, labeled.len(), cfg.invert_threshold, rng);
        let (src, src_label) = match donor {
            Donor::Labeled(j) => {
                let t = labeled[j]
                    .truth
                    .as_ref()
                    .ok_or(Error::InvalidArgument("labeled donor without mask".into()))?;
                (&labeled[j], t)
            }
            Donor::Unlabeled(j) => (&pairs[j], &labels[j]),
            Donor::NoFusion => {
                out.decisions.push(FusionDecision { sample_index: i, region, donor, recipient_u: scores[i] });
                continue;
            }
        };
        out.pairs[i].a = composite_raster(&pairs[i].a, &src.a, region)?;
        out.pairs[i].b = composite_raster(&pairs[i].b, &src.b, region)?;
        out.labels[i] = composite_label(&labels[i], src_label, region)?;
        out.decisions.push(FusionDecision { sample_index: i, region, donor, recipient_u: scores[i] });
    }
    Ok(out)
}

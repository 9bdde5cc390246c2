//! Pseudo-label qualification metric.
//!
//! A teacher's probability map is scored per pixel by combining
//!
//! * per-class entropy `e_k = -p_k log2 p_k`,
//! * class rebalancing with batch-level class proportions
//!   `E' = w1 * e0 + w0 * e1` (the majority proportion scales the
//!   minority-class entropy channel),
//! * the confusion margin `D = |p1 - p0|`,
//!
//! into the uncertainty map `U = 1 - D * E'`. The sample score used by
//! fusion is the pixel mean of `U`.
//!
//! `U` is evaluated literally: it equals 1 both for one-hot and for uniform
//! predictions, and dips to about 0.712 in between. Every value lies in
//! `[1 - 0.5308, 1]`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{LabelMask, ProbMap, ScalarField, CHANGED, UNCHANGED};

/// Largest value of `-p log2 p` on `[0, 1]` (attained at `p = 1/e`),
/// rounded up.
pub const MAX_CLASS_ENTROPY: f64 = 0.5308;

/// Lower bound on every uncertainty value.
pub const MIN_UNCERTAINTY: f64 = 1.0 - MAX_CLASS_ENTROPY;

/// Fractions of unchanged (`w0`) and changed (`w1`) argmax pixels in an
/// unlabeled batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassWeights {
    pub w0: f64,
    pub w1: f64,
}

impl ClassWeights {
    pub const UNIFORM: ClassWeights = ClassWeights { w0: 0.5, w1: 0.5 };

    pub fn new(w0: f64, w1: f64) -> Result<Self> {
        let ok = (0.0..=1.0).contains(&w0) && (0.0..=1.0).contains(&w1) && (w0 + w1 - 1.0).abs() <= 1e-6;
        if !ok {
            return Err(Error::InvalidArgument(format!("class weights ({w0}, {w1})")));
        }
        Ok(ClassWeights { w0, w1 })
    }

    pub fn swapped(self) -> Self {
        ClassWeights {
            w0: self.w1,
            w1: self.w0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMap {
    pub height: usize,
    pub width: usize,
    pub e: Vec<[f32; 2]>,
}

/// Per-pixel score map. With [`MetricMode::Uncertainty`] this is `U`.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl UncertaintyMap {
    pub fn constant(height: usize, width: usize, v: f32) -> Self {
        UncertaintyMap {
            height,
            width,
            values: vec![v; height * width],
        }
    }

    pub fn from_values(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dims(height * width, values.len()));
        }
        Ok(UncertaintyMap {
            height,
            width,
            values,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn as_field(&self) -> ScalarField {
        ScalarField {
            height: self.height,
            width: self.width,
            values: self.values.clone(),
        }
    }
}

#[inline]
fn plogp(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        -p * p.log2()
    }
}

pub fn per_class_entropy(p: &ProbMap) -> EntropyMap {
    EntropyMap {
        height: p.height,
        width: p.width,
        e: p
            .probs
            .iter()
            .map(|q| [plogp(q[0] as f64) as f32, plogp(q[1] as f64) as f32])
            .collect(),
    }
}

/// Class proportions over the argmax masks of a whole unlabeled batch.
pub fn batch_class_weights(pseudo: &[LabelMask]) -> Result<ClassWeights> {
    if pseudo.is_empty() {
        return Err(Error::Empty("unlabeled batch"));
    }
    let (mut zeros, mut ones) = (0u64, 0u64);
    for m in pseudo {
        for (index, &v) in m.labels.iter().enumerate() {
            match v {
                UNCHANGED => zeros += 1,
                CHANGED => ones += 1,
                value => return Err(Error::InvalidLabel { index, value }),
            }
        }
    }
    let total = (zeros + ones) as f64;
    if total == 0.0 {
        return Err(Error::Empty("unlabeled batch has no pixels"));
    }
    Ok(ClassWeights {
        w0: zeros as f64 / total,
        w1: ones as f64 / total,
    })
}

#[inline]
fn rebalanced(e: [f32; 2], w: ClassWeights) -> f64 {
    w.w1 * e[0] as f64 + w.w0 * e[1] as f64
}

/// `E' = w1 * e0 + w0 * e1` per pixel.
pub fn rebalanced_entropy(e: &EntropyMap, w: ClassWeights) -> ScalarField {
    ScalarField {
        height: e.height,
        width: e.width,
        values: e.e.iter().map(|&px| rebalanced(px, w) as f32).collect(),
    }
}

/// `D = |p1 - p0|` per pixel.
pub fn margin_map(p: &ProbMap) -> ScalarField {
    ScalarField {
        height: p.height,
        width: p.width,
        values: p.probs.iter().map(|q| (q[1] - q[0]).abs()).collect(),
    }
}

/// `U = 1 - D * E'` per pixel.
pub fn uncertainty_map(p: &ProbMap, w: ClassWeights) -> UncertaintyMap {
    score_map(p, w, MetricMode::Uncertainty)
}

/// Pixel mean of the map.
pub fn sample_uncertainty(u: &UncertaintyMap) -> f64 {
    if u.values.is_empty() {
        return 0.0;
    }
    u.values.iter().map(|&v| v as f64).sum::<f64>() / u.values.len() as f64
}

/// Which pseudo-label score drives fusion and the EMA gate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MetricMode {
    /// Binary entropy `e0 + e1`.
    Entropy,
    /// `E'` without the margin factor.
    Rebalance,
    /// `1 - D * E` with uniform class weights.
    Confusion,
    /// Full `U = 1 - D * E'`.
    #[default]
    Uncertainty,
}

impl MetricMode {
    pub const ALL: [MetricMode; 4] = [
        MetricMode::Entropy,
        MetricMode::Rebalance,
        MetricMode::Confusion,
        MetricMode::Uncertainty,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricMode::Entropy => "entropy",
            MetricMode::Rebalance => "rebalance",
            MetricMode::Confusion => "confusion",
            MetricMode::Uncertainty => "uncertainty",
        }
    }
}

impl fmt::Display for MetricMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MetricMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric mode `{s}`")))
    }
}

/// Per-pixel score under the chosen metric variant. All variants lie in
/// `[0, 1]`.
pub fn score_map(p: &ProbMap, w: ClassWeights, mode: MetricMode) -> UncertaintyMap {
    let values = p
        .probs
        .iter()
        .map(|q| {
            let e = [plogp(q[0] as f64) as f32, plogp(q[1] as f64) as f32];
            let d = (q[1] - q[0]).abs() as f64;
            let v = match mode {
                MetricMode::Entropy => e[0] as f64 + e[1] as f64,
                MetricMode::Rebalance => rebalanced(e, w),
                MetricMode::Confusion => 1.0 - d * rebalanced(e, ClassWeights::UNIFORM),
                MetricMode::Uncertainty => 1.0 - d * rebalanced(e, w),
            };
            v as f32
        })
        .collect();
    UncertaintyMap {
        height: p.height,
        width: p.width,
        values,
    }
}

/// Class weights and per-sample score maps for a batch of teacher (or
/// student) probability maps.
pub fn batch_scores(
    probs: &[ProbMap],
    mode: MetricMode,
) -> Result<(ClassWeights, Vec<UncertaintyMap>)> {
    let masks: Vec<LabelMask> = probs.iter().map(ProbMap::argmax).collect();
    let w = batch_class_weights(&masks)?;
    Ok((w, probs.iter().map(|p| score_map(p, w, mode)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::IGNORE;
    use proptest::prelude::*;

    fn one(p: [f32; 2]) -> ProbMap {
        ProbMap::uniform(1, 1, p).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(per_class_entropy(&one([0.5, 0.5])).e[0], [0.5, 0.5]);
        assert_eq!(per_class_entropy(&one([1.0, 0.0])).e[0], [0.0, 0.0]);
        let e = per_class_entropy(&one([0.25, 0.75])).e[0];
        assert!((e[0] - 0.5).abs() < 1e-7);
        // -0.75 log2 0.75, evaluated independently
        assert!((e[1] as f64 - 0.311_278_124_459_132_8).abs() < 1e-6);
    }

    #[test]
    fn class_weight_examples() {
        let zeros = vec![LabelMask::filled(2, 2, 0); 3];
        assert_eq!(batch_class_weights(&zeros).unwrap(), ClassWeights { w0: 1.0, w1: 0.0 });
        let half = vec![LabelMask::filled(2, 2, 0), LabelMask::filled(2, 2, 1)];
        assert_eq!(batch_class_weights(&half).unwrap(), ClassWeights { w0: 0.5, w1: 0.5 });
        let quarter = vec![LabelMask::new(2, 2, vec![0, 0, 1, 0]).unwrap()];
        assert_eq!(batch_class_weights(&quarter).unwrap(), ClassWeights { w0: 0.75, w1: 0.25 });
        assert!(matches!(batch_class_weights(&[]), Err(Error::Empty(_))));
        let ignored = vec![LabelMask::filled(1, 1, IGNORE)];
        assert!(batch_class_weights(&ignored).is_err());
    }

    #[test]
    fn rebalanced_examples() {
        let e = EntropyMap { height: 1, width: 1, e: vec![[0.5, 0.5]] };
        let w = ClassWeights::new(0.3, 0.7).unwrap();
        assert!((rebalanced_entropy(&e, w).values[0] - 0.5).abs() < 1e-7);

        let e = EntropyMap { height: 1, width: 1, e: vec![[0.2, 0.4]] };
        let w = ClassWeights::new(1.0, 0.0).unwrap();
        assert_eq!(rebalanced_entropy(&e, w).values[0], 0.4);

        let e = EntropyMap { height: 1, width: 1, e: vec![[0.0143, 0.0664]] };
        let w = ClassWeights::new(0.95, 0.05).unwrap();
        assert!((rebalanced_entropy(&e, w).values[0] - 0.063_795).abs() < 1e-6);
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin_map(&one([0.5, 0.5])).values[0], 0.0);
        assert_eq!(margin_map(&one([1.0, 0.0])).values[0], 1.0);
        assert!((margin_map(&one([0.8, 0.2])).values[0] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn uncertainty_examples() {
        let w = ClassWeights::new(0.95, 0.05).unwrap();
        assert_eq!(uncertainty_map(&one([0.5, 0.5]), w).values[0], 1.0);
        assert_eq!(uncertainty_map(&one([1.0, 0.0]), w).values[0], 1.0);
        let u = uncertainty_map(&one([0.99, 0.01]), w).values[0] as f64;
        assert!((u - 0.937_442_324_747_287_3).abs() < 1e-6, "{u}");
    }

    #[test]
    fn sample_uncertainty_examples() {
        assert_eq!(sample_uncertainty(&UncertaintyMap::constant(3, 4, 1.0)), 1.0);
        assert!((sample_uncertainty(&UncertaintyMap::constant(3, 4, 0.8)) - 0.8).abs() < 1e-7);
        let vals: Vec<f32> = (0..20).map(|i| 0.5 + 0.02 * i as f32).collect();
        let u = UncertaintyMap::from_values(4, 5, vals.clone()).unwrap();
        let mut brute = 0.0f64;
        for y in 0..4 {
            for x in 0..5 {
                brute += u.get(y, x) as f64;
            }
        }
        assert!((sample_uncertainty(&u) - brute / 20.0).abs() < 1e-12);
    }

    #[test]
    fn metric_modes_parse() {
        for m in MetricMode::ALL {
            assert_eq!(m.as_str().parse::<MetricMode>().unwrap(), m);
        }
        assert!("foo".parse::<MetricMode>().is_err());
    }

    fn prob() -> impl Strategy<Value = [f32; 2]> {
        (0f32..=1.0).prop_map(|a| [1.0 - a, a])
    }

    fn weights() -> impl Strategy<Value = ClassWeights> {
        (0f64..=1.0).prop_map(|a| ClassWeights { w0: 1.0 - a, w1: a })
    }

    proptest! {
        #[test]
        fn u_within_bounds(p in prob(), w in weights()) {
            let pm = one(p);
            for mode in MetricMode::ALL {
                let v = score_map(&pm, w, mode).values[0] as f64;
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let u = uncertainty_map(&pm, w).values[0] as f64;
            prop_assert!(u >= MIN_UNCERTAINTY && u <= 1.0);
            let e = per_class_entropy(&pm).e[0];
            prop_assert!(e.iter().all(|&v| (0.0..=MAX_CLASS_ENTROPY as f32).contains(&v)));
        }

        #[test]
        fn u_symmetric_under_class_swap(p in prob(), w in weights()) {
            let a = uncertainty_map(&one(p), w).values[0];
            let b = uncertainty_map(&one([p[1], p[0]]), w.swapped()).values[0];
            prop_assert!((a - b).abs() <= 1e-6);
        }

        #[test]
        fn rebalanced_is_linear_in_weights(p in prob(), w in weights(), v in weights(), alpha in 0f64..=1.0) {
            let e = per_class_entropy(&one(p));
            let mix = ClassWeights { w0: alpha * w.w0 + (1.0 - alpha) * v.w0, w1: alpha * w.w1 + (1.0 - alpha) * v.w1 };
            let lhs = rebalanced_entropy(&e, mix).values[0] as f64;
            let rhs = alpha * rebalanced_entropy(&e, w).values[0] as f64
                + (1.0 - alpha) * rebalanced_entropy(&e, v).values[0] as f64;
            prop_assert!((lhs - rhs).abs() <= 1e-6);
        }

        #[test]
        fn u_is_composition(ps in prop::collection::vec(prob(), 1..40), w in weights()) {
            let n = ps.len();
            let pm = ProbMap { height: 1, width: n, probs: ps };
            let u = uncertainty_map(&pm, w);
            let d = margin_map(&pm);
            let er = rebalanced_entropy(&per_class_entropy(&pm), w);
            for i in 0..n {
                let explicit = 1.0 - d.values[i] as f64 * er.values[i] as f64;
                prop_assert!((u.values[i] as f64 - explicit).abs() <= 1e-6);
            }
        }

        #[test]
        fn weights_sum_to_one(labels in prop::collection::vec(0u8..2, 1..200)) {
            let n = labels.len();
            let w = batch_class_weights(&[LabelMask::new(1, n, labels).unwrap()]).unwrap();
            prop_assert!((w.w0 + w.w1 - 1.0).abs() <= 1e-12);
        }
    }
}

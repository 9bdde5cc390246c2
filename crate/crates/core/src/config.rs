//! Trainer configuration and its flat `key = value` text format.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! ramp.w_max = 10
//! fusion.mode = af
//! ```
//!
//! Keys are dotted; unknown keys and malformed values are errors. Every key
//! has a default, and [`TrainerConfig::to_text`] writes the fully resolved
//! configuration in a form that parses back to an identical value.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::adaema::{EmaGateConfig, EmaMode};
use crate::adafusion::{FusionConfig, FusionMode};
use crate::error::{Error, Result};
use crate::schedule::RampConfig;
use crate::synthdata::{derive_seed, SceneSpec};
use crate::uncertainty::MetricMode;

/// Which model `evaluate` scores at epoch ends.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EvalModel {
    #[default]
    Teacher,
    Student,
}

impl EvalModel {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalModel::Teacher => "teacher",
            EvalModel::Student => "student",
        }
    }
}

impl FromStr for EvalModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(EvalModel::Teacher),
            "student" => Ok(EvalModel::Student),
            _ => Err(Error::Config(format!("unknown eval model `{s}` (teacher, student)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_total: usize,
    pub val_fraction: f64,
    pub label_ratio: f64,
    pub background_blobs: usize,
    pub change_density: f64,
    pub noise_sigma: f64,
    pub max_structures: usize,
    pub shared_structures: usize,
    pub brightness_jitter: f64,
    pub cluster_quadrant: Option<u8>,
    /// Scene seed; `None` derives it from the master seed.
    pub seed: Option<u64>,
    /// Shuffle seed for the split; `None` derives it from the master seed.
    pub split_seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        let scene = SceneSpec::default();
        DataConfig {
            height: scene.height,
            width: scene.width,
            channels: scene.channels,
            n_total: 100,
            val_fraction: 0.2,
            label_ratio: 0.05,
            background_blobs: scene.n_background_blobs,
            change_density: scene.change_density_target,
            noise_sigma: scene.noise_sigma,
            max_structures: scene.max_structures,
            shared_structures: scene.shared_structures,
            brightness_jitter: scene.brightness_jitter,
            cluster_quadrant: scene.cluster_quadrant,
            seed: None,
            split_seed: None,
        }
    }
}

const DATA_STREAM: u64 = 0xda7a;
const SPLIT_STREAM: u64 = 0x5911;

impl DataConfig {
    pub fn scene_spec(&self, master_seed: u64) -> SceneSpec {
        SceneSpec {
            height: self.height,
            width: self.width,
            channels: self.channels,
            n_background_blobs: self.background_blobs,
            change_density_target: self.change_density,
            noise_sigma: self.noise_sigma,
            max_structures: self.max_structures,
            shared_structures: self.shared_structures,
            brightness_jitter: self.brightness_jitter,
            cluster_quadrant: self.cluster_quadrant,
            seed: self.seed.unwrap_or_else(|| derive_seed(master_seed, DATA_STREAM)),
        }
    }

    pub fn resolved_split_seed(&self, master_seed: u64) -> u64 {
        self.split_seed
            .unwrap_or_else(|| derive_seed(master_seed, SPLIT_STREAM))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub confidence_threshold: f64,
    pub eval_model: EvalModel,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_labeled: 8,
            batch_unlabeled: 8,
            lr0: 0.01,
            lr_min: 1e-4,
            momentum: 0.9,
            confidence_threshold: 0.95,
            eval_model: EvalModel::Teacher,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    /// `iter_total` is filled in from the data and epoch count at run time.
    pub ramp: RampConfig,
    pub ema: EmaGateConfig,
    pub fusion: FusionConfig,
    pub metric_mode: MetricMode,
    /// Unlabeled pairs scored for pseudo-label IoU at each epoch end.
    pub pl_iou_samples: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            seed: 0,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            ramp: RampConfig::default(),
            ema: EmaGateConfig::default(),
            fusion: FusionConfig::default(),
            metric_mode: MetricMode::Uncertainty,
            pl_iou_samples: 0,
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed; all other seeds derive from it"),
    ("data.height", "image height in pixels"),
    ("data.width", "image width in pixels"),
    ("data.channels", "channels per temporal image"),
    ("data.n_total", "number of generated scenes (>= 20)"),
    ("data.val_fraction", "fraction of scenes held out for validation"),
    ("data.label_ratio", "fraction of training scenes that keep their labels"),
    ("data.background_blobs", "smooth background blobs per scene"),
    ("data.change_density", "mean fraction of changed pixels"),
    ("data.noise_sigma", "pixel noise standard deviation"),
    ("data.max_structures", "maximum change structures per scene (0 = none)"),
    ("data.shared_structures", "unchanged structures present in both images"),
    ("data.brightness_jitter", "half-width of the post-image brightness offset"),
    ("data.cluster_quadrant", "none, or 0..=3 to confine changes to one quadrant"),
    ("data.seed", "scene seed, or auto"),
    ("data.split_seed", "split shuffle seed, or auto"),
    ("train.epochs", "passes over the unlabeled set"),
    ("train.batch_labeled", "labeled batch size"),
    ("train.batch_unlabeled", "unlabeled batch size"),
    ("train.lr0", "initial learning rate"),
    ("train.lr_min", "final learning rate"),
    ("train.momentum", "SGD momentum"),
    ("train.confidence_threshold", "pseudo-label confidence threshold in (0.5, 1]"),
    ("train.eval_model", "teacher or student"),
    ("ramp.w_max", "final unsupervised loss weight"),
    ("ramp.phi", "ramp-up severity"),
    ("ramp.gamma", "fraction of training spent ramping up"),
    ("ema.beta", "EMA momentum"),
    ("ema.epsilon", "stabiliser in the gate probability"),
    ("ema.mode", "ada, plain or off-teacher-equals-student"),
    ("ema.sign", "literal or prose"),
    ("fusion.mode", "off, af_star or af"),
    ("fusion.ratio_lo", "smallest window side as a fraction of the image side"),
    ("fusion.ratio_hi", "largest window side as a fraction of the image side"),
    ("fusion.invert_threshold", "true to pick labeled donors when r < u"),
    ("metric.mode", "entropy, rebalance, confusion or uncertainty"),
    ("metrics.pl_iou_samples", "unlabeled pairs scored for pseudo-label IoU (0 = off)"),
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for {key}")))
}

fn auto_u64(key: &str, value: &str) -> Result<Option<u64>> {
    if value == "auto" {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

fn show_opt<T: Display>(v: Option<T>, none: &str) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| none.to_string())
}

impl TrainerConfig {
    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (d, t) = (&mut self.data, &mut self.train);
        match key.trim() {
            "seed" => self.seed = num(key, v)?,
            "data.height" => d.height = num(key, v)?,
            "data.width" => d.width = num(key, v)?,
            "data.channels" => d.channels = num(key, v)?,
            "data.n_total" => d.n_total = num(key, v)?,
            "data.val_fraction" => d.val_fraction = num(key, v)?,
            "data.label_ratio" => d.label_ratio = num(key, v)?,
            "data.background_blobs" => d.background_blobs = num(key, v)?,
            "data.change_density" => d.change_density = num(key, v)?,
            "data.noise_sigma" => d.noise_sigma = num(key, v)?,
            "data.max_structures" => d.max_structures = num(key, v)?,
            "data.shared_structures" => d.shared_structures = num(key, v)?,
            "data.brightness_jitter" => d.brightness_jitter = num(key, v)?,
            "data.cluster_quadrant" => {
                d.cluster_quadrant = if v == "none" { None } else { Some(num(key, v)?) }
            }
            "data.seed" => d.seed = auto_u64(key, v)?,
            "data.split_seed" => d.split_seed = auto_u64(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.batch_labeled" => t.batch_labeled = num(key, v)?,
            "train.batch_unlabeled" => t.batch_unlabeled = num(key, v)?,
            "train.lr0" => t.lr0 = num(key, v)?,
            "train.lr_min" => t.lr_min = num(key, v)?,
            "train.momentum" => t.momentum = num(key, v)?,
            "train.confidence_threshold" => t.confidence_threshold = num(key, v)?,
            "train.eval_model" => t.eval_model = v.parse()?,
            "ramp.w_max" => self.ramp.w_max = num(key, v)?,
            "ramp.phi" => self.ramp.phi = num(key, v)?,
            "ramp.gamma" => self.ramp.gamma = num(key, v)?,
            "ema.beta" => self.ema.beta = num(key, v)?,
            "ema.epsilon" => self.ema.epsilon_small = num(key, v)?,
            "ema.mode" => self.ema.mode = v.parse()?,
            "ema.sign" => self.ema.sign_mode = v.parse()?,
            "fusion.mode" => self.fusion.mode = v.parse()?,
            "fusion.ratio_lo" => self.fusion.ratio_lo = num(key, v)?,
            "fusion.ratio_hi" => self.fusion.ratio_hi = num(key, v)?,
            "fusion.invert_threshold" => self.fusion.invert_threshold = num(key, v)?,
            "metric.mode" => self.metric_mode = v.parse()?,
            "metrics.pl_iou_samples" => self.pl_iou_samples = num(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Resolved `(key, value)` pairs in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (d, t) = (&self.data, &self.train);
        let values: Vec<String> = vec![
            self.seed.to_string(),
            d.height.to_string(),
            d.width.to_string(),
            d.channels.to_string(),
            d.n_total.to_string(),
            d.val_fraction.to_string(),
            d.label_ratio.to_string(),
            d.background_blobs.to_string(),
            d.change_density.to_string(),
            d.noise_sigma.to_string(),
            d.max_structures.to_string(),
            d.shared_structures.to_string(),
            d.brightness_jitter.to_string(),
            show_opt(d.cluster_quadrant, "none"),
            show_opt(d.seed, "auto"),
            show_opt(d.split_seed, "auto"),
            t.epochs.to_string(),
            t.batch_labeled.to_string(),
            t.batch_unlabeled.to_string(),
            t.lr0.to_string(),
            t.lr_min.to_string(),
            t.momentum.to_string(),
            t.confidence_threshold.to_string(),
            t.eval_model.as_str().to_string(),
            self.ramp.w_max.to_string(),
            self.ramp.phi.to_string(),
            self.ramp.gamma.to_string(),
            self.ema.beta.to_string(),
            self.ema.epsilon_small.to_string(),
            self.ema.mode.to_string(),
            self.ema.sign_mode.to_string(),
            self.fusion.mode.to_string(),
            self.fusion.ratio_lo.to_string(),
            self.fusion.ratio_hi.to_string(),
            self.fusion.invert_threshold.to_string(),
            self.metric_mode.to_string(),
            self.pl_iou_samples.to_string(),
        ];
        KEYS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainerConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key=value` overrides such as those given with `--set`.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let t = &self.train;
        if t.batch_labeled == 0 || t.batch_unlabeled == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if !(t.confidence_threshold > 0.5 && t.confidence_threshold <= 1.0) {
            return bad(format!("train.confidence_threshold = {} not in (0.5, 1]", t.confidence_threshold));
        }
        if !(t.lr0 >= t.lr_min && t.lr_min >= 0.0 && t.lr0.is_finite()) {
            return bad(format!("learning rates lr0 = {}, lr_min = {}", t.lr0, t.lr_min));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return bad(format!("train.momentum = {} not in [0, 1)", t.momentum));
        }
        RampConfig { iter_total: 1, ..self.ramp }
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.ema.validate()?;
        let f = &self.fusion;
        if !(f.ratio_lo > 0.0 && f.ratio_lo <= f.ratio_hi && f.ratio_hi <= 1.0) {
            return bad(format!("fusion ratios [{}, {}]", f.ratio_lo, f.ratio_hi));
        }
        self.data
            .scene_spec(self.seed)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        crate::synthdata::split_sizes(self.data.n_total, self.data.label_ratio, self.data.val_fraction)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Preset for the named ablation row; `None` for unknown names.
    pub fn ablation(&self, name: &str) -> Option<TrainerConfig> {
        let mut c = self.clone();
        match name {
            "sup_only" => {
                c.ramp.w_max = 0.0;
                c.fusion.mode = FusionMode::Off;
                c.ema.mode = EmaMode::Plain;
                c.train.eval_model = EvalModel::Student;
            }
            "mt_ema" => {
                c.fusion.mode = FusionMode::Off;
                c.ema.mode = EmaMode::Plain;
            }
            "mt_aema" => {
                c.fusion.mode = FusionMode::Off;
                c.ema.mode = EmaMode::Ada;
            }
            "mt_ema_af_star" => {
                c.fusion.mode = FusionMode::AfStar;
                c.ema.mode = EmaMode::Plain;
            }
            "mt_ema_af" => {
                c.fusion.mode = FusionMode::Af;
                c.ema.mode = EmaMode::Plain;
            }
            "full" => {
                c.fusion.mode = FusionMode::Af;
                c.ema.mode = EmaMode::Ada;
            }
            _ => {
                let mode = name.strip_prefix("metric_")?.parse().ok()?;
                c.fusion.mode = FusionMode::Af;
                c.ema.mode = EmaMode::Ada;
                c.metric_mode = mode;
            }
        }
        Some(c)
    }
}

/// Rows of the component ablation, in table order.
pub const ABLATION_ROWS: [&str; 6] = ["sup_only", "mt_ema", "mt_aema", "mt_ema_af_star", "mt_ema_af", "full"];

/// Rows of the metric ablation.
pub const METRIC_ROWS: [&str; 4] = ["metric_entropy", "metric_rebalance", "metric_confusion", "metric_uncertainty"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = TrainerConfig::default();
        assert_eq!(TrainerConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.entries().len(), KEYS.len());
    }

    #[test]
    fn edited_config_round_trips() {
        let mut cfg = TrainerConfig::default();
        cfg.apply_overrides(&[
            "seed=7",
            "ramp.w_max=10",
            "ramp.gamma=0.1",
            "ema.sign=literal",
            "ema.mode=off-teacher-equals-student",
            "fusion.mode=af_star",
            "fusion.invert_threshold=true",
            "metric.mode=confusion",
            "data.cluster_quadrant=2",
            "data.seed=123",
            "train.lr_min=0.00001",
            "data.val_fraction=0.16666666666666666",
        ])
        .unwrap();
        let text = cfg.to_text();
        assert!(text.contains("ramp.gamma = 0.1\n") && text.contains("ramp.w_max = 10\n"));
        assert_eq!(TrainerConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn comments_and_whitespace() {
        let cfg = TrainerConfig::parse("# header\n\n  seed = 3   # trailing\nfusion.mode=off\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.fusion.mode, FusionMode::Off);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainerConfig::parse("ramp.unknown = 1").is_err());
        assert!(TrainerConfig::parse("seed").is_err());
        assert!(TrainerConfig::parse("seed = -1").is_err());
        assert!(TrainerConfig::parse("train.confidence_threshold = 0.5").is_err());
        assert!(TrainerConfig::parse("fusion.ratio_lo = 0.9").is_err());
        assert!(TrainerConfig::parse("ema.mode = sometimes").is_err());
        assert!(TrainerConfig::parse("data.n_total = 10").is_err());
        let err = TrainerConfig::parse("a = 1\nbogus.key = 2").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn ablation_presets() {
        let base = TrainerConfig::default();
        let sup = base.ablation("sup_only").unwrap();
        assert_eq!(sup.ramp.w_max, 0.0);
        assert_eq!(sup.fusion.mode, FusionMode::Off);
        assert_eq!(base.ablation("mt_ema_af_star").unwrap().fusion.mode, FusionMode::AfStar);
        assert_eq!(base.ablation("metric_entropy").unwrap().metric_mode, MetricMode::Entropy);
        assert!(base.ablation("nonsense").is_none());
        for name in ABLATION_ROWS.iter().chain(&METRIC_ROWS) {
            assert!(base.ablation(name).is_some(), "{name}");
        }
    }
}

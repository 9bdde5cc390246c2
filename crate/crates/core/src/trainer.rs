//! The semi-supervised training loop.
//!
//! One iteration, in order:
//!
//! 1. Weak-augment the labeled batch (stream `AugLabeled`, batch order).
//! 2. If the teacher is needed (`lambda > 0` or the gated EMA is on), draw
//!    weak geometric transforms for the whole unlabeled batch (stream
//!    `AugUnlabeled`), pseudo-label each view with the teacher and score its
//!    uncertainty using the teacher's own batch class weights.
//! 3. If `lambda > 0`, draw photometric perturbations for the batch (same
//!    stream, batch order, after all geometric draws), fuse (stream `Fusion`)
//!    and accumulate the unsupervised gradient after the supervised one.
//!    Per-image supervised losses are means over labeled pixels; per-image
//!    unsupervised losses divide by the image size, so pixels below the
//!    confidence threshold contribute zero. Batch losses are image means.
//! 4. One SGD step with `L = L_s + lambda * L_u`.
//! 5. Teacher update: the gated mode compares the post-step student's
//!    uncertainty with the pre-update teacher's on the same weak views
//!    (stream `Gate`).
//!
//! Labeled batches are drawn from a reshuffled cycle over the labeled set
//! (stream `LabeledBatches`); each epoch is one shuffled pass over the
//! unlabeled set in batches, the last one possibly partial (stream
//! `UnlabeledBatches`). Streams are independent, so switching a component
//! off never changes the randomness seen by the others.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adaema::{gate_and_update, EmaMode, GateDecision, GATE_CSV_HEADER};
use crate::adafusion::{ada_fuse_batch, Donor, FusionDecision, FUSION_CSV_HEADER};
use crate::config::{EvalModel, TrainerConfig};
use crate::error::{Error, Result};
use crate::model::{
    accumulate_backward, ema_update, forward, predict, save_checkpoint, sgd_step, ModelParams,
    OptimizerState,
};
use crate::numerics::{
    confusion, iou_changed, oa, softmax, softmax_cross_entropy_grad, ConfusionCounts, LabelMask,
    ProbMap, Raster, CHANGED, IGNORE,
};
use crate::schedule::{lambda_weight, learning_rate, RampConfig};
use crate::synthdata::{make_splits, photometric_augment, weak_augment, DatasetSplit, ImagePair};
use crate::uncertainty::{batch_scores, sample_uncertainty, UncertaintyMap};

pub const METRICS_HEADER: &str = "iter,epoch,loss_s,loss_u,lambda,lr,val_iou_c,val_oa,mean_teacher_u,epsilon,tau,ema_updated,fusion_labeled_frac,pl_iou";

/// One metrics row. Absent values are written as empty fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRecord {
    pub iter: u64,
    pub epoch: usize,
    pub loss_s: Option<f64>,
    pub loss_u: Option<f64>,
    pub lambda: Option<f64>,
    pub lr: Option<f64>,
    pub val_iou_c: Option<f64>,
    pub val_oa: Option<f64>,
    pub mean_teacher_u: Option<f64>,
    pub epsilon: Option<f64>,
    pub tau: Option<f64>,
    pub ema_updated: Option<bool>,
    pub fusion_labeled_frac: Option<f64>,
    pub pl_iou: Option<f64>,
}

fn field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRecord {
    pub fn csv_line(&self) -> String {
        [
            self.iter.to_string(),
            self.epoch.to_string(),
            field(self.loss_s),
            field(self.loss_u),
            field(self.lambda),
            field(self.lr),
            field(self.val_iou_c),
            field(self.val_oa),
            field(self.mean_teacher_u),
            field(self.epsilon),
            field(self.tau),
            self.ema_updated.map(|u| u8::from(u).to_string()).unwrap_or_default(),
            field(self.fusion_labeled_frac),
            field(self.pl_iou),
        ]
        .join(",")
    }
}

/// Independent random streams derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    LabeledBatches = 2,
    UnlabeledBatches = 3,
    AugLabeled = 4,
    AugUnlabeled = 5,
    Fusion = 6,
    Gate = 7,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Debug)]
pub struct Streams {
    pub labeled_batches: ChaCha8Rng,
    pub unlabeled_batches: ChaCha8Rng,
    pub aug_labeled: ChaCha8Rng,
    pub aug_unlabeled: ChaCha8Rng,
    pub fusion: ChaCha8Rng,
    pub gate: ChaCha8Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Streams {
            labeled_batches: stream_rng(seed, Stream::LabeledBatches),
            unlabeled_batches: stream_rng(seed, Stream::UnlabeledBatches),
            aug_labeled: stream_rng(seed, Stream::AugLabeled),
            aug_unlabeled: stream_rng(seed, Stream::AugUnlabeled),
            fusion: stream_rng(seed, Stream::Fusion),
            gate: stream_rng(seed, Stream::Gate),
        }
    }
}

/// Initial student parameters for `seed`; the teacher starts as a copy.
pub fn init_params(seed: u64, image_channels: usize) -> ModelParams {
    ModelParams::init(image_channels, &mut stream_rng(seed, Stream::Init))
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub optimizer: OptimizerState,
    /// Completed iterations.
    pub iter: u64,
    pub streams: Streams,
}

impl TrainState {
    pub fn new(cfg: &TrainerConfig, image_channels: usize) -> Self {
        let student = init_params(cfg.seed, image_channels);
        TrainState {
            teacher: student.clone(),
            optimizer: OptimizerState::new(&student, cfg.train.momentum as f32),
            student,
            iter: 0,
            streams: Streams::new(cfg.seed),
        }
    }

    pub fn eval_params(&self, which: EvalModel) -> &ModelParams {
        match which {
            EvalModel::Teacher => &self.teacher,
            EvalModel::Student => &self.student,
        }
    }
}

/// Endless reshuffled cycle over `0..n`.
#[derive(Clone, Debug)]
pub struct LabeledSampler {
    n: usize,
    order: Vec<usize>,
    pos: usize,
}

impl LabeledSampler {
    pub fn new(n: usize) -> Self {
        LabeledSampler { n, order: Vec::new(), pos: 0 }
    }

    pub fn next_batch(&mut self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch && self.n > 0 {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// One shuffled pass over `0..n` in batches of `batch`.
pub fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Iterations per epoch: one pass over the unlabeled set, or over the
/// labeled set when there is no unlabeled data.
pub fn iters_per_epoch(n_labeled: usize, n_unlabeled: usize, cfg: &TrainerConfig) -> u64 {
    let (n, b) = if n_unlabeled > 0 {
        (n_unlabeled, cfg.train.batch_unlabeled)
    } else {
        (n_labeled, cfg.train.batch_labeled)
    };
    n.div_ceil(b.max(1)) as u64
}

/// Teacher argmax with pixels below `threshold` confidence set to IGNORE.
pub fn pseudo_label(teacher: &ModelParams, weak: &ImagePair, threshold: f64) -> Result<(LabelMask, ProbMap)> {
    let probs = softmax(&predict(teacher, weak)?)?;
    let mut mask = probs.argmax();
    for (l, p) in mask.labels.iter_mut().zip(&probs.probs) {
        if (p[0].max(p[1]) as f64) < threshold {
            *l = IGNORE;
        }
    }
    Ok((mask, probs))
}

pub fn predict_mask(params: &ModelParams, pair: &ImagePair) -> Result<LabelMask> {
    Ok(softmax(&predict(params, pair)?)?.argmax())
}

/// IoU of the changed class and overall accuracy from confusion counts
/// aggregated over the whole set.
pub fn evaluate(params: &ModelParams, val: &[ImagePair]) -> Result<(f64, f64, ConfusionCounts)> {
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let mut total = ConfusionCounts::default();
    for pair in val {
        let truth = pair
            .truth
            .as_ref()
            .ok_or(Error::InvalidArgument("validation pair without mask".into()))?;
        total += confusion(&predict_mask(params, pair)?, truth)?;
    }
    Ok((iou_changed(&total), oa(&total), total))
}

/// Changed-class IoU of confident pseudo-labels against withheld masks.
pub fn pseudo_label_iou(teacher: &ModelParams, pairs: &[ImagePair], truth: &[LabelMask], threshold: f64) -> Result<f64> {
    let mut c = ConfusionCounts::default();
    for (pair, t) in pairs.iter().zip(truth) {
        let (pl, _) = pseudo_label(teacher, pair, threshold)?;
        for (&p, &g) in pl.labels.iter().zip(&t.labels) {
            if p == IGNORE || g == IGNORE {
                continue;
            }
            match (p == CHANGED, g == CHANGED) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    Ok(iou_changed(&c))
}

/// Per-iteration results besides the metrics row.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub record: MetricsRecord,
    pub fusion: Vec<FusionDecision>,
    pub gate: Option<GateDecision>,
}

struct TeacherView {
    weak: Vec<ImagePair>,
    pseudo: Vec<LabelMask>,
    maps: Vec<UncertaintyMap>,
    scores: Vec<f64>,
}

fn teacher_view(state: &mut TrainState, unlabeled: &[ImagePair], cfg: &TrainerConfig) -> Result<TeacherView> {
    let weak: Vec<ImagePair> = unlabeled
        .iter()
        .map(|p| weak_augment(p, &mut state.streams.aug_unlabeled))
        .collect();
    let mut pseudo = Vec::with_capacity(weak.len());
    let mut probs = Vec::with_capacity(weak.len());
    for w in &weak {
        let (m, p) = pseudo_label(&state.teacher, w, cfg.train.confidence_threshold)?;
        pseudo.push(m);
        probs.push(p);
    }
    let (_, maps) = batch_scores(&probs, cfg.metric_mode)?;
    let scores = maps.iter().map(sample_uncertainty).collect();
    Ok(TeacherView { weak, pseudo, maps, scores })
}

/// How a per-image cross-entropy is averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Reduction {
    /// Mean over the pixels that carry a label.
    Labeled,
    /// Sum over labeled pixels divided by the image size, so pixels masked
    /// out by the confidence threshold count as zero loss.
    Image,
}

/// Adds `scale`-weighted cross-entropy gradients of each image into `grads`
/// and returns the mean per-image loss.
fn supervised_pass(
    params: &ModelParams,
    pairs: &[ImagePair],
    targets: &[&LabelMask],
    scale: f32,
    reduction: Reduction,
    grads: &mut ModelParams,
) -> Result<f64> {
    let mut total = 0.0f64;
    for (pair, target) in pairs.iter().zip(targets) {
        let (logits, cache) = forward(params, pair)?;
        let mut dlogits = Raster::zeros(logits.height, logits.width, logits.channels);
        let frac = match reduction {
            Reduction::Labeled => 1.0,
            Reduction::Image => {
                target.labels.iter().filter(|&&t| t != IGNORE).count() as f32 / target.labels.len() as f32
            }
        };
        let loss = softmax_cross_entropy_grad(&logits, target, scale * frac, &mut dlogits)? * frac;
        accumulate_backward(params, &cache, &dlogits, grads)?;
        total += loss as f64;
    }
    Ok(total / pairs.len().max(1) as f64)
}

/// One training iteration; see the module docs for the exact order.
///
/// `labeled` pairs must carry masks and `unlabeled` pairs must not.
/// `ramp.iter_total` and `iter_total` describe the whole run.
pub fn train_step(
    state: &mut TrainState,
    labeled: &[ImagePair],
    unlabeled: &[ImagePair],
    cfg: &TrainerConfig,
    ramp: &RampConfig,
    iter_total: u64,
) -> Result<StepOutput> {
    let iter = state.iter + 1;
    step_inner(state, labeled, unlabeled, cfg, ramp, iter_total).map_err(|e| match e {
        Error::NonFinite { index } => Error::NumericAbort { iter, reason: format!("non-finite activation at element {index}") },
        e => e,
    })
}

fn step_inner(
    state: &mut TrainState,
    labeled: &[ImagePair],
    unlabeled: &[ImagePair],
    cfg: &TrainerConfig,
    ramp: &RampConfig,
    iter_total: u64,
) -> Result<StepOutput> {
    if labeled.is_empty() {
        return Err(Error::Empty("labeled batch"));
    }
    if unlabeled.iter().any(|p| p.truth.is_some()) {
        return Err(Error::InvalidArgument("unlabeled pair carries a mask".into()));
    }
    let t = state.iter;
    let iter = t + 1;
    let lambda = lambda_weight(t, ramp);
    let lr = learning_rate(t, iter_total, cfg.train.lr0, cfg.train.lr_min);

    let lab: Vec<ImagePair> = labeled
        .iter()
        .map(|p| weak_augment(p, &mut state.streams.aug_labeled))
        .collect();
    let unsup = lambda > 0.0 && !unlabeled.is_empty();
    let gated = cfg.ema.mode == EmaMode::Ada && !unlabeled.is_empty();
    let view = if unsup || gated {
        Some(teacher_view(state, unlabeled, cfg)?)
    } else {
        None
    };

    let mut grads = state.student.zeros_like();
    let truths: Vec<&LabelMask> = lab
        .iter()
        .map(|p| p.truth.as_ref().ok_or(Error::InvalidArgument("labeled pair without mask".into())))
        .collect::<Result<_>>()?;
    let loss_s = supervised_pass(&state.student, &lab, &truths, 1.0 / lab.len() as f32, Reduction::Labeled, &mut grads)?;

    let mut loss_u = None;
    let mut decisions = Vec::new();
    if let (true, Some(v)) = (unsup, view.as_ref()) {
        let strong: Vec<ImagePair> = v
            .weak
            .iter()
            .map(|p| photometric_augment(p, &mut state.streams.aug_unlabeled))
            .collect();
        let fused = ada_fuse_batch(&strong, &v.pseudo, &v.maps, &v.scores, &lab, &cfg.fusion, &mut state.streams.fusion)?;
        decisions = fused.decisions;
        let targets: Vec<&LabelMask> = fused.labels.iter().collect();
        let scale = (lambda / fused.pairs.len() as f64) as f32;
        loss_u = Some(supervised_pass(&state.student, &fused.pairs, &targets, scale, Reduction::Image, &mut grads)?);
    }

    let total = loss_s + lambda * loss_u.unwrap_or(0.0);
    if !total.is_finite() || !grads.is_finite() {
        return Err(Error::NumericAbort {
            iter,
            reason: format!("loss_s = {loss_s}, loss_u = {loss_u:?}, lambda = {lambda}"),
        });
    }
    sgd_step(&mut state.student, &grads, &mut state.optimizer, lr as f32);
    if !state.student.is_finite() {
        return Err(Error::NumericAbort { iter, reason: "non-finite student parameters".into() });
    }

    let gate = match (&view, cfg.ema.mode) {
        (Some(v), EmaMode::Ada) => {
            let mut probs = Vec::with_capacity(v.weak.len());
            for w in &v.weak {
                probs.push(softmax(&predict(&state.student, w)?)?);
            }
            let (_, maps_stu) = batch_scores(&probs, cfg.metric_mode)?;
            gate_and_update(&mut state.teacher, &state.student, &maps_stu, &v.maps, iter, &cfg.ema, &mut state.streams.gate)?
        }
        (None, EmaMode::Ada) => {
            // no unlabeled batch to compare on: plain EMA step
            ema_update(&mut state.teacher, &state.student, cfg.ema.beta);
            GateDecision { epsilon: None, tau: 1.0, rng_draw: None, updated: true }
        }
        _ => gate_and_update(&mut state.teacher, &state.student, &[], &[], iter, &cfg.ema, &mut state.streams.gate)?,
    };
    state.iter = iter;

    let labeled_frac = (!decisions.is_empty()).then(|| {
        let n = decisions.iter().filter(|d| matches!(d.donor, Donor::Labeled(_))).count();
        n as f64 / decisions.len() as f64
    });
    let record = MetricsRecord {
        iter,
        loss_s: Some(loss_s),
        loss_u,
        lambda: Some(lambda),
        lr: Some(lr),
        mean_teacher_u: view
            .as_ref()
            .map(|v| v.scores.iter().sum::<f64>() / v.scores.len() as f64),
        epsilon: gate.epsilon,
        tau: Some(gate.tau),
        ema_updated: Some(gate.updated),
        fusion_labeled_frac: labeled_frac,
        ..Default::default()
    };
    Ok(StepOutput { record, fusion: decisions, gate: Some(gate) })
}

/// Line-per-write CSV logs; every row reaches the file before the next
/// iteration starts, so an abort leaves complete rows behind.
struct Sink {
    metrics: Option<File>,
    fusion: Option<File>,
    gate: Option<File>,
}

fn create(path: PathBuf, header: &str) -> Result<File> {
    let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{header}").map_err(|e| Error::io(&path, e))?;
    Ok(f)
}

fn write_line(f: &mut Option<File>, line: &str) -> Result<()> {
    if let Some(f) = f {
        writeln!(f, "{line}").map_err(|e| Error::io("log file", e))?;
    }
    Ok(())
}

impl Sink {
    fn new(dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Sink { metrics: None, fusion: None, gate: None });
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Sink {
            metrics: Some(create(dir.join("metrics.csv"), METRICS_HEADER)?),
            fusion: Some(create(dir.join("fusion.csv"), FUSION_CSV_HEADER)?),
            gate: Some(create(dir.join("gate.csv"), GATE_CSV_HEADER)?),
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub final_iou_c: f64,
    pub final_oa: f64,
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub iterations: u64,
}

/// Dataset described by the configuration.
pub fn build_dataset(cfg: &TrainerConfig) -> Result<DatasetSplit> {
    let d = &cfg.data;
    make_splits(
        &d.scene_spec(cfg.seed),
        d.n_total,
        d.label_ratio,
        d.val_fraction,
        d.resolved_split_seed(cfg.seed),
    )
}

/// Full training run. Writes `metrics.csv`, `fusion.csv`, `gate.csv`,
/// `config.resolved`, `student.ckpt` and `teacher.ckpt` into `out_dir`
/// when given. `data` overrides the generated dataset.
pub fn run(cfg: &TrainerConfig, data: Option<DatasetSplit>, out_dir: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let data = match data {
        Some(d) => d,
        None => build_dataset(cfg)?,
    };
    if data.labeled.is_empty() {
        return Err(Error::Empty("labeled set"));
    }
    let channels = data.labeled[0].a.channels;
    let per_epoch = iters_per_epoch(data.labeled.len(), data.unlabeled.len(), cfg);
    let iter_total = per_epoch * cfg.train.epochs as u64;
    let ramp = RampConfig { iter_total: iter_total.max(1), ..cfg.ramp };

    let mut sink = Sink::new(out_dir)?;
    if let Some(dir) = out_dir {
        let path = dir.join("config.resolved");
        fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))?;
    }
    let unlabeled = data.unlabeled_inputs();
    let n_pl = cfg.pl_iou_samples.min(data.unlabeled.len());
    // masks withheld from training are read only here, for logging
    let pl_truth: Vec<LabelMask> = data.withheld_truth().into_iter().take(n_pl).collect();
    let pl_pairs = &unlabeled[..n_pl];

    let mut state = TrainState::new(cfg, channels);
    let mut sampler = LabeledSampler::new(data.labeled.len());
    let mut records = Vec::new();

    let epoch_end = |state: &TrainState, rec: &mut MetricsRecord| -> Result<()> {
        let (iou, acc, _) = evaluate(state.eval_params(cfg.train.eval_model), &data.val)?;
        rec.val_iou_c = Some(iou);
        rec.val_oa = Some(acc);
        if n_pl > 0 {
            rec.pl_iou = Some(pseudo_label_iou(&state.teacher, pl_pairs, &pl_truth, cfg.train.confidence_threshold)?);
        }
        Ok(())
    };

    let mut rec0 = MetricsRecord::default();
    epoch_end(&state, &mut rec0)?;
    write_line(&mut sink.metrics, &rec0.csv_line())?;
    records.push(rec0);

    for epoch in 1..=cfg.train.epochs {
        let batches = if unlabeled.is_empty() {
            vec![Vec::new(); per_epoch as usize]
        } else {
            epoch_batches(unlabeled.len(), cfg.train.batch_unlabeled, &mut state.streams.unlabeled_batches)
        };
        let last = batches.len().saturating_sub(1);
        for (bi, ub) in batches.iter().enumerate() {
            let li = sampler.next_batch(cfg.train.batch_labeled, &mut state.streams.labeled_batches);
            let lab: Vec<ImagePair> = li.iter().map(|&i| data.labeled[i].clone()).collect();
            let unl: Vec<ImagePair> = ub.iter().map(|&i| unlabeled[i].clone()).collect();
            let out = train_step(&mut state, &lab, &unl, cfg, &ramp, iter_total)?;
            let mut rec = out.record;
            rec.epoch = epoch;
            if bi == last {
                epoch_end(&state, &mut rec)?;
            }
            write_line(&mut sink.metrics, &rec.csv_line())?;
            for d in &out.fusion {
                write_line(&mut sink.fusion, &d.csv_line(rec.iter))?;
            }
            if let Some(g) = &out.gate {
                write_line(&mut sink.gate, &g.csv_line(rec.iter))?;
            }
            records.push(rec);
        }
    }

    let last = records.last().expect("initial evaluation row");
    let (final_iou_c, final_oa) = (last.val_iou_c.unwrap_or(0.0), last.val_oa.unwrap_or(0.0));
    if let Some(dir) = out_dir {
        save_checkpoint(&state.student, &dir.join("student.ckpt"))?;
        save_checkpoint(&state.teacher, &dir.join("teacher.ckpt"))?;
    }
    Ok(RunOutput {
        records,
        final_iou_c,
        final_oa,
        student: state.student,
        teacher: state.teacher,
        iterations: state.iter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adafusion::FusionMode;
    use crate::model::ModelParams;
    use crate::numerics::UNCHANGED;
    use crate::synthdata::{generate_pair, SceneSpec};
    use rand::Rng;

    fn bias_only(p0: f64) -> ModelParams {
        let mut m = ModelParams::zeros(1);
        m.head.bias = vec![p0.ln() as f32, (1.0 - p0).ln() as f32];
        m
    }

    fn flat_pair(h: usize, w: usize) -> ImagePair {
        ImagePair { a: Raster::zeros(h, w, 1), b: Raster::zeros(h, w, 1), truth: None }
    }

    #[test]
    fn pseudo_label_examples() {
        let pair = flat_pair(3, 4);
        let (m, _) = pseudo_label(&bias_only(0.99), &pair, 0.95).unwrap();
        assert!(m.labels.iter().all(|&l| l == UNCHANGED));
        let (m, _) = pseudo_label(&bias_only(0.6), &pair, 0.95).unwrap();
        assert!(m.labels.iter().all(|&l| l == IGNORE));
        let (m, _) = pseudo_label(&bias_only(0.6), &pair, 0.5).unwrap();
        assert!(m.labels.iter().all(|&l| l == UNCHANGED));
    }

    /// Network whose changed logit is `10 |a - b| - 5`.
    fn difference_detector() -> ModelParams {
        let mut m = ModelParams::zeros(1);
        m.conv1.weight[4] = 1.0; // centre tap of the |a - b| channel into hidden 0
        m.conv2.weight[4] = 1.0; // hidden 0 -> hidden 0, centre tap
        m.head.weight[16] = 10.0; // hidden 0 -> changed logit
        m.head.bias[1] = -5.0;
        m
    }

    #[test]
    fn evaluate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (h, w) = (8, 9);
        let mut val = Vec::new();
        for _ in 0..3 {
            let labels: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..2)).collect();
            let b = Raster::from_vec(h, w, 1, labels.iter().map(|&l| l as f32).collect()).unwrap();
            val.push(ImagePair { a: Raster::zeros(h, w, 1), b, truth: Some(LabelMask::new(h, w, labels).unwrap()) });
        }
        let (iou, acc, _) = evaluate(&difference_detector(), &val).unwrap();
        assert_eq!((iou, acc), (1.0, 1.0));

        let none = vec![ImagePair { truth: Some(LabelMask::filled(h, w, UNCHANGED)), ..flat_pair(h, w) }];
        assert_eq!(evaluate(&difference_detector(), &none).unwrap().0, 1.0);
        assert!(evaluate(&difference_detector(), &[]).is_err());
    }

    #[test]
    fn evaluate_matches_per_pixel_count() {
        let spec = SceneSpec { height: 12, width: 10, seed: 3, ..Default::default() };
        let val: Vec<ImagePair> = (0..4).map(|i| generate_pair(&spec, i)).collect();
        let params = init_params(9, 3);
        let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
        for pair in &val {
            let logits = predict(&params, pair).unwrap();
            let truth = pair.truth.as_ref().unwrap();
            let n = logits.pixels();
            for i in 0..n {
                let p = softmax(&logits).unwrap().probs[i];
                let pred = p[1] > p[0];
                match (pred, truth.labels[i] == CHANGED) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => tn += 1,
                }
            }
        }
        let (iou, acc, c) = evaluate(&params, &val).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (tp, fp, fn_, tn));
        let want = if tp + fp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fp + fn_) as f64 };
        assert_eq!(iou, want);
        assert_eq!(acc, (tp + tn) as f64 / (tp + fp + fn_ + tn) as f64);
    }

    fn tiny_config() -> TrainerConfig {
        let mut cfg = TrainerConfig::default();
        cfg.apply_overrides(&[
            "data.height=12",
            "data.width=12",
            "data.n_total=20",
            "data.label_ratio=0.25",
            "train.epochs=2",
            "train.batch_labeled=2",
            "train.batch_unlabeled=3",
            "seed=5",
        ])
        .unwrap();
        cfg
    }

    #[test]
    fn samplers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = LabeledSampler::new(3);
        let drawn: Vec<usize> = (0..4).flat_map(|_| s.next_batch(3, &mut rng)).collect();
        for chunk in drawn.chunks(3) {
            let mut c = chunk.to_vec();
            c.sort();
            assert_eq!(c, vec![0, 1, 2]);
        }
        let b = epoch_batches(10, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn run_is_deterministic_and_logs_every_iteration() {
        let cfg = tiny_config();
        let a = run(&cfg, None, None).unwrap();
        let b = run(&cfg, None, None).unwrap();
        assert_eq!(a.records, b.records);
        // 16 train pairs, 4 labeled, 12 unlabeled in batches of 3
        assert_eq!(a.iterations, 8);
        assert_eq!(a.records.len(), 9);
        assert!(a.records[4].val_iou_c.is_some() && a.records[3].val_iou_c.is_none());
        for r in &a.records[1..] {
            assert!(r.loss_s.unwrap() >= 0.0 && r.loss_u.unwrap() >= 0.0);
            assert!(r.epsilon.is_some());
        }
    }

    #[test]
    fn zero_epochs_evaluates_initial_model() {
        let mut cfg = tiny_config();
        cfg.train.epochs = 0;
        let out = run(&cfg, None, None).unwrap();
        assert_eq!(out.records.len(), 1);
        let data = build_dataset(&cfg).unwrap();
        let (iou, acc, _) = evaluate(&init_params(cfg.seed, 3), &data.val).unwrap();
        assert_eq!((out.final_iou_c, out.final_oa), (iou, acc));
    }

    #[test]
    fn fully_ignored_pseudo_labels_leave_supervised_gradient() {
        let mut cfg = tiny_config();
        cfg.fusion.mode = FusionMode::Off;
        cfg.ema.mode = EmaMode::Plain;
        cfg.train.confidence_threshold = 1.0;
        let data = build_dataset(&cfg).unwrap();
        let unl = data.unlabeled_inputs();
        let ramp = RampConfig { iter_total: 10, ..cfg.ramp };

        let mut with_u = TrainState::new(&cfg, 3);
        let out = train_step(&mut with_u, &data.labeled[..2], &unl[..3], &cfg, &ramp, 10).unwrap();
        assert_eq!(out.record.loss_u, Some(0.0));

        let mut sup_cfg = cfg.clone();
        sup_cfg.ramp.w_max = 0.0;
        let sup_ramp = RampConfig { w_max: 0.0, ..ramp };
        let mut without = TrainState::new(&sup_cfg, 3);
        let out = train_step(&mut without, &data.labeled[..2], &unl[..3], &sup_cfg, &sup_ramp, 10).unwrap();
        assert_eq!(out.record.loss_u, None);
        assert_eq!(with_u.student, without.student);
    }

    #[test]
    fn unlabeled_masks_are_rejected() {
        let cfg = tiny_config();
        let data = build_dataset(&cfg).unwrap();
        let mut state = TrainState::new(&cfg, 3);
        let ramp = RampConfig { iter_total: 10, ..cfg.ramp };
        let err = train_step(&mut state, &data.labeled[..1], &data.unlabeled[..1], &cfg, &ramp, 10);
        assert!(err.is_err());
    }

    #[test]
    fn run_writes_artifacts() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let out = run(&cfg, None, Some(dir.path())).unwrap();
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), out.records.len() + 1);
        assert_eq!(csv.lines().next().unwrap(), METRICS_HEADER);
        let resolved = fs::read_to_string(dir.path().join("config.resolved")).unwrap();
        assert_eq!(TrainerConfig::parse(&resolved).unwrap(), cfg);
        let teacher = crate::model::load_checkpoint(&dir.path().join("teacher.ckpt")).unwrap();
        assert_eq!(teacher, out.teacher);
        assert!(fs::read_to_string(dir.path().join("fusion.csv")).unwrap().lines().count() > 1);
    }
}

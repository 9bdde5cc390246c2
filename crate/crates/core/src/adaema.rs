//! Gated teacher updates.
//!
//! After each student step the batch uncertainty of the student is compared
//! with that of the teacher on the same weak-augmented unlabeled batch. If
//! the student improved, the teacher takes the usual EMA step; otherwise the
//! step happens only with probability `1 / (iter^2 + eps)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{ema_update, ModelParams};
use crate::uncertainty::UncertaintyMap;

/// Sign convention for the uncertainty delta.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SignMode {
    /// `(sum U_stu - sum U_tea) / |B_u|`.
    Literal,
    /// Negated, so a positive delta means the student became more certain.
    #[default]
    Prose,
}

impl SignMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SignMode::Literal => "literal",
            SignMode::Prose => "prose",
        }
    }
}

impl fmt::Display for SignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(SignMode::Literal),
            "prose" => Ok(SignMode::Prose),
            _ => Err(Error::Config(format!("unknown sign mode `{s}` (literal, prose)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EmaMode {
    /// Uncertainty-gated EMA.
    #[default]
    Ada,
    /// EMA every iteration.
    Plain,
    /// Teacher replaced by the student every iteration.
    Copy,
}

impl EmaMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EmaMode::Ada => "ada",
            EmaMode::Plain => "plain",
            EmaMode::Copy => "off-teacher-equals-student",
        }
    }
}

impl fmt::Display for EmaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ada" => Ok(EmaMode::Ada),
            "plain" => Ok(EmaMode::Plain),
            "off-teacher-equals-student" | "copy" => Ok(EmaMode::Copy),
            _ => Err(Error::Config(format!(
                "unknown ema mode `{s}` (ada, plain, off-teacher-equals-student)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmaGateConfig {
    pub beta: f64,
    pub epsilon_small: f64,
    pub sign_mode: SignMode,
    pub mode: EmaMode,
}

impl Default for EmaGateConfig {
    fn default() -> Self {
        EmaGateConfig {
            beta: 0.996,
            epsilon_small: 1e-5,
            sign_mode: SignMode::Prose,
            mode: EmaMode::Ada,
        }
    }
}

impl EmaGateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("ema.beta = {} not in [0, 1]", self.beta)));
        }
        if !(self.epsilon_small > 0.0 && self.epsilon_small.is_finite()) {
            return Err(Error::Config(format!("ema.epsilon = {} must be > 0", self.epsilon_small)));
        }
        Ok(())
    }
}

/// Outcome of one gate evaluation. `epsilon` and `rng_draw` are absent when
/// no gate was evaluated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateDecision {
    pub epsilon: Option<f64>,
    pub tau: f64,
    pub rng_draw: Option<f64>,
    pub updated: bool,
}

pub const GATE_CSV_HEADER: &str = "iter,epsilon,tau,draw,updated";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl GateDecision {
    pub fn csv_line(&self, iter: u64) -> String {
        format!(
            "{iter},{},{},{},{}",
            opt(self.epsilon),
            self.tau,
            opt(self.rng_draw),
            u8::from(self.updated)
        )
    }
}

fn total(maps: &[UncertaintyMap]) -> f64 {
    maps.iter()
        .flat_map(|m| m.values.iter())
        .map(|&v| v as f64)
        .sum()
}

/// Batch-mean difference of summed uncertainty between student and teacher.
pub fn uncertainty_delta(
    u_stu: &[UncertaintyMap],
    u_tea: &[UncertaintyMap],
    sign: SignMode,
) -> Result<f64> {
    if u_stu.len() != u_tea.len() {
        return Err(Error::dims(u_tea.len(), u_stu.len()));
    }
    if u_stu.is_empty() {
        return Err(Error::Empty("unlabeled batch"));
    }
    for (s, t) in u_stu.iter().zip(u_tea) {
        if s.height != t.height || s.width != t.width {
            return Err(Error::dims(
                format!("{}x{}", t.height, t.width),
                format!("{}x{}", s.height, s.width),
            ));
        }
    }
    let literal = (total(u_stu) - total(u_tea)) / u_stu.len() as f64;
    Ok(match sign {
        SignMode::Literal => literal,
        SignMode::Prose => -literal,
    })
}

/// `1` when `epsilon > 0`, else `min(1, 1 / (iter^2 + epsilon_small))`.
pub fn update_probability(epsilon: f64, iter: u64, epsilon_small: f64) -> f64 {
    if epsilon > 0.0 {
        return 1.0;
    }
    let it = iter as f64;
    (1.0 / (it * it + epsilon_small)).min(1.0)
}

/// Applies the configured teacher update for 1-based iteration `iter`.
///
/// In [`EmaMode::Ada`] a uniform draw `r` in `[0, 1)` is taken and the EMA
/// step applied iff `r < tau`. The other modes ignore the uncertainty maps
/// and consume no randomness.
pub fn gate_and_update<R: Rng + ?Sized>(
    teacher: &mut ModelParams,
    student: &ModelParams,
    u_stu: &[UncertaintyMap],
    u_tea: &[UncertaintyMap],
    iter: u64,
    cfg: &EmaGateConfig,
    rng: &mut R,
) -> Result<GateDecision> {
    if !teacher.same_shape(student) {
        return Err(Error::dims("teacher shape", "student shape"));
    }
    match cfg.mode {
        EmaMode::Plain => {
            ema_update(teacher, student, cfg.beta);
            Ok(GateDecision { epsilon: None, tau: 1.0, rng_draw: None, updated: true })
        }
        EmaMode::Copy => {
            teacher.clone_from(student);
            Ok(GateDecision { epsilon: None, tau: 1.0, rng_draw: None, updated: true })
        }
        EmaMode::Ada => {
            let epsilon = uncertainty_delta(u_stu, u_tea, cfg.sign_mode)?;
            let tau = update_probability(epsilon, iter, cfg.epsilon_small);
            let r: f64 = rng.random();
            let updated = r < tau;
            if updated {
                ema_update(teacher, student, cfg.beta);
            }
            Ok(GateDecision { epsilon: Some(epsilon), tau, rng_draw: Some(r), updated })
        }
    }
}

//! Training objectives: the per-modality image-text contrastive loss, the
//! cross-encoder text MSE, the balanced binding objective, and the two
//! distillation terms.
//!
//! Contrastive losses are sums over the batch. Callers that want a per-sample
//! scale (the trainer does) divide by the batch size themselves.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 10.0;
const UNIT_NORM_TOL: f64 = 1e-6;

/// Softmax temperature. When learnable, the trainer optimizes `ln(tau)` and
/// clamps the result into `[TAU_MIN, TAU_MAX]` after every step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub tau: f64,
    #[serde(default)]
    pub learnable: bool,
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature {
            tau: 0.07,
            learnable: false,
        }
    }
}

impl Temperature {
    pub fn fixed(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
        }
        Ok(Temperature {
            tau,
            learnable: false,
        })
    }

    pub fn clamped(tau: f64) -> f64 {
        tau.clamp(TAU_MIN, TAU_MAX)
    }
}

/// How a temperature enters a tape: as a constant or as a tracked `ln(tau)`.
#[derive(Clone, Copy, Debug)]
pub enum TauInput {
    Fixed(f64),
    LogParam(Var),
}

impl From<Temperature> for TauInput {
    fn from(t: Temperature) -> Self {
        TauInput::Fixed(t.tau)
    }
}

fn check_unit_rows(tape: &Tape, v: Var, what: &str) -> Result<()> {
    for (i, n) in tape.value(v).row_norms().into_iter().enumerate() {
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::InvalidArgument(format!(
                "{what} row {i} has norm {n}, expected unit norm"
            )));
        }
    }
    Ok(())
}

fn check_pair(tape: &Tape, a: Var, b: Var, op: &'static str) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != 2 || sa != sb {
        return Err(Error::shape(op, sa, sb));
    }
    check_unit_rows(tape, a, op)?;
    check_unit_rows(tape, b, op)
}

fn scale_by_inverse_tau(tape: &mut Tape, sims: Var, tau: TauInput) -> Result<Var> {
    match tau {
        TauInput::Fixed(t) => {
            if !(t > 0.0) {
                return Err(Error::InvalidArgument(format!("temperature must be positive, got {t}")));
            }
            tape.scale(sims, 1.0 / t)
        }
        TauInput::LogParam(log_tau) => {
            let neg = tape.scale(log_tau, -1.0)?;
            let inv = tape.exp(neg)?;
            tape.mul_scalar(sims, inv)
        }
    }
}

/// `-Σᵢ log softmaxⱼ(⟨anchorᵢ, candⱼ⟩ / τ)[i]`: each anchor row against every
/// candidate row, with row `i` of each forming the positive pair.
pub fn info_nce(tape: &mut Tape, anchors: Var, candidates: Var, tau: TauInput) -> Result<Var> {
    let sims = tape.matmul_nt(anchors, candidates)?;
    let logits = scale_by_inverse_tau(tape, sims, tau)?;
    let logp = tape.log_softmax_rows(logits)?;
    let n = tape.shape(anchors)[0];
    let diag: Vec<usize> = (0..n).collect();
    let pos = tape.pick_per_row(logp, &diag)?;
    let total = tape.sum(pos)?;
    tape.scale(total, -1.0)
}

/// Image→text contrastive loss over a batch of matched unit-norm rows. With
/// `symmetric`, the mean of the image→text and text→image directions.
pub fn clip_contrastive_loss(
    tape: &mut Tape,
    img: Var,
    txt: Var,
    tau: TauInput,
    symmetric: bool,
) -> Result<Var> {
    check_pair(tape, img, txt, "clip_contrastive_loss")?;
    let i2t = info_nce(tape, img, txt, tau)?;
    if !symmetric {
        return Ok(i2t);
    }
    let t2i = info_nce(tape, txt, img, tau)?;
    let both = tape.add(i2t, t2i)?;
    tape.scale(both, 0.5)
}

/// Unordered pair of modality ids, stored in sorted order.
pub type ModalityPair = (String, String);

pub fn pair_key(a: &str, b: &str) -> ModalityPair {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// MSE between every unordered pair of text-encoder outputs for the same
/// batch of texts.
pub fn pairwise_text_mse(
    tape: &mut Tape,
    embeds: &BTreeMap<String, Var>,
) -> Result<BTreeMap<ModalityPair, Var>> {
    let entries: Vec<(&String, &Var)> = embeds.iter().collect();
    if let Some((_, first)) = entries.first() {
        for (_, v) in &entries[1..] {
            if tape.shape(**v) != tape.shape(**first) {
                return Err(Error::shape("pairwise_text_mse", tape.shape(**first), tape.shape(**v)));
            }
        }
    }
    let mut out = BTreeMap::new();
    for i in 0..entries.len() {
        for j in i + 1..entries.len() {
            let l = tape.mse(*entries[i].1, *entries[j].1)?;
            out.insert(pair_key(entries[i].0, entries[j].0), l);
        }
    }
    Ok(out)
}

/// Terms of the binding objective for one step, as they entered the total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BindLossReport {
    pub per_modality_clip: BTreeMap<String, f64>,
    /// Keyed `"a|b"` with `a < b`.
    pub per_pair_mse: BTreeMap<String, f64>,
    pub total: f64,
    pub weights_used: BTreeMap<String, f64>,
    pub lambda: f64,
    pub pair_weighted: bool,
}

impl BindLossReport {
    /// Total rebuilt from the stored parts.
    pub fn recompute_total(&self) -> Result<f64> {
        let clip: BTreeMap<String, f64> = self.per_modality_clip.clone();
        let mse = self
            .per_pair_mse
            .iter()
            .map(|(k, v)| {
                let (a, b) = k
                    .split_once('|')
                    .ok_or_else(|| Error::InvalidArgument(format!("bad pair key '{k}'")))?;
                Ok((pair_key(a, b), *v))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(total_bind_loss(&clip, &mse, &self.weights_used, self.lambda, self.pair_weighted)?.total)
    }
}

fn weight_of(weights: &BTreeMap<String, f64>, m: &str) -> Result<f64> {
    weights
        .get(m)
        .copied()
        .ok_or_else(|| Error::MissingWeight(m.to_string()))
}

/// `Σ_m w_m·L_clip(m) + λ·Σ_{pairs} w_a·w_b·L_mse(a,b)` over unordered pairs.
/// With `pair_weighted = false` the pair terms are summed unweighted.
pub fn total_bind_loss(
    clip: &BTreeMap<String, f64>,
    mse: &BTreeMap<ModalityPair, f64>,
    weights: &BTreeMap<String, f64>,
    lambda: f64,
    pair_weighted: bool,
) -> Result<BindLossReport> {
    let mut total = 0.0;
    for (m, l) in clip {
        total += weight_of(weights, m)? * l;
    }
    let mut pair_sum = 0.0;
    for ((a, b), l) in mse {
        let w = if pair_weighted {
            weight_of(weights, a)? * weight_of(weights, b)?
        } else {
            weight_of(weights, a)?;
            weight_of(weights, b)?;
            1.0
        };
        pair_sum += w * l;
    }
    total += lambda * pair_sum;
    Ok(BindLossReport {
        per_modality_clip: clip.clone(),
        per_pair_mse: mse.iter().map(|((a, b), v)| (format!("{a}|{b}"), *v)).collect(),
        total,
        weights_used: weights.clone(),
        lambda,
        pair_weighted,
    })
}

/// Tape version of [`total_bind_loss`]; returns the scalar node and the
/// report of its values.
pub fn bind_objective(
    tape: &mut Tape,
    clip: &BTreeMap<String, Var>,
    mse: &BTreeMap<ModalityPair, Var>,
    weights: &BTreeMap<String, f64>,
    lambda: f64,
    pair_weighted: bool,
) -> Result<(Var, BindLossReport)> {
    let clip_vals: BTreeMap<String, f64> =
        clip.iter().map(|(m, v)| (m.clone(), tape.value(*v).item())).collect();
    let mse_vals: BTreeMap<ModalityPair, f64> =
        mse.iter().map(|(p, v)| (p.clone(), tape.value(*v).item())).collect();
    let report = total_bind_loss(&clip_vals, &mse_vals, weights, lambda, pair_weighted)?;

    let mut terms = Vec::new();
    for (m, v) in clip {
        terms.push(tape.scale(*v, weight_of(weights, m)?)?);
    }
    for ((a, b), v) in mse {
        let w = if pair_weighted {
            weight_of(weights, a)? * weight_of(weights, b)?
        } else {
            1.0
        };
        terms.push(tape.scale(*v, lambda * w)?);
    }
    let total = sum_vars(tape, &terms)?;
    Ok((total, report))
}

pub(crate) fn sum_vars(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = terms.split_first() else {
        return Err(Error::InvalidArgument("objective has no terms".into()));
    };
    rest.iter().try_fold(first, |acc, &t| tape.add(acc, t))
}

/// `Σ_m MSE(teacher_m, student)`.
pub fn kd_mse_loss(tape: &mut Tape, teachers: &BTreeMap<String, Var>, student: Var) -> Result<Var> {
    let mut terms = Vec::with_capacity(teachers.len());
    for t in teachers.values() {
        terms.push(tape.mse(*t, student)?);
    }
    sum_vars(tape, &terms)
}

/// Student text rows against all image rows of one modality; the
/// text→image direction of the shared InfoNCE kernel.
pub fn kd_contrastive_loss(
    tape: &mut Tape,
    student_txt: Var,
    imgs: Var,
    tau: TauInput,
) -> Result<Var> {
    check_pair(tape, student_txt, imgs, "kd_contrastive_loss")?;
    info_nce(tape, student_txt, imgs, tau)
}

/// Distillation objective. `contrastive = None` is the KD-only first stage.
pub fn seskd_loss(tape: &mut Tape, kd: Var, contrastive: Option<Var>) -> Result<Var> {
    match contrastive {
        Some(c) => tape.add(kd, c),
        None => Ok(kd),
    }
}

//! The three training phases: per-modality pretraining, text-anchored
//! binding with balancing and adapters, and distillation of all text encoders
//! into one student.
//!
//! Every step draws from its own generator keyed by `(seed, phase, step)`, so a
//! run resumed from a checkpoint replays exactly the batches it would have
//! seen uninterrupted.

pub mod optim;

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::balancing::{draw_modality, BalancePlan, ModalityStats};
use crate::encoders::{EncoderArch, ImageEncoder, ParamScope, StudentTextEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::objectives::{
    bind_objective, clip_contrastive_loss, kd_contrastive_loss, kd_mse_loss, pairwise_text_mse,
    seskd_loss, BindLossReport, TauInput, Temperature,
};
use crate::seed::rng_for;
use crate::synth::SyntheticCorpus;
use crate::tensor::Tensor;

pub use optim::{clip_global_norm, AdamW, AdamWConfig, Moments, Schedule};

/// Image and text encoder of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBundle {
    pub modality: String,
    pub image: ImageEncoder,
    pub text: TextEncoder,
}

impl ModalityBundle {
    pub fn new(modality: &str, obs_dim: usize, vocab: usize, arch: &EncoderArch, seed: u64) -> Self {
        ModalityBundle {
            modality: modality.to_string(),
            image: ImageEncoder::new(modality, obs_dim, arch, seed),
            text: TextEncoder::new(modality, vocab, arch, seed),
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut p = self.image.params();
        p.extend(self.text.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut p = self.image.params_mut();
        p.extend(self.text.params_mut());
        p
    }

    pub fn freeze(&mut self) {
        self.image.frozen = true;
        self.text.frozen = true;
    }

    pub fn attach_lora(&mut self, rank: usize, alpha: f64, seed: u64) -> Result<()> {
        self.image.attach_lora(rank, alpha, seed)?;
        self.text.attach_lora(rank, alpha, seed)
    }
}

/// SHA-256 over the names and bytes of every base (non-adapter) weight.
pub fn base_weight_digest(bundles: &BTreeMap<String, ModalityBundle>) -> String {
    digest_where(bundles, |_| true)
}

/// SHA-256 over the base weights that binding with `train_heads` never
/// updates: all of them, or all but each encoder's final projection.
pub fn frozen_weight_digest(bundles: &BTreeMap<String, ModalityBundle>, train_heads: bool) -> String {
    let heads: Vec<String> = bundles
        .values()
        .flat_map(|b| {
            [
                format!("{}.{}.", b.image.prefix(), b.image.mlp.layers.len() - 1),
                format!("{}.{}.", b.text.prefix(), b.text.mlp.layers.len() - 1),
            ]
        })
        .collect();
    digest_where(bundles, |name| !train_heads || !heads.iter().any(|h| name.starts_with(h.as_str())))
}

fn digest_where(bundles: &BTreeMap<String, ModalityBundle>, keep: impl Fn(&str) -> bool) -> String {
    let mut h = Sha256::new();
    for b in bundles.values() {
        for (name, t) in b.image.base_params().into_iter().chain(b.text.base_params()) {
            if !keep(&name) {
                continue;
            }
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update(t.to_le_bytes());
        }
    }
    crate::config::hex(&h.finalize())
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: String,
    pub step: usize,
    pub total: f64,
    /// Named loss terms as they entered `total`, before weighting.
    pub terms: BTreeMap<String, f64>,
    pub lr_multiplier: f64,
    /// Effective learning rate per parameter group.
    pub lrs: BTreeMap<String, f64>,
    /// Modalities whose image-text batch entered this step.
    pub drawn: Vec<String>,
    /// Source modality counts of the text batch.
    pub text_draws: BTreeMap<String, usize>,
    pub grad_norm: f64,
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bind: Option<BindLossReport>,
}

fn diverged(phase: &'static str, step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Divergence {
            phase,
            step,
            detail: format!("non-finite value in {op}"),
        },
        Error::DegenerateEmbedding { row } => Error::Divergence {
            phase,
            step,
            detail: format!("embedding row {row} collapsed to zero"),
        },
        other => other,
    }
}

fn batch_ids(rng: &mut impl Rng, len: usize, n: usize) -> Vec<usize> {
    sample(rng, len, n.min(len)).into_vec()
}

/// Gradients summed per parameter name; a name bound more than once in one
/// tape (an encoder used for two batches) collects all contributions.
fn collect_grads(tape: &Tape, loss: Var, tracked: &[(String, Var)]) -> Result<BTreeMap<String, Tensor>> {
    let grads = tape.backward(loss)?;
    let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, v) in tracked {
        let Some(g) = grads.get(*v) else { continue };
        match out.get_mut(name) {
            Some(acc) => *acc = acc.add(g)?,
            None => {
                out.insert(name.clone(), g.clone());
            }
        }
    }
    Ok(out)
}

fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

// ---------------------------------------------------------------------------
// Phase 0
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub tau: Temperature,
    pub symmetric_loss: bool,
    pub grad_clip: f64,
    pub adamw: AdamWConfig,
    /// Size of the fixed batch on which the loss decrease is measured.
    pub probe_batch: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1000,
            lr: 1e-3,
            batch: 72,
            tau: Temperature::default(),
            symmetric_loss: true,
            grad_clip: 1.0,
            adamw: AdamWConfig::default(),
            probe_batch: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub modality: String,
    /// Per-sample contrastive loss on the fixed probe batch.
    pub initial_probe_loss: f64,
    pub final_probe_loss: f64,
    pub losses: Vec<f64>,
}

fn pair_loss(
    bundle: &ModalityBundle,
    corpus: &SyntheticCorpus,
    ids: &[usize],
    tau: f64,
    symmetric: bool,
    scope: &mut ParamScope,
    tape: &mut Tape,
) -> Result<Var> {
    let x = tape.constant(corpus.signal_batch(ids)?);
    let img = bundle.image.forward(tape, x, scope)?;
    let txt = bundle.text.forward(tape, &corpus.token_batch(ids), scope)?;
    let l = clip_contrastive_loss(tape, img, txt, TauInput::Fixed(tau), symmetric)?;
    tape.scale(l, 1.0 / ids.len() as f64)
}

fn probe_loss(bundle: &ModalityBundle, corpus: &SyntheticCorpus, ids: &[usize], cfg: &PretrainConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let l = pair_loss(bundle, corpus, ids, cfg.tau.tau, cfg.symmetric_loss, &mut ParamScope::inference(), &mut tape)?;
    Ok(tape.value(l).item())
}

/// Trains one modality's encoder pair on its own image-text records, then
/// freezes it. With `steps = 0` the encoders are returned untouched.
pub fn pretrain_modality(
    corpus: &SyntheticCorpus,
    bundle: &mut ModalityBundle,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    if corpus.modality != bundle.modality {
        return Err(Error::UnknownModality(corpus.modality.clone()));
    }
    let m = bundle.modality.clone();
    let probe = batch_ids(&mut rng_for(seed, &format!("pretrain/{m}/probe")), corpus.len(), cfg.probe_batch);
    let initial = probe_loss(bundle, corpus, &probe, cfg)?;
    if cfg.steps == 0 {
        return Ok(PretrainReport {
            modality: m,
            initial_probe_loss: initial,
            final_probe_loss: initial,
            losses: Vec::new(),
        });
    }
    let schedule = Schedule::standard(cfg.steps);
    let mut opt = AdamW::new(cfg.adamw);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = rng_for(seed, &format!("pretrain/{m}/{step}"));
        let ids = batch_ids(&mut rng, corpus.len(), cfg.batch);
        let lr = cfg.lr * schedule.multiplier(step);
        let mut tape = Tape::new();
        let mut scope = ParamScope::training(false);
        let loss = pair_loss(bundle, corpus, &ids, cfg.tau.tau, cfg.symmetric_loss, &mut scope, &mut tape)
            .map_err(diverged("pretrain", step))?;
        let value = tape.value(loss).item();
        let mut grads = collect_grads(&tape, loss, scope.tracked()).map_err(diverged("pretrain", step))?;
        clip_global_norm(&mut grads, cfg.grad_clip);
        opt.step(bundle.params_mut(), &grads, |_| lr)
            .map_err(diverged("pretrain", step))?;
        losses.push(value);
    }
    let final_probe_loss = probe_loss(bundle, corpus, &probe, cfg)?;
    bundle.freeze();
    Ok(PretrainReport {
        modality: m,
        initial_probe_loss: initial,
        final_probe_loss,
        losses,
    })
}

// ---------------------------------------------------------------------------
// Phase A
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BindConfig {
    pub tau: Temperature,
    pub beta: f64,
    pub lambda: f64,
    pub eta0: f64,
    pub batch_pair: usize,
    pub batch_text: usize,
    pub iters: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub amb: bool,
    pub symmetric_loss: bool,
    /// Modalities taking part; `None` means all of them.
    pub modalities: Option<Vec<String>>,
    /// Weight each pair's text MSE by `w_a·w_b`.
    pub pair_weighted: bool,
    /// Draw the image-text batch's modality from the plan; otherwise every
    /// modality contributes one batch per step.
    pub sample_pair_modality: bool,
    /// Draw each alignment text's source modality from the plan; otherwise
    /// uniformly over modalities.
    pub sample_text_modality: bool,
    /// Also train the final projection of each frozen encoder.
    pub train_heads: bool,
    pub grad_clip: f64,
    pub adamw: AdamWConfig,
}

impl Default for BindConfig {
    fn default() -> Self {
        BindConfig {
            tau: Temperature::default(),
            beta: 0.5,
            lambda: 10.0,
            eta0: 0.3,
            batch_pair: 72,
            batch_text: 64,
            iters: 3000,
            lora_rank: 4,
            lora_alpha: 8.0,
            amb: true,
            symmetric_loss: true,
            modalities: None,
            pair_weighted: false,
            sample_pair_modality: true,
            sample_text_modality: true,
            train_heads: true,
            grad_clip: 1.0,
            adamw: AdamWConfig::default(),
        }
    }
}

impl BindConfig {
    /// Iteration count and base learning rate of the original large-scale
    /// setting.
    pub fn full_scale() -> Self {
        BindConfig {
            eta0: 2e-5,
            iters: 15_000,
            ..BindConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("beta", self.beta >= 0.0),
            ("lambda", self.lambda >= 0.0),
            ("eta0", self.eta0 > 0.0),
            ("batch_pair", self.batch_pair > 0),
            ("batch_text", self.batch_text > 0),
            ("lora_rank", self.lora_rank > 0),
            ("lora_alpha", self.lora_alpha > 0.0),
            ("grad_clip", self.grad_clip > 0.0),
            ("tau", self.tau.tau > 0.0),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, ok)| !ok) {
            return Err(Error::Config(format!("bind.{name} is out of range")));
        }
        if matches!(&self.modalities, Some(s) if s.is_empty()) {
            return Err(Error::Config("bind.modalities must not be empty".into()));
        }
        Ok(())
    }
}

/// Everything Phase A mutates; enough to resume at `step`.
#[derive(Clone, Debug, PartialEq)]
pub struct BindState {
    pub bundles: BTreeMap<String, ModalityBundle>,
    pub optimizer: AdamW,
    /// Next step to run.
    pub step: usize,
    pub log_tau: f64,
}

impl BindState {
    /// Takes the configured subset of pretrained bundles, freezes them and
    /// attaches fresh adapters.
    pub fn new(pretrained: &BTreeMap<String, ModalityBundle>, cfg: &BindConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let ids: Vec<String> = match &cfg.modalities {
            Some(s) => s.clone(),
            None => pretrained.keys().cloned().collect(),
        };
        let mut bundles = BTreeMap::new();
        for m in ids {
            let mut b = pretrained.get(&m).cloned().ok_or_else(|| Error::UnknownModality(m.clone()))?;
            b.freeze();
            if !b.image.has_adapters() {
                b.attach_lora(cfg.lora_rank, cfg.lora_alpha, seed)?;
            }
            bundles.insert(m, b);
        }
        if bundles.is_empty() {
            return Err(Error::Config("bind needs at least one modality".into()));
        }
        Ok(BindState {
            bundles,
            optimizer: AdamW::new(cfg.adamw),
            step: 0,
            log_tau: cfg.tau.tau.ln(),
        })
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }
}

pub const TAU_PARAM: &str = "tau.log";

/// The balancing plan over the modalities of `bundles`.
pub fn plan_for(
    modalities: impl IntoIterator<Item = String>,
    corpora: &BTreeMap<String, SyntheticCorpus>,
    beta: f64,
    eta0: f64,
    amb: bool,
) -> Result<BalancePlan> {
    let mut sizes = BTreeMap::new();
    for m in modalities {
        let c = corpora.get(&m).ok_or_else(|| Error::UnknownModality(m.clone()))?;
        sizes.insert(m, c.len() as u64);
    }
    BalancePlan::new(&ModalityStats::new(sizes, beta, eta0)?, amb)
}

/// Draws `n` texts, each from a modality chosen by the plan (or uniformly),
/// and a uniformly chosen record of it.
fn draw_texts(
    plan: &BalancePlan,
    corpora: &BTreeMap<String, SyntheticCorpus>,
    n: usize,
    by_plan: bool,
    rng: &mut impl Rng,
) -> Vec<(String, usize)> {
    let ids: Vec<&str> = plan.modalities().collect();
    (0..n)
        .map(|_| {
            let m = if by_plan {
                draw_modality(plan, rng)
            } else {
                ids[rng.random_range(0..ids.len())]
            };
            let i = rng.random_range(0..corpora[m].len());
            (m.to_string(), i)
        })
        .collect()
}

fn count_sources(draws: &[(String, usize)]) -> BTreeMap<String, usize> {
    let mut c = BTreeMap::new();
    for (m, _) in draws {
        *c.entry(m.clone()).or_default() += 1;
    }
    c
}

fn texts_of(draws: &[(String, usize)], corpora: &BTreeMap<String, SyntheticCorpus>) -> Vec<Vec<usize>> {
    draws.iter().map(|(m, i)| corpora[m].tokens[*i].clone()).collect()
}

/// Runs binding steps from `state.step` up to `min(until, cfg.iters)`. Only
/// adapters (and, with `train_heads`, final projections) receive updates.
pub fn bind_phase(
    state: &mut BindState,
    corpora: &BTreeMap<String, SyntheticCorpus>,
    cfg: &BindConfig,
    seed: u64,
    until: usize,
    sink: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let modalities: Vec<String> = state.bundles.keys().cloned().collect();
    let plan = plan_for(modalities.iter().cloned(), corpora, cfg.beta, cfg.eta0, cfg.amb)?;
    let schedule = Schedule::standard(cfg.iters);
    while state.step < until.min(cfg.iters) {
        let step = state.step;
        let record = bind_step(state, corpora, cfg, &plan, &schedule, &modalities, seed)
            .map_err(diverged("bind", step))?;
        sink(&record)?;
        state.step += 1;
    }
    Ok(())
}

fn bind_step(
    state: &mut BindState,
    corpora: &BTreeMap<String, SyntheticCorpus>,
    cfg: &BindConfig,
    plan: &BalancePlan,
    schedule: &Schedule,
    modalities: &[String],
    seed: u64,
) -> Result<StepRecord> {
    let step = state.step;
    let mult = schedule.multiplier(step);
    let mut rng = rng_for(seed, &format!("bind/{step}"));
    let drawn: Vec<String> = if cfg.sample_pair_modality {
        vec![draw_modality(plan, &mut rng).to_string()]
    } else {
        modalities.to_vec()
    };

    let mut tape = Tape::new();
    let mut scope = ParamScope::training(cfg.train_heads);
    let tau_var = cfg.tau.learnable.then(|| tape.param(Tensor::from_parts(vec![1], vec![state.log_tau])));
    let tau = match tau_var {
        Some(v) => TauInput::LogParam(v),
        None => TauInput::Fixed(cfg.tau.tau),
    };

    let mut clip = BTreeMap::new();
    for m in &drawn {
        let corpus = &corpora[m];
        let bundle = &state.bundles[m];
        let ids = batch_ids(&mut rng, corpus.len(), cfg.batch_pair);
        let x = tape.constant(corpus.signal_batch(&ids)?);
        let img = bundle.image.forward(&mut tape, x, &mut scope)?;
        let txt = bundle.text.forward(&mut tape, &corpus.token_batch(&ids), &mut scope)?;
        let l = clip_contrastive_loss(&mut tape, img, txt, tau, cfg.symmetric_loss)?;
        clip.insert(m.clone(), tape.scale(l, 1.0 / ids.len() as f64)?);
    }

    let mut text_draws = BTreeMap::new();
    let mut mse = BTreeMap::new();
    if modalities.len() > 1 {
        let draws = draw_texts(plan, corpora, cfg.batch_text, cfg.sample_text_modality, &mut rng);
        text_draws = count_sources(&draws);
        let texts = texts_of(&draws, corpora);
        let mut embeds = BTreeMap::new();
        for (m, b) in &state.bundles {
            embeds.insert(m.clone(), b.text.forward(&mut tape, &texts, &mut scope)?);
        }
        mse = pairwise_text_mse(&mut tape, &embeds)?;
    }

    let (loss, report) = bind_objective(&mut tape, &clip, &mse, &plan.weights, cfg.lambda, cfg.pair_weighted)?;
    if !report.total.is_finite() {
        return Err(Error::NonFinite { op: "bind loss" });
    }
    let mut tracked = scope.tracked().to_vec();
    if let Some(v) = tau_var {
        tracked.push((TAU_PARAM.to_string(), v));
    }
    let mut grads = collect_grads(&tape, loss, &tracked)?;
    let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);

    let mut tau_t = Tensor::from_parts(vec![1], vec![state.log_tau]);
    let mut params: Vec<(String, &mut Tensor)> = Vec::new();
    for b in state.bundles.values_mut() {
        params.extend(b.params_mut());
    }
    params.push((TAU_PARAM.to_string(), &mut tau_t));
    let lr_for = |name: &str| {
        if name == TAU_PARAM {
            cfg.eta0 * mult
        } else {
            plan.lrs.get(group_of(name)).copied().unwrap_or(0.0) * mult
        }
    };
    state.optimizer.step(params, &grads, lr_for)?;
    state.log_tau = Temperature::clamped(tau_t.item().exp()).ln();

    let mut terms = BTreeMap::new();
    for (m, v) in &report.per_modality_clip {
        terms.insert(format!("clip/{m}"), *v);
    }
    for (k, v) in &report.per_pair_mse {
        terms.insert(format!("mse/{k}"), *v);
    }
    Ok(StepRecord {
        phase: "bind".into(),
        step,
        total: report.total,
        terms,
        lr_multiplier: mult,
        lrs: plan.lrs.iter().map(|(m, lr)| (m.clone(), lr * mult)).collect(),
        drawn,
        text_draws,
        grad_norm,
        tau: state.tau(),
        bind: Some(report),
    })
}

// ---------------------------------------------------------------------------
// Phase B
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub iters_stage1: usize,
    pub iters_stage2: usize,
    pub lr: f64,
    pub batch_text: usize,
    pub tau: Temperature,
    /// Add the image-anchored contrastive term in the second stage.
    pub contrastive: bool,
    pub student_arch: EncoderArch,
    pub grad_clip: f64,
    pub adamw: AdamWConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            iters_stage1: 600,
            iters_stage2: 600,
            lr: 1e-3,
            batch_text: 64,
            tau: Temperature::default(),
            contrastive: true,
            student_arch: EncoderArch::default(),
            grad_clip: 1.0,
            adamw: AdamWConfig::default(),
        }
    }
}

impl DistillConfig {
    /// Iteration counts of the original large-scale setting.
    pub fn full_scale() -> Self {
        DistillConfig {
            iters_stage1: 1200,
            iters_stage2: 1200,
            ..DistillConfig::default()
        }
    }

    pub fn total_iters(&self) -> usize {
        self.iters_stage1 + self.iters_stage2
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.batch_text > 0 && self.grad_clip > 0.0 && self.tau.tau > 0.0) {
            return Err(Error::Config("distill settings out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillState {
    pub student: StudentTextEncoder,
    pub optimizer: AdamW,
    pub step: usize,
}

impl DistillState {
    pub fn new(student: StudentTextEncoder, cfg: &DistillConfig) -> Self {
        DistillState {
            student,
            optimizer: AdamW::new(cfg.adamw),
            step: 0,
        }
    }
}

/// Mean over teachers of the MSE between teacher and student embeddings of
/// `texts`.
pub fn mean_teacher_mse(
    student: &StudentTextEncoder,
    teachers: &BTreeMap<String, ModalityBundle>,
    texts: &[Vec<usize>],
) -> Result<f64> {
    let s = student.encoder.encode(texts)?;
    let mut total = 0.0;
    for b in teachers.values() {
        let t = b.text.encode(texts)?;
        total += t.sub(&s)?.data().iter().map(|v| v * v).sum::<f64>() / s.len() as f64;
    }
    Ok(total / teachers.len() as f64)
}

/// A fixed batch of texts drawn the way distillation draws them.
pub fn distill_probe_texts(
    plan: &BalancePlan,
    corpora: &BTreeMap<String, SyntheticCorpus>,
    n: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    let draws = draw_texts(plan, corpora, n, true, &mut rng_for(seed, "distill/probe"));
    texts_of(&draws, corpora)
}

/// Runs distillation steps from `state.step` up to
/// `min(until, iters_stage1 + iters_stage2)`. Teachers are never updated.
pub fn distill_phase(
    state: &mut DistillState,
    teachers: &BTreeMap<String, ModalityBundle>,
    corpora: &BTreeMap<String, SyntheticCorpus>,
    plan: &BalancePlan,
    cfg: &DistillConfig,
    seed: u64,
    until: usize,
    sink: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if teachers.is_empty() {
        return Err(Error::Config("distillation needs at least one teacher".into()));
    }
    for m in plan.modalities() {
        if !teachers.contains_key(m) {
            return Err(Error::UnknownModality(m.to_string()));
        }
    }
    let total = cfg.total_iters();
    let schedule = Schedule::standard(total);
    while state.step < until.min(total) {
        let step = state.step;
        let record = distill_step(state, teachers, corpora, plan, cfg, &schedule, seed)
            .map_err(diverged("distill", step))?;
        sink(&record)?;
        state.step += 1;
    }
    Ok(())
}

fn distill_step(
    state: &mut DistillState,
    teachers: &BTreeMap<String, ModalityBundle>,
    corpora: &BTreeMap<String, SyntheticCorpus>,
    plan: &BalancePlan,
    cfg: &DistillConfig,
    schedule: &Schedule,
    seed: u64,
) -> Result<StepRecord> {
    let step = state.step;
    let mult = schedule.multiplier(step);
    let stage2 = step >= cfg.iters_stage1 && cfg.contrastive;
    let mut rng = rng_for(seed, &format!("distill/{step}"));
    let draws = draw_texts(plan, corpora, cfg.batch_text, true, &mut rng);
    let texts = texts_of(&draws, corpora);

    let mut tape = Tape::new();
    let mut scope = ParamScope::training(false);
    let student = state.student.encoder.forward(&mut tape, &texts, &mut scope)?;
    let mut teacher_vars = BTreeMap::new();
    for (m, b) in teachers {
        teacher_vars.insert(m.clone(), tape.constant(b.text.encode(&texts)?));
    }
    let kd = kd_mse_loss(&mut tape, &teacher_vars, student)?;
    let mut terms = BTreeMap::new();
    terms.insert("kd".to_string(), tape.value(kd).item());

    let contrastive = if stage2 {
        let mut parts = Vec::new();
        for m in plan.modalities() {
            let rows: Vec<usize> = (0..draws.len()).filter(|&i| draws[i].0 == m).collect();
            if rows.is_empty() {
                continue;
            }
            let recs: Vec<usize> = rows.iter().map(|&i| draws[i].1).collect();
            let imgs = teachers[m].image.encode(&corpora[m].signal_batch(&recs)?)?;
            let img_var = tape.constant(imgs);
            let s_m = tape.gather_rows(student, &rows)?;
            parts.push(kd_contrastive_loss(&mut tape, s_m, img_var, TauInput::Fixed(cfg.tau.tau))?);
        }
        let sum = crate::objectives::sum_vars(&mut tape, &parts)?;
        let c = tape.scale(sum, 1.0 / texts.len() as f64)?;
        terms.insert("kd_contrastive".to_string(), tape.value(c).item());
        Some(c)
    } else {
        None
    };
    let loss = seskd_loss(&mut tape, kd, contrastive)?;
    let total = tape.value(loss).item();
    if !total.is_finite() {
        return Err(Error::NonFinite { op: "distill loss" });
    }
    let mut grads = collect_grads(&tape, loss, scope.tracked())?;
    let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
    let lr = cfg.lr * mult;
    state.optimizer.step(state.student.encoder.params_mut(), &grads, |_| lr)?;

    let mut lrs = BTreeMap::new();
    lrs.insert(crate::encoders::STUDENT_ID.to_string(), lr);
    Ok(StepRecord {
        phase: if stage2 { "distill-2" } else { "distill-1" }.into(),
        step,
        total,
        terms,
        lr_multiplier: mult,
        lrs,
        drawn: Vec::new(),
        text_draws: count_sources(&draws),
        grad_norm,
        tau: cfg.tau.tau,
        bind: None,
    })
}

//! End-to-end run orchestration: pretraining every modality, binding,
//! distillation, the evaluation suite, the ablation grid, and the on-disk
//! layout of a run directory.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::balancing::BalancePlan;
use crate::config::{canonical_json, RunConfig};
use crate::encoders::StudentTextEncoder;
use crate::error::{Error, Result};
use crate::evaluation::{
    cross_image_retrieval, few_shot_summary, metrics_to_record, recall_record, retrieval_by_label,
    student_consistency, zero_shot_classify, EvalRecord, PromptSet,
};
use crate::synth::Dataset;
use crate::training::{
    bind_phase, distill_phase, plan_for, pretrain_modality, BindState, DistillState, ModalityBundle,
    PretrainReport, StepRecord,
};

/// Worker count: `M3BIND_THREADS` when set to a positive integer, otherwise
/// the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("M3BIND_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Pretrains the given modalities independently. Each modality uses only its
/// own seeded streams, so the result does not depend on the worker count.
pub fn pretrain_all(
    dataset: &Dataset,
    cfg: &RunConfig,
    modalities: &[String],
) -> Result<(BTreeMap<String, ModalityBundle>, Vec<PretrainReport>)> {
    let one = |m: &String| -> Result<(ModalityBundle, PretrainReport)> {
        let corpus = dataset.corpora.get(m).ok_or_else(|| Error::UnknownModality(m.clone()))?;
        let mut b = ModalityBundle::new(m, corpus.obs_dim(), dataset.spec.vocab, &cfg.arch, cfg.master_seed);
        let r = pretrain_modality(corpus, &mut b, &cfg.pretrain, cfg.master_seed)?;
        Ok((b, r))
    };
    let threads = worker_threads().min(modalities.len()).max(1);
    let results: Vec<Result<(ModalityBundle, PretrainReport)>> = if threads == 1 {
        modalities.iter().map(one).collect()
    } else {
        let mut slots: Vec<Option<Result<(ModalityBundle, PretrainReport)>>> =
            (0..modalities.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let one = &one;
                    s.spawn(move || {
                        (t..modalities.len())
                            .step_by(threads)
                            .map(|i| (i, one(&modalities[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("pretraining worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every modality assigned")).collect()
    };
    let mut bundles = BTreeMap::new();
    let mut reports = Vec::new();
    for r in results {
        let (b, rep) = r?;
        bundles.insert(b.modality.clone(), b);
        reports.push(rep);
    }
    Ok((bundles, reports))
}

/// The plan that drives both binding and distillation batches.
pub fn sampling_plan(dataset: &Dataset, cfg: &RunConfig) -> Result<BalancePlan> {
    plan_for(cfg.bound_modalities(), &dataset.corpora, cfg.bind.beta, cfg.bind.eta0, cfg.bind.amb)
}

/// Binding from freshly prepared adapters to the configured iteration count.
pub fn bind_run(
    dataset: &Dataset,
    cfg: &RunConfig,
    pretrained: &BTreeMap<String, ModalityBundle>,
    sink: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<BindState> {
    let mut bcfg = cfg.bind.clone();
    bcfg.modalities = Some(cfg.bound_modalities());
    let mut state = BindState::new(pretrained, &bcfg, cfg.master_seed)?;
    bind_phase(&mut state, &dataset.corpora, &bcfg, cfg.master_seed, usize::MAX, sink)?;
    Ok(state)
}

pub fn initial_student(dataset: &Dataset, cfg: &RunConfig) -> StudentTextEncoder {
    StudentTextEncoder::new(dataset.spec.vocab, &cfg.distill.student_arch, cfg.master_seed)
}

pub fn distill_run(
    dataset: &Dataset,
    cfg: &RunConfig,
    teachers: &BTreeMap<String, ModalityBundle>,
    sink: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<DistillState> {
    let plan = sampling_plan(dataset, cfg)?;
    let mut state = DistillState::new(initial_student(dataset, cfg), &cfg.distill);
    distill_phase(&mut state, teachers, &dataset.corpora, &plan, &cfg.distill, cfg.master_seed, usize::MAX, sink)?;
    Ok(state)
}

pub fn prompts_for(dataset: &Dataset, cfg: &RunConfig) -> Result<BTreeMap<String, PromptSet>> {
    dataset
        .modality_specs
        .iter()
        .map(|(m, s)| Ok((m.clone(), PromptSet::from_spec(s, cfg.eval.prompt_mode)?)))
        .collect()
}

pub const TASKS: [&str; 5] = ["zero-shot", "image-text", "cross-image", "few-shot", "consistency"];

/// Which part of the suite to run; `None` fields select everything.
#[derive(Clone, Debug, Default)]
pub struct EvalSelection {
    pub task: Option<String>,
    pub pair: Option<(String, String)>,
}

impl EvalSelection {
    fn wants(&self, task: &str) -> bool {
        self.task.as_deref().is_none_or(|t| t == task)
    }
}

pub fn pair_name(a: &str, b: &str) -> String {
    format!("{a}:{b}")
}

/// Cross-image retrieval for every unordered pair of `bundles`.
pub fn cross_image_all(
    dataset: &Dataset,
    bundles: &BTreeMap<String, ModalityBundle>,
) -> Result<BTreeMap<String, crate::evaluation::CrossRetrieval>> {
    let ids: Vec<&String> = bundles.keys().collect();
    let mut out = BTreeMap::new();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            let r = cross_image_retrieval(&bundles[ids[i]], &bundles[ids[j]], &dataset.eval)?;
            out.insert(pair_name(ids[i], ids[j]), r);
        }
    }
    Ok(out)
}

/// Held-out zero-shot accuracy of each modality with its own text encoder.
pub fn zero_shot_all(
    dataset: &Dataset,
    cfg: &RunConfig,
    bundles: &BTreeMap<String, ModalityBundle>,
) -> Result<BTreeMap<String, crate::evaluation::MetricsReport>> {
    let prompts = prompts_for(dataset, cfg)?;
    let mut out = BTreeMap::new();
    for (m, b) in bundles {
        let held = &dataset.eval.heldout[m];
        let img = b.image.encode(&held.signals)?;
        out.insert(m.clone(), zero_shot_classify(&img, &prompts[m], &b.text, &held.labels)?);
    }
    Ok(out)
}

/// Few-shot probe summaries per modality and shot count. The training pool is
/// the modality's corpus; the test set is its held-out split.
pub fn few_shot_all(
    dataset: &Dataset,
    cfg: &RunConfig,
    bundles: &BTreeMap<String, ModalityBundle>,
) -> Result<BTreeMap<String, Vec<crate::evaluation::FewShotSummary>>> {
    let mut out = BTreeMap::new();
    for (m, b) in bundles {
        let corpus = &dataset.corpora[m];
        let held = &dataset.eval.heldout[m];
        let train = b.image.encode(&corpus.signals)?;
        let test = b.image.encode(&held.signals)?;
        let mut v = Vec::new();
        for &s in &cfg.eval.shots {
            v.push(few_shot_summary(&train, &corpus.labels, &test, &held.labels, s, &cfg.eval.probe_seeds)?);
        }
        out.insert(m.clone(), v);
    }
    Ok(out)
}

/// The evaluation suite over bound bundles and, when given, the student.
pub fn evaluate(
    dataset: &Dataset,
    cfg: &RunConfig,
    bundles: &BTreeMap<String, ModalityBundle>,
    student: Option<&StudentTextEncoder>,
    sel: &EvalSelection,
) -> Result<Vec<EvalRecord>> {
    if let Some(t) = &sel.task {
        if !TASKS.contains(&t.as_str()) {
            return Err(Error::Config(format!("unknown eval task '{t}'; expected one of {TASKS:?}")));
        }
    }
    let mut records = Vec::new();
    if sel.wants("zero-shot") {
        for (m, r) in zero_shot_all(dataset, cfg, bundles)? {
            records.push(metrics_to_record("zero-shot", &m, &r));
        }
    }
    if sel.wants("image-text") {
        for (m, b) in bundles {
            let held = &dataset.eval.heldout[m];
            let img = b.image.encode(&held.signals)?;
            let txt = b.text.encode(&held.tokens)?;
            let r = retrieval_by_label(&img, &txt, &held.labels, &held.labels)?;
            records.push(recall_record("image-text", m, &r));
        }
    }
    if sel.wants("cross-image") {
        match &sel.pair {
            Some((a, b)) => {
                let get = |m: &str| bundles.get(m).ok_or_else(|| Error::UnknownModality(m.to_string()));
                let r = cross_image_retrieval(get(a)?, get(b)?, &dataset.eval)?;
                records.push(cross_record(&r));
            }
            None => {
                for r in cross_image_all(dataset, bundles)?.values() {
                    records.push(cross_record(r));
                }
            }
        }
    }
    if sel.wants("few-shot") {
        for (m, sums) in few_shot_all(dataset, cfg, bundles)? {
            for s in sums {
                let key = format!("shots={}", s.shots);
                for (seed, acc) in cfg.eval.probe_seeds.iter().zip(&s.per_seed) {
                    records.push(EvalRecord::new("few-shot", &m, &key, Some(*seed)).with("accuracy", *acc));
                }
                records.push(
                    EvalRecord::new("few-shot", &m, &key, None)
                        .with("mean_accuracy", s.mean)
                        .with("std_accuracy", s.std),
                );
            }
        }
    }
    if sel.wants("consistency") {
        if let Some(st) = student {
            let rep = student_consistency(bundles, st, &dataset.eval, &prompts_for(dataset, cfg)?)?;
            for (m, e) in &rep.per_modality {
                records.push(
                    EvalRecord::new("consistency", m, "", None)
                        .with("teacher_accuracy", e.teacher_accuracy)
                        .with("student_accuracy", e.student_accuracy)
                        .with("delta", e.delta),
                );
            }
        }
    }
    Ok(records)
}

fn cross_record(r: &crate::evaluation::CrossRetrieval) -> EvalRecord {
    let mut rec = EvalRecord::new("cross-image", &pair_name(&r.a, &r.b), "k=1,5,10", None);
    for (k, v) in &r.mean {
        rec = rec.with(&format!("recall@{k}"), *v);
    }
    for (k, v) in &r.a_to_b {
        rec = rec.with(&format!("a_to_b_recall@{k}"), *v);
    }
    for (k, v) in &r.b_to_a {
        rec = rec.with(&format!("b_to_a_recall@{k}"), *v);
    }
    rec
}

/// One trained variant of the ablation grid.
#[derive(Clone, Debug, Serialize)]
pub struct AblationResult {
    pub variant: String,
    pub config: RunConfig,
    pub records: Vec<EvalRecord>,
}

/// The ablation variants of `base`: no text alignment, no balancing, no
/// contrastive distillation stage, and the growing modality subsets.
pub fn ablation_configs(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut out = Vec::new();
    let mut c = base.clone();
    c.bind.lambda = 0.0;
    out.push(("lambda=0".to_string(), c));
    let mut c = base.clone();
    c.bind.amb = false;
    out.push(("amb=off".to_string(), c));
    let mut c = base.clone();
    c.distill.contrastive = false;
    out.push(("seskd=kd-only".to_string(), c));
    let known = base.dataset.modality_ids();
    let order: Vec<String> = base.eval.sweep_order.iter().filter(|m| known.contains(m)).cloned().collect();
    for n in 2..=order.len() {
        let mut c = base.clone();
        c.bind.modalities = Some(order[..n].to_vec());
        out.push((format!("subset={}", order[..n].join("+")), c));
    }
    out
}

/// Trains and evaluates every ablation variant. Phase-0 encoders are shared
/// with `pretrained` because pretraining depends only on the seed.
pub fn ablation_grid(
    dataset: &Dataset,
    base: &RunConfig,
    pretrained: &BTreeMap<String, ModalityBundle>,
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::new();
    for (variant, cfg) in ablation_configs(base) {
        let bound = bind_run(dataset, &cfg, pretrained, &mut |_| Ok(()))?;
        let student = if variant.starts_with("seskd") {
            Some(distill_run(dataset, &cfg, &bound.bundles, &mut |_| Ok(()))?.student)
        } else {
            None
        };
        let tasks: &[&str] = if student.is_some() { &["consistency"] } else { &["zero-shot", "cross-image"] };
        let mut records = Vec::new();
        for task in tasks {
            let s = EvalSelection {
                task: Some(task.to_string()),
                pair: None,
            };
            records.extend(evaluate(dataset, &cfg, &bound.bundles, student.as_ref(), &s)?);
        }
        for r in &mut records {
            r.task = format!("ablation/{variant}/{}", r.task);
        }
        out.push(AblationResult {
            variant,
            config: cfg,
            records,
        });
    }
    Ok(out)
}

/// File layout of one run: `run-<fp>` holds checkpoints, logs and reports;
/// `data-<fp>` holds the corpora and is shared by every run over the same
/// dataset spec. Both names are fingerprint prefixes.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
    pub data: PathBuf,
}

impl RunPaths {
    pub fn for_config(cfg: &RunConfig) -> Result<Self> {
        let base = Path::new(&cfg.output_dir);
        Ok(RunPaths {
            root: base.join(format!("run-{}", &cfg.fingerprint()?[..16])),
            data: base.join(format!("data-{}", &cfg.dataset.fingerprint()?[..16])),
        })
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn pretrain_checkpoint(&self) -> PathBuf {
        self.root.join("pretrain.m3ck")
    }
    pub fn pretrain_report(&self) -> PathBuf {
        self.root.join("pretrain.json")
    }
    pub fn bind_checkpoint(&self) -> PathBuf {
        self.root.join("bind.m3ck")
    }
    pub fn bind_log(&self) -> PathBuf {
        self.root.join("bind.jsonl")
    }
    pub fn distill_checkpoint(&self) -> PathBuf {
        self.root.join("distill.m3ck")
    }
    pub fn distill_log(&self) -> PathBuf {
        self.root.join("distill.jsonl")
    }
    pub fn eval_json(&self) -> PathBuf {
        self.root.join("eval.json")
    }
    pub fn eval_csv(&self) -> PathBuf {
        self.root.join("eval.csv")
    }
}

/// Canonical JSON of the merged config, as embedded in every output.
pub fn config_document(cfg: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::from_str(&canonical_json(cfg)?)?)
}

/// Metrics log: a header line, then one JSON object per step. The header is
/// the only place a wall-clock time appears.
pub struct JsonlLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl JsonlLog {
    pub fn create(path: &Path, cfg: &RunConfig, phase: &str, keep: &[StepRecord]) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut log = JsonlLog {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        let started = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let header = serde_json::json!({
            "header": {
                "phase": phase,
                "fingerprint": cfg.fingerprint()?,
                "config": config_document(cfg)?,
                "started_unix": started,
            }
        });
        log.line(&header)?;
        for r in keep {
            log.write(r)?;
        }
        Ok(log)
    }

    fn line<T: Serialize>(&mut self, v: &T) -> Result<()> {
        let s = serde_json::to_string(v)?;
        writeln!(self.out, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn write(&mut self, r: &StepRecord) -> Result<()> {
        self.line(r)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Step records of a metrics log, skipping the header.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v.get("header").is_some() {
            continue;
        }
        out.push(serde_json::from_value(v)?);
    }
    Ok(out)
}

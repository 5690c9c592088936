//! Zero-shot classification, recall@k retrieval, the cross-modal image to
//! image retrieval through the shared space, few-shot linear probes, and the
//! student-versus-teacher comparison.
//!
//! Rankings break similarity ties toward the lower gallery index.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoders::{StudentTextEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::synth::{EvalSplit, ModalitySpec};
use crate::tensor::Tensor;
use crate::training::ModalityBundle;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// First template of each class only.
    Naive,
    /// All templates, embeddings averaged then re-normalized.
    Multi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    /// `templates[k]`: token sequences describing class `k`.
    pub templates: Vec<Vec<Vec<usize>>>,
    pub mode: PromptMode,
}

impl PromptSet {
    pub fn new(templates: Vec<Vec<Vec<usize>>>, mode: PromptMode) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::InvalidArgument("prompt set has no classes".into()));
        }
        if let Some(k) = templates.iter().position(Vec::is_empty) {
            return Err(Error::InvalidArgument(format!("class {k} has no prompt template")));
        }
        Ok(PromptSet { templates, mode })
    }

    pub fn from_spec(spec: &ModalitySpec, mode: PromptMode) -> Result<Self> {
        PromptSet::new(spec.templates.clone(), mode)
    }

    pub fn num_classes(&self) -> usize {
        self.templates.len()
    }

    /// `[K × d]` unit rows, one per class.
    pub fn class_embeddings(&self, encoder: &TextEncoder) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(self.templates.len());
        for pool in &self.templates {
            let used = match self.mode {
                PromptMode::Naive => &pool[..1],
                PromptMode::Multi => &pool[..],
            };
            let e = encoder.encode(used)?;
            let mut mean = vec![0.0; e.cols()];
            for r in 0..e.rows() {
                for (m, v) in mean.iter_mut().zip(e.row(r)) {
                    *m += v / e.rows() as f64;
                }
            }
            rows.push(mean);
        }
        Tensor::from_rows(&rows)?.l2_normalize_rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Macro-averaged; a class never predicted contributes 0.
    pub precision: f64,
    /// Top-k accuracy.
    pub recall_at: BTreeMap<usize, f64>,
    /// True instances per class.
    pub per_class_counts: Vec<usize>,
}

/// Gallery indices sorted by descending score, ties by ascending index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Metrics of an `[n × K]` score matrix against labels.
pub fn classification_metrics(scores: &Tensor, labels: &[usize]) -> Result<MetricsReport> {
    let (n, k) = (scores.rows(), scores.cols());
    if labels.len() != n {
        return Err(Error::shape("classification_metrics", scores.shape(), &[labels.len()]));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {l} outside {k} classes")));
    }
    let mut tp = vec![0usize; k];
    let mut predicted = vec![0usize; k];
    let mut counts = vec![0usize; k];
    let mut hits: BTreeMap<usize, usize> = RECALL_KS.iter().map(|&kk| (kk, 0)).collect();
    for (i, &y) in labels.iter().enumerate() {
        let order = ranking(scores.row(i));
        let pos = order.iter().position(|&c| c == y).expect("label in range");
        for (&kk, h) in hits.iter_mut() {
            if pos < kk {
                *h += 1;
            }
        }
        counts[y] += 1;
        predicted[order[0]] += 1;
        if order[0] == y {
            tp[y] += 1;
        }
    }
    let mut f1_sum = 0.0;
    let mut prec_sum = 0.0;
    for c in 0..k {
        let p = if predicted[c] > 0 { tp[c] as f64 / predicted[c] as f64 } else { 0.0 };
        let r = if counts[c] > 0 { tp[c] as f64 / counts[c] as f64 } else { 0.0 };
        prec_sum += p;
        f1_sum += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    Ok(MetricsReport {
        accuracy: tp.iter().sum::<usize>() as f64 / n as f64,
        macro_f1: f1_sum / k as f64,
        precision: prec_sum / k as f64,
        recall_at: hits.into_iter().map(|(kk, h)| (kk, h as f64 / n as f64)).collect(),
        per_class_counts: counts,
    })
}

/// Predicts the class whose prompt embedding has the highest cosine
/// similarity with each image embedding.
pub fn zero_shot_classify(
    img_embeds: &Tensor,
    prompts: &PromptSet,
    text_encoder: &TextEncoder,
    labels: &[usize],
) -> Result<MetricsReport> {
    if img_embeds.cols() != text_encoder.output_dim() {
        return Err(Error::shape("zero_shot_classify", img_embeds.shape(), &[text_encoder.output_dim()]));
    }
    let classes = prompts.class_embeddings(text_encoder)?;
    let scores = img_embeds.l2_normalize_rows()?.matmul_nt(&classes)?;
    classification_metrics(&scores, labels)
}

/// Recall@k where query `i`'s single correct gallery row is `pair_index[i]`.
pub fn retrieval(query: &Tensor, gallery: &Tensor, pair_index: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if query.rows() != pair_index.len() || query.cols() != gallery.cols() {
        return Err(Error::shape("retrieval", query.shape(), gallery.shape()));
    }
    if let Some(&j) = pair_index.iter().find(|&&j| j >= gallery.rows()) {
        return Err(Error::InvalidArgument(format!(
            "pair index {j} outside gallery of {}",
            gallery.rows()
        )));
    }
    let sims = query.l2_normalize_rows()?.matmul_nt(&gallery.l2_normalize_rows()?)?;
    let mut hits: BTreeMap<usize, usize> = RECALL_KS.iter().map(|&k| (k, 0)).collect();
    for (i, &j) in pair_index.iter().enumerate() {
        let row = sims.row(i);
        let s = row[j];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(g, &v)| v > s || (v == s && g < j))
            .count();
        for (&k, h) in hits.iter_mut() {
            if rank < k {
                *h += 1;
            }
        }
    }
    let n = pair_index.len() as f64;
    Ok(hits.into_iter().map(|(k, h)| (k, h as f64 / n)).collect())
}

/// Recall@k where any gallery row sharing the query's label is relevant: a
/// hit when the highest-ranked relevant row is within the top k.
pub fn retrieval_by_label(
    query: &Tensor,
    gallery: &Tensor,
    query_labels: &[usize],
    gallery_labels: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if query.rows() != query_labels.len() || gallery.rows() != gallery_labels.len() || query.cols() != gallery.cols() {
        return Err(Error::shape("retrieval_by_label", query.shape(), gallery.shape()));
    }
    let sims = query.l2_normalize_rows()?.matmul_nt(&gallery.l2_normalize_rows()?)?;
    let mut hits: BTreeMap<usize, usize> = RECALL_KS.iter().map(|&k| (k, 0)).collect();
    for (i, &y) in query_labels.iter().enumerate() {
        let order = ranking(sims.row(i));
        let Some(pos) = order.iter().position(|&g| gallery_labels[g] == y) else { continue };
        for (&k, h) in hits.iter_mut() {
            if pos < k {
                *h += 1;
            }
        }
    }
    let n = query_labels.len() as f64;
    Ok(hits.into_iter().map(|(k, h)| (k, h as f64 / n)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossRetrieval {
    pub a: String,
    pub b: String,
    pub a_to_b: BTreeMap<usize, f64>,
    pub b_to_a: BTreeMap<usize, f64>,
    /// Mean of both directions.
    pub mean: BTreeMap<usize, f64>,
}

/// Image-to-image retrieval between two modalities on the probe set. A
/// gallery image is relevant when it depicts the query's class.
pub fn cross_image_retrieval(a: &ModalityBundle, b: &ModalityBundle, probe: &EvalSplit) -> Result<CrossRetrieval> {
    let signals = |m: &str| {
        probe
            .probe_signals
            .get(m)
            .ok_or_else(|| Error::UnknownModality(m.to_string()))
    };
    let ea = a.image.encode(signals(&a.modality)?)?;
    let eb = b.image.encode(signals(&b.modality)?)?;
    let labels = &probe.probe_labels;
    let a_to_b = retrieval_by_label(&ea, &eb, labels, labels)?;
    let b_to_a = retrieval_by_label(&eb, &ea, labels, labels)?;
    let mean = a_to_b.iter().map(|(k, v)| (*k, 0.5 * (v + b_to_a[k]))).collect();
    Ok(CrossRetrieval {
        a: a.modality.clone(),
        b: b.modality.clone(),
        a_to_b,
        b_to_a,
        mean,
    })
}

const PROBE_STEPS: usize = 500;
const PROBE_LR: f64 = 0.1;

/// Multinomial logistic regression by full-batch gradient descent from zero.
/// Returns `([d × K] weights, [K] bias)`.
pub fn fit_softmax_regression(x: &Tensor, labels: &[usize], k: usize) -> Result<(Tensor, Vec<f64>)> {
    let (n, d) = (x.rows(), x.cols());
    let mut w = Tensor::zeros(&[d, k]);
    let mut b = vec![0.0; k];
    for _ in 0..PROBE_STEPS {
        let logits = x.matmul(&w)?;
        let mut g = vec![0.0; n * k];
        for i in 0..n {
            let row = logits.row(i);
            let mx = row
                .iter()
                .zip(&b)
                .map(|(l, bb)| l + bb)
                .fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().zip(&b).map(|(l, bb)| (l + bb - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..k {
                let y = if labels[i] == c { 1.0 } else { 0.0 };
                g[i * k + c] = (e[c] / z - y) / n as f64;
            }
        }
        let g = Tensor::from_parts(vec![n, k], g);
        let gw = x.matmul_tn(&g)?;
        w = w.sub(&gw.scale(PROBE_LR)?)?;
        for c in 0..k {
            b[c] -= PROBE_LR * (0..n).map(|i| g.get(i, c)).sum::<f64>();
        }
    }
    Ok((w, b))
}

pub fn predict_softmax_regression(x: &Tensor, w: &Tensor, b: &[f64]) -> Result<Vec<usize>> {
    let logits = x.matmul(w)?;
    Ok((0..x.rows())
        .map(|i| {
            let s: Vec<f64> = logits.row(i).iter().zip(b).map(|(l, bb)| l + bb).collect();
            ranking(&s)[0]
        })
        .collect())
}

/// Fits a linear probe on `shots` seeded examples per class of the training
/// pool and returns accuracy on the test set.
pub fn few_shot_probe(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
    shots: usize,
    seed: u64,
) -> Result<f64> {
    if shots == 0 {
        return Err(Error::InvalidArgument("shots must be at least 1".into()));
    }
    if train.rows() != train_labels.len() || test.rows() != test_labels.len() {
        return Err(Error::shape("few_shot_probe", train.shape(), test.shape()));
    }
    let k = train_labels.iter().chain(test_labels).max().map_or(0, |m| m + 1);
    let mut rng = rng_for(seed, "few-shot");
    let mut chosen = Vec::with_capacity(shots * k);
    for c in 0..k {
        let mut pool: Vec<usize> = (0..train_labels.len()).filter(|&i| train_labels[i] == c).collect();
        if pool.len() < shots {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} examples, fewer than {shots} shots",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        chosen.extend_from_slice(&pool[..shots]);
    }
    let x = train.select_rows(&chosen)?;
    let y: Vec<usize> = chosen.iter().map(|&i| train_labels[i]).collect();
    let (w, b) = fit_softmax_regression(&x, &y, k)?;
    let pred = predict_softmax_regression(test, &w, &b)?;
    let correct = pred.iter().zip(test_labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / test_labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotSummary {
    pub shots: usize,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

/// `few_shot_probe` over several seeds; population standard deviation.
pub fn few_shot_summary(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
    shots: usize,
    seeds: &[u64],
) -> Result<FewShotSummary> {
    let per_seed = seeds
        .iter()
        .map(|&s| few_shot_probe(train, train_labels, test, test_labels, shots, s))
        .collect::<Result<Vec<_>>>()?;
    let n = per_seed.len() as f64;
    let mean = per_seed.iter().sum::<f64>() / n;
    let std = (per_seed.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
    Ok(FewShotSummary {
        shots,
        mean,
        std,
        per_seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyEntry {
    pub teacher_accuracy: f64,
    pub student_accuracy: f64,
    /// `student - teacher`.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub per_modality: BTreeMap<String, ConsistencyEntry>,
    pub mean_delta: f64,
}

/// Held-out zero-shot accuracy of every modality with its own text encoder
/// and with the student.
pub fn student_consistency(
    bundles: &BTreeMap<String, ModalityBundle>,
    student: &StudentTextEncoder,
    eval: &EvalSplit,
    prompts: &BTreeMap<String, PromptSet>,
) -> Result<ConsistencyReport> {
    let mut per_modality = BTreeMap::new();
    for (m, b) in bundles {
        let held = eval.heldout.get(m).ok_or_else(|| Error::UnknownModality(m.clone()))?;
        let p = prompts.get(m).ok_or_else(|| Error::UnknownModality(m.clone()))?;
        let img = b.image.encode(&held.signals)?;
        let teacher = zero_shot_classify(&img, p, &b.text, &held.labels)?.accuracy;
        let stud = zero_shot_classify(&img, p, &student.encoder, &held.labels)?.accuracy;
        per_modality.insert(
            m.clone(),
            ConsistencyEntry {
                teacher_accuracy: teacher,
                student_accuracy: stud,
                delta: stud - teacher,
            },
        );
    }
    let mean_delta = per_modality.values().map(|e| e.delta).sum::<f64>() / per_modality.len().max(1) as f64;
    Ok(ConsistencyReport {
        per_modality,
        mean_delta,
    })
}

/// One result row: `(task, pair, key, seed)` plus named metric values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task: String,
    /// A modality id or `a:b` pair.
    pub pair: String,
    /// `k=…` or `shots=…`, empty when not applicable.
    pub key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub metrics: BTreeMap<String, f64>,
}

impl EvalRecord {
    pub fn new(task: &str, pair: &str, key: &str, seed: Option<u64>) -> Self {
        EvalRecord {
            task: task.into(),
            pair: pair.into(),
            key: key.into(),
            seed,
            metrics: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &str, v: f64) -> Self {
        self.metrics.insert(name.into(), v);
        self
    }
}

pub fn metrics_to_record(task: &str, pair: &str, r: &MetricsReport) -> EvalRecord {
    let mut rec = EvalRecord::new(task, pair, "", None)
        .with("accuracy", r.accuracy)
        .with("macro_f1", r.macro_f1)
        .with("precision", r.precision);
    for (k, v) in &r.recall_at {
        rec = rec.with(&format!("recall@{k}"), *v);
    }
    rec
}

pub fn recall_record(task: &str, pair: &str, recall: &BTreeMap<usize, f64>) -> EvalRecord {
    recall
        .iter()
        .fold(EvalRecord::new(task, pair, "", None), |r, (k, v)| r.with(&format!("recall@{k}"), *v))
}

/// Flat CSV: one line per metric value.
pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("task,pair,key,seed,metric,value\n");
    for r in records {
        for (name, v) in &r.metrics {
            let seed = r.seed.map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{},{}\n", r.task, r.pair, r.key, seed, name, v));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_unit(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = rng_for(seed, "unit");
        let data = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::matrix(n, d, data).unwrap().l2_normalize_rows().unwrap()
    }

    #[test]
    fn self_retrieval_is_perfect() {
        let q = random_unit(30, 8, 1);
        let idx: Vec<usize> = (0..30).collect();
        let r = retrieval(&q, &q, &idx).unwrap();
        assert_eq!(r[&1], 1.0);
    }

    #[test]
    fn retrieval_rejects_out_of_range_index() {
        let q = random_unit(2, 4, 1);
        assert!(retrieval(&q, &q, &[0, 2]).is_err());
    }

    #[test]
    fn ties_go_to_lower_index() {
        let g = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let q = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let r = retrieval(&q, &g, &[0, 1]).unwrap();
        assert_eq!(r[&1], 0.5);
    }

    #[test]
    fn chance_level_retrieval() {
        let (g, trials) = (100, 100);
        let mut r1 = 0.0;
        let mut r10 = 0.0;
        let mut rng = rng_for(5, "pairs");
        for t in 0..trials {
            let gallery = random_unit(g, 64, 1000 + t);
            let query = random_unit(100, 64, 5000 + t);
            let idx: Vec<usize> = (0..100).map(|_| rng.random_range(0..g)).collect();
            let r = retrieval(&query, &gallery, &idx).unwrap();
            r1 += r[&1];
            r10 += r[&10];
        }
        r1 /= trials as f64;
        r10 /= trials as f64;
        assert!((r1 - 0.01).abs() < 0.01, "{r1}");
        assert!((r10 - 0.10).abs() < 0.01, "{r10}");
    }

    #[test]
    fn classification_metrics_perfect_and_bounded() {
        let scores = Tensor::identity(4);
        let m = classification_metrics(&scores, &[0, 1, 2, 3]).unwrap();
        assert_eq!((m.accuracy, m.macro_f1, m.precision), (1.0, 1.0, 1.0));
        let m = classification_metrics(&random_unit(50, 4, 3), &vec![1; 50]).unwrap();
        assert!(m.recall_at[&1] <= m.recall_at[&5] && m.recall_at[&5] <= m.recall_at[&10]);
        assert_eq!(m.recall_at[&5], 1.0);
    }

    #[test]
    fn probe_fits_separable_full_data() {
        let x = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![0.9, 0.1],
            vec![0.0, 1.0],
            vec![0.1, 0.9],
            vec![-1.0, 0.0],
            vec![-0.9, -0.1],
        ])
        .unwrap();
        let y = [0, 0, 1, 1, 2, 2];
        assert_eq!(few_shot_probe(&x, &y, &x, &y, 2, 0).unwrap(), 1.0);
        assert!(few_shot_probe(&x, &y, &x, &y, 3, 0).is_err());
    }

    #[test]
    fn prompt_set_needs_templates() {
        assert!(PromptSet::new(vec![vec![vec![1]], vec![]], PromptMode::Multi).is_err());
    }

    #[test]
    fn csv_has_one_line_per_metric() {
        let r = EvalRecord::new("cross-image", "a:b", "k", Some(1)).with("recall@1", 0.5).with("recall@5", 1.0);
        assert_eq!(records_to_csv(&[r]).lines().count(), 3);
    }
}

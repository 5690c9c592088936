//! Synthetic multi-modality corpora driven by one shared latent concept model.
//!
//! Each modality observes a class latent through its own fixed random mixing
//! matrix plus noise, and describes it with templates over a shared token
//! vocabulary. Nothing links a signal of one modality to a signal of another;
//! the class tokens shared by every modality's text are the only bridge.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{parse_json, read_file, write_file, Reader, Writer};
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const CORPUS_MAGIC: &[u8; 4] = b"M3BD";
pub const CORPUS_VERSION: u32 = 1;
const MAX_COS: f64 = 0.3;
const REJECTION_ROUNDS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptModel {
    pub num_classes: usize,
    pub latent_dim: usize,
    /// `[K × d_z]`, unit rows with pairwise |cos| < 0.3.
    #[serde(with = "tensor_rows")]
    pub class_latents: Tensor,
    pub noise_sigma: f64,
}

/// Draws `K` unit latents one at a time, rejecting candidates whose |cos| with
/// an accepted latent reaches 0.3.
pub fn generate_concepts(num_classes: usize, latent_dim: usize, seed: u64) -> Result<ConceptModel> {
    if num_classes < 2 || latent_dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes and a positive latent dim, got K={num_classes}, d_z={latent_dim}"
        )));
    }
    let mut rng = rng_for(seed, "concepts");
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    while accepted.len() < num_classes {
        let mut found = None;
        for _ in 0..REJECTION_ROUNDS {
            let mut v: Vec<f64> = (0..latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-12 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= n);
            let ok = accepted
                .iter()
                .all(|a| a.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>().abs() < MAX_COS);
            if ok {
                found = Some(v);
                break;
            }
        }
        match found {
            Some(v) => accepted.push(v),
            None => {
                return Err(Error::Generation(format!(
                    "could not place latent {} of {num_classes} with |cos| < {MAX_COS} in {latent_dim} \
                     dimensions after {REJECTION_ROUNDS} rounds; use a larger latent dimension",
                    accepted.len() + 1
                )))
            }
        }
    }
    Ok(ConceptModel {
        num_classes,
        latent_dim,
        class_latents: Tensor::from_rows(&accepted)?,
        noise_sigma: 0.1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub modality: String,
    pub obs_dim: usize,
    /// `[d_m × d_z]`
    #[serde(with = "tensor_rows")]
    pub mixing: Tensor,
    pub corpus_size: usize,
    pub vocab: usize,
    /// `templates[k]` are the token sequences describing class `k`.
    pub templates: Vec<Vec<Vec<usize>>>,
}

impl ModalitySpec {
    /// Random mixing matrix and text templates for one modality. Token `k`
    /// is the class token of class `k` in every modality; the remaining ids
    /// are filler words.
    pub fn generate(
        modality: &str,
        obs_dim: usize,
        corpus_size: usize,
        concepts: &ConceptModel,
        vocab: usize,
        templates_per_class: usize,
        seed: u64,
    ) -> Result<Self> {
        let k = concepts.num_classes;
        if vocab <= k {
            return Err(Error::InvalidArgument(format!(
                "vocabulary of {vocab} leaves no filler tokens beyond {k} class tokens"
            )));
        }
        if obs_dim == 0 || corpus_size == 0 || templates_per_class == 0 {
            return Err(Error::InvalidArgument(format!("degenerate spec for modality '{modality}'")));
        }
        let mut rng = rng_for(seed, &format!("spec/{modality}"));
        let d_z = concepts.latent_dim;
        let mixing = (0..obs_dim * d_z).map(|_| StandardNormal.sample(&mut rng)).collect();
        let templates = (0..k)
            .map(|class| {
                (0..templates_per_class)
                    .map(|_| {
                        let len = rng.random_range(3..=6);
                        let mut seq: Vec<usize> = (0..len - 1).map(|_| rng.random_range(k..vocab)).collect();
                        let at = rng.random_range(0..len);
                        seq.insert(at, class);
                        seq
                    })
                    .collect()
            })
            .collect();
        Ok(ModalitySpec {
            modality: modality.to_string(),
            obs_dim,
            mixing: Tensor::from_parts(vec![obs_dim, d_z], mixing),
            corpus_size,
            vocab,
            templates,
        })
    }

    fn validate(&self, concepts: &ConceptModel) -> Result<()> {
        if self.templates.len() != concepts.num_classes {
            return Err(Error::InvalidArgument(format!(
                "modality '{}' has templates for {} classes, expected {}",
                self.modality,
                self.templates.len(),
                concepts.num_classes
            )));
        }
        if let Some(class) = self.templates.iter().position(Vec::is_empty) {
            return Err(Error::InvalidArgument(format!(
                "modality '{}' has an empty template pool for class {class}",
                self.modality
            )));
        }
        for (class, pool) in self.templates.iter().enumerate() {
            for t in pool {
                if !t.contains(&class) || t.iter().any(|&tok| tok >= self.vocab) {
                    return Err(Error::InvalidArgument(format!(
                        "template {t:?} of class {class} lacks its class token or leaves the vocabulary"
                    )));
                }
            }
        }
        if self.mixing.shape() != [self.obs_dim, concepts.latent_dim] {
            return Err(Error::shape("mixing", self.mixing.shape(), &[self.obs_dim, concepts.latent_dim]));
        }
        Ok(())
    }

    /// `mixing · (z_k + ε)` with `ε ~ N(0, σ² I)`.
    fn observe(&self, concepts: &ConceptModel, class: usize, rng: &mut impl Rng) -> Vec<f64> {
        let z = concepts.class_latents.row(class);
        let latent: Vec<f64> = if concepts.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, concepts.noise_sigma).expect("valid sigma");
            z.iter().map(|v| v + noise.sample(rng)).collect()
        } else {
            z.to_vec()
        };
        (0..self.obs_dim)
            .map(|i| self.mixing.row(i).iter().zip(&latent).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Image signals, token sequences and labels of one modality, stored
/// column-wise. Records never reference another modality.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub modality: String,
    pub num_classes: usize,
    pub vocab: usize,
    /// `[|D_m| × d_m]`
    pub signals: Tensor,
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

/// One record, borrowed from a corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record<'a> {
    pub signal: &'a [f64],
    pub tokens: &'a [usize],
    pub label: usize,
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.signals.cols()
    }

    pub fn record(&self, i: usize) -> Record<'_> {
        Record {
            signal: self.signals.row(i),
            tokens: &self.tokens[i],
            label: self.labels[i],
        }
    }

    pub fn signal_batch(&self, ids: &[usize]) -> Result<Tensor> {
        self.signals.select_rows(ids)
    }

    pub fn token_batch(&self, ids: &[usize]) -> Vec<Vec<usize>> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    pub fn label_batch(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CORPUS_MAGIC);
        w.u32(CORPUS_VERSION);
        w.u32(self.num_classes as u32);
        w.u32(self.obs_dim() as u32);
        w.u32(self.vocab as u32);
        w.u64(self.len() as u64);
        for i in 0..self.len() {
            for &v in self.signals.row(i) {
                w.f64(v);
            }
            w.varint(self.tokens[i].len() as u64);
            for &t in &self.tokens[i] {
                w.varint(t as u64);
            }
            w.u32(self.labels[i] as u32);
        }
        w.buf
    }

    pub fn from_bytes(modality: &str, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4, "magic")?;
        if magic != CORPUS_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {magic:?}, expected corpus file (M3BD)"),
            });
        }
        let version = r.u32("version")?;
        if version != CORPUS_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CORPUS_VERSION,
            });
        }
        let num_classes = r.u32("class count")? as usize;
        let obs_dim = r.u32("signal dim")? as usize;
        let vocab = r.u32("vocab size")? as usize;
        let n = r.u64("record count")? as usize;
        if obs_dim == 0 {
            return Err(r.err("zero signal dimension"));
        }
        let mut signals = Vec::with_capacity(n.min(1 << 20) * obs_dim);
        let mut tokens = Vec::with_capacity(n.min(1 << 20));
        let mut labels = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            for _ in 0..obs_dim {
                signals.push(r.f64("signal")?);
            }
            let len = r.varint("token count")? as usize;
            let mut seq = Vec::with_capacity(len.min(1024));
            for _ in 0..len {
                let at = r.offset();
                let t = r.varint("token")? as usize;
                if t >= vocab {
                    return Err(Error::Format {
                        offset: at,
                        msg: format!("token {t} outside vocabulary {vocab}"),
                    });
                }
                seq.push(t);
            }
            tokens.push(seq);
            let at = r.offset();
            let label = r.u32("label")? as usize;
            if label >= num_classes {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("label {label} outside {num_classes} classes"),
                });
            }
            labels.push(label);
        }
        if !r.is_done() {
            return Err(r.err("trailing bytes after last record"));
        }
        if n == 0 {
            return Err(r.err("corpus has no records"));
        }
        Ok(SyntheticCorpus {
            modality: modality.to_string(),
            num_classes,
            vocab,
            signals: Tensor::new(vec![n, obs_dim], signals)?,
            tokens,
            labels,
        })
    }
}

/// Generates `count` records with classes assigned round-robin.
fn sample_records(
    concepts: &ConceptModel,
    spec: &ModalitySpec,
    count: usize,
    with_text: bool,
    rng: &mut impl Rng,
) -> SyntheticCorpus {
    let mut signals = Vec::with_capacity(count * spec.obs_dim);
    let mut tokens = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % concepts.num_classes;
        signals.extend(spec.observe(concepts, class, rng));
        let seq = if with_text {
            spec.templates[class].choose(rng).expect("validated non-empty").clone()
        } else {
            Vec::new()
        };
        tokens.push(seq);
        labels.push(class);
    }
    SyntheticCorpus {
        modality: spec.modality.clone(),
        num_classes: concepts.num_classes,
        vocab: spec.vocab,
        signals: Tensor::from_parts(vec![count, spec.obs_dim], signals),
        tokens,
        labels,
    }
}

pub fn generate_corpus(concepts: &ConceptModel, spec: &ModalitySpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate(concepts)?;
    let mut rng = rng_for(seed, &format!("corpus/{}", spec.modality));
    let corpus = sample_records(concepts, spec, spec.corpus_size, true, &mut rng);
    corpus.signals.check_finite("generate_corpus")?;
    Ok(corpus)
}

/// Held-out records per modality plus the cross-modal probe set. Probe
/// tuple `i` carries class `probe_labels[i]` and one fresh signal per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSplit {
    pub heldout: BTreeMap<String, SyntheticCorpus>,
    pub probe_labels: Vec<usize>,
    pub probe_signals: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityDef {
    pub id: String,
    pub obs_dim: usize,
    pub corpus_size: usize,
}

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub latent_dim: usize,
    pub noise_sigma: f64,
    pub vocab: usize,
    pub templates_per_class: usize,
    pub heldout_per_modality: usize,
    pub probe_tuples: usize,
    pub modalities: Vec<ModalityDef>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let def = |id: &str, obs_dim, corpus_size| ModalityDef {
            id: id.to_string(),
            obs_dim,
            corpus_size,
        };
        DatasetSpec {
            seed: 0,
            num_classes: 8,
            latent_dim: 16,
            noise_sigma: 0.1,
            vocab: 64,
            templates_per_class: 4,
            heldout_per_modality: 200,
            probe_tuples: 50,
            modalities: vec![
                def("xray", 48, 4000),
                def("ct", 96, 1500),
                def("retina", 32, 800),
                def("ecg", 24, 400),
                def("path", 64, 2000),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub concepts: ConceptModel,
    pub modality_specs: BTreeMap<String, ModalitySpec>,
    pub corpora: BTreeMap<String, SyntheticCorpus>,
    pub eval: EvalSplit,
}

#[derive(Serialize, Deserialize)]
struct DatasetMetadata {
    format_version: u32,
    fingerprint: String,
    spec: DatasetSpec,
    concepts: ConceptModel,
    modality_specs: BTreeMap<String, ModalitySpec>,
}

impl DatasetSpec {
    /// Modality ids in declaration order.
    pub fn modality_ids(&self) -> Vec<String> {
        self.modalities.iter().map(|m| m.id.clone()).collect()
    }

    pub fn fingerprint(&self) -> Result<String> {
        crate::config::fingerprint(self)
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    let ids: HashSet<&str> = spec.modalities.iter().map(|m| m.id.as_str()).collect();
    if ids.len() != spec.modalities.len() || ids.is_empty() {
        return Err(Error::InvalidArgument("modality ids must be unique and non-empty".into()));
    }
    let mut concepts = generate_concepts(spec.num_classes, spec.latent_dim, spec.seed)?;
    concepts.noise_sigma = spec.noise_sigma;

    let mut modality_specs = BTreeMap::new();
    let mut corpora = BTreeMap::new();
    let mut heldout = BTreeMap::new();
    let mut probe_signals = BTreeMap::new();
    for def in &spec.modalities {
        let ms = ModalitySpec::generate(
            &def.id,
            def.obs_dim,
            def.corpus_size,
            &concepts,
            spec.vocab,
            spec.templates_per_class,
            spec.seed,
        )?;
        corpora.insert(def.id.clone(), generate_corpus(&concepts, &ms, spec.seed)?);
        let mut rng = rng_for(spec.seed, &format!("heldout/{}", def.id));
        heldout.insert(
            def.id.clone(),
            sample_records(&concepts, &ms, spec.heldout_per_modality, true, &mut rng),
        );
        let mut rng = rng_for(spec.seed, &format!("probe/{}", def.id));
        let probe = sample_records(&concepts, &ms, spec.probe_tuples, false, &mut rng);
        probe_signals.insert(def.id.clone(), probe.signals);
        modality_specs.insert(def.id.clone(), ms);
    }
    let probe_labels = (0..spec.probe_tuples).map(|i| i % spec.num_classes).collect();
    Ok(Dataset {
        spec: spec.clone(),
        concepts,
        modality_specs,
        corpora,
        eval: EvalSplit {
            heldout,
            probe_labels,
            probe_signals,
        },
    })
}

/// The five-modality imbalanced default dataset.
pub fn default_dataset(seed: u64) -> Result<Dataset> {
    generate_dataset(&DatasetSpec {
        seed,
        ..DatasetSpec::default()
    })
}

pub const METADATA_FILE: &str = "dataset.json";

pub fn corpus_file(modality: &str) -> String {
    format!("{modality}.m3bd")
}

impl Dataset {
    pub fn modality_ids(&self) -> Vec<String> {
        self.spec.modality_ids()
    }

    pub fn sizes(&self) -> BTreeMap<String, u64> {
        self.corpora.iter().map(|(m, c)| (m.clone(), c.len() as u64)).collect()
    }

    /// Writes one corpus file per modality plus a JSON metadata sidecar. The
    /// evaluation split is regenerated from the metadata on load.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (m, corpus) in &self.corpora {
            write_file(&dir.join(corpus_file(m)), &corpus.to_bytes())?;
        }
        let meta = DatasetMetadata {
            format_version: CORPUS_VERSION,
            fingerprint: self.spec.fingerprint()?,
            spec: self.spec.clone(),
            concepts: self.concepts.clone(),
            modality_specs: self.modality_specs.clone(),
        };
        let json = serde_json::to_string_pretty(&meta)?;
        write_file(&dir.join(METADATA_FILE), json.as_bytes())
    }

    /// Loads a saved dataset, checking that the corpora on disk are exactly
    /// what the stored spec generates.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let text = String::from_utf8(read_file(&dir.join(METADATA_FILE))?).map_err(|e| Error::Format {
            offset: e.utf8_error().valid_up_to() as u64,
            msg: "metadata is not UTF-8".into(),
        })?;
        let meta: DatasetMetadata = parse_json(&text)?;
        if meta.format_version != CORPUS_VERSION {
            return Err(Error::Version {
                found: meta.format_version,
                expected: CORPUS_VERSION,
            });
        }
        let found = meta.spec.fingerprint()?;
        if found != meta.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: meta.fingerprint,
                found,
            });
        }
        let regenerated = generate_dataset(&meta.spec)?;
        if regenerated.concepts != meta.concepts || regenerated.modality_specs != meta.modality_specs {
            return Err(Error::Config("stored concept model does not match its spec".into()));
        }
        for (m, corpus) in &regenerated.corpora {
            let bytes = read_file(&dir.join(corpus_file(m)))?;
            let on_disk = SyntheticCorpus::from_bytes(m, &bytes)?;
            if &on_disk != corpus {
                return Err(Error::Config(format!("corpus '{m}' does not match the dataset spec")));
            }
        }
        Ok(regenerated)
    }
}

/// SHA-256 of every signal row, for leakage checks.
pub fn signal_hashes(signals: &Tensor) -> HashSet<[u8; 32]> {
    (0..signals.rows())
        .map(|i| {
            let mut h = Sha256::new();
            for v in signals.row(i) {
                h.update(v.to_le_bytes());
            }
            h.finalize().into()
        })
        .collect()
}

mod tensor_rows {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::tensor::Tensor;

    pub fn serialize<S: Serializer>(t: &Tensor, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = (0..t.rows()).map(|i| t.row(i)).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Tensor, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Tensor::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

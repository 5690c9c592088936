//! Named-tensor checkpoint files.
//!
//! Layout: magic `M3CK`, u32 version, 32-byte config fingerprint, u32 entry
//! count, then entries sorted by name. Each entry is a u32 name length, the
//! UTF-8 name, a u8 dtype tag (0 = f64, 1 = u64), a u32 rank, u64 dims, and
//! the little-endian payload.

use std::collections::BTreeMap;
use std::path::Path;

use crate::encoders::{ImageEncoder, LoraAdapter, Linear, Mlp, StudentTextEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::io::{read_file, write_file, Reader, Writer};
use crate::tensor::Tensor;
use crate::training::{AdamW, AdamWConfig, BindState, DistillState, ModalityBundle, Moments};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"M3CK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F64(Tensor),
    U64 { shape: Vec<usize>, data: Vec<u64> },
}

impl Entry {
    pub fn u64_scalar(v: u64) -> Self {
        Entry::U64 {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Entry::F64(t) => t.shape(),
            Entry::U64 { shape, .. } => shape,
        }
    }

    pub fn dtype(&self) -> &'static str {
        match self {
            Entry::F64(_) => "f64",
            Entry::U64 { .. } => "u64",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Hex SHA-256 of the canonical run config.
    pub fingerprint: String,
    pub entries: BTreeMap<String, Entry>,
}

fn decode_hex32(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::InvalidArgument(format!("fingerprint must be 64 hex digits, got '{s}'"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

impl Checkpoint {
    pub fn new(fingerprint: &str) -> Result<Self> {
        decode_hex32(fingerprint)?;
        Ok(Checkpoint {
            fingerprint: fingerprint.to_string(),
            entries: BTreeMap::new(),
        })
    }

    pub fn insert(&mut self, name: impl Into<String>, e: Entry) {
        self.entries.insert(name.into(), e);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.entries.get(name) {
            Some(Entry::F64(t)) => Ok(t),
            Some(_) => Err(Error::InvalidArgument(format!("entry '{name}' is not f64"))),
            None => Err(Error::InvalidArgument(format!("checkpoint has no entry '{name}'"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.entries.get(name) {
            Some(Entry::U64 { data, .. }) if data.len() == 1 => Ok(data[0]),
            Some(_) => Err(Error::InvalidArgument(format!("entry '{name}' is not a u64 scalar"))),
            None => Err(Error::InvalidArgument(format!("checkpoint has no entry '{name}'"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.bytes(&decode_hex32(&self.fingerprint)?);
        w.u32(self.entries.len() as u32);
        for (name, e) in &self.entries {
            w.u32(name.len() as u32);
            w.bytes(name.as_bytes());
            w.u8(match e {
                Entry::F64(_) => 0,
                Entry::U64 { .. } => 1,
            });
            w.u32(e.shape().len() as u32);
            for &d in e.shape() {
                w.u64(d as u64);
            }
            match e {
                Entry::F64(t) => t.data().iter().for_each(|&v| w.f64(v)),
                Entry::U64 { data, .. } => data.iter().for_each(|&v| w.u64(v)),
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            let hint = if magic == crate::synth::CORPUS_MAGIC { " (this is an M3BD corpus file)" } else { "" };
            return Err(Error::Format {
                offset: 0,
                msg: format!("wrong magic {:?}, expected \"M3CK\"{hint}", String::from_utf8_lossy(magic)),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let fingerprint = crate::config::hex(r.take(32, "fingerprint")?);
        let count = r.u32("entry count")?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let at = r.offset();
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format {
                    offset: at,
                    msg: "entry name is not UTF-8".into(),
                })?
                .to_string();
            let tag = r.u8("dtype")?;
            let rank = r.u32("rank")? as usize;
            if rank == 0 || rank > 8 {
                return Err(r.err(format!("entry '{name}' has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = r.u64("dim")? as usize;
                if d == 0 {
                    return Err(r.err(format!("entry '{name}' has a zero dimension")));
                }
                shape.push(d);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= bytes.len() / 8)
                .ok_or_else(|| r.err(format!("entry '{name}' is larger than the file")))?;
            let e = match tag {
                0 => {
                    let data = (0..n).map(|_| r.f64("payload")).collect::<Result<Vec<_>>>()?;
                    Entry::F64(Tensor::from_parts(shape, data))
                }
                1 => {
                    let data = (0..n).map(|_| r.u64("payload")).collect::<Result<Vec<_>>>()?;
                    Entry::U64 { shape, data }
                }
                t => return Err(r.err(format!("unknown dtype tag {t}"))),
            };
            if entries.insert(name.clone(), e).is_some() {
                return Err(r.err(format!("duplicate entry '{name}'")));
            }
        }
        if !r.is_done() {
            return Err(r.err("trailing bytes after last entry"));
        }
        Ok(Checkpoint { fingerprint, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    /// Reads a checkpoint. With `expected = Some(fp)`, a different stored
    /// fingerprint is an error unless `force` is set.
    pub fn load(path: &Path, expected: Option<&str>, force: bool) -> Result<Self> {
        let ck = Checkpoint::from_bytes(&read_file(path)?)?;
        if let Some(fp) = expected {
            if fp != ck.fingerprint && !force {
                return Err(Error::FingerprintMismatch {
                    expected: fp.to_string(),
                    found: ck.fingerprint,
                });
            }
        }
        Ok(ck)
    }
}

// ---------------------------------------------------------------------------
// State <-> entries
// ---------------------------------------------------------------------------

fn put_mlp(ck: &mut Checkpoint, prefix: &str, mlp: &Mlp, frozen: bool) {
    for (i, l) in mlp.layers.iter().enumerate() {
        ck.insert(format!("{prefix}.{i}.weight"), Entry::F64(l.weight.clone()));
        ck.insert(format!("{prefix}.{i}.bias"), Entry::F64(l.bias.clone()));
        if let Some(lora) = &l.lora {
            ck.insert(format!("{prefix}.{i}.lora_a"), Entry::F64(lora.a.clone()));
            ck.insert(format!("{prefix}.{i}.lora_b"), Entry::F64(lora.b.clone()));
            ck.insert(
                format!("{prefix}.{i}.lora_alpha"),
                Entry::F64(Tensor::from_parts(vec![1], vec![lora.alpha])),
            );
        }
    }
    ck.insert(format!("{prefix}.frozen"), Entry::u64_scalar(frozen as u64));
}

fn get_mlp(ck: &Checkpoint, prefix: &str) -> Result<(Vec<Linear>, bool)> {
    let mut layers = Vec::new();
    while ck.entries.contains_key(&format!("{prefix}.{}.weight", layers.len())) {
        let i = layers.len();
        let mut l = Linear::new(
            ck.tensor(&format!("{prefix}.{i}.weight"))?.clone(),
            ck.tensor(&format!("{prefix}.{i}.bias"))?.clone(),
        )?;
        if ck.entries.contains_key(&format!("{prefix}.{i}.lora_a")) {
            let a = ck.tensor(&format!("{prefix}.{i}.lora_a"))?.clone();
            let b = ck.tensor(&format!("{prefix}.{i}.lora_b"))?.clone();
            let alpha = ck.tensor(&format!("{prefix}.{i}.lora_alpha"))?.item();
            let rank = a.cols();
            if a.rows() != l.d_in() || b.shape() != [rank, l.d_out()] {
                return Err(Error::shape("checkpoint lora", a.shape(), b.shape()));
            }
            l.lora = Some(LoraAdapter { a, b, rank, alpha });
        }
        layers.push(l);
    }
    if layers.is_empty() {
        return Err(Error::InvalidArgument(format!("checkpoint has no layers under '{prefix}'")));
    }
    Ok((layers, ck.u64(&format!("{prefix}.frozen"))? != 0))
}

fn put_text(ck: &mut Checkpoint, t: &TextEncoder) {
    let prefix = t.prefix();
    ck.insert(format!("{prefix}.token_table"), Entry::F64(t.token_table.clone()));
    put_mlp(ck, &prefix, &t.mlp, t.frozen);
}

fn get_text(ck: &Checkpoint, modality: &str) -> Result<TextEncoder> {
    let prefix = format!("{modality}.text");
    let (layers, frozen) = get_mlp(ck, &prefix)?;
    let mut t = TextEncoder::from_parts(modality, ck.tensor(&format!("{prefix}.token_table"))?.clone(), layers)?;
    t.frozen = frozen;
    Ok(t)
}

pub fn put_bundles(ck: &mut Checkpoint, bundles: &BTreeMap<String, ModalityBundle>) {
    for b in bundles.values() {
        put_mlp(ck, &b.image.prefix(), &b.image.mlp, b.image.frozen);
        put_text(ck, &b.text);
    }
}

/// Every modality with an image encoder in the checkpoint.
pub fn get_bundles(ck: &Checkpoint) -> Result<BTreeMap<String, ModalityBundle>> {
    let mut out = BTreeMap::new();
    for name in ck.entries.keys() {
        let Some(m) = name.strip_suffix(".image.0.weight") else { continue };
        let (layers, frozen) = get_mlp(ck, &format!("{m}.image"))?;
        let mut image = ImageEncoder::from_layers(m, layers)?;
        image.frozen = frozen;
        let text = get_text(ck, m)?;
        out.insert(
            m.to_string(),
            ModalityBundle {
                modality: m.to_string(),
                image,
                text,
            },
        );
    }
    Ok(out)
}

fn put_optimizer(ck: &mut Checkpoint, prefix: &str, opt: &AdamW) {
    let c = opt.config;
    ck.insert(
        format!("{prefix}.config"),
        Entry::F64(Tensor::from_parts(vec![4], vec![c.beta1, c.beta2, c.eps, c.weight_decay])),
    );
    ck.insert(format!("{prefix}.steps"), Entry::u64_scalar(opt.steps));
    for (name, m) in &opt.state {
        ck.insert(format!("{prefix}.m/{name}"), Entry::F64(m.m.clone()));
        ck.insert(format!("{prefix}.v/{name}"), Entry::F64(m.v.clone()));
        ck.insert(format!("{prefix}.t/{name}"), Entry::u64_scalar(m.step));
    }
}

fn get_optimizer(ck: &Checkpoint, prefix: &str) -> Result<AdamW> {
    let c = ck.tensor(&format!("{prefix}.config"))?.data().to_vec();
    if c.len() != 4 {
        return Err(Error::InvalidArgument("optimizer config must have 4 values".into()));
    }
    let mut opt = AdamW::new(AdamWConfig {
        beta1: c[0],
        beta2: c[1],
        eps: c[2],
        weight_decay: c[3],
    });
    opt.steps = ck.u64(&format!("{prefix}.steps"))?;
    let mkey = format!("{prefix}.m/");
    for (key, _) in ck.entries.range(mkey.clone()..) {
        let Some(name) = key.strip_prefix(&mkey) else { break };
        opt.state.insert(
            name.to_string(),
            Moments {
                m: ck.tensor(key)?.clone(),
                v: ck.tensor(&format!("{prefix}.v/{name}"))?.clone(),
                step: ck.u64(&format!("{prefix}.t/{name}"))?,
            },
        );
    }
    Ok(opt)
}

pub const PHASE_KEY: &str = "meta.phase";
pub const STEP_KEY: &str = "meta.step";

pub const PHASE_PRETRAIN: u64 = 0;
pub const PHASE_BIND: u64 = 1;
pub const PHASE_DISTILL: u64 = 2;

pub fn pretrain_checkpoint(fingerprint: &str, bundles: &BTreeMap<String, ModalityBundle>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(fingerprint)?;
    ck.insert(PHASE_KEY, Entry::u64_scalar(PHASE_PRETRAIN));
    put_bundles(&mut ck, bundles);
    Ok(ck)
}

pub fn bind_checkpoint(fingerprint: &str, state: &BindState) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(fingerprint)?;
    ck.insert(PHASE_KEY, Entry::u64_scalar(PHASE_BIND));
    ck.insert(STEP_KEY, Entry::u64_scalar(state.step as u64));
    ck.insert("meta.log_tau", Entry::F64(Tensor::from_parts(vec![1], vec![state.log_tau])));
    put_bundles(&mut ck, &state.bundles);
    put_optimizer(&mut ck, "opt", &state.optimizer);
    Ok(ck)
}

pub fn bind_state_from(ck: &Checkpoint) -> Result<BindState> {
    expect_phase(ck, PHASE_BIND)?;
    Ok(BindState {
        bundles: get_bundles(ck)?,
        optimizer: get_optimizer(ck, "opt")?,
        step: ck.u64(STEP_KEY)? as usize,
        log_tau: ck.tensor("meta.log_tau")?.item(),
    })
}

/// Distillation state plus the frozen teachers it was trained against.
pub fn distill_checkpoint(
    fingerprint: &str,
    state: &DistillState,
    teachers: &BTreeMap<String, ModalityBundle>,
) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(fingerprint)?;
    ck.insert(PHASE_KEY, Entry::u64_scalar(PHASE_DISTILL));
    ck.insert(STEP_KEY, Entry::u64_scalar(state.step as u64));
    put_bundles(&mut ck, teachers);
    put_text(&mut ck, &state.student.encoder);
    put_optimizer(&mut ck, "opt", &state.optimizer);
    Ok(ck)
}

pub fn distill_state_from(ck: &Checkpoint) -> Result<(DistillState, BTreeMap<String, ModalityBundle>)> {
    expect_phase(ck, PHASE_DISTILL)?;
    let encoder = get_text(ck, crate::encoders::STUDENT_ID)?;
    let state = DistillState {
        student: StudentTextEncoder { encoder },
        optimizer: get_optimizer(ck, "opt")?,
        step: ck.u64(STEP_KEY)? as usize,
    };
    Ok((state, get_bundles(ck)?))
}

pub fn expect_phase(ck: &Checkpoint, phase: u64) -> Result<()> {
    let found = ck.u64(PHASE_KEY)?;
    if found != phase {
        return Err(Error::InvalidArgument(format!(
            "checkpoint holds phase {found}, expected phase {phase}"
        )));
    }
    Ok(())
}

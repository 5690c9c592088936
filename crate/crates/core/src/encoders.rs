//! Per-modality image and text encoders, LoRA adapters, and the student text
//! encoder.
//!
//! Encoders are small tanh MLPs. The final projection has no activation; rows
//! are L2-normalized instead, so every embedding lies on the unit sphere and
//! dot products are cosine similarities.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

/// Shape hyperparameters shared by every encoder in a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub token_dim: usize,
}

impl Default for EncoderArch {
    fn default() -> Self {
        EncoderArch {
            hidden: vec![64, 64],
            embed_dim: 32,
            token_dim: 32,
        }
    }
}

/// Low-rank additive update `(alpha / rank) · A · B` to one weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn delta(&self) -> Result<Tensor> {
        self.a.matmul(&self.b)?.scale(self.scaling())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[d_in × d_out]`
    pub weight: Tensor,
    /// `[d_out]`
    pub bias: Tensor,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.shape().len() != 2 || bias.len() != weight.shape()[1] {
            return Err(Error::shape("Linear::new", weight.shape(), bias.shape()));
        }
        Ok(Linear {
            weight,
            bias,
            lora: None,
        })
    }

    fn random(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        let w = (0..d_in * d_out)
            .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        Linear {
            weight: Tensor::from_parts(vec![d_in, d_out], w),
            bias: Tensor::zeros(&[d_out]),
            lora: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Decides which parameters become tracked tape leaves and remembers them by
/// name so gradients can be routed back to the owning tensors.
#[derive(Debug, Default)]
pub struct ParamScope {
    track: bool,
    train_heads: bool,
    vars: Vec<(String, Var)>,
}

impl ParamScope {
    /// Nothing is tracked; for evaluation.
    pub fn inference() -> Self {
        ParamScope::default()
    }

    /// Adapters and unfrozen base weights are tracked. With `train_heads`, the
    /// final projection of a frozen encoder is tracked as well.
    pub fn training(train_heads: bool) -> Self {
        ParamScope {
            track: true,
            train_heads,
            vars: Vec::new(),
        }
    }

    pub fn tracked(&self) -> &[(String, Var)] {
        &self.vars
    }

    fn bind(&mut self, tape: &mut Tape, name: String, t: &Tensor, trainable: bool) -> Var {
        if self.track && trainable {
            let v = tape.param(t.clone());
            self.vars.push((name, v));
            v
        } else {
            tape.constant(t.clone())
        }
    }
}

/// Stack of linear layers with tanh between them and none after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    fn random(d_in: usize, arch: &EncoderArch, rng: &mut impl Rng) -> Self {
        let mut dims = vec![d_in];
        dims.extend(&arch.hidden);
        dims.push(arch.embed_dim);
        let layers = dims
            .windows(2)
            .map(|w| Linear::random(w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().expect("mlp has layers").d_out()
    }

    fn check_chain(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("encoder needs at least one layer".into()));
        }
        for w in self.layers.windows(2) {
            if w[0].d_out() != w[1].d_in() {
                return Err(Error::shape("mlp", w[0].weight.shape(), w[1].weight.shape()));
            }
        }
        Ok(())
    }

    fn forward(
        &self,
        tape: &mut Tape,
        mut x: Var,
        scope: &mut ParamScope,
        prefix: &str,
        frozen: bool,
    ) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let base_trainable = !frozen || (scope.train_heads && i == last);
            let w = scope.bind(tape, format!("{prefix}.{i}.weight"), &layer.weight, base_trainable);
            let b = scope.bind(tape, format!("{prefix}.{i}.bias"), &layer.bias, base_trainable);
            let mut h = tape.matmul(x, w)?;
            if let Some(lora) = &layer.lora {
                let a = scope.bind(tape, format!("{prefix}.{i}.lora_a"), &lora.a, true);
                let bb = scope.bind(tape, format!("{prefix}.{i}.lora_b"), &lora.b, true);
                let xa = tape.matmul(x, a)?;
                let xab = tape.matmul(xa, bb)?;
                let delta = tape.scale(xab, lora.scaling())?;
                h = tape.add(h, delta)?;
            }
            h = tape.add_bias(h, b)?;
            x = if i == last { h } else { tape.tanh(h)? };
        }
        Ok(x)
    }

    fn attach_lora(&mut self, rank: usize, alpha: f64, rng: &mut impl Rng) -> Result<()> {
        if rank == 0 {
            return Err(Error::InvalidArgument("lora rank must be at least 1".into()));
        }
        for (layer, l) in self.layers.iter().enumerate() {
            if rank > l.d_in().min(l.d_out()) {
                return Err(Error::LoraRank {
                    rank,
                    layer,
                    rows: l.d_in(),
                    cols: l.d_out(),
                });
            }
        }
        let init = Normal::new(0.0, 0.02).expect("valid normal");
        for l in &mut self.layers {
            let a = (0..l.d_in() * rank).map(|_| init.sample(rng)).collect();
            l.lora = Some(LoraAdapter {
                a: Tensor::from_parts(vec![l.d_in(), rank], a),
                b: Tensor::zeros(&[rank, l.d_out()]),
                rank,
                alpha,
            });
        }
        Ok(())
    }

    fn merge_lora(&mut self) -> Result<()> {
        if self.layers.iter().all(|l| l.lora.is_none()) {
            return Err(Error::NoAdapters);
        }
        for l in &mut self.layers {
            if let Some(lora) = l.lora.take() {
                l.weight = l.weight.add(&lora.delta()?)?;
            }
        }
        Ok(())
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &l.weight));
            out.push((format!("{prefix}.{i}.bias"), &l.bias));
            if let Some(lora) = &l.lora {
                out.push((format!("{prefix}.{i}.lora_a"), &lora.a));
                out.push((format!("{prefix}.{i}.lora_b"), &lora.b));
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &mut l.weight));
            out.push((format!("{prefix}.{i}.bias"), &mut l.bias));
            if let Some(lora) = &mut l.lora {
                out.push((format!("{prefix}.{i}.lora_a"), &mut lora.a));
                out.push((format!("{prefix}.{i}.lora_b"), &mut lora.b));
            }
        }
    }

    fn has_adapters(&self) -> bool {
        self.layers.iter().any(|l| l.lora.is_some())
    }
}

fn is_adapter_param(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

/// Image-side encoder of one modality; produces unit-norm rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    pub modality: String,
    pub mlp: Mlp,
    pub frozen: bool,
}

impl ImageEncoder {
    pub fn new(modality: &str, input_dim: usize, arch: &EncoderArch, seed: u64) -> Self {
        let mut rng = rng_for(seed, &format!("init/{modality}/image"));
        ImageEncoder {
            modality: modality.to_string(),
            mlp: Mlp::random(input_dim, arch, &mut rng),
            frozen: false,
        }
    }

    pub fn from_layers(modality: &str, layers: Vec<Linear>) -> Result<Self> {
        let mlp = Mlp { layers };
        mlp.check_chain()?;
        Ok(ImageEncoder {
            modality: modality.to_string(),
            mlp,
            frozen: false,
        })
    }

    pub fn prefix(&self) -> String {
        format!("{}.image", self.modality)
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.d_in()
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.d_out()
    }

    pub fn forward(&self, tape: &mut Tape, batch: Var, scope: &mut ParamScope) -> Result<Var> {
        let shape = tape.shape(batch);
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(Error::shape("encode_image", shape, &[self.input_dim()]));
        }
        let h = self.mlp.forward(tape, batch, scope, &self.prefix(), self.frozen)?;
        tape.row_l2_normalize(h)
    }

    /// Untracked forward pass.
    pub fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let y = self.forward(&mut tape, x, &mut ParamScope::inference())?;
        Ok(tape.value(y).clone())
    }

    /// Attaches one adapter per weight matrix and freezes the base.
    pub fn attach_lora(&mut self, rank: usize, alpha: f64, seed: u64) -> Result<()> {
        let mut rng = rng_for(seed, &format!("lora/{}", self.prefix()));
        self.mlp.attach_lora(rank, alpha, &mut rng)?;
        self.frozen = true;
        Ok(())
    }

    /// Folds adapters into the base weights; the adapters are consumed.
    pub fn merge_lora(&mut self) -> Result<()> {
        self.mlp.merge_lora()
    }

    pub fn has_adapters(&self) -> bool {
        self.mlp.has_adapters()
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.mlp.visit(&self.prefix(), &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let prefix = self.prefix();
        let mut out = Vec::new();
        self.mlp.visit_mut(&prefix, &mut out);
        out
    }

    pub fn base_params(&self) -> Vec<(String, &Tensor)> {
        self.params().into_iter().filter(|(n, _)| !is_adapter_param(n)).collect()
    }
}

/// Token-table lookup, mean pooling over the sequence, then an MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub modality: String,
    /// `[V × d_tok]`
    pub token_table: Tensor,
    pub mlp: Mlp,
    pub frozen: bool,
}

impl TextEncoder {
    pub fn new(modality: &str, vocab: usize, arch: &EncoderArch, seed: u64) -> Self {
        let mut rng = rng_for(seed, &format!("init/{modality}/text"));
        let table = (0..vocab * arch.token_dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        TextEncoder {
            modality: modality.to_string(),
            token_table: Tensor::from_parts(vec![vocab, arch.token_dim], table),
            mlp: Mlp::random(arch.token_dim, arch, &mut rng),
            frozen: false,
        }
    }

    pub fn from_parts(modality: &str, token_table: Tensor, layers: Vec<Linear>) -> Result<Self> {
        let mlp = Mlp { layers };
        mlp.check_chain()?;
        if token_table.shape().len() != 2 || token_table.cols() != mlp.d_in() {
            return Err(Error::shape("TextEncoder", token_table.shape(), &[mlp.d_in()]));
        }
        Ok(TextEncoder {
            modality: modality.to_string(),
            token_table,
            mlp,
            frozen: false,
        })
    }

    pub fn prefix(&self) -> String {
        format!("{}.text", self.modality)
    }

    pub fn vocab(&self) -> usize {
        self.token_table.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.d_out()
    }

    fn validate(&self, seqs: &[Vec<usize>]) -> Result<()> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("empty token batch".into()));
        }
        for (index, s) in seqs.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::EmptySequence { index });
            }
            if let Some(&token) = s.iter().find(|&&t| t >= self.vocab()) {
                return Err(Error::OutOfVocabulary {
                    token,
                    vocab: self.vocab(),
                });
            }
        }
        Ok(())
    }

    /// Mean-pooled token embeddings, before the MLP.
    pub fn pool(
        &self,
        tape: &mut Tape,
        seqs: &[Vec<usize>],
        scope: &mut ParamScope,
    ) -> Result<Var> {
        self.validate(seqs)?;
        let prefix = self.prefix();
        let table = scope.bind(
            tape,
            format!("{prefix}.token_table"),
            &self.token_table,
            !self.frozen,
        );
        let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
        let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let rows = tape.gather_rows(table, &ids)?;
        tape.segment_mean(rows, &lens)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        seqs: &[Vec<usize>],
        scope: &mut ParamScope,
    ) -> Result<Var> {
        let pooled = self.pool(tape, seqs, scope)?;
        let h = self.mlp.forward(tape, pooled, scope, &self.prefix(), self.frozen)?;
        tape.row_l2_normalize(h)
    }

    pub fn encode(&self, seqs: &[Vec<usize>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let y = self.forward(&mut tape, seqs, &mut ParamScope::inference())?;
        Ok(tape.value(y).clone())
    }

    pub fn attach_lora(&mut self, rank: usize, alpha: f64, seed: u64) -> Result<()> {
        let mut rng = rng_for(seed, &format!("lora/{}", self.prefix()));
        self.mlp.attach_lora(rank, alpha, &mut rng)?;
        self.frozen = true;
        Ok(())
    }

    pub fn merge_lora(&mut self) -> Result<()> {
        self.mlp.merge_lora()
    }

    pub fn has_adapters(&self) -> bool {
        self.mlp.has_adapters()
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let prefix = self.prefix();
        let mut out = vec![(format!("{prefix}.token_table"), &self.token_table)];
        self.mlp.visit(&prefix, &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let prefix = self.prefix();
        let mut out = vec![(format!("{prefix}.token_table"), &mut self.token_table)];
        self.mlp.visit_mut(&prefix, &mut out);
        out
    }

    pub fn base_params(&self) -> Vec<(String, &Tensor)> {
        self.params().into_iter().filter(|(n, _)| !is_adapter_param(n)).collect()
    }
}

pub const STUDENT_ID: &str = "student";

/// The single text encoder distilled from all modality-specific teachers.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentTextEncoder {
    pub encoder: TextEncoder,
}

impl StudentTextEncoder {
    pub fn new(vocab: usize, arch: &EncoderArch, seed: u64) -> Self {
        StudentTextEncoder {
            encoder: TextEncoder::new(STUDENT_ID, vocab, arch, seed),
        }
    }

    /// A student that starts as an exact copy of `teacher` (adapters merged).
    pub fn copy_of(teacher: &TextEncoder) -> Result<Self> {
        let mut encoder = teacher.clone();
        if encoder.has_adapters() {
            encoder.merge_lora()?;
        }
        encoder.modality = STUDENT_ID.to_string();
        encoder.frozen = false;
        Ok(StudentTextEncoder { encoder })
    }
}

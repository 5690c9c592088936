//! Finite-difference oracle for every training objective, shared by the
//! gradient tests and the acceptance run.

#![allow(dead_code)]

use std::collections::BTreeMap;

use m3bind::autodiff::{finite_diff_grad, Tape, Var};
use m3bind::encoders::{EncoderArch, ImageEncoder, ParamScope, TextEncoder};
use m3bind::objectives::{
    bind_objective, clip_contrastive_loss, kd_contrastive_loss, kd_mse_loss, pair_key, pairwise_text_mse, seskd_loss,
    TauInput,
};
use m3bind::seed::rng_for;
use m3bind::tensor::Tensor;
use m3bind::Result;
use rand::Rng;

const H: f64 = 1e-5;
const N: usize = 5;
const OBS: usize = 6;
const VOCAB: usize = 12;
const MODS: [&str; 3] = ["a", "b", "c"];

#[derive(Clone)]
pub struct World {
    pub images: Vec<ImageEncoder>,
    texts: Vec<TextEncoder>,
    student: TextEncoder,
    log_tau: f64,
    signals: Vec<Tensor>,
    tokens: Vec<Vec<usize>>,
}

fn jitter(t: &mut Tensor, rng: &mut impl Rng, scale: f64) {
    let data = t.data().iter().map(|v| v + rng.random_range(-scale..scale)).collect();
    *t = Tensor::new(t.shape().to_vec(), data).unwrap();
}

/// Modality `a` carries LoRA adapters (frozen base, trainable head); the
/// others train their full stacks.
pub fn world(seed: u64) -> World {
    let arch = EncoderArch {
        hidden: vec![5],
        embed_dim: 4,
        token_dim: 3,
    };
    let mut rng = rng_for(seed, "grad-world");
    let mut images: Vec<ImageEncoder> = MODS.iter().map(|m| ImageEncoder::new(m, OBS, &arch, seed)).collect();
    let mut texts: Vec<TextEncoder> = MODS.iter().map(|m| TextEncoder::new(m, VOCAB, &arch, seed)).collect();
    images[0].attach_lora(2, 4.0, seed).unwrap();
    texts[0].attach_lora(2, 4.0, seed).unwrap();
    for (_, t) in images[0].params_mut().into_iter().chain(texts[0].params_mut()) {
        jitter(t, &mut rng, 0.3);
    }
    let student = TextEncoder::new("student", VOCAB, &arch, seed + 1000);
    let signals = (0..MODS.len())
        .map(|_| {
            let data = (0..N * OBS).map(|_| rng.random_range(-2.0..2.0)).collect();
            Tensor::matrix(N, OBS, data).unwrap()
        })
        .collect();
    let tokens = (0..N)
        .map(|_| {
            let len = rng.random_range(1..5);
            (0..len).map(|_| rng.random_range(0..VOCAB)).collect()
        })
        .collect();
    World {
        images,
        texts,
        student,
        log_tau: rng.random_range(-1.5..0.5),
        signals,
        tokens,
    }
}

impl World {
    fn param_mut(&mut self, name: &str) -> &mut Tensor {
        let found = self
            .images
            .iter_mut()
            .flat_map(|e| e.params_mut())
            .chain(self.texts.iter_mut().flat_map(|e| e.params_mut()))
            .chain(self.student.params_mut())
            .find(|(n, _)| n == name);
        found.map(|(_, t)| t).unwrap_or_else(|| panic!("no parameter {name}"))
    }

    fn param(&mut self, name: &str) -> Tensor {
        if name == "tau.log" {
            return Tensor::scalar(self.log_tau).unwrap();
        }
        self.param_mut(name).clone()
    }

    fn set(&mut self, name: &str, value: &Tensor) {
        if name == "tau.log" {
            self.log_tau = value.item();
        } else {
            *self.param_mut(name) = value.clone();
        }
    }
}

pub struct Ctx<'a> {
    w: &'a World,
    pub tape: Tape,
    pub scope: ParamScope,
    pub tau: Var,
}

impl Ctx<'_> {
    pub fn img(&mut self, i: usize) -> Var {
        let x = self.tape.constant(self.w.signals[i].clone());
        self.w.images[i].forward(&mut self.tape, x, &mut self.scope).unwrap()
    }
    pub fn txt(&mut self, i: usize) -> Var {
        self.w.texts[i].forward(&mut self.tape, &self.w.tokens, &mut self.scope).unwrap()
    }
    fn student(&mut self) -> Var {
        self.w.student.forward(&mut self.tape, &self.w.tokens, &mut self.scope).unwrap()
    }
    fn tau(&self) -> TauInput {
        TauInput::LogParam(self.tau)
    }
}

pub type Objective = fn(&mut Ctx) -> Result<Var>;

pub fn run(w: &World, f: Objective) -> Result<(Ctx<'_>, Var)> {
    let mut tape = Tape::new();
    let tau = tape.param(Tensor::scalar(w.log_tau)?);
    let mut ctx = Ctx {
        w,
        tape,
        scope: ParamScope::training(true),
        tau,
    };
    let loss = f(&mut ctx)?;
    Ok((ctx, loss))
}

fn value(w: &World, f: Objective) -> Result<f64> {
    let (ctx, loss) = run(w, f)?;
    Ok(ctx.tape.value(loss).item())
}

/// Relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` over all tracked parameters.
pub fn relative_error(w: &World, f: Objective) -> f64 {
    let (ctx, loss) = run(w, f).unwrap();
    let grads = ctx.tape.backward(loss).unwrap();
    let mut analytic: BTreeMap<String, Tensor> = BTreeMap::new();
    let tracked = ctx.scope.tracked().iter().cloned().chain([("tau.log".to_string(), ctx.tau)]);
    for (name, var) in tracked {
        let g = match grads.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(ctx.tape.shape(var)),
        };
        let sum = match analytic.remove(&name) {
            Some(prev) => prev.add(&g).unwrap(),
            None => g,
        };
        analytic.insert(name, sum);
    }
    assert!(analytic.len() > 1);
    let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
    for (name, g) in &analytic {
        let mut probe = w.clone();
        let x = probe.param(name);
        let fd = finite_diff_grad(
            |v| {
                probe.set(name, v);
                value(&probe, f)
            },
            &x,
            H,
        )
        .unwrap();
        diff += g.sub(&fd).unwrap().norm().powi(2);
        na += g.norm().powi(2);
        nf += fd.norm().powi(2);
    }
    diff.sqrt() / na.sqrt().max(nf.sqrt()).max(1e-12)
}

fn weights() -> BTreeMap<String, f64> {
    MODS.iter().zip([0.5, 0.3, 0.2]).map(|(m, w)| (m.to_string(), w)).collect()
}

fn text_embeds(c: &mut Ctx) -> BTreeMap<String, Var> {
    (0..MODS.len()).map(|i| (MODS[i].to_string(), c.txt(i))).collect()
}

fn clip_one_way(c: &mut Ctx) -> Result<Var> {
    let (i, t) = (c.img(0), c.txt(0));
    let tau = c.tau();
    clip_contrastive_loss(&mut c.tape, i, t, tau, false)
}

fn clip_symmetric(c: &mut Ctx) -> Result<Var> {
    let (i, t) = (c.img(1), c.txt(1));
    let tau = c.tau();
    clip_contrastive_loss(&mut c.tape, i, t, tau, true)
}

fn text_mse(c: &mut Ctx) -> Result<Var> {
    let e = text_embeds(c);
    let pairs = pairwise_text_mse(&mut c.tape, &e)?;
    assert_eq!(pairs.len(), 3);
    let vars: Vec<Var> = pairs.values().copied().collect();
    let ab = c.tape.add(vars[0], vars[1])?;
    c.tape.add(ab, vars[2])
}

fn bind(c: &mut Ctx, pair_weighted: bool) -> Result<Var> {
    let mut clip = BTreeMap::new();
    for i in 0..MODS.len() {
        let (im, tx) = (c.img(i), c.txt(i));
        let tau = c.tau();
        clip.insert(MODS[i].to_string(), clip_contrastive_loss(&mut c.tape, im, tx, tau, true)?);
    }
    let e = text_embeds(c);
    let mse = pairwise_text_mse(&mut c.tape, &e)?;
    assert!(mse.contains_key(&pair_key("c", "a")));
    Ok(bind_objective(&mut c.tape, &clip, &mse, &weights(), 10.0, pair_weighted)?.0)
}

fn bind_unweighted(c: &mut Ctx) -> Result<Var> {
    bind(c, false)
}

fn bind_weighted(c: &mut Ctx) -> Result<Var> {
    bind(c, true)
}

fn kd(c: &mut Ctx) -> Result<Var> {
    let teachers = text_embeds(c);
    let s = c.student();
    kd_mse_loss(&mut c.tape, &teachers, s)
}

fn kd_contrastive(c: &mut Ctx) -> Result<Var> {
    let s = c.student();
    let im = c.img(2);
    let tau = c.tau();
    kd_contrastive_loss(&mut c.tape, s, im, tau)
}

fn seskd(c: &mut Ctx) -> Result<Var> {
    let k = kd(c)?;
    let kc = kd_contrastive(c)?;
    seskd_loss(&mut c.tape, k, Some(kc))
}

pub const OBJECTIVES: [(&str, Objective); 9] = [
    ("clip image to text", clip_one_way),
    ("clip symmetric", clip_symmetric),
    ("pairwise text mse", text_mse),
    ("bind objective", bind_unweighted),
    ("bind objective with pair weights", bind_weighted),
    ("kd mse", kd),
    ("kd contrastive", kd_contrastive),
    ("seskd", seskd),
    ("seskd with fixed tau", |c| {
        let k = kd(c)?;
        let s = c.student();
        let im = c.img(0);
        let kc = kd_contrastive_loss(&mut c.tape, s, im, TauInput::Fixed(0.07))?;
        seskd_loss(&mut c.tape, k, Some(kc))
    }),
];

/// Worst relative error per objective over `seeds`.
pub fn worst_errors(seeds: u64) -> BTreeMap<&'static str, f64> {
    let mut worst = BTreeMap::new();
    for seed in 0..seeds {
        let w = world(seed);
        for (name, f) in OBJECTIVES {
            let e: &mut f64 = worst.entry(name).or_insert(0.0);
            *e = e.max(relative_error(&w, f));
        }
    }
    worst
}

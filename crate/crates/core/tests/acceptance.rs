//! The acceptance run: every criterion at its stated tolerance, one
//! PASS/FAIL line each. Runs without the libtest harness so the lines are
//! always printed; the process fails if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use m3bind::balancing::{draw_modality, loss_weight, sampling_probs, scaled_lr, BalancePlan, ModalityStats};
use m3bind::checkpoint::{bind_checkpoint, bind_state_from, distill_checkpoint, distill_state_from, pretrain_checkpoint, Checkpoint};
use m3bind::config::RunConfig;
use m3bind::evaluation::student_consistency;
use m3bind::pipeline::{
    bind_run, cross_image_all, distill_run, evaluate, few_shot_all, initial_student, pretrain_all, prompts_for,
    sampling_plan, zero_shot_all, EvalSelection,
};
use m3bind::seed::rng_for;
use m3bind::synth::{default_dataset, Dataset};
use m3bind::training::{
    base_weight_digest, bind_phase, distill_phase, distill_probe_texts, frozen_weight_digest, mean_teacher_mse,
    BindConfig, BindState, DistillState, ModalityBundle, StepRecord,
};

type Bundles = BTreeMap<String, ModalityBundle>;
type Verdict = Result<String, String>;

const CHANCE: f64 = 0.125;

/// One seed's dataset, Phase-0 encoders and default Phase-A result.
struct SeedRun {
    cfg: RunConfig,
    ds: Dataset,
    pretrained: Bundles,
    bound: BindState,
    bind_log: Vec<StepRecord>,
}

fn seed_run(seed: u64) -> SeedRun {
    let cfg = RunConfig::with_seed(seed);
    let ds = default_dataset(seed).unwrap();
    let (pretrained, _) = pretrain_all(&ds, &cfg, &cfg.bound_modalities()).unwrap();
    let mut bind_log = Vec::new();
    let bound = bind_run(&ds, &cfg, &pretrained, &mut |r| {
        bind_log.push(r.clone());
        Ok(())
    })
    .unwrap();
    SeedRun {
        cfg,
        ds,
        pretrained,
        bound,
        bind_log,
    }
}

fn bind_variant(run: &SeedRun, cfg: &RunConfig) -> Bundles {
    bind_run(&run.ds, cfg, &run.pretrained, &mut |_| Ok(())).unwrap().bundles
}

fn cross_recall1(ds: &Dataset, bundles: &Bundles) -> BTreeMap<String, f64> {
    cross_image_all(ds, bundles).unwrap().into_iter().map(|(p, r)| (p, r.mean[&1])).collect()
}

fn fmt_map(m: &BTreeMap<String, f64>) -> String {
    m.iter().map(|(k, v)| format!("{k}={v:.2}")).collect::<Vec<_>>().join(" ")
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let worst = common::worst_errors(20);
    let secs = start.elapsed().as_secs_f64();
    let max = worst.values().copied().fold(0.0, f64::max);
    check(
        max <= 1e-4 && secs < 60.0,
        format!("{} objectives x 20 seeds, worst relative error {max:.1e}, {secs:.1}s", worst.len()),
    )
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

fn stats(sizes: &[(&str, u64)], beta: f64, eta0: f64) -> ModalityStats {
    ModalityStats::new(sizes.iter().map(|(m, n)| (m.to_string(), *n)).collect(), beta, eta0).unwrap()
}

fn criterion_2(run: &SeedRun) -> Verdict {
    let mut failures = Vec::new();
    let mut expect = |what: &str, ok: bool| {
        if !ok {
            failures.push(what.to_string());
        }
    };
    let p = sampling_probs(&stats(&[("a", 100), ("b", 400)], 0.5, 1.0)).unwrap();
    expect("p{100,400}", close(p["a"], 2.0 / 3.0) && close(p["b"], 1.0 / 3.0));
    let p = sampling_probs(&stats(&[("a", 7), ("b", 7), ("c", 7)], 1.3, 1.0)).unwrap();
    expect("p equal sizes", p.values().all(|&v| close(v, 1.0 / 3.0)));
    let p = sampling_probs(&stats(&[("a", 3), ("b", 5000)], 0.0, 1.0)).unwrap();
    expect("p beta=0", p.values().all(|&v| close(v, 0.5)));
    let lr = scaled_lr(&stats(&[("a", 10_000), ("b", 1), ("c", 40_000)], 0.5, 2e-5)).unwrap();
    expect("lr 10000", close(lr["a"], 2e-7));
    expect("lr 1", close(lr["b"], 2e-5));
    expect("lr x4", close(lr["c"], lr["a"] / 2.0));
    let w = loss_weight(&stats(&[("a", 4), ("b", 1)], 0.5, 1.0)).unwrap();
    expect("w 4", close(w["a"], 0.5));
    expect("w 1", close(w["b"], 1.0));
    let w = loss_weight(&stats(&[("a", 100), ("b", 400)], 0.5, 1.0)).unwrap();
    expect("w ratio", close(w["a"] / w["b"], 2.0));

    let mut worst: f64 = 0.0;
    let two = BalancePlan::new(&stats(&[("a", 100), ("b", 400)], 0.5, 1.0), true).unwrap();
    let default = sampling_plan(&run.ds, &run.cfg).unwrap();
    for (label, plan) in [("two", &two), ("default", &default)] {
        let mut rng = rng_for(0, &format!("acceptance/draws/{label}"));
        let n = 100_000;
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for _ in 0..n {
            *counts.entry(draw_modality(plan, &mut rng)).or_default() += 1;
        }
        for (m, p) in &plan.probs {
            let f = counts.get(m.as_str()).copied().unwrap_or(0) as f64 / n as f64;
            worst = worst.max((f - p).abs());
        }
    }
    expect("sampler frequencies", worst <= 0.01);
    check(
        failures.is_empty(),
        format!("worked examples to 1e-12, sampler max |freq-p| {worst:.4} over 1e5 draws; failed: {failures:?}"),
    )
}

fn criterion_3(run: &SeedRun) -> Verdict {
    let held = &run.ds.eval.heldout;
    let bits = |t: &m3bind::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let mut identity = true;
    for (m, b) in &run.pretrained {
        let mut a = b.clone();
        a.attach_lora(4, 8.0, 99).unwrap();
        identity &= bits(&a.image.encode(&held[m].signals).unwrap()) == bits(&b.image.encode(&held[m].signals).unwrap());
        identity &= bits(&a.text.encode(&held[m].tokens).unwrap()) == bits(&b.text.encode(&held[m].tokens).unwrap());
    }

    // Default run: everything but the trained heads is untouched.
    let frozen_default =
        frozen_weight_digest(&run.pretrained, true) == frozen_weight_digest(&run.bound.bundles, true);
    // Adapters-only run: the whole base is untouched.
    let cfg = BindConfig {
        iters: 300,
        train_heads: false,
        ..run.cfg.bind.clone()
    };
    let mut state = BindState::new(&run.pretrained, &cfg, run.cfg.master_seed).unwrap();
    bind_phase(&mut state, &run.ds.corpora, &cfg, run.cfg.master_seed, usize::MAX, &mut |_| Ok(())).unwrap();
    let frozen_adapters = base_weight_digest(&run.pretrained) == base_weight_digest(&state.bundles);

    let mut merge_err: f64 = 0.0;
    for bundles in [&run.bound.bundles, &state.bundles] {
        for (m, b) in bundles {
            let mut merged = b.clone();
            merged.image.merge_lora().unwrap();
            merged.text.merge_lora().unwrap();
            let d_img = merged.image.encode(&held[m].signals).unwrap().max_abs_diff(&b.image.encode(&held[m].signals).unwrap());
            let d_txt = merged.text.encode(&held[m].tokens).unwrap().max_abs_diff(&b.text.encode(&held[m].tokens).unwrap());
            merge_err = merge_err.max(d_img).max(d_txt);
        }
    }
    check(
        identity && frozen_default && frozen_adapters && merge_err <= 1e-10,
        format!(
            "zero-init identity bitwise={identity}, frozen SHA equal (default heads-trained run)={frozen_default}, \
             (adapters-only run)={frozen_adapters}, merge max diff {merge_err:.1e}"
        ),
    )
}

fn criterion_4(run: &SeedRun, secs: f64) -> Verdict {
    let bound = cross_recall1(&run.ds, &run.bound.bundles);
    let control = cross_recall1(&run.ds, &run.pretrained);
    let bound_min = bound.values().copied().fold(1.0, f64::min);
    let control_mean = control.values().sum::<f64>() / control.len() as f64;
    let control_max = control.values().copied().fold(0.0, f64::max);
    check(
        bound.len() == 10 && bound_min >= 0.5 && control_mean <= 0.2 && secs <= 900.0,
        format!(
            "bound min recall@1 {bound_min:.2} over {} pairs; Phase-0 control mean {control_mean:.3} \
             (max {control_max:.2}); pipeline {secs:.0}s; bound [{}] control [{}]",
            bound.len(),
            fmt_map(&bound),
            fmt_map(&control)
        ),
    )
}

fn final_mse_sum(log: &[StepRecord], last: usize) -> f64 {
    let tail = &log[log.len() - last..];
    tail.iter()
        .map(|r| r.terms.iter().filter(|(k, _)| k.starts_with("mse/")).map(|(_, v)| v).sum::<f64>())
        .sum::<f64>()
        / last as f64
}

fn criterion_5(run: &SeedRun) -> Verdict {
    let mut cfg = run.cfg.clone();
    cfg.bind.lambda = 0.0;
    let mut log = Vec::new();
    let state = bind_run(&run.ds, &cfg, &run.pretrained, &mut |r| {
        log.push(r.clone());
        Ok(())
    })
    .unwrap();
    let r = cross_recall1(&run.ds, &state.bundles);
    let low = r.values().filter(|&&v| v <= 0.25).count();
    let (mse0, mse10) = (final_mse_sum(&log, 100), final_mse_sum(&run.bind_log, 100));
    check(
        low >= 8,
        format!(
            "{low}/10 pairs at recall@1 <= 0.25 with lambda=0; final text MSE {mse0:.3} vs {mse10:.5} at lambda=10; [{}]",
            fmt_map(&r)
        ),
    )
}

fn ecg_zero_shot(run: &SeedRun, bundles: &Bundles) -> f64 {
    zero_shot_all(&run.ds, &run.cfg, bundles).unwrap()["ecg"].accuracy
}

fn criterion_6(runs: &[&SeedRun]) -> Verdict {
    let (mut on, mut off) = (Vec::new(), Vec::new());
    for run in runs {
        on.push(ecg_zero_shot(run, &run.bound.bundles));
        let mut cfg = run.cfg.clone();
        cfg.bind.amb = false;
        off.push(ecg_zero_shot(run, &bind_variant(run, &cfg)));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (m_on, m_off) = (mean(&on), mean(&off));
    check(
        m_off < m_on,
        format!("ecg zero-shot mean over {} seeds: AMB on {m_on:.3} {on:.3?}, off {m_off:.3} {off:.3?}", runs.len()),
    )
}

fn criterion_7(run: &SeedRun) -> Verdict {
    let order = &run.cfg.eval.sweep_order;
    let mut series = Vec::new();
    for n in 2..=order.len() {
        let bundles = if n == order.len() {
            run.bound.bundles.clone()
        } else {
            let mut cfg = run.cfg.clone();
            cfg.bind.modalities = Some(order[..n].to_vec());
            bind_variant(run, &cfg)
        };
        series.push(cross_recall1(&run.ds, &bundles)["ecg:xray"]);
    }
    let ok = series.windows(2).all(|w| w[1] >= w[0] - 0.03);
    check(ok, format!("xray:ecg recall@1 as the subset grows {order:?}: {series:.3?}"))
}

/// Also returns the distillation checkpoint bytes for the determinism check.
fn criterion_8(run: &SeedRun, out: &mut Vec<u8>) -> Verdict {
    let teachers = &run.bound.bundles;
    let plan = sampling_plan(&run.ds, &run.cfg).unwrap();
    let texts = distill_probe_texts(&plan, &run.ds.corpora, 512, run.cfg.master_seed);
    let start = mean_teacher_mse(&initial_student(&run.ds, &run.cfg), teachers, &texts).unwrap();
    let state = distill_run(&run.ds, &run.cfg, teachers, &mut |_| Ok(())).unwrap();
    *out = distill_checkpoint(&run.cfg.fingerprint().unwrap(), &state, teachers).unwrap().to_bytes().unwrap();
    let end = mean_teacher_mse(&state.student, teachers, &texts).unwrap();
    let drop = 1.0 - end / start;
    let prompts = prompts_for(&run.ds, &run.cfg).unwrap();
    let rep = student_consistency(teachers, &state.student, &run.ds.eval, &prompts).unwrap();
    let worst = rep.per_modality.values().map(|e| e.delta.abs()).fold(0.0, f64::max);
    let deltas: BTreeMap<String, f64> = rep.per_modality.iter().map(|(m, e)| (m.clone(), e.delta)).collect();
    check(
        worst <= 0.05 && drop >= 0.75,
        format!(
            "max |student - teacher| zero-shot {worst:.3}; teacher MSE {start:.4} -> {end:.4} (drop {:.1}%); deltas [{}]",
            100.0 * drop,
            fmt_map(&deltas)
        ),
    )
}

fn criterion_9(run: &SeedRun) -> Verdict {
    let all = few_shot_all(&run.ds, &run.cfg, &run.bound.bundles).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for (m, sums) in &all {
        let means: Vec<f64> = sums.iter().map(|s| s.mean).collect();
        let shots: Vec<usize> = sums.iter().map(|s| s.shots).collect();
        ok &= shots == [1, 5, 10] && means.windows(2).all(|w| w[1] >= w[0]);
        parts.push(format!("{m}={means:.3?}"));
    }
    check(ok, format!("mean probe accuracy at shots 1/5/10 over 5 seeds: {}", parts.join(" ")))
}

/// A second run from scratch with the same seed, stopped and resumed through
/// checkpoint bytes midway through each phase, must reproduce the first run
/// bit for bit.
fn criterion_10(run: &SeedRun, first_distill: &[u8]) -> Verdict {
    let cfg = &run.cfg;
    let fp = cfg.fingerprint().unwrap();
    let seed = cfg.master_seed;
    let ds = default_dataset(seed).unwrap();
    let data_same = ds == run.ds;
    let (pretrained, _) = pretrain_all(&ds, cfg, &cfg.bound_modalities()).unwrap();
    let pre_same = pretrain_checkpoint(&fp, &pretrained).unwrap().to_bytes().unwrap()
        == pretrain_checkpoint(&fp, &run.pretrained).unwrap().to_bytes().unwrap();

    let mut bcfg = cfg.bind.clone();
    bcfg.modalities = Some(cfg.bound_modalities());
    let mut state = BindState::new(&pretrained, &bcfg, seed).unwrap();
    let mut log = Vec::new();
    for until in [bcfg.iters / 2, usize::MAX] {
        bind_phase(&mut state, &ds.corpora, &bcfg, seed, until, &mut |r| {
            log.push(r.clone());
            Ok(())
        })
        .unwrap();
        let bytes = bind_checkpoint(&fp, &state).unwrap().to_bytes().unwrap();
        state = bind_state_from(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    }
    let bind_same = bind_checkpoint(&fp, &state).unwrap().to_bytes().unwrap()
        == bind_checkpoint(&fp, &run.bound).unwrap().to_bytes().unwrap();
    let log_same = serde_json::to_string(&log).unwrap() == serde_json::to_string(&run.bind_log).unwrap();

    let plan = sampling_plan(&ds, cfg).unwrap();
    let mut dstate = DistillState::new(initial_student(&ds, cfg), &cfg.distill);
    for until in [cfg.distill.iters_stage1, usize::MAX] {
        distill_phase(&mut dstate, &state.bundles, &ds.corpora, &plan, &cfg.distill, seed, until, &mut |_| Ok(()))
            .unwrap();
        let bytes = distill_checkpoint(&fp, &dstate, &state.bundles).unwrap().to_bytes().unwrap();
        dstate = distill_state_from(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap().0;
    }
    let distill_same = distill_checkpoint(&fp, &dstate, &state.bundles).unwrap().to_bytes().unwrap() == first_distill;

    let all = EvalSelection { task: None, pair: None };
    let first = first_distill_student(first_distill);
    let a = evaluate(&run.ds, cfg, &run.bound.bundles, Some(&first), &all).unwrap();
    let b = evaluate(&ds, cfg, &state.bundles, Some(&dstate.student), &all).unwrap();
    let metrics_same = !a.is_empty() && serde_json::to_string(&a).unwrap() == serde_json::to_string(&b).unwrap();
    check(
        data_same && pre_same && bind_same && log_same && distill_same && metrics_same,
        format!(
            "dataset={data_same} pretrain={pre_same} bind(resumed at {})={bind_same} log={log_same} \
             distill(resumed at {})={distill_same} metrics({} records)={metrics_same}",
            bcfg.iters / 2,
            cfg.distill.iters_stage1,
            a.len()
        ),
    )
}

fn first_distill_student(bytes: &[u8]) -> m3bind::encoders::StudentTextEncoder {
    distill_state_from(&Checkpoint::from_bytes(bytes).unwrap()).unwrap().0.student
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        }
    }
}

fn main() {
    let total = Instant::now();
    let mut results: Vec<(usize, &str, Verdict, f64)> = Vec::new();
    let mut record = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        let t = Instant::now();
        let v = guarded(f);
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match &v {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} criterion {id:>2} ({name}, {secs:.0}s): {detail}");
        results.push((id, name, v, secs));
    };

    record(1, "gradient correctness", &mut criterion_1);

    let t = Instant::now();
    let run0 = seed_run(0);
    let pipeline_secs = t.elapsed().as_secs_f64();
    println!(
        "default run (seed 0): Phase-0 + Phase-A in {pipeline_secs:.0}s, chance recall@1 {CHANCE}"
    );

    record(2, "balancing formulas and sampler", &mut || criterion_2(&run0));
    record(3, "LoRA contract", &mut || criterion_3(&run0));
    record(4, "emergent cross-modal alignment", &mut || criterion_4(&run0, pipeline_secs));
    record(5, "lambda ablation", &mut || criterion_5(&run0));
    record(6, "AMB ablation", &mut || {
        let (r1, r2) = (seed_run(1), seed_run(2));
        criterion_6(&[&run0, &r1, &r2])
    });
    record(7, "modality-count trend", &mut || criterion_7(&run0));

    let mut first_distill = Vec::new();
    record(8, "SESKD distillation", &mut || criterion_8(&run0, &mut first_distill));
    record(9, "few-shot monotonicity", &mut || criterion_9(&run0));
    record(10, "determinism and persistence", &mut || criterion_10(&run0, &first_distill));

    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0}s",
        results.len() - failed.len(),
        results.len(),
        total.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

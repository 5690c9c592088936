use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use m3bind::checkpoint::{
    bind_checkpoint, bind_state_from, distill_checkpoint, distill_state_from, get_bundles, pretrain_checkpoint,
    Checkpoint, Entry, CHECKPOINT_MAGIC,
};
use m3bind::config::{apply_override, canonical_json, RunConfig};
use m3bind::evaluation::records_to_csv;
use m3bind::pipeline::{
    ablation_grid, config_document, evaluate, initial_student, pretrain_all, read_log, sampling_plan, EvalSelection,
    JsonlLog, RunPaths,
};
use m3bind::synth::{generate_dataset, Dataset, CORPUS_MAGIC};
use m3bind::training::{bind_phase, distill_phase, BindState, DistillState, StepRecord};
use m3bind::Error;

#[derive(Parser)]
#[command(name = "m3bind", version, about = "Text-anchored multimodal binding on synthetic corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpora and their metadata.
    Generate(Common),
    /// Pretrain every modality, then bind them through text.
    Train {
        #[command(flatten)]
        common: Common,
        /// Number of binding iterations.
        #[arg(long)]
        iters_bind: Option<usize>,
        /// Comma-separated modality subset to bind.
        #[arg(long, value_delimiter = ',')]
        modalities: Option<Vec<String>>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Disable adaptive modality balancing.
        #[arg(long)]
        no_amb: bool,
        #[command(flatten)]
        resume: ResumeArgs,
    },
    /// Distill all bound text encoders into one student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        resume: ResumeArgs,
    },
    /// Run the evaluation suite.
    Eval {
        #[command(flatten)]
        common: Common,
        /// zero-shot, image-text, cross-image, few-shot or consistency.
        #[arg(long)]
        task: Option<String>,
        /// Modality pair `a:b` for cross-image retrieval.
        #[arg(long)]
        pair: Option<String>,
        /// Also train and evaluate the ablation variants.
        #[arg(long)]
        ablations: bool,
    },
    /// Print a checkpoint's header and tensor table.
    Inspect { path: PathBuf },
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set bind.lambda=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed for both the dataset and training.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<String>,
}

#[derive(Args)]
struct ResumeArgs {
    /// Continue from the phase's checkpoint when present.
    #[arg(long)]
    resume: bool,
    /// Accept checkpoints written under a different config fingerprint.
    #[arg(long)]
    force: bool,
    /// Save and exit once this step is reached; `--resume` continues.
    #[arg(long, value_name = "STEP")]
    stop_at: Option<usize>,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::FingerprintMismatch { .. } | Error::UnknownModality(_)) => EXIT_CONFIG,
        Some(Error::Format { .. } | Error::Version { .. } | Error::Io { .. } | Error::Json(_)) => EXIT_DATA,
        Some(Error::Divergence { .. }) => EXIT_DIVERGENCE,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(common) => cmd_generate(&load_config(&common, &[])?),
        Command::Train {
            common,
            iters_bind,
            modalities,
            lambda,
            no_amb,
            resume,
        } => {
            let mut extra = Vec::new();
            if let Some(n) = iters_bind {
                extra.push(format!("bind.iters={n}"));
            }
            if let Some(m) = modalities {
                extra.push(format!("bind.modalities={}", serde_json::to_string(&m)?));
            }
            if let Some(l) = lambda {
                extra.push(format!("bind.lambda={l}"));
            }
            if no_amb {
                extra.push("bind.amb=false".into());
            }
            cmd_train(&load_config(&common, &extra)?, &resume)
        }
        Command::Distill { common, resume } => cmd_distill(&load_config(&common, &[])?, &resume),
        Command::Eval {
            common,
            task,
            pair,
            ablations,
        } => {
            let extra = if ablations { vec!["eval.ablations=true".to_string()] } else { Vec::new() };
            let pair = pair
                .map(|p| {
                    p.split_once(':')
                        .map(|(a, b)| (a.to_string(), b.to_string()))
                        .ok_or_else(|| Error::Config(format!("--pair expects a:b, got '{p}'")))
                })
                .transpose()?;
            cmd_eval(&load_config(&common, &extra)?, EvalSelection { task, pair })
        }
        Command::Inspect { path } => cmd_inspect(&path),
    }
}

/// File config, then `--seed`/`--output-dir`, then `--set` and command flags.
fn load_config(common: &Common, extra: &[String]) -> anyhow::Result<RunConfig> {
    let mut doc = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => serde_json::json!({}),
    };
    if let Some(seed) = common.seed {
        apply_override(&mut doc, "master_seed", &seed.to_string())?;
        apply_override(&mut doc, "dataset.seed", &seed.to_string())?;
    }
    if let Some(dir) = &common.output_dir {
        apply_override(&mut doc, "output_dir", &serde_json::to_string(dir)?)?;
    }
    for kv in common.overrides.iter().chain(extra) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{kv}' is not KEY=VALUE")))?;
        apply_override(&mut doc, k, v)?;
    }
    Ok(RunConfig::from_json(&doc.to_string())?)
}

fn write_config(cfg: &RunConfig, paths: &RunPaths) -> anyhow::Result<()> {
    std::fs::create_dir_all(&paths.root).map_err(|e| Error::io(&paths.root, e))?;
    let text = canonical_json(cfg)? + "\n";
    std::fs::write(paths.config(), text).map_err(|e| Error::io(paths.config(), e))?;
    Ok(())
}

fn cmd_generate(cfg: &RunConfig) -> anyhow::Result<()> {
    let paths = RunPaths::for_config(cfg)?;
    let ds = generate_dataset(&cfg.dataset)?;
    ds.save(&paths.data)?;
    println!("{}", paths.data.display());
    Ok(())
}

fn load_dataset(cfg: &RunConfig, paths: &RunPaths) -> anyhow::Result<Dataset> {
    if !paths.data.exists() {
        return Err(Error::Config(format!(
            "no corpora at {}; run `m3bind generate` with the same config first",
            paths.data.display()
        ))
        .into());
    }
    let ds = Dataset::load(&paths.data)?;
    if ds.spec != cfg.dataset {
        return Err(Error::FingerprintMismatch {
            expected: cfg.dataset.fingerprint()?,
            found: ds.spec.fingerprint()?,
        }
        .into());
    }
    Ok(ds)
}

/// Runs a resumable phase in checkpoint-sized chunks.
fn chunks(start: usize, total: usize, every: usize) -> Vec<usize> {
    let every = if every == 0 { total.max(1) } else { every };
    let mut ends = Vec::new();
    let mut s = start;
    while s < total {
        s = (s + every).min(total);
        ends.push(s);
    }
    ends
}

fn cmd_train(cfg: &RunConfig, resume: &ResumeArgs) -> anyhow::Result<()> {
    let paths = RunPaths::for_config(cfg)?;
    let ds = load_dataset(cfg, &paths)?;
    write_config(cfg, &paths)?;
    let fp = cfg.fingerprint()?;
    let modalities = cfg.bound_modalities();

    let pretrained = if resume.resume && paths.pretrain_checkpoint().exists() {
        get_bundles(&Checkpoint::load(&paths.pretrain_checkpoint(), Some(&fp), resume.force)?)?
    } else {
        let (bundles, reports) = pretrain_all(&ds, cfg, &modalities)?;
        pretrain_checkpoint(&fp, &bundles)?.save(&paths.pretrain_checkpoint())?;
        let doc = serde_json::json!({ "config": config_document(cfg)?, "reports": reports });
        std::fs::write(paths.pretrain_report(), serde_json::to_string_pretty(&doc)? + "\n")
            .map_err(|e| Error::io(paths.pretrain_report(), e))?;
        bundles
    };
    eprintln!("phase 0 done: {}", modalities.join(","));

    let mut bcfg = cfg.bind.clone();
    bcfg.modalities = Some(modalities);
    let (mut state, kept) = if resume.resume && paths.bind_checkpoint().exists() {
        let st = bind_state_from(&Checkpoint::load(&paths.bind_checkpoint(), Some(&fp), resume.force)?)?;
        let kept: Vec<StepRecord> = read_log(&paths.bind_log())
            .unwrap_or_default()
            .into_iter()
            .filter(|r| r.step < st.step)
            .collect();
        (st, kept)
    } else {
        (BindState::new(&pretrained, &bcfg, cfg.master_seed)?, Vec::new())
    };
    let mut log = JsonlLog::create(&paths.bind_log(), cfg, "bind", &kept)?;
    bind_checkpoint(&fp, &state)?.save(&paths.bind_checkpoint())?;
    let stop = resume.stop_at.unwrap_or(usize::MAX).min(bcfg.iters);
    for end in chunks(state.step, stop, cfg.checkpoint_every) {
        bind_phase(&mut state, &ds.corpora, &bcfg, cfg.master_seed, end, &mut |r| log.write(r))?;
        log.flush()?;
        bind_checkpoint(&fp, &state)?.save(&paths.bind_checkpoint())?;
        eprintln!("bind step {end}/{}", bcfg.iters);
    }
    println!("{}", paths.root.display());
    Ok(())
}

fn load_bound(cfg: &RunConfig, paths: &RunPaths, force: bool) -> anyhow::Result<BindState> {
    let path = paths.bind_checkpoint();
    if !path.exists() {
        return Err(anyhow!("missing checkpoint {}; run `m3bind train` first", path.display()));
    }
    let state = bind_state_from(&Checkpoint::load(&path, Some(&cfg.fingerprint()?), force)?)?;
    if state.step < cfg.bind.iters {
        return Err(anyhow!(
            "binding stopped at step {} of {}; rerun `m3bind train --resume`",
            state.step,
            cfg.bind.iters
        ));
    }
    Ok(state)
}

fn cmd_distill(cfg: &RunConfig, resume: &ResumeArgs) -> anyhow::Result<()> {
    let paths = RunPaths::for_config(cfg)?;
    let ds = load_dataset(cfg, &paths)?;
    let fp = cfg.fingerprint()?;
    let teachers = load_bound(cfg, &paths, resume.force)?.bundles;
    let plan = sampling_plan(&ds, cfg)?;
    let (mut state, kept) = if resume.resume && paths.distill_checkpoint().exists() {
        let (st, _) = distill_state_from(&Checkpoint::load(&paths.distill_checkpoint(), Some(&fp), resume.force)?)?;
        let kept: Vec<StepRecord> = read_log(&paths.distill_log())
            .unwrap_or_default()
            .into_iter()
            .filter(|r| r.step < st.step)
            .collect();
        (st, kept)
    } else {
        (DistillState::new(initial_student(&ds, cfg), &cfg.distill), Vec::new())
    };
    let mut log = JsonlLog::create(&paths.distill_log(), cfg, "distill", &kept)?;
    let total = cfg.distill.total_iters();
    distill_checkpoint(&fp, &state, &teachers)?.save(&paths.distill_checkpoint())?;
    let stop = resume.stop_at.unwrap_or(usize::MAX).min(total);
    for end in chunks(state.step, stop, cfg.checkpoint_every) {
        distill_phase(&mut state, &teachers, &ds.corpora, &plan, &cfg.distill, cfg.master_seed, end, &mut |r| {
            log.write(r)
        })?;
        log.flush()?;
        distill_checkpoint(&fp, &state, &teachers)?.save(&paths.distill_checkpoint())?;
        eprintln!("distill step {end}/{total}");
    }
    println!("{}", paths.root.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, sel: EvalSelection) -> anyhow::Result<()> {
    let paths = RunPaths::for_config(cfg)?;
    let ds = load_dataset(cfg, &paths)?;
    let bound = load_bound(cfg, &paths, false)?.bundles;
    let student = if paths.distill_checkpoint().exists() {
        let ck = Checkpoint::load(&paths.distill_checkpoint(), Some(&cfg.fingerprint()?), false)?;
        let (st, _) = distill_state_from(&ck)?;
        (st.step >= cfg.distill.total_iters()).then_some(st.student)
    } else {
        None
    };
    let mut records = evaluate(&ds, cfg, &bound, student.as_ref(), &sel)?;
    if cfg.eval.ablations {
        let pretrained = get_bundles(&Checkpoint::load(&paths.pretrain_checkpoint(), Some(&cfg.fingerprint()?), false)?)?;
        for a in ablation_grid(&ds, cfg, &pretrained)? {
            records.extend(a.records);
        }
    }
    for r in &records {
        println!("{}", serde_json::to_string(r)?);
    }
    let doc = serde_json::json!({
        "fingerprint": cfg.fingerprint()?,
        "config": config_document(cfg)?,
        "tie_breaking": "lowest gallery index wins among equal similarities",
        "records": records,
    });
    std::fs::write(paths.eval_json(), serde_json::to_string_pretty(&doc)? + "\n")
        .map_err(|e| Error::io(paths.eval_json(), e))?;
    std::fs::write(paths.eval_csv(), records_to_csv(&records)).map_err(|e| Error::io(paths.eval_csv(), e))?;
    Ok(())
}

fn cmd_inspect(path: &Path) -> anyhow::Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(CORPUS_MAGIC) {
        return Err(Error::Format {
            offset: 0,
            msg: format!(
                "wrong magic: {} is a corpus file (M3BD), not a checkpoint ({})",
                path.display(),
                String::from_utf8_lossy(CHECKPOINT_MAGIC)
            ),
        }
        .into());
    }
    let ck = Checkpoint::from_bytes(&bytes).with_context(|| format!("reading {}", path.display()))?;
    println!("magic: M3CK");
    println!("version: {}", m3bind::checkpoint::CHECKPOINT_VERSION);
    println!("fingerprint: {}", ck.fingerprint);
    println!("entries: {}", ck.entries.len());
    let mut totals: BTreeMap<&str, usize> = BTreeMap::new();
    for (name, e) in &ck.entries {
        let n: usize = e.shape().iter().product();
        *totals.entry(e.dtype()).or_default() += n;
        let extra = match e {
            Entry::U64 { data, .. } if data.len() == 1 => format!(" = {}", data[0]),
            _ => String::new(),
        };
        println!("  {name}  {} {:?}{extra}", e.dtype(), e.shape());
    }
    for (dtype, n) in totals {
        println!("total {dtype} values: {n}");
    }
    Ok(())
}

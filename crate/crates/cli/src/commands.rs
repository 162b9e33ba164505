use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use log::info;
use tokentrack_core::backbone::BackboneConfig;
use tokentrack_core::eval::{evaluate_suite, trace_sequence};
use tokentrack_core::head::normalize_for_display;
use tokentrack_core::summary::{analytic_counts, summary_table, walked_counts};
use tokentrack_core::train::{self, TrainSetup, TrainState};
use tokentrack_core::world::io::{export_suite, load_suite, write_pgm, write_ppm};
use tokentrack_core::world::SyntheticSequence;
use tokentrack_core::{Checkpoint, Model, ParamStore, RunConfig};

use crate::draw::{outline, upscale};
use crate::{echo_config, ensure, Common, Split, CHECKPOINT_DIR, FINAL_CHECKPOINT, TRAIN_LOG};

/// Key prefixes that fix the network's shape and wiring.
const ARCH_PREFIXES: [&str; 4] = ["model.", "backbone.", "temporal.", "head."];

/// Defaults, then `--config`, then `--set`.
fn base_config(c: &Common) -> Result<RunConfig> {
    layered_config(c, RunConfig::default())
}

/// `--config` if given, else `fallback`; then `--set`.
fn layered_config(c: &Common, fallback: RunConfig) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => fallback,
    };
    for (k, v) in c.set_pairs()? {
        cfg.set(k, v).with_context(|| format!("--set {k}={v}"))?;
    }
    Ok(cfg)
}

/// Flags that shape the model being trained.
fn apply_model_flags(cfg: &mut RunConfig, c: &Common) {
    if let Some(v) = c.variant {
        cfg.model.variant = v;
    }
    if let Some(w) = c.window {
        cfg.temporal.window = w;
    }
    if c.no_temporal || c.no_track_token {
        cfg.model.temporal_module = false;
    }
    if c.no_track_token {
        cfg.model.track_token = false;
    }
    if c.no_prior {
        cfg.eval.use_prior = false;
    }
}

fn suite(path: &str, cfg: &RunConfig, seed: u64) -> Result<Vec<SyntheticSequence>> {
    if path.is_empty() {
        info!("generating {} sequences with world seed {seed}", cfg.world.sequences);
        Ok(cfg.world.generate(seed)?)
    } else {
        let s = load_suite(Path::new(path)).with_context(|| format!("loading sequences from {path}"))?;
        ensure(!s.is_empty(), || format!("no sequences under {path}"))?;
        Ok(s)
    }
}

pub fn gen_data(c: &Common, split: Split) -> Result<()> {
    let mut cfg = base_config(c)?;
    apply_model_flags(&mut cfg, c);
    let seed = match split {
        Split::Train => &mut cfg.train.world_seed,
        Split::Eval => &mut cfg.eval.world_seed,
    };
    if let Some(s) = c.seed {
        *seed = s;
    }
    let seed = *seed;
    cfg.world.validate()?;
    let out = c.out_dir(&cfg.paths.out, "data");
    let seqs = cfg.world.generate(seed)?;
    export_suite(&seqs, &out).with_context(|| format!("writing sequences to {}", out.display()))?;
    echo_config(&out, &cfg.to_text())?;
    println!("wrote {} sequences to {}", seqs.len(), out.display());
    Ok(())
}

/// Drops log lines past `step`, left behind by an interrupted run.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let kept: String = text
        .lines()
        .take_while(|l| {
            l.split_whitespace()
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s <= step)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept)?;
    Ok(())
}

pub fn train(c: &Common, resume: Option<&Path>) -> Result<()> {
    let mut cfg = base_config(c)?;
    apply_model_flags(&mut cfg, c);
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out = c.out_dir(&cfg.paths.out, "runs/train");
    let text = cfg.to_text();
    echo_config(&out, &text)?;

    let mcfg = cfg.model_config();
    let (model, mut store) = Model::init(&mcfg, cfg.seed)?;
    let mut state = TrainState::new(&store);
    let log_path = out.join(TRAIN_LOG);
    let file = if let Some(p) = resume {
        let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
        let trained = RunConfig::from_text(&ck.config).context("checkpoint config")?;
        ensure(trained.model_config() == mcfg, || {
            format!("{} was trained with a different architecture", p.display())
        })?;
        ck.restore_params(&mut store)?;
        state = ck
            .restore_state(&store)?
            .with_context(|| format!("{} has no optimizer state to resume from", p.display()))?;
        info!("resuming from epoch {} (step {})", state.epoch, state.step);
        truncate_log(&log_path, state.step)?;
        OpenOptions::new().create(true).append(true).open(&log_path)?
    } else {
        File::create(&log_path)?
    };
    let mut log = BufWriter::new(file);

    let seqs = suite(&cfg.paths.train_data, &cfg, cfg.train.world_seed)?;
    let sampler = cfg.sampler_config();
    let optim = cfg.optim_config();
    let tc = cfg.train_config();
    let setup = TrainSetup {
        sequences: Arc::new(seqs),
        sampler: &sampler,
        optim: &optim,
        train: &tc,
        seed: cfg.seed,
    };
    let ck_dir = out.join(CHECKPOINT_DIR);
    let (every, epochs) = (cfg.train.checkpoint_every, cfg.train.epochs);
    train::train(&model, &mut store, &mut state, &setup, &mut log, &mut |st, params| {
        if st.epoch % every == 0 || st.epoch == epochs {
            Checkpoint::capture(&text, params, Some(st)).save(&ck_dir.join(format!("epoch-{:03}.ckpt", st.epoch)))?;
        }
        Ok(())
    })?;
    log.flush()?;
    Checkpoint::capture(&text, &store, Some(&state)).save(&out.join(FINAL_CHECKPOINT))?;
    println!(
        "trained {} steps; last epoch mean loss {:.6}; checkpoint {}",
        state.step,
        state.running.total,
        out.join(FINAL_CHECKPOINT).display()
    );
    Ok(())
}

/// The checkpoint's config (or `--config`) with `--set` and evaluation flags
/// layered on top. Architecture keys and the ablation flags must agree with
/// the checkpoint.
pub fn resolve_eval_config(c: &Common, ck: &Checkpoint) -> Result<RunConfig> {
    let trained = RunConfig::from_text(&ck.config).context("checkpoint config")?;
    let mut cfg = layered_config(c, trained.clone())?;
    for ((k, want), (_, have)) in cfg.to_pairs().iter().zip(trained.to_pairs()) {
        if ARCH_PREFIXES.iter().any(|p| k.starts_with(p)) && *want != have {
            bail!("{k} = {want} requested, but the checkpoint was trained with {have}");
        }
    }
    let m = &trained.model;
    if let Some(v) = c.variant {
        ensure(v == m.variant, || {
            format!(
                "checkpoint was trained as {}; --variant {v} needs its own training run",
                m.variant
            )
        })?;
    }
    ensure(!(c.no_temporal && m.temporal_module), || {
        "checkpoint has a temporal module; --no-temporal needs its own training run".into()
    })?;
    ensure(!(c.no_track_token && m.track_token), || {
        "checkpoint uses a track token; --no-track-token needs its own training run".into()
    })?;
    if let Some(w) = c.window {
        cfg.eval.window = w;
    }
    if c.no_prior {
        cfg.eval.use_prior = false;
    }
    if let Some(s) = c.seed {
        cfg.eval.world_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_model(cfg: &RunConfig, ck: &Checkpoint) -> Result<(Model, ParamStore)> {
    let (model, mut store) = Model::init(&cfg.model_config(), 0)?;
    ck.restore_params(&mut store)?;
    Ok((model, store))
}

fn eval_inputs(
    c: &Common,
    checkpoint: &Path,
    data: Option<&Path>,
) -> Result<(RunConfig, Model, ParamStore, Vec<SyntheticSequence>)> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let cfg = resolve_eval_config(c, &ck)?;
    let (model, store) = load_model(&cfg, &ck)?;
    let path = data.map_or(cfg.paths.eval_data.clone(), |p| p.display().to_string());
    let seqs = suite(&path, &cfg, cfg.eval.world_seed)?;
    Ok((cfg, model, store, seqs))
}

pub fn eval(c: &Common, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let (cfg, model, store, seqs) = eval_inputs(c, checkpoint, data)?;
    let out = c.out_dir(&cfg.paths.out, "runs/eval");
    echo_config(&out, &cfg.to_text())?;
    let result = evaluate_suite(&model, &store, &seqs, &cfg.eval_config())?;
    result.write(&out)?;
    let a = &result.aggregate;
    println!(
        "{} sequences: ao {:.4} auc {:.4} sr50 {:.4} precision {:.4} norm_precision {:.4}",
        result.names.len(),
        a.ao,
        a.auc,
        a.sr50,
        a.precision,
        a.norm_precision
    );
    if let Some(r) = a.reacquisition_rate() {
        println!(
            "re-acquired {}/{} occlusion ends ({r:.3})",
            a.reacquired.0, a.reacquired.1
        );
    }
    Ok(())
}

/// Cell size of the upscaled map dumps, in pixels.
const MAP_ZOOM: usize = 8;

pub fn trace(c: &Common, checkpoint: &Path, data: Option<&Path>, index: usize, frames: Option<usize>) -> Result<()> {
    let (cfg, model, store, mut seqs) = eval_inputs(c, checkpoint, data)?;
    ensure(index < seqs.len(), || {
        format!("sequence {index} out of range (suite has {})", seqs.len())
    })?;
    let mut seq = seqs.swap_remove(index);
    if let Some(n) = frames {
        ensure(n >= 1, || "--frames must be at least 1".into())?;
        seq.frames.truncate(n);
        seq.gt.truncate(n);
        seq.events.truncate(n);
    }
    let out = c.out_dir(&cfg.paths.out, "runs/trace");
    echo_config(&out, &cfg.to_text())?;
    let dir = out.join(&seq.name);
    fs::create_dir_all(&dir)?;
    let g = model.grid();
    let pred = trace_sequence(&model, &store, &seq, &cfg.eval_config(), |t, o| {
        let mut f = seq.frames[t].clone();
        outline(&mut f, &seq.gt[t], [0, 255, 0]);
        outline(&mut f, &o.bbox, [255, 0, 0]);
        write_ppm(&dir.join(format!("frame_{t:06}.ppm")), &f)?;
        let score = normalize_for_display(&o.maps.score);
        write_pgm(
            &dir.join(format!("score_{t:06}.pgm")),
            g * MAP_ZOOM,
            g * MAP_ZOOM,
            &upscale(score.data(), g, MAP_ZOOM),
        )?;
        if let Some(s) = &o.guidance {
            write_pgm(
                &dir.join(format!("guidance_{t:06}.pgm")),
                g * MAP_ZOOM,
                g * MAP_ZOOM,
                &upscale(s, g, MAP_ZOOM),
            )?;
        }
        Ok(())
    })?;
    let mut track = String::new();
    for (t, b) in pred.iter().enumerate() {
        track.push_str(&format!("{t} {} {} {} {}\n", b.x1(), b.y1(), b.w, b.h));
    }
    fs::write(dir.join("track.txt"), track)?;
    println!("traced {} frames of {} into {}", pred.len(), seq.name, dir.display());
    Ok(())
}

pub fn summary(c: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let mut cfg = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            RunConfig::from_text(&ck.config).context("checkpoint config")?
        }
        None => base_config(c)?,
    };
    apply_model_flags(&mut cfg, c);
    let mcfg = cfg.model_config();
    mcfg.validate()?;
    let mut full = mcfg.clone();
    full.backbone = BackboneConfig::full_scale();
    let mut text = summary_table("desk scale (effective config)", &mcfg);
    text.push('\n');
    text.push_str(&summary_table("full-scale backbone (128/256 crops, D=512)", &full));
    if let Some(p) = checkpoint {
        let ck = Checkpoint::load(p)?;
        let (_, store) = load_model(&cfg, &ck)?;
        let walked = walked_counts(&store);
        text.push_str("\n# checkpoint walk\n");
        for m in analytic_counts(&mcfg).iter().filter(|m| m.params > 0) {
            let w = walked.get(m.module).copied().unwrap_or(0);
            text.push_str(&format!(
                "{:<40} {:>12} {:>12} {}\n",
                m.module,
                m.params,
                w,
                if w == m.params { "ok" } else { "MISMATCH" }
            ));
            ensure(w == m.params, || {
                format!("{}: analytic {} but checkpoint holds {w}", m.module, m.params)
            })?;
        }
    }
    print!("{text}");
    if let Some(out) = &c.out {
        echo_config(out, &cfg.to_text())?;
        fs::write(out.join("summary.txt"), &text)?;
    }
    Ok(())
}

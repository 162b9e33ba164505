//! Clip-based training: per-clip loss over a growing window of track tokens,
//! AdamW with two parameter groups, and a step-decay schedule.

use std::io::Write;
use std::sync::mpsc::sync_channel;
use std::sync::Arc;
use std::thread;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use tokentrack_tensor::{Tensor, Var};

use crate::backbone::Backbone;
use crate::error::{config_err, Error, Result};
use crate::model::Model;
use crate::objectives::{total_loss_var, LossBreakdown};
use crate::params::{Bound, ParamGroup, ParamStore};
use crate::world::{sample_clips, Clip, ClipBatch, SamplerConfig, SyntheticSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_backbone: f64,
    pub lr_other: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of the epochs after which the rates drop.
    pub decay_at: f64,
    pub decay_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 4e-5,
            lr_other: 4e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_at: 0.8,
            decay_factor: 10.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self, epochs: usize) -> Result<()> {
        if !(self.lr_backbone > 0.0 && self.lr_backbone < self.lr_other) {
            return config_err(format!(
                "need 0 < lr_backbone < lr_other, got {} and {}",
                self.lr_backbone, self.lr_other
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return config_err("moment decay rates must be in [0, 1) and eps positive");
        }
        if !(self.weight_decay >= 0.0) || !(self.decay_factor >= 1.0) {
            return config_err("weight decay must be >= 0 and decay factor >= 1");
        }
        let d = self.decay_epoch(epochs);
        if epochs == 0 || d < 1 || d > epochs {
            return config_err(format!("decay epoch {d} outside [1, {epochs}]"));
        }
        Ok(())
    }

    /// First epoch (1-based) trained at the decayed rates.
    pub fn decay_epoch(&self, epochs: usize) -> usize {
        ((self.decay_at * epochs as f64).round() as usize).max(1)
    }
}

/// `(lr_backbone, lr_other)` for 1-based `epoch`.
pub fn lr_schedule(epoch: usize, epochs: usize, cfg: &OptimConfig) -> (f64, f64) {
    if epoch >= cfg.decay_epoch(epochs) {
        (cfg.lr_backbone / cfg.decay_factor, cfg.lr_other / cfg.decay_factor)
    } else {
        (cfg.lr_backbone, cfg.lr_other)
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, p)| Tensor::zeros(p.shape().to_vec()))
                .collect()
        };
        Self {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn matches(&self, store: &ParamStore) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|((_, _, p), (m, v))| m.shape() == p.shape() && v.shape() == p.shape())
    }
}

/// Decoupled-weight-decay Adam update. Rejects the whole step, leaving every
/// parameter untouched, if any gradient entry is non-finite.
pub fn optimizer_step(
    store: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    lrs: (f64, f64),
    cfg: &OptimConfig,
) -> Result<()> {
    if grads.len() != store.len() || !state.matches(store) {
        return Err(Error::Contract(
            "gradients and moments must match the parameter store".into(),
        ));
    }
    for (id, g) in store.ids().zip(grads) {
        if g.shape() != store.get(id).shape() {
            return Err(Error::Contract(format!(
                "gradient shape mismatch for {}",
                store.name(id)
            )));
        }
        if let Some(k) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient",
                step: state.t + 1,
                detail: format!("{}[{k}] = {}", store.name(id), g.data()[k]),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let lr = match store.group(id) {
            ParamGroup::Backbone => lrs.0,
            ParamGroup::Other => lrs.1,
        };
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (m, g) in m.iter_mut().zip(g) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        }
        let v = state.v[i].data_mut();
        for (v, g) in v.iter_mut().zip(g) {
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((p, m), v) in store.get_mut(id).data_mut().iter_mut().zip(m).zip(v) {
            let mh = m / bc1;
            let vh = v / bc2;
            *p -= lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * *p);
        }
    }
    Ok(())
}

/// Loss handles of one clip, averaged over its frames.
#[derive(Clone, Copy, Debug)]
pub struct ClipLoss {
    pub cls: Var,
    pub giou: Var,
    pub l1: Var,
    pub total: Var,
    /// Number of frames whose focal loss hit the probability clamp.
    pub clamped: usize,
}

/// Builds the clip graph: template encoded once, each frame's track token
/// pushed into a growing window, guidance and head per frame.
pub fn clip_loss(model: &Model, b: &mut Bound, clip: &Clip) -> Result<ClipLoss> {
    let bcfg = &model.cfg.backbone;
    let m = clip.search.len();
    if m == 0 || clip.gt.len() != m {
        return Err(Error::Contract("clip needs matching search crops and boxes".into()));
    }
    let ti = Backbone::image_tensor(&clip.template.pixels, bcfg.template_size)?;
    let ti = b.g.constant(ti);
    let template = model.backbone.embed_template(b, ti)?;
    let mut window: Vec<Var> = Vec::with_capacity(model.window());
    let (mut cls, mut giou, mut l1) = (Vec::with_capacity(m), Vec::with_capacity(m), Vec::with_capacity(m));
    let mut clamped = 0;
    for (crop, gt) in clip.search.iter().zip(&clip.gt) {
        let si = Backbone::image_tensor(&crop.pixels, bcfg.search_size)?;
        let si = b.g.constant(si);
        let (track, search) = model.encode_frame(b, template, si)?;
        if let Some(t) = track {
            if window.len() == model.window() {
                window.remove(0);
            }
            window.push(t);
        }
        let (head, _) = model.predict(b, search, &window)?;
        let fl = model.frame_loss(b, &head, gt)?;
        cls.push(fl.cls);
        giou.push(fl.giou);
        l1.push(fl.l1);
        clamped += usize::from(fl.clamped);
    }
    let inv = 1.0 / m as f64;
    let mut avg = |terms: &[Var]| -> Result<Var> {
        let s = if terms.len() == 1 {
            terms[0]
        } else {
            let c = b.g.concat_rows(terms)?;
            b.g.sum(c)
        };
        Ok(b.g.scale(s, inv))
    };
    let (cls, giou, l1) = (avg(&cls)?, avg(&giou)?, avg(&l1)?);
    let total = total_loss_var(&mut b.g, &model.cfg.loss, cls, giou, l1)?;
    Ok(ClipLoss {
        cls,
        giou,
        l1,
        total,
        clamped,
    })
}

/// One clip forward and backward. Returns the averaged breakdown and the
/// gradient of the clip total for every parameter.
pub fn train_clip_step(model: &Model, store: &ParamStore, clip: &Clip) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut b = Bound::train(store);
    let cl = clip_loss(model, &mut b, clip)?;
    if cl.clamped > 0 {
        warn!("focal loss clamped probabilities in {} frame(s)", cl.clamped);
    }
    let val = |v| b.g.value(v).item();
    let lb = LossBreakdown {
        cls: val(cl.cls),
        giou: val(cl.giou),
        l1: val(cl.l1),
        total: val(cl.total),
    };
    if !lb.is_finite() {
        return Err(Error::NonFinite {
            what: "loss",
            step: 0,
            detail: format!("{lb:?}"),
        });
    }
    b.g.backward(cl.total)?;
    Ok((lb, b.grads()))
}

/// Loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Clips drawn per epoch.
    pub clips_per_epoch: usize,
    /// Batch units whose gradients are averaged into one optimizer step.
    pub accumulation: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            clips_per_epoch: 2000,
            accumulation: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, sampler: &SamplerConfig) -> Result<()> {
        if self.epochs == 0 || self.accumulation == 0 {
            return config_err("train.epochs and train.accumulation must be positive");
        }
        if self.steps_per_epoch(sampler) == 0 {
            return config_err(format!(
                "train.clips_per_epoch = {} is less than one step of {} clips",
                self.clips_per_epoch,
                sampler.clips * self.accumulation
            ));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, sampler: &SamplerConfig) -> usize {
        self.clips_per_epoch / (sampler.clips * self.accumulation)
    }
}

/// Counters, optimizer moments, and the current epoch's running loss.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub adam: AdamState,
    pub running: LossBreakdown,
}

impl TrainState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            step: 0,
            epoch: 0,
            adam: AdamState::new(store),
            running: LossBreakdown::default(),
        }
    }
}

/// Sampling seed of batch unit `unit` of step `step`.
pub fn batch_seed(seed: u64, step: u64, unit: usize) -> u64 {
    seed ^ (step.wrapping_add(1)).wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (unit as u64).wrapping_mul(0x9E37_79B9)
}

/// Everything a training run needs besides the model and its parameters.
pub struct TrainSetup<'a> {
    pub sequences: Arc<Vec<SyntheticSequence>>,
    pub sampler: &'a SamplerConfig,
    pub optim: &'a OptimConfig,
    pub train: &'a TrainConfig,
    pub seed: u64,
}

/// Runs the remaining epochs of `state`. Batches are generated one step
/// ahead on a producer thread; all math stays on the calling thread.
///
/// Writes one log line per step: `step epoch lr_other cls giou l1 total`.
/// `on_epoch` runs after each completed epoch (for checkpoints).
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    state: &mut TrainState,
    setup: &TrainSetup,
    log: &mut dyn Write,
    on_epoch: &mut dyn FnMut(&TrainState, &ParamStore) -> Result<()>,
) -> Result<()> {
    let (epochs, accum) = (setup.train.epochs, setup.train.accumulation);
    setup.sampler.validate()?;
    setup.train.validate(setup.sampler)?;
    setup.optim.validate(epochs)?;
    if !state.adam.matches(store) {
        return Err(Error::Contract("optimizer state does not match the parameters".into()));
    }
    let per_epoch = setup.train.steps_per_epoch(setup.sampler) as u64;
    let first = state.epoch as u64 * per_epoch;
    let last = epochs as u64 * per_epoch;
    if state.step != first {
        warn!("step counter {} realigned to epoch boundary {first}", state.step);
        state.step = first;
    }
    let (tsz, ssz) = (model.cfg.backbone.template_size, model.cfg.backbone.search_size);

    let (tx, rx) = sync_channel::<Result<Vec<ClipBatch>>>(2);
    let seqs = Arc::clone(&setup.sequences);
    let sampler = setup.sampler.clone();
    let seed = setup.seed;
    let producer = thread::spawn(move || {
        for step in first..last {
            let units = (0..accum)
                .map(|u| sample_clips(&seqs, &sampler, tsz, ssz, batch_seed(seed, step, u)))
                .collect();
            if tx.send(units).is_err() {
                break;
            }
        }
    });

    let result = (|| {
        let n_clips = (setup.sampler.clips * accum) as f64;
        for epoch in state.epoch + 1..=epochs {
            let lrs = lr_schedule(epoch, epochs, setup.optim);
            info!("epoch {epoch}/{epochs}: lr_backbone {} lr_other {}", lrs.0, lrs.1);
            let mut sum = LossBreakdown::default();
            for k in 0..per_epoch {
                let units = rx
                    .recv()
                    .map_err(|_| Error::Sampling("batch producer stopped early".into()))??;
                let mut grads: Option<Vec<Tensor>> = None;
                let (mut cls, mut giou, mut l1) = (0.0, 0.0, 0.0);
                for clip in units.iter().flat_map(|u| &u.clips) {
                    let (lb, g) = train_clip_step(model, store, clip).map_err(|e| with_step(e, state.step + 1))?;
                    cls += lb.cls;
                    giou += lb.giou;
                    l1 += lb.l1;
                    match grads.as_mut() {
                        None => grads = Some(g),
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&g) {
                                for (a, g) in a.data_mut().iter_mut().zip(g.data()) {
                                    *a += g;
                                }
                            }
                        }
                    }
                }
                let mut grads = grads.expect("at least one clip");
                for g in &mut grads {
                    for v in g.data_mut() {
                        *v /= n_clips;
                    }
                }
                optimizer_step(store, &grads, &mut state.adam, lrs, setup.optim)?;
                state.step += 1;
                let lb = LossBreakdown::weighted(&model.cfg.loss, cls / n_clips, giou / n_clips, l1 / n_clips);
                writeln!(
                    log,
                    "{} {} {} {} {} {} {}",
                    state.step, epoch, lrs.1, lb.cls, lb.giou, lb.l1, lb.total
                )?;
                sum.cls += lb.cls;
                sum.giou += lb.giou;
                sum.l1 += lb.l1;
                let seen = (k + 1) as f64;
                state.running =
                    LossBreakdown::weighted(&model.cfg.loss, sum.cls / seen, sum.giou / seen, sum.l1 / seen);
            }
            log.flush()?;
            state.epoch = epoch;
            info!(
                "epoch {epoch} done at step {}: mean total {:.4}",
                state.step, state.running.total
            );
            on_epoch(state, store)?;
        }
        Ok(())
    })();
    drop(rx);
    producer
        .join()
        .map_err(|_| Error::Sampling("batch producer panicked".into()))?;
    result
}

fn with_step(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { what, detail, .. } => Error::NonFinite { what, step, detail },
        other => other,
    }
}

//! Sliding-window inference over whole sequences and one-pass evaluation
//! metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tokentrack_tensor::Tensor;

use crate::backbone::Backbone;
use crate::bbox::{iou, BBox};
use crate::error::{config_err, contract, Result};
use crate::head::{decode_box, hamming_prior, HeadMaps};
use crate::model::Model;
use crate::params::{Bound, ParamStore};
use crate::temporal::WindowBuffer;
use crate::world::{crop_region, Frame, Occlusion, SyntheticSequence};

/// Smallest predicted side in frame pixels; keeps the next crop well-formed.
const MIN_SIDE: f64 = 2.0;
/// Frames after an occlusion in which the target must be found again.
pub const REACQUIRE_FRAMES: usize = 5;
pub const REACQUIRE_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Multiply the score map by a Hamming window before the argmax.
    pub use_prior: bool,
    pub template_factor: f64,
    pub search_factor: f64,
    /// Window override; `0` keeps the trained window.
    pub window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            use_prior: true,
            template_factor: 2.0,
            search_factor: 4.0,
            window: 0,
        }
    }
}

impl EvalConfig {
    /// Effective window: the override clamped to the trained `m`.
    pub fn effective_window(&self, trained: usize) -> usize {
        match self.window {
            0 => trained,
            w if w > trained => {
                log::warn!("window {w} exceeds the trained window {trained}; using {trained}");
                trained
            }
            w => w,
        }
    }
}

/// What one tracked frame produced.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Prediction in frame pixels.
    pub bbox: BBox,
    pub maps: HeadMaps,
    /// Guidance scores over the search grid, when guidance ran.
    pub guidance: Option<Vec<f64>>,
}

/// Per-sequence tracker state. The template is encoded once from the first
/// frame; each frame's track token goes into a fixed-size window.
pub struct TrackerSession<'a> {
    model: &'a Model,
    store: &'a ParamStore,
    template: Tensor,
    window: WindowBuffer,
    prev: BBox,
    prior: Option<Vec<f64>>,
    search_factor: f64,
    frames: usize,
}

impl<'a> TrackerSession<'a> {
    /// Encodes the template around `init` and seeds the window with the
    /// first frame's track token.
    pub fn new(model: &'a Model, store: &'a ParamStore, first: &Frame, init: BBox, cfg: &EvalConfig) -> Result<Self> {
        init.validate()?;
        let bcfg = &model.cfg.backbone;
        let crop = crop_region(first, &init, cfg.template_factor, bcfg.template_size)?;
        let mut b = Bound::infer(store);
        let img = b.g.constant(Backbone::image_tensor(&crop.pixels, bcfg.template_size)?);
        let tv = model.backbone.embed_template(&mut b, img)?;
        let template = b.g.value(tv).clone();
        let prior = if cfg.use_prior {
            Some(hamming_prior(model.grid())?)
        } else {
            None
        };
        let mut s = Self {
            model,
            store,
            template,
            window: WindowBuffer::new(cfg.effective_window(model.window())),
            prev: init,
            prior,
            search_factor: cfg.search_factor,
            frames: 0,
        };
        s.run(first, true)?;
        Ok(s)
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn previous(&self) -> BBox {
        self.prev
    }

    /// Tracks the next frame.
    pub fn step(&mut self, frame: &Frame) -> Result<StepOutput> {
        self.run(frame, false)
    }

    fn run(&mut self, frame: &Frame, init: bool) -> Result<StepOutput> {
        let model = self.model;
        let bcfg = &model.cfg.backbone;
        let crop = crop_region(frame, &self.prev, self.search_factor, bcfg.search_size)?;
        let mut b = Bound::infer(self.store);
        let template = b.g.constant(self.template.clone());
        let img = b.g.constant(Backbone::image_tensor(&crop.pixels, bcfg.search_size)?);
        let (track, search) = model.encode_frame(&mut b, template, img)?;
        if let Some(t) = track {
            self.window.push(b.g.value(t).clone())?;
        }
        let window: Vec<_> = self.window.iter().map(|t| b.g.constant(t.clone())).collect();
        let (head, s) = model.predict(&mut b, search, &window)?;
        let maps = head.maps(&b, model.grid());
        let guidance = s.map(|s| b.g.value(s).data().to_vec());
        self.frames += 1;
        if model.cfg.track_token && self.window.len() != self.frames.min(self.window.capacity()) {
            return contract("window length diverged from min(t, m)");
        }
        let bbox = if init {
            self.prev
        } else {
            let local = decode_box(&maps, self.prior.as_deref())?;
            let fb = crop.transform.to_frame(&local);
            let (w, h) = (frame.width as f64, frame.height as f64);
            let bw = fb.w.clamp(MIN_SIDE, w);
            let bh = fb.h.clamp(MIN_SIDE, h);
            let cx = fb.cx.clamp(0.0, w);
            let cy = fb.cy.clamp(0.0, h);
            BBox::new(cx, cy, bw, bh)
        };
        if !bbox.is_finite() {
            return contract(format!("non-finite prediction {bbox:?}"));
        }
        self.prev = bbox;
        Ok(StepOutput { bbox, maps, guidance })
    }
}

/// Frame-coordinate predictions for every frame; the first is the ground truth.
pub fn track_sequence(
    model: &Model,
    store: &ParamStore,
    seq: &SyntheticSequence,
    cfg: &EvalConfig,
) -> Result<Vec<BBox>> {
    trace_sequence(model, store, seq, cfg, |_, _| Ok(()))
}

/// As [`track_sequence`], calling `visit(t, out)` after every tracked frame.
pub fn trace_sequence(
    model: &Model,
    store: &ParamStore,
    seq: &SyntheticSequence,
    cfg: &EvalConfig,
    mut visit: impl FnMut(usize, &StepOutput) -> Result<()>,
) -> Result<Vec<BBox>> {
    if seq.is_empty() || seq.gt.len() != seq.len() {
        return contract("sequence must have frames and one ground-truth box per frame");
    }
    let mut session = TrackerSession::new(model, store, &seq.frames[0], seq.gt[0], cfg)?;
    let mut out = Vec::with_capacity(seq.len());
    out.push(seq.gt[0]);
    for (t, f) in seq.frames.iter().enumerate().skip(1) {
        let o = session.step(f)?;
        visit(t, &o)?;
        out.push(o.bbox);
    }
    Ok(out)
}

/// One-pass evaluation of one sequence, or an average over several.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// Scored frames (all but the first of each sequence).
    pub frames: usize,
    /// Fraction of frames with IoU ≥ τ for τ = 0, 0.05, …, 1.
    pub success: Vec<f64>,
    pub auc: f64,
    /// Mean IoU.
    pub ao: f64,
    pub sr50: f64,
    /// Fraction of frames with center error ≤ 20 px.
    pub precision: f64,
    /// Fraction with center error / √(w·h) ≤ τ for τ = 0, 0.005, …, 0.5.
    pub norm_precision_curve: Vec<f64>,
    /// `norm_precision_curve` at τ = 0.2.
    pub norm_precision: f64,
    /// (found again, occlusion ends observed).
    pub reacquired: (usize, usize),
}

pub const SUCCESS_STEPS: usize = 20;
pub const NORM_STEPS: usize = 100;
pub const PRECISION_PX: f64 = 20.0;
pub const NORM_HEADLINE: f64 = 0.2;

pub fn success_thresholds() -> Vec<f64> {
    (0..=SUCCESS_STEPS).map(|k| k as f64 / SUCCESS_STEPS as f64).collect()
}

pub fn norm_thresholds() -> Vec<f64> {
    (0..=NORM_STEPS).map(|k| 0.5 * k as f64 / NORM_STEPS as f64).collect()
}

fn fraction(values: &[f64], pass: impl Fn(f64) -> bool) -> f64 {
    values.iter().filter(|&&v| pass(v)).count() as f64 / values.len() as f64
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

impl MetricReport {
    /// Sequence-averaged report. Curves are averaged pointwise and the
    /// headline numbers re-read from them; re-acquisition counts are summed.
    pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return contract("nothing to aggregate");
        }
        let avg_curve = |f: &dyn Fn(&MetricReport) -> &Vec<f64>| -> Vec<f64> {
            let n = f(&reports[0]).len();
            (0..n)
                .map(|i| mean(&reports.iter().map(|r| f(r)[i]).collect::<Vec<_>>()))
                .collect()
        };
        let success = avg_curve(&|r| &r.success);
        let norm = avg_curve(&|r| &r.norm_precision_curve);
        let per = |f: fn(&MetricReport) -> f64| mean(&reports.iter().map(f).collect::<Vec<_>>());
        Ok(MetricReport {
            frames: reports.iter().map(|r| r.frames).sum(),
            auc: mean(&success),
            sr50: success[SUCCESS_STEPS / 2],
            success,
            ao: per(|r| r.ao),
            precision: per(|r| r.precision),
            norm_precision: norm[(NORM_HEADLINE / 0.5 * NORM_STEPS as f64).round() as usize],
            norm_precision_curve: norm,
            reacquired: reports
                .iter()
                .fold((0, 0), |a, r| (a.0 + r.reacquired.0, a.1 + r.reacquired.1)),
        })
    }

    /// Share of occlusion ends after which the target was found again.
    pub fn reacquisition_rate(&self) -> Option<f64> {
        (self.reacquired.1 > 0).then(|| self.reacquired.0 as f64 / self.reacquired.1 as f64)
    }

    /// Flat `key = value` lines.
    pub fn to_kv(&self, prefix: &str) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{prefix}{k} = {v}");
        };
        kv("frames", self.frames.to_string());
        kv("auc", self.auc.to_string());
        kv("ao", self.ao.to_string());
        kv("sr50", self.sr50.to_string());
        kv("precision20", self.precision.to_string());
        kv("norm_precision", self.norm_precision.to_string());
        kv("reacquired", self.reacquired.0.to_string());
        kv("occlusion_ends", self.reacquired.1.to_string());
        if let Some(r) = self.reacquisition_rate() {
            kv("reacquisition", r.to_string());
        }
        kv("success_curve", join(&self.success));
        kv("norm_precision_curve", join(&self.norm_precision_curve));
        s
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ")
}

/// Scores `pred` against `gt`, skipping frame 0. Center errors are in
/// pixels of a `frame_size` frame.
pub fn ope_evaluate(pred: &[BBox], gt: &[BBox], frame_size: (usize, usize)) -> Result<MetricReport> {
    ope_evaluate_with(pred, gt, frame_size, &[])
}

/// As [`ope_evaluate`], also scoring re-acquisition after each occlusion.
pub fn ope_evaluate_with(
    pred: &[BBox],
    gt: &[BBox],
    frame_size: (usize, usize),
    occlusions: &[Occlusion],
) -> Result<MetricReport> {
    if pred.len() != gt.len() {
        return contract(format!(
            "{} predictions for {} ground-truth boxes",
            pred.len(),
            gt.len()
        ));
    }
    if pred.len() < 2 {
        return contract("need at least one frame after initialization");
    }
    if frame_size.0 == 0 || frame_size.1 == 0 {
        return config_err("frame size must be positive");
    }
    let ious: Vec<f64> = pred.iter().zip(gt).skip(1).map(|(p, g)| iou(p, g)).collect();
    let errs: Vec<f64> = pred.iter().zip(gt).skip(1).map(|(p, g)| p.center_distance(g)).collect();
    let nerrs: Vec<f64> = pred
        .iter()
        .zip(gt)
        .skip(1)
        .map(|(p, g)| p.center_distance(g) / (g.w * g.h).sqrt().max(f64::MIN_POSITIVE))
        .collect();
    let success: Vec<f64> = success_thresholds()
        .into_iter()
        .map(|t| fraction(&ious, |v| v >= t))
        .collect();
    let norm: Vec<f64> = norm_thresholds()
        .into_iter()
        .map(|t| fraction(&nerrs, |v| v <= t))
        .collect();
    let mut reacquired = (0, 0);
    for o in occlusions {
        let end = o.end();
        if end >= pred.len() {
            continue;
        }
        reacquired.1 += 1;
        let stop = (end + REACQUIRE_FRAMES).min(pred.len());
        if (end..stop).any(|t| iou(&pred[t], &gt[t]) > REACQUIRE_IOU) {
            reacquired.0 += 1;
        }
    }
    Ok(MetricReport {
        frames: ious.len(),
        auc: mean(&success),
        sr50: success[SUCCESS_STEPS / 2],
        success,
        ao: mean(&ious),
        precision: fraction(&errs, |e| e <= PRECISION_PX),
        norm_precision: norm[(NORM_HEADLINE / 0.5 * NORM_STEPS as f64).round() as usize],
        norm_precision_curve: norm,
        reacquired,
    })
}

/// Tracks and scores one sequence.
pub fn evaluate_sequence(
    model: &Model,
    store: &ParamStore,
    seq: &SyntheticSequence,
    cfg: &EvalConfig,
) -> Result<(Vec<BBox>, MetricReport)> {
    let pred = track_sequence(model, store, seq, cfg)?;
    let f = &seq.frames[0];
    let occ = if seq.occlusions.is_empty() {
        seq.occlusion_intervals()
    } else {
        seq.occlusions.clone()
    };
    let report = ope_evaluate_with(&pred, &seq.gt, (f.width, f.height), &occ)?;
    Ok((pred, report))
}

/// Per-sequence predictions and reports plus their aggregate.
#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub names: Vec<String>,
    pub predictions: Vec<Vec<BBox>>,
    pub reports: Vec<MetricReport>,
    pub aggregate: MetricReport,
}

/// Tracks every sequence, fanning out over the available cores. Results are
/// in input order and do not depend on the thread count.
pub fn evaluate_suite(
    model: &Model,
    store: &ParamStore,
    seqs: &[SyntheticSequence],
    cfg: &EvalConfig,
) -> Result<SuiteResult> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(seqs.len())
        .max(1);
    let chunk = seqs.len().div_ceil(workers).max(1);
    let results: Vec<Result<(Vec<BBox>, MetricReport)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seqs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| evaluate_sequence(model, store, s, cfg))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation thread panicked"))
            .collect()
    });
    let mut names = Vec::with_capacity(seqs.len());
    let mut predictions = Vec::with_capacity(seqs.len());
    let mut reports = Vec::with_capacity(seqs.len());
    for (s, r) in seqs.iter().zip(results) {
        let (p, r) = r?;
        log::debug!("{}: ao {:.4} auc {:.4}", s.name, r.ao, r.auc);
        names.push(s.name.clone());
        predictions.push(p);
        reports.push(r);
    }
    let aggregate = MetricReport::aggregate(&reports)?;
    Ok(SuiteResult {
        names,
        predictions,
        reports,
        aggregate,
    })
}

impl SuiteResult {
    /// `<name>.txt` with `frame_index x y w h` lines per sequence, and
    /// `report.txt` holding the aggregate and per-sequence metrics.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, pred) in self.names.iter().zip(&self.predictions) {
            let mut s = String::new();
            for (t, b) in pred.iter().enumerate() {
                let _ = writeln!(s, "{t} {} {} {} {}", b.x1(), b.y1(), b.w, b.h);
            }
            fs::write(dir.join(format!("{name}.txt")), s)?;
        }
        fs::write(dir.join("report.txt"), self.report_text())?;
        Ok(())
    }

    pub fn report_text(&self) -> String {
        let mut s = format!("sequences = {}\n", self.names.len());
        s.push_str(&self.aggregate.to_kv(""));
        for (name, r) in self.names.iter().zip(&self.reports) {
            let _ = writeln!(s, "seq.{name}.ao = {}", r.ao);
            let _ = writeln!(s, "seq.{name}.auc = {}", r.auc);
        }
        s
    }
}

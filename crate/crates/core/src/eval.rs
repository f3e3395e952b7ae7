//! Offline tracking of whole sequences and benchmark metrics.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sequence};
use crate::error::{Error, Result};
use crate::geometry::{hanning_2d, iou, make_crop, BBox};
use crate::heads::{Grid, HeadKind, HeadMaps};
use crate::imaging::{mean_color, render_crop, Photometric};
use crate::model::{ModelConfig, PairInput, Predictor, SearchContext};

/// Success-curve thresholds `0, 0.05, ..., 1`.
pub fn success_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.05).collect()
}

/// Normalized-precision thresholds `0, 0.01, ..., 0.5` (centre error over gt diagonal).
pub fn norm_precision_thresholds() -> Vec<f64> {
    (0..=50).map(|i| i as f64 * 0.01).collect()
}

pub const PRECISION_PX: f64 = 20.0;
pub const MIN_BOX_SIDE: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerConfig {
    pub template_factor: f64,
    pub search_factor: f64,
    pub hanning: bool,
    /// Count frame 0 (IoU 1 by construction) in the metrics.
    pub include_first: bool,
    /// On absent-labeled frames a prediction scoring above this counts as IoU 0; otherwise the frame is skipped.
    pub absent_score_threshold: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            template_factor: 2.0,
            search_factor: 4.0,
            hanning: true,
            include_first: false,
            absent_score_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameResult {
    pub frame: usize,
    pub pred: BBox,
    pub score: f64,
    /// `None` when the frame is excluded from the metrics.
    pub iou: Option<f64>,
    pub center_error: Option<f64>,
    pub norm_center_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequenceResult {
    pub name: String,
    pub frames: Vec<FrameResult>,
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
}

/// Macro averages over sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
    pub auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub sequences: usize,
    pub frames: usize,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn rate(v: &[f64], pred: impl Fn(f64) -> bool) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().filter(|&&x| pred(x)).count() as f64 / v.len() as f64
    }
}

/// Success rate at each threshold (IoU strictly above it).
pub fn success_curve(ious: &[f64]) -> Vec<f64> {
    success_thresholds().into_iter().map(|t| rate(ious, |x| x > t)).collect()
}

/// Scores predicted boxes against a sequence's ground truth.
pub fn score_sequence(seq: &Sequence, preds: &[(BBox, f64)], cfg: &TrackerConfig) -> SequenceResult {
    let mut frames = Vec::with_capacity(seq.len());
    for (t, &(pred, score)) in preds.iter().enumerate() {
        let gt = seq.boxes[t];
        let counted = t > 0 || cfg.include_first;
        let (iou_v, ce, nce) = if !counted {
            (None, None, None)
        } else if seq.absent[t] {
            (if score > cfg.absent_score_threshold { Some(0.0) } else { None }, None, None)
        } else {
            let ce = (pred.cx() - gt.cx()).hypot(pred.cy() - gt.cy());
            let diag = gt.w.hypot(gt.h).max(f64::MIN_POSITIVE);
            let v = if t == 0 { 1.0 } else { iou(&pred, &gt) };
            (Some(v), Some(ce), Some(ce / diag))
        };
        frames.push(FrameResult {
            frame: t,
            pred,
            score,
            iou: iou_v,
            center_error: ce,
            norm_center_error: nce,
        });
    }
    let ious: Vec<f64> = frames.iter().filter_map(|f| f.iou).collect();
    let errs: Vec<f64> = frames.iter().filter_map(|f| f.center_error).collect();
    let nerrs: Vec<f64> = frames.iter().filter_map(|f| f.norm_center_error).collect();
    SequenceResult {
        name: seq.name.clone(),
        ao: mean(&ious),
        sr50: rate(&ious, |x| x > 0.5),
        sr75: rate(&ious, |x| x > 0.75),
        auc: mean(&success_curve(&ious)),
        precision: rate(&errs, |e| e <= PRECISION_PX),
        norm_precision: mean(
            &norm_precision_thresholds()
                .into_iter()
                .map(|t| rate(&nerrs, |e| e <= t))
                .collect::<Vec<_>>(),
        ),
        frames,
    }
}

pub fn summarize(results: &[SequenceResult]) -> Summary {
    let m = |f: fn(&SequenceResult) -> f64| mean(&results.iter().map(f).collect::<Vec<_>>());
    Summary {
        ao: m(|r| r.ao),
        sr50: m(|r| r.sr50),
        sr75: m(|r| r.sr75),
        auc: m(|r| r.auc),
        precision: m(|r| r.precision),
        norm_precision: m(|r| r.norm_precision),
        sequences: results.len(),
        frames: results.iter().map(|r| r.frames.iter().filter(|f| f.iou.is_some()).count()).sum(),
    }
}

/// Template crop and normalized template box from frame 0.
pub fn template_input(seq: &Sequence, model: &ModelConfig, cfg: &TrackerConfig) -> Result<(jn_autodiff::Tensor, BBox)> {
    let e = &model.encoder;
    let b0 = seq.boxes[0];
    let t = make_crop(&b0, cfg.template_factor, e.template_res)?;
    let img = &seq.frames[0];
    let crop = render_crop(img, &t, mean_color(img), Photometric::default());
    let tb = t.apply(&b0);
    let r = e.template_res as f64;
    Ok((crop, BBox::new(tb.x / r, tb.y / r, tb.w / r, tb.h / r)))
}

/// Keeps an estimate inside the frame with a minimum side.
fn constrain(b: BBox, width: f64, height: f64) -> BBox {
    let w = b.w.clamp(MIN_BOX_SIDE, width);
    let h = b.h.clamp(MIN_BOX_SIDE, height);
    let cx = b.cx().clamp(0.0, width);
    let cy = b.cy().clamp(0.0, height);
    BBox::from_center(cx, cy, w, h)
}

/// Runs the tracker over one sequence; returns per-frame `(box, score)` in frame coordinates.
pub fn track_sequence<P: Predictor + ?Sized>(model: &P, seq: &Sequence, cfg: &TrackerConfig) -> Result<Vec<(BBox, f64)>> {
    if seq.is_empty() || seq.absent[0] {
        return Err(Error::Data(format!("sequence {}: frame 0 must show the target", seq.name)));
    }
    let mc = model.model_config();
    let grid = model.grid();
    let window = if cfg.hanning { Some(hanning_2d(grid.size)?) } else { None };
    let (template, template_box) = template_input(seq, mc, cfg)?;
    let mut state = seq.boxes[0];
    let mut out = vec![(state, 1.0)];
    for t in 1..seq.len() {
        let img = &seq.frames[t];
        let tf = make_crop(&state, cfg.search_factor, mc.encoder.search_res)?;
        let input = PairInput {
            template: template.clone(),
            search: render_crop(img, &tf, mean_color(img), Photometric::default()),
            template_box,
        };
        let maps = model.predict(&input, &SearchContext { frame: t, transform: tf })?;
        let (b, score, _) = maps.decode(&grid, window.as_deref());
        state = constrain(tf.invert(&b), img.width() as f64, img.height() as f64);
        out.push((state, score));
    }
    Ok(out)
}

/// Reports the frame-0 box on every frame.
pub fn static_baseline(seq: &Sequence, cfg: &TrackerConfig) -> SequenceResult {
    let preds = vec![(seq.boxes[0], 1.0); seq.len()];
    score_sequence(seq, &preds, cfg)
}

pub struct Evaluation {
    pub sequences: Vec<SequenceResult>,
    pub summary: Summary,
    pub fps: f64,
}

pub fn evaluate<P: Predictor + ?Sized>(model: &P, data: &Dataset, cfg: &TrackerConfig) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let start = Instant::now();
    let mut results = Vec::with_capacity(data.len());
    let mut tracked = 0usize;
    for seq in &data.sequences {
        let preds = track_sequence(model, seq, cfg)?;
        tracked += preds.len().saturating_sub(1);
        results.push(score_sequence(seq, &preds, cfg));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Evaluation {
        summary: summarize(&results),
        sequences: results,
        fps: tracked as f64 / secs.max(1e-9),
    })
}

pub fn evaluate_static(data: &Dataset, cfg: &TrackerConfig) -> Summary {
    summarize(&data.sequences.iter().map(|s| static_baseline(s, cfg)).collect::<Vec<_>>())
}

/// Writes `dir/<seq>.csv` for every sequence and `dir/summary.json`.
pub fn write_results(dir: &Path, eval: &Evaluation) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for r in &eval.sequences {
        let mut s = String::from("frame,x,y,w,h,iou,score\n");
        for f in &r.frames {
            let iou = f.iou.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{},{iou},{}\n", f.frame, f.pred.x, f.pred.y, f.pred.w, f.pred.h, f.score));
        }
        let p = dir.join(format!("{}.csv", r.name));
        fs::write(&p, s).map_err(|e| Error::io(p, e))?;
    }
    let p = dir.join("summary.json");
    fs::write(&p, summary_json(&eval.summary)).map_err(|e| Error::io(p, e))
}

pub fn summary_json(s: &Summary) -> String {
    serde_json::to_string_pretty(s).expect("summary serializes") + "\n"
}

/// Predictor that emits ideal head maps from ground truth; used to calibrate the tracker and metrics.
pub struct GtOracle<'a> {
    pub cfg: ModelConfig,
    pub boxes: &'a [BBox],
}

impl Predictor for GtOracle<'_> {
    fn model_config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn predict(&self, _input: &PairInput, ctx: &SearchContext) -> Result<HeadMaps> {
        Ok(oracle_maps(
            self.cfg.head,
            &self.grid(),
            self.cfg.dist.n,
            &ctx.transform.apply(&self.boxes[ctx.frame]),
        ))
    }
}

/// Splits a continuous value over its two neighbouring integer bins in `[0, n]`.
fn two_bin(v: f64, n: usize) -> Vec<f64> {
    let v = v.clamp(0.0, n as f64);
    let lo = (v.floor() as usize).min(n.saturating_sub(1));
    let mut p = vec![0.0; n + 1];
    p[lo] = (lo + 1) as f64 - v;
    p[lo + 1] = v - lo as f64;
    p
}

/// Head maps whose decode reproduces `gt` (search-crop pixels) up to the head's range limits.
pub fn oracle_maps(kind: HeadKind, grid: &Grid, n: usize, gt: &BBox) -> HeadMaps {
    let cells = grid.cells();
    let bump: Vec<f64> = (0..cells)
        .map(|c| {
            let (x, y) = grid.center(c);
            let d2 = ((x - gt.cx()).powi(2) + (y - gt.cy()).powi(2)) / (grid.stride * grid.stride);
            (-d2 / 2.0).exp()
        })
        .collect();
    match kind {
        HeadKind::Dist => {
            let s = grid.stride;
            let mut probs = Vec::with_capacity(cells * 4 * (n + 1));
            for c in 0..cells {
                let (x, y) = grid.center(c);
                for v in [(x - gt.x) / s, (y - gt.y) / s, (gt.x1() - x) / s, (gt.y1() - y) / s] {
                    probs.extend(two_bin(v, n));
                }
            }
            HeadMaps::Dist { quality: bump, probs, n }
        }
        HeadKind::Center => {
            let mut offset = Vec::with_capacity(2 * cells);
            let mut size = Vec::with_capacity(2 * cells);
            for c in 0..cells {
                let (x, y) = grid.center(c);
                offset.extend([(gt.cx() - x) / grid.stride, (gt.cy() - y) / grid.stride]);
                size.extend([gt.w / grid.res(), gt.h / grid.res()]);
            }
            HeadMaps::Center {
                centerness: bump,
                offset,
                size,
            }
        }
        HeadKind::Corner => {
            let corner_map = |px: f64, py: f64| {
                // bilinear weights over the four cells around the point, in cell-index units
                let g = grid.size;
                let fx = (px / grid.stride - 0.5).clamp(0.0, (g - 1) as f64);
                let fy = (py / grid.stride - 0.5).clamp(0.0, (g - 1) as f64);
                let (j0, i0) = ((fx.floor() as usize).min(g.saturating_sub(2)), (fy.floor() as usize).min(g.saturating_sub(2)));
                let (ax, ay) = (fx - j0 as f64, fy - i0 as f64);
                let mut m = vec![0.0; cells];
                for (di, wy) in [(0, 1.0 - ay), (1, ay)] {
                    for (dj, wx) in [(0, 1.0 - ax), (1, ax)] {
                        m[(i0 + di) * g + j0 + dj] += wy * wx;
                    }
                }
                m
            };
            HeadMaps::Corner {
                tl: corner_map(gt.x, gt.y),
                br: corner_map(gt.x1(), gt.y1()),
            }
        }
    }
}

//! Loss primitives on the tape and the per-head composite batch losses.

use jn_autodiff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::heads::{CenterLabels, CenterOutput, CornerLabels, CornerOutput, DistLabels, DistOutput, Grid, HeadOutput, Labels};

pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub l1: f64,
    pub giou: f64,
    pub dfl: f64,
    pub fl: f64,
    pub ce: f64,
    pub qfl: f64,
    pub qfl_beta: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 5.0,
            giou: 2.0,
            dfl: 0.2,
            fl: 1.0,
            ce: 1.0,
            qfl: 1.0,
            qfl_beta: 2.0,
            focal_gamma: 2.0,
            focal_alpha: 0.75,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.l1,
            self.giou,
            self.dfl,
            self.fl,
            self.ce,
            self.qfl,
            self.qfl_beta,
            self.focal_gamma,
        ];
        if all.iter().any(|v| !(*v >= 0.0)) || !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Quality focal loss of one prediction.
pub fn qfl_value(sigma: f64, y: f64, beta: f64) -> f64 {
    let s = sigma.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y - s).abs().powf(beta) * ((1.0 - y) * (1.0 - s).ln() + y * s.ln())
}

/// Distribution focal loss on the two bins bracketing `y`.
pub fn dfl_value(s_i: f64, s_i1: f64, y: f64, y_i: f64, y_i1: f64) -> Result<f64> {
    if !(y_i <= y && y <= y_i1) {
        return Err(Error::Loss(format!("dfl target {y} outside bins [{y_i}, {y_i1}]")));
    }
    let (a, b) = (s_i.max(PROB_EPS), s_i1.max(PROB_EPS));
    Ok(-((y_i1 - y) * a.ln() + (y - y_i) * b.ln()))
}

/// Sum over elements of `-|y-σ|^β ((1-y) log(1-σ) + y log σ)`.
pub fn qfl(tape: &mut Tape, sigma: Var, y: &[f64], beta: f64) -> Result<Var> {
    let shape = tape.shape(sigma).to_vec();
    let s = tape.clamp(sigma, PROB_EPS, 1.0 - PROB_EPS);
    let yv = tape.constant(Tensor::new(shape.clone(), y.to_vec())?);
    let ce = bce(tape, s, y, &shape)?;
    let loss = if beta == 0.0 {
        ce
    } else {
        let diff = tape.sub(yv, s)?;
        let diff = tape.abs(diff);
        let m = tape.powf(diff, beta);
        tape.mul(m, ce)?
    };
    Ok(tape.sum_all(loss))
}

/// Elementwise `-(y log s + (1-y) log(1-s))` for an already clamped `s`.
fn bce(tape: &mut Tape, s: Var, y: &[f64], shape: &[usize]) -> Result<Var> {
    let yv = tape.constant(Tensor::new(shape.to_vec(), y.to_vec())?);
    let ny = tape.constant(Tensor::new(shape.to_vec(), y.iter().map(|v| 1.0 - v).collect())?);
    let ls = tape.log(s);
    let oms = tape.rsub_scalar(1.0, s);
    let lo = tape.log(oms);
    let a = tape.mul(yv, ls)?;
    let b = tape.mul(ny, lo)?;
    let sum = tape.add(a, b)?;
    Ok(tape.neg(sum))
}

/// Soft-label focal loss summed over elements:
/// `-α y (1-p)^γ log p - (1-α)(1-y) p^γ log(1-p)`.
pub fn focal(tape: &mut Tape, p: Var, y: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
    let shape = tape.shape(p).to_vec();
    let p = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let wp = tape.constant(Tensor::new(shape.clone(), y.iter().map(|v| -alpha * v).collect())?);
    let wn = tape.constant(Tensor::new(shape.clone(), y.iter().map(|v| -(1.0 - alpha) * (1.0 - v)).collect())?);
    let omp = tape.rsub_scalar(1.0, p);
    let lp = tape.log(p);
    let lomp = tape.log(omp);
    let mp = tape.powf(omp, gamma);
    let mn = tape.powf(p, gamma);
    let pos = tape.mul(mp, lp)?;
    let pos = tape.mul(wp, pos)?;
    let neg = tape.mul(mn, lomp)?;
    let neg = tape.mul(wn, neg)?;
    let l = tape.add(pos, neg)?;
    Ok(tape.sum_all(l))
}

/// Mean binary cross-entropy of `sigmoid(logits)` against all-zero targets.
pub fn bce_zero_mean(tape: &mut Tape, logits: Var) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let p = tape.sigmoid(logits);
    let p = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let zeros = vec![0.0; shape.iter().product()];
    let l = bce(tape, p, &zeros, &shape)?;
    Ok(tape.mean_all(l))
}

/// DFL summed over `cells`, averaged over the four directions of each.
/// `probs` is `[cells, 4, n + 1]`; targets already lie in `[0, n]`.
pub fn dfl(tape: &mut Tape, probs: Var, cells: &[usize], ltrb: &[[f64; 4]]) -> Result<Var> {
    let m = tape.shape(probs)[2];
    let n = (m - 1) as f64;
    let mut idx = Vec::new();
    let mut w = Vec::new();
    for (&c, t) in cells.iter().zip(ltrb) {
        for (d, &y) in t.iter().enumerate() {
            if !(0.0..=n).contains(&y) {
                return Err(Error::Loss(format!("dfl target {y} outside [0, {n}]")));
            }
            let base = (c * 4 + d) * m;
            let i = y.floor();
            if y == i {
                idx.push(base + i as usize);
                w.push(-0.25);
            } else {
                idx.push(base + i as usize);
                w.push(-0.25 * (i + 1.0 - y));
                idx.push(base + i as usize + 1);
                w.push(-0.25 * (y - i));
            }
        }
    }
    let p = tape.clamp(probs, PROB_EPS, 1.0);
    let lp = tape.log(p);
    let g = tape.gather(lp, &idx)?;
    let w = tape.constant(Tensor::from_vec(w));
    let l = tape.mul(g, w)?;
    Ok(tape.sum_all(l))
}

fn to_cxcywh(res: f64) -> Tensor {
    let h = 0.5 / res;
    let f = 1.0 / res;
    #[rustfmt::skip]
    let m = vec![
        h, 0.0, -f, 0.0,
        0.0, h, 0.0, -f,
        h, 0.0, f, 0.0,
        0.0, h, 0.0, f,
    ];
    Tensor::new(vec![4, 4], m).expect("4x4")
}

fn corners(boxes: &[BBox]) -> Vec<f64> {
    boxes.iter().flat_map(|b| [b.x, b.y, b.x1(), b.y1()]).collect()
}

/// Sum over rows of the L1 distance between normalized `(cx, cy, w, h)`.
/// `pred` is `[P, 4]` corners in pixels.
pub fn l1_box(tape: &mut Tape, pred: Var, target: &[BBox], res: f64) -> Result<Var> {
    let rows = target.len();
    let m = tape.constant(to_cxcywh(res));
    let p = tape.matmul(pred, m)?;
    let t: Vec<f64> = target
        .iter()
        .flat_map(|b| [b.cx() / res, b.cy() / res, b.w / res, b.h / res])
        .collect();
    let t = tape.constant(Tensor::new(vec![rows, 4], t)?);
    let d = tape.sub(p, t)?;
    let d = tape.abs(d);
    Ok(tape.sum_all(d))
}

fn min_v(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let r = tape.relu(d);
    Ok(tape.sub(a, r)?)
}

fn max_v(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(b, a)?;
    let r = tape.relu(d);
    Ok(tape.add(a, r)?)
}

/// Sum over rows of `1 - giou(pred, target)`; `pred` is `[P, 4]` corners.
/// Inverted predicted boxes count as zero area.
pub fn giou_loss(tape: &mut Tape, pred: Var, target: &[BBox]) -> Result<Var> {
    let rows = target.len();
    let col = |tape: &mut Tape, k: usize| -> Result<Var> { Ok(tape.slice(pred, 1, k, k + 1)?) };
    let (px0, py0, px1, py1) = (col(tape, 0)?, col(tape, 1)?, col(tape, 2)?, col(tape, 3)?);
    let t = corners(target);
    let mut tc = |k: usize| tape.constant(Tensor::from_fn(vec![rows, 1], |r| t[r * 4 + k]));
    let (tx0, ty0, tx1, ty1) = (tc(0), tc(1), tc(2), tc(3));
    let t_area = tape.constant(Tensor::from_fn(vec![rows, 1], |r| target[r].area()));

    let ix0 = max_v(tape, px0, tx0)?;
    let iy0 = max_v(tape, py0, ty0)?;
    let ix1 = min_v(tape, px1, tx1)?;
    let iy1 = min_v(tape, py1, ty1)?;
    let iw = tape.sub(ix1, ix0)?;
    let iw = tape.relu(iw);
    let ih = tape.sub(iy1, iy0)?;
    let ih = tape.relu(ih);
    let inter = tape.mul(iw, ih)?;

    let pw = tape.sub(px1, px0)?;
    let pw = tape.relu(pw);
    let ph = tape.sub(py1, py0)?;
    let ph = tape.relu(ph);
    let p_area = tape.mul(pw, ph)?;
    let union = tape.add(p_area, t_area)?;
    let union = tape.sub(union, inter)?;

    let ex0 = min_v(tape, px0, tx0)?;
    let ey0 = min_v(tape, py0, ty0)?;
    let ex1 = max_v(tape, px1, tx1)?;
    let ey1 = max_v(tape, py1, ty1)?;
    let ew = tape.sub(ex1, ex0)?;
    let eh = tape.sub(ey1, ey0)?;
    let enc = tape.mul(ew, eh)?;

    let iou = tape.div(inter, union)?;
    let gap = tape.sub(enc, union)?;
    let pen = tape.div(gap, enc)?;
    let giou = tape.sub(iou, pen)?;
    let l = tape.rsub_scalar(1.0, giou);
    Ok(tape.sum_all(l))
}

/// Weighted, normalized loss terms of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLossReport {
    pub total: f64,
    pub terms: Vec<(&'static str, f64)>,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl BatchLossReport {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| *n == name).map(|t| t.1)
    }
}

/// Accumulates per-pair sums for one named term.
struct Term {
    name: &'static str,
    weight: f64,
    positive: bool,
    parts: Vec<Var>,
}

impl Term {
    fn new(name: &'static str, weight: f64, positive: bool) -> Self {
        Self {
            name,
            weight,
            positive,
            parts: Vec::new(),
        }
    }
}

fn finish(tape: &mut Tape, terms: Vec<Term>, n_pos: usize, n_neg: usize) -> Result<(Var, BatchLossReport)> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    let mut report = Vec::new();
    for t in terms {
        let n = if t.positive { n_pos } else { n_neg };
        let value = if n == 0 || t.parts.is_empty() {
            0.0
        } else {
            let mut acc = t.parts[0];
            for &p in &t.parts[1..] {
                acc = tape.add(acc, p)?;
            }
            let scaled = tape.mul_scalar(acc, t.weight / n as f64);
            total = tape.add(total, scaled)?;
            tape.value(scaled).item()
        };
        report.push((t.name, value));
    }
    let total_value = tape.value(total).item();
    Ok((
        total,
        BatchLossReport {
            total: total_value,
            terms: report,
            n_pos,
            n_neg,
        },
    ))
}

fn rows_of(tape: &mut Tape, boxes: Var, cells: &[usize]) -> Result<Var> {
    let idx: Vec<usize> = cells.iter().flat_map(|&c| (0..4).map(move |k| c * 4 + k)).collect();
    let g = tape.gather(boxes, &idx)?;
    Ok(tape.reshape(g, &[cells.len(), 4])?)
}

/// Positive normalizer: inside points over positive pairs. Negative normalizer: negative pairs.
pub fn composite_dist(
    tape: &mut Tape,
    batch: &[(&DistOutput, &DistLabels)],
    w: &LossWeights,
    grid: &Grid,
) -> Result<(Var, BatchLossReport)> {
    if batch.is_empty() {
        return Err(Error::Loss("empty batch".into()));
    }
    let mut l1 = Term::new("l1", w.l1, true);
    let mut gi = Term::new("giou", w.giou, true);
    let mut df = Term::new("dfl", w.dfl, true);
    let mut qp = Term::new("qfl_pos", 1.0, true);
    let mut qn = Term::new("qfl_neg", w.qfl, false);
    let (mut n_pos, mut n_neg) = (0, 0);
    for (out, lab) in batch {
        match &lab.gt {
            Some(gt) => {
                n_pos += lab.inside.len();
                let pred = rows_of(tape, out.boxes, &lab.inside)?;
                let targets = vec![*gt; lab.inside.len()];
                l1.parts.push(l1_box(tape, pred, &targets, grid.res())?);
                gi.parts.push(giou_loss(tape, pred, &targets)?);
                df.parts.push(dfl(tape, out.probs, &lab.inside, &lab.ltrb)?);
                qp.parts.push(qfl(tape, out.quality, &lab.quality, w.qfl_beta)?);
            }
            None => {
                n_neg += 1;
                qn.parts.push(qfl(tape, out.quality, &lab.quality, w.qfl_beta)?);
            }
        }
    }
    finish(tape, vec![l1, gi, df, qp, qn], n_pos, n_neg)
}

/// Both normalizers count pairs.
pub fn composite_center(
    tape: &mut Tape,
    batch: &[(&CenterOutput, &CenterLabels)],
    w: &LossWeights,
    grid: &Grid,
) -> Result<(Var, BatchLossReport)> {
    if batch.is_empty() {
        return Err(Error::Loss("empty batch".into()));
    }
    let mut l1 = Term::new("l1", w.l1, true);
    let mut gi = Term::new("giou", w.giou, true);
    let mut fp = Term::new("fl_pos", w.fl, true);
    let mut fn_ = Term::new("fl_neg", w.fl, false);
    let (mut n_pos, mut n_neg) = (0, 0);
    for (out, lab) in batch {
        let fl = focal(tape, out.centerness, &lab.heatmap, w.focal_alpha, w.focal_gamma)?;
        match (&lab.gt, lab.center_cell) {
            (Some(gt), Some(cell)) => {
                n_pos += 1;
                let pred = out.box_at(tape, grid, cell)?;
                l1.parts.push(l1_box(tape, pred, &[*gt], grid.res())?);
                gi.parts.push(giou_loss(tape, pred, &[*gt])?);
                fp.parts.push(fl);
            }
            _ => {
                n_neg += 1;
                fn_.parts.push(fl);
            }
        }
    }
    finish(tape, vec![l1, gi, fp, fn_], n_pos, n_neg)
}

/// Both normalizers count pairs; negatives use mean BCE over both corner maps.
pub fn composite_corner(
    tape: &mut Tape,
    batch: &[(&CornerOutput, &CornerLabels)],
    w: &LossWeights,
    grid: &Grid,
) -> Result<(Var, BatchLossReport)> {
    if batch.is_empty() {
        return Err(Error::Loss("empty batch".into()));
    }
    let mut l1 = Term::new("l1", w.l1, true);
    let mut gi = Term::new("giou", w.giou, true);
    let mut ce = Term::new("ce_neg", w.ce, false);
    let (mut n_pos, mut n_neg) = (0, 0);
    for (out, lab) in batch {
        match &lab.gt {
            Some(gt) => {
                n_pos += 1;
                l1.parts.push(l1_box(tape, out.boxes, &[*gt], grid.res())?);
                gi.parts.push(giou_loss(tape, out.boxes, &[*gt])?);
            }
            None => {
                n_neg += 1;
                ce.parts.push(bce_zero_mean(tape, out.logits)?);
            }
        }
    }
    finish(tape, vec![l1, gi, ce], n_pos, n_neg)
}

/// Dispatches on the head design of the outputs.
pub fn composite(
    tape: &mut Tape,
    outputs: &[HeadOutput],
    labels: &[Labels],
    w: &LossWeights,
    grid: &Grid,
) -> Result<(Var, BatchLossReport)> {
    if outputs.len() != labels.len() {
        return Err(Error::Loss(format!("{} outputs for {} labels", outputs.len(), labels.len())));
    }
    match outputs.first() {
        None => Err(Error::Loss("empty batch".into())),
        Some(HeadOutput::Dist(_)) => {
            let b = pairs(outputs, labels, |o, l| match (o, l) {
                (HeadOutput::Dist(o), Labels::Dist(l)) => Some((o, l)),
                _ => None,
            })?;
            composite_dist(tape, &b, w, grid)
        }
        Some(HeadOutput::Center(_)) => {
            let b = pairs(outputs, labels, |o, l| match (o, l) {
                (HeadOutput::Center(o), Labels::Center(l)) => Some((o, l)),
                _ => None,
            })?;
            composite_center(tape, &b, w, grid)
        }
        Some(HeadOutput::Corner(_)) => {
            let b = pairs(outputs, labels, |o, l| match (o, l) {
                (HeadOutput::Corner(o), Labels::Corner(l)) => Some((o, l)),
                _ => None,
            })?;
            composite_corner(tape, &b, w, grid)
        }
    }
}

fn pairs<'a, O, L>(
    outputs: &'a [HeadOutput],
    labels: &'a [Labels],
    f: impl Fn(&'a HeadOutput, &'a Labels) -> Option<(&'a O, &'a L)>,
) -> Result<Vec<(&'a O, &'a L)>> {
    outputs
        .iter()
        .zip(labels)
        .map(|(o, l)| f(o, l).ok_or_else(|| Error::Loss("mixed head designs in one batch".into())))
        .collect()
}

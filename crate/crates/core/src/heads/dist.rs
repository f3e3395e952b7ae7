use jn_autodiff::{ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_visible, Grid, HeadMaps};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::nn::{Activation, Mlp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistHeadConfig {
    /// Largest distance bin; bins are `y_i = i` for `i in 0..=n`, in stride units.
    pub n: usize,
    pub topk: usize,
    pub aware_hidden: usize,
}

impl Default for DistHeadConfig {
    fn default() -> Self {
        Self {
            n: 16,
            topk: 4,
            aware_hidden: 32,
        }
    }
}

impl DistHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.topk == 0 || self.topk > self.n + 1 || self.aware_hidden == 0 {
            return Err(Error::Config(format!(
                "distribution head needs n >= 2, 1 <= topk <= n + 1 and aware_hidden > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn feature_len(&self) -> usize {
        4 * (self.topk + 1)
    }
}

/// Expected distance `Σ P(y_i) y_i` with `y_i = i`.
pub fn decode_distance(probs: &[f64]) -> f64 {
    probs.iter().enumerate().map(|(i, p)| p * i as f64).sum()
}

/// Top-k probabilities (descending) of each direction followed by their mean, directions l, t, r, b.
pub fn topkm(probs: &[f64], k: usize) -> Vec<f64> {
    let m = probs.len() / 4;
    let mut out = Vec::with_capacity(4 * (k + 1));
    for d in 0..4 {
        let idx = top_indices(&probs[d * m..(d + 1) * m], k);
        let vals: Vec<f64> = idx.iter().map(|&i| probs[d * m + i]).collect();
        let mean = vals.iter().sum::<f64>() / k as f64;
        out.extend(vals);
        out.push(mean);
    }
    out
}

fn top_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub(super) fn ltrb_to_box(grid: &Grid, cell: usize, ltrb: [f64; 4]) -> BBox {
    let (cx, cy) = grid.center(cell);
    let s = grid.stride;
    BBox::from_corners(cx - ltrb[0] * s, cy - ltrb[1] * s, cx + ltrb[2] * s, cy + ltrb[3] * s)
}

#[derive(Clone, Debug)]
pub struct DistHead {
    pub cfg: DistHeadConfig,
    cls: Mlp,
    reg: Mlp,
    aware: Mlp,
}

pub struct DistOutput {
    /// Classification score `C` after the sigmoid, `[cells]`.
    pub cls: Var,
    /// `[cells, 4, n + 1]`.
    pub probs: Var,
    /// Statistical feature `F`, `[cells, 4 (k + 1)]`.
    pub feature: Var,
    /// Aware-path multiplier `sigmoid(M(F))`, `[cells]`.
    pub aware: Var,
    /// `σ = C · aware`, `[cells]`.
    pub quality: Var,
    /// Expected boxes as corners `x0, y0, x1, y1` in search pixels, `[cells, 4]`.
    pub boxes: Var,
    pub n: usize,
}

impl DistHead {
    pub fn new(store: &mut ParamStore, cfg: DistHeadConfig, d: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let cls = Mlp::new(store, "head.cls", (d, 2 * d, 1), Activation::Gelu, rng)?;
        let reg = Mlp::new(store, "head.reg", (d, 2 * d, 4 * (cfg.n + 1)), Activation::Gelu, rng)?;
        let aware = Mlp::new(store, "head.aware", (cfg.feature_len(), cfg.aware_hidden, 1), Activation::Relu, rng)?;
        Ok(Self { cfg, cls, reg, aware })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var, grid: &Grid) -> Result<DistOutput> {
        let cells = grid.cells();
        let (m, k) = (self.cfg.n + 1, self.cfg.topk);

        let logit = self.cls.forward(tape, store, features)?;
        let logit = tape.reshape(logit, &[cells])?;
        let cls = tape.sigmoid(logit);

        let reg = self.reg.forward(tape, store, features)?;
        let reg = tape.reshape(reg, &[cells, 4, m])?;
        let probs = tape.softmax(reg, 2)?;

        let mut idx = Vec::with_capacity(cells * 4 * k);
        for (r, row) in tape.data(probs).chunks(m).enumerate() {
            idx.extend(top_indices(row, k).into_iter().map(|i| r * m + i));
        }
        let top = tape.gather(probs, &idx)?;
        let top = tape.reshape(top, &[cells, 4, k])?;
        let mean = tape.mean(top, 2)?;
        let mean = tape.reshape(mean, &[cells, 4, 1])?;
        let feature = tape.concat(&[top, mean], 2)?;
        let feature = tape.reshape(feature, &[cells, 4 * (k + 1)])?;

        let a = self.aware.forward(tape, store, feature)?;
        let a = tape.reshape(a, &[cells])?;
        let aware = tape.sigmoid(a);
        let quality = tape.mul(cls, aware)?;

        let flat = tape.reshape(probs, &[cells * 4, m])?;
        let bins = tape.constant(Tensor::from_fn(vec![m, 1], |i| i as f64));
        let e = tape.matmul(flat, bins)?;
        let e = tape.reshape(e, &[cells, 4])?;
        let s = grid.stride;
        let signs = tape.constant(Tensor::from_fn(vec![cells, 4], |i| if i % 4 < 2 { -s } else { s }));
        let offsets = tape.mul(e, signs)?;
        let centers = tape.constant(Tensor::from_fn(vec![cells, 4], |i| {
            let (cx, cy) = grid.center(i / 4);
            if i % 2 == 0 {
                cx
            } else {
                cy
            }
        }));
        let boxes = tape.add(centers, offsets)?;

        Ok(DistOutput {
            cls,
            probs,
            feature,
            aware,
            quality,
            boxes,
            n: self.cfg.n,
        })
    }
}

impl DistOutput {
    pub fn maps(&self, tape: &Tape) -> HeadMaps {
        HeadMaps::Dist {
            quality: tape.data(self.quality).to_vec(),
            probs: tape.data(self.probs).to_vec(),
            n: self.n,
        }
    }

    pub fn decoded_boxes(&self, tape: &Tape) -> Vec<BBox> {
        tape.data(self.boxes)
            .chunks(4)
            .map(|c| BBox::from_corners(c[0], c[1], c[2], c[3]))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistLabels {
    /// IoU targets at inside cells, zero elsewhere.
    pub quality: Vec<f64>,
    pub inside: Vec<usize>,
    /// Stride-unit distance targets per inside cell, clamped to `[0, n]`.
    pub ltrb: Vec<[f64; 4]>,
    pub gt: Option<BBox>,
}

/// Cells whose centre lies in `gt` (edges inclusive); if none does, the cell holding the gt centre.
pub fn inside_cells(gt: &BBox, grid: &Grid) -> Vec<usize> {
    let inside: Vec<usize> = (0..grid.cells())
        .filter(|&c| {
            let (cx, cy) = grid.center(c);
            cx >= gt.x && cx <= gt.x1() && cy >= gt.y && cy <= gt.y1()
        })
        .collect();
    if inside.is_empty() {
        vec![grid.cell_at(gt.cx(), gt.cy())]
    } else {
        inside
    }
}

pub fn assign_labels_dist(gt: Option<&BBox>, grid: &Grid, n: usize, pred_boxes: &[BBox]) -> Result<DistLabels> {
    let mut quality = vec![0.0; grid.cells()];
    let Some(gt) = gt else {
        return Ok(DistLabels {
            quality,
            inside: Vec::new(),
            ltrb: Vec::new(),
            gt: None,
        });
    };
    check_visible(gt, grid)?;
    let inside = inside_cells(gt, grid);
    let s = grid.stride;
    let clamp = |v: f64| v.clamp(0.0, n as f64);
    let ltrb = inside
        .iter()
        .map(|&c| {
            let (cx, cy) = grid.center(c);
            [
                clamp((cx - gt.x) / s),
                clamp((cy - gt.y) / s),
                clamp((gt.x1() - cx) / s),
                clamp((gt.y1() - cy) / s),
            ]
        })
        .collect();
    for &c in &inside {
        quality[c] = iou(&pred_boxes[c], gt);
    }
    Ok(DistLabels {
        quality,
        inside,
        ltrb,
        gt: Some(*gt),
    })
}

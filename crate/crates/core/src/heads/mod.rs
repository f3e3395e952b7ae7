//! Localization heads over the search feature grid.
//!
//! Every branch is a per-location two-layer MLP. Each head has a tape-level
//! output (for training), a plain-value [`HeadMaps`] snapshot (for decoding and
//! for oracle predictors), and a label assignment routine.

mod center;
mod corner;
mod dist;

use jn_autodiff::{ParamStore, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::BBox;

pub use center::{assign_labels_center, CenterHead, CenterLabels, CenterOutput};
pub use corner::{assign_labels_corner, soft_argmax, CornerHead, CornerLabels, CornerOutput};
pub use dist::{
    assign_labels_dist, decode_distance, inside_cells, topkm, DistHead, DistHeadConfig, DistLabels, DistOutput,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Dist,
    Center,
    Corner,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Dist => "dist",
            Self::Center => "center",
            Self::Corner => "corner",
        }
    }
}

/// Square feature grid laid over the search crop; cell `i * size + j` is row `i`, column `j`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub size: usize,
    /// Search-crop pixels per cell.
    pub stride: f64,
}

impl Grid {
    pub fn new(size: usize, search_res: usize) -> Self {
        Self {
            size,
            stride: search_res as f64 / size as f64,
        }
    }

    pub fn cells(&self) -> usize {
        self.size * self.size
    }

    pub fn res(&self) -> f64 {
        self.stride * self.size as f64
    }

    /// Cell centre in search-crop pixels.
    pub fn center(&self, cell: usize) -> (f64, f64) {
        let (i, j) = (cell / self.size, cell % self.size);
        ((j as f64 + 0.5) * self.stride, (i as f64 + 0.5) * self.stride)
    }

    /// Cell containing a pixel position, clamped to the grid.
    pub fn cell_at(&self, x: f64, y: f64) -> usize {
        let clamp = |v: f64| ((v / self.stride).floor().max(0.0) as usize).min(self.size - 1);
        clamp(y) * self.size + clamp(x)
    }
}

/// Plain-value head maps for one search crop.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadMaps {
    Dist {
        /// σ per cell.
        quality: Vec<f64>,
        /// `[cells, 4, n + 1]` per-direction distributions, order l, t, r, b.
        probs: Vec<f64>,
        n: usize,
    },
    Center {
        centerness: Vec<f64>,
        /// `[cells, 2]` centre offset from the cell centre, stride units.
        offset: Vec<f64>,
        /// `[cells, 2]` size as a fraction of the search resolution.
        size: Vec<f64>,
    },
    Corner {
        /// Top-left and bottom-right maps, each a softmax over all cells.
        tl: Vec<f64>,
        br: Vec<f64>,
    },
}

impl HeadMaps {
    /// Score map used for location selection.
    pub fn score_map(&self) -> Option<&[f64]> {
        match self {
            Self::Dist { quality, .. } => Some(quality),
            Self::Center { centerness, .. } => Some(centerness),
            Self::Corner { .. } => None,
        }
    }

    /// Box at a given cell in search-crop pixels (corner boxes do not depend on the cell).
    pub fn box_at(&self, grid: &Grid, cell: usize) -> BBox {
        match self {
            Self::Dist { probs, n, .. } => {
                let m = n + 1;
                let e: Vec<f64> = (0..4)
                    .map(|d| decode_distance(&probs[(cell * 4 + d) * m..(cell * 4 + d + 1) * m]))
                    .collect();
                dist::ltrb_to_box(grid, cell, [e[0], e[1], e[2], e[3]])
            }
            Self::Center { offset, size, .. } => {
                center::decode_cell(grid, cell, [offset[2 * cell], offset[2 * cell + 1]], [size[2 * cell], size[2 * cell + 1]])
            }
            Self::Corner { tl, br } => corner::decode_corners(grid, tl, br),
        }
    }

    /// Location = argmax of `score ⊙ penalty`; returns the box there and the penalized score.
    pub fn decode(&self, grid: &Grid, penalty: Option<&[f64]>) -> (BBox, f64, usize) {
        match self.score_map() {
            Some(score) => {
                let mut best = (0, f64::NEG_INFINITY);
                for (c, s) in score.iter().enumerate() {
                    let v = s * penalty.map_or(1.0, |p| p[c]);
                    if v > best.1 {
                        best = (c, v);
                    }
                }
                (self.box_at(grid, best.0), best.1, best.0)
            }
            None => {
                let Self::Corner { tl, br } = self else { unreachable!() };
                let peak = |m: &[f64]| m.iter().cloned().fold(0.0, f64::max);
                let b = self.box_at(grid, 0);
                (b, (peak(tl) * peak(br)).sqrt(), grid.cell_at(b.cx(), b.cy()))
            }
        }
    }
}

/// Tape-level head output for one pair.
pub enum HeadOutput {
    Dist(DistOutput),
    Center(CenterOutput),
    Corner(CornerOutput),
}

impl HeadOutput {
    pub fn maps(&self, tape: &Tape) -> HeadMaps {
        match self {
            Self::Dist(o) => o.maps(tape),
            Self::Center(o) => o.maps(tape),
            Self::Corner(o) => o.maps(tape),
        }
    }
}

/// Labels for one pair, per head design.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Dist(DistLabels),
    Center(CenterLabels),
    Corner(CornerLabels),
}

impl Labels {
    /// Classification targets over the grid (all cells; both maps for the corner head's negatives).
    pub fn class_targets(&self) -> &[f64] {
        match self {
            Self::Dist(l) => &l.quality,
            Self::Center(l) => &l.heatmap,
            Self::Corner(l) => &l.class_targets,
        }
    }

    /// Cells that receive box supervision.
    pub fn localization_cells(&self) -> &[usize] {
        match self {
            Self::Dist(l) => &l.inside,
            Self::Center(l) => l.center_cell.as_slice(),
            Self::Corner(l) => l.localization_cells(),
        }
    }

    pub fn box_target(&self) -> Option<&BBox> {
        match self {
            Self::Dist(l) => l.gt.as_ref(),
            Self::Center(l) => l.gt.as_ref(),
            Self::Corner(l) => l.gt.as_ref(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Dist(DistHead),
    Center(CenterHead),
    Corner(CornerHead),
}

impl Head {
    pub fn new(
        store: &mut ParamStore,
        kind: HeadKind,
        dist_cfg: DistHeadConfig,
        embed_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match kind {
            HeadKind::Dist => Self::Dist(DistHead::new(store, dist_cfg, embed_dim, rng)?),
            HeadKind::Center => Self::Center(CenterHead::new(store, embed_dim, rng)?),
            HeadKind::Corner => Self::Corner(CornerHead::new(store, embed_dim, rng)?),
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Self::Dist(_) => HeadKind::Dist,
            Self::Center(_) => HeadKind::Center,
            Self::Corner(_) => HeadKind::Corner,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var, grid: &Grid) -> Result<HeadOutput> {
        Ok(match self {
            Self::Dist(h) => HeadOutput::Dist(h.forward(tape, store, features, grid)?),
            Self::Center(h) => HeadOutput::Center(h.forward(tape, store, features)?),
            Self::Corner(h) => HeadOutput::Corner(h.forward(tape, store, features, grid)?),
        })
    }

    /// Labels for a pair; `gt` is `None` for negatives. Distribution-head quality
    /// targets depend on the current decoded boxes, read from `out`.
    pub fn assign_labels(&self, tape: &Tape, out: &HeadOutput, gt: Option<&BBox>, grid: &Grid) -> Result<Labels> {
        Ok(match (self, out) {
            (Self::Dist(h), HeadOutput::Dist(o)) => {
                let boxes = o.decoded_boxes(tape);
                Labels::Dist(assign_labels_dist(gt, grid, h.cfg.n, &boxes)?)
            }
            (Self::Center(_), HeadOutput::Center(_)) => Labels::Center(assign_labels_center(gt, grid)?),
            (Self::Corner(_), HeadOutput::Corner(_)) => Labels::Corner(assign_labels_corner(gt, grid)?),
            _ => unreachable!("head output does not match head kind"),
        })
    }
}

/// Positive ground truth must keep some area inside the crop.
pub(crate) fn check_visible(gt: &BBox, grid: &Grid) -> Result<()> {
    let res = grid.res();
    if !gt.is_valid() || gt.clipped(res, res).area() <= 0.0 {
        return Err(crate::error::Error::Labels(format!(
            "positive target {gt:?} has no area inside the {res}px search crop"
        )));
    }
    Ok(())
}

//! Histogram of stride-unit ltrb regression targets at inside points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{jittered_search_crop, CropConfig, Dataset, SamplerConfig};
use crate::error::Result;
use crate::geometry::BBox;
use crate::heads::{inside_cells, Grid};

pub const DIRECTIONS: [&str; 4] = ["left", "top", "right", "bottom"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetHistogram {
    pub bin_width: f64,
    /// `counts[direction][bin]` over `[0, bins · bin_width)`.
    pub counts: [Vec<u64>; 4],
    /// Values at or beyond the last bin edge.
    pub overflow: [u64; 4],
    pub underflow: [u64; 4],
    /// Values inside the closed support `[0, support]`.
    pub in_support: u64,
    pub support: f64,
    pub total: u64,
    pub samples: u64,
}

impl TargetHistogram {
    pub fn new(bins: usize, bin_width: f64, support: f64) -> Self {
        Self {
            bin_width,
            counts: std::array::from_fn(|_| vec![0; bins]),
            overflow: [0; 4],
            underflow: [0; 4],
            in_support: 0,
            support,
            total: 0,
            samples: 0,
        }
    }

    pub fn add(&mut self, dir: usize, v: f64) {
        self.total += 1;
        if (0.0..=self.support).contains(&v) {
            self.in_support += 1;
        }
        if v < 0.0 {
            self.underflow[dir] += 1;
            return;
        }
        let b = (v / self.bin_width).floor() as usize;
        match self.counts[dir].get_mut(b) {
            Some(c) => *c += 1,
            None => self.overflow[dir] += 1,
        }
    }

    /// Adds the four unclamped targets of every inside cell of `gt`.
    pub fn add_box(&mut self, gt: &BBox, grid: &Grid) {
        self.samples += 1;
        for c in inside_cells(gt, grid) {
            for (k, v) in ltrb_targets(gt, grid, c).into_iter().enumerate() {
                self.add(k, v);
            }
        }
    }

    pub fn fraction_in_support(&self) -> f64 {
        if self.total == 0 {
            return 1.0;
        }
        self.in_support as f64 / self.total as f64
    }
}

/// Unclamped stride-unit distances from a cell centre to the four box edges.
pub fn ltrb_targets(gt: &BBox, grid: &Grid, cell: usize) -> [f64; 4] {
    let (cx, cy) = grid.center(cell);
    let s = grid.stride;
    [(cx - gt.x) / s, (cy - gt.y) / s, (gt.x1() - cx) / s, (gt.y1() - cy) / s]
}

/// One jittered positive search crop per visible frame, as the sampler would produce it.
pub fn regression_target_histogram(
    data: &Dataset,
    sampler: &SamplerConfig,
    crop: &CropConfig,
    grid: &Grid,
    bins: usize,
    support: f64,
) -> Result<TargetHistogram> {
    let mut h = TargetHistogram::new(bins, support / bins as f64 * 1.5, support);
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    for s in &data.sequences {
        for f in s.visible_frames() {
            let gt = s.boxes[f];
            let t = jittered_search_crop(&gt, sampler, crop, &mut rng)?;
            h.add_box(&t.apply(&gt), grid);
        }
    }
    Ok(h)
}

use jn_autodiff::{ParamStore, Tape, Tensor, Var};
use rand::Rng;

use super::{check_visible, Grid, HeadMaps};
use crate::error::Result;
use crate::geometry::BBox;
use crate::nn::{Activation, Mlp};

#[derive(Clone, Debug)]
pub struct CornerHead {
    mlp: Mlp,
}

pub struct CornerOutput {
    /// Raw logits `[cells, 2]`; column 0 top-left, column 1 bottom-right.
    pub logits: Var,
    /// Softmax over all cells, `[cells]` each.
    pub tl: Var,
    pub br: Var,
    /// Soft-argmax box `[1, 4]` as corners in search pixels.
    pub boxes: Var,
}

impl CornerHead {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, "head.corner", (d, 2 * d, 2), Activation::Gelu, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var, grid: &Grid) -> Result<CornerOutput> {
        let cells = grid.cells();
        let logits = self.mlp.forward(tape, store, features)?;
        let maps = tape.softmax(logits, 0)?;
        let t = tape.transpose(maps)?;
        // (j, i) cell coordinates, so maps · coords gives the expected column and row
        let coords = tape.constant(Tensor::from_fn(vec![cells, 2], |k| {
            let c = k / 2;
            if k % 2 == 0 {
                (c % grid.size) as f64
            } else {
                (c / grid.size) as f64
            }
        }));
        let e = tape.matmul(t, coords)?;
        let e = tape.reshape(e, &[1, 4])?;
        let e = tape.add_scalar(e, 0.5);
        let boxes = tape.mul_scalar(e, grid.stride);
        let tl = tape.slice(t, 0, 0, 1)?;
        let tl = tape.reshape(tl, &[cells])?;
        let br = tape.slice(t, 0, 1, 2)?;
        let br = tape.reshape(br, &[cells])?;
        Ok(CornerOutput { logits, tl, br, boxes })
    }
}

impl CornerOutput {
    pub fn maps(&self, tape: &Tape) -> HeadMaps {
        HeadMaps::Corner {
            tl: tape.data(self.tl).to_vec(),
            br: tape.data(self.br).to_vec(),
        }
    }
}

/// Expected `(column, row)` of a map in cell-index units.
pub fn soft_argmax(map: &[f64], size: usize) -> (f64, f64) {
    map.iter().enumerate().fold((0.0, 0.0), |(x, y), (c, p)| {
        (x + p * (c % size) as f64, y + p * (c / size) as f64)
    })
}

pub(super) fn decode_corners(grid: &Grid, tl: &[f64], br: &[f64]) -> BBox {
    let (x0, y0) = soft_argmax(tl, grid.size);
    let (x1, y1) = soft_argmax(br, grid.size);
    let px = |v: f64| (v + 0.5) * grid.stride;
    BBox::from_corners(px(x0), px(y0), px(x1), px(y1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CornerLabels {
    /// All-zero targets over both sigmoid maps (`2 * cells`) for negatives, empty for positives.
    pub class_targets: Vec<f64>,
    pub gt: Option<BBox>,
}

impl CornerLabels {
    pub(super) fn localization_cells(&self) -> &[usize] {
        &[]
    }
}

pub fn assign_labels_corner(gt: Option<&BBox>, grid: &Grid) -> Result<CornerLabels> {
    match gt {
        None => Ok(CornerLabels {
            class_targets: vec![0.0; 2 * grid.cells()],
            gt: None,
        }),
        Some(gt) => {
            check_visible(gt, grid)?;
            Ok(CornerLabels {
                class_targets: Vec::new(),
                gt: Some(*gt),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_map_gives_centroid() {
        let (x, y) = soft_argmax(&[1.0 / 64.0; 64], 8);
        assert!((x - 3.5).abs() < 1e-12 && (y - 3.5).abs() < 1e-12);
    }

    #[test]
    fn one_hot_maps_decode_exactly() {
        let mut tl = vec![0.0; 64];
        let mut br = vec![0.0; 64];
        tl[8 + 1] = 1.0;
        br[6 * 8 + 6] = 1.0;
        assert_eq!(soft_argmax(&tl, 8), (1.0, 1.0));
        assert_eq!(soft_argmax(&br, 8), (6.0, 6.0));
        let b = decode_corners(&Grid::new(8, 64), &tl, &br);
        assert_eq!(b, BBox::from_corners(12.0, 12.0, 52.0, 52.0));
    }

    #[test]
    fn soft_argmax_stays_in_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let mut m: Vec<f64> = (0..64).map(|_| rng.random::<f64>().powi(4)).collect();
            let z: f64 = m.iter().sum();
            m.iter_mut().for_each(|v| *v /= z);
            let (x, y) = soft_argmax(&m, 8);
            assert!((0.0..=7.0).contains(&x) && (0.0..=7.0).contains(&y));
        }
    }

    #[test]
    fn tape_box_matches_value_decode() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let head = CornerHead::new(&mut store, 8, &mut rng).unwrap();
        let grid = Grid::new(4, 32);
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::from_fn(vec![16, 8], |i| (i as f64 * 1.3).cos() * 20.0));
        let out = head.forward(&mut tape, &store, f, &grid).unwrap();
        let want = out.maps(&tape).box_at(&grid, 0);
        let got = tape.data(out.boxes);
        for (g, w) in got.iter().zip([want.x, want.y, want.x1(), want.y1()]) {
            assert!((g - w).abs() < 1e-12);
        }
        assert!((tape.data(out.tl).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn negative_labels() {
        let l = assign_labels_corner(None, &Grid::new(8, 64)).unwrap();
        assert_eq!(l.class_targets.len(), 128);
        assert!(l.class_targets.iter().all(|&v| v == 0.0));
        assert!(l.localization_cells().is_empty() && l.gt.is_none());
    }
}

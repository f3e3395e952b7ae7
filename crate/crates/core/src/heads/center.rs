use jn_autodiff::{ParamStore, Tape, Tensor, Var};
use rand::Rng;

use super::{check_visible, Grid, HeadMaps};
use crate::error::Result;
use crate::geometry::BBox;
use crate::nn::{Activation, Mlp};

#[derive(Clone, Debug)]
pub struct CenterHead {
    ctr: Mlp,
    offset: Mlp,
    size: Mlp,
}

pub struct CenterOutput {
    /// `[cells]` after the sigmoid.
    pub centerness: Var,
    /// `[cells, 2]` offsets from the cell centre in stride units.
    pub offset: Var,
    /// `[cells, 2]` width and height as fractions of the search resolution.
    pub size: Var,
}

impl CenterHead {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            ctr: Mlp::new(store, "head.ctr", (d, 2 * d, 1), Activation::Gelu, rng)?,
            offset: Mlp::new(store, "head.offset", (d, 2 * d, 2), Activation::Gelu, rng)?,
            size: Mlp::new(store, "head.size", (d, 2 * d, 2), Activation::Gelu, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<CenterOutput> {
        let cells = tape.shape(features)[0];
        let c = self.ctr.forward(tape, store, features)?;
        let c = tape.reshape(c, &[cells])?;
        let centerness = tape.sigmoid(c);
        let offset = self.offset.forward(tape, store, features)?;
        let s = self.size.forward(tape, store, features)?;
        let size = tape.sigmoid(s);
        Ok(CenterOutput {
            centerness,
            offset,
            size,
        })
    }
}

impl CenterOutput {
    pub fn maps(&self, tape: &Tape) -> HeadMaps {
        HeadMaps::Center {
            centerness: tape.data(self.centerness).to_vec(),
            offset: tape.data(self.offset).to_vec(),
            size: tape.data(self.size).to_vec(),
        }
    }

    /// Box `[1, 4]` (corners, search pixels) read at `cell`, differentiable in offset and size.
    pub fn box_at(&self, tape: &mut Tape, grid: &Grid, cell: usize) -> Result<Var> {
        let o = tape.gather(self.offset, &[2 * cell, 2 * cell + 1])?;
        let s = tape.gather(self.size, &[2 * cell, 2 * cell + 1])?;
        let u = tape.concat(&[o, s], 0)?;
        let u = tape.reshape(u, &[1, 4])?;
        // x0 = cx + ox·stride - sw·res/2, and likewise for the other corners
        let (st, half) = (grid.stride, grid.res() / 2.0);
        #[rustfmt::skip]
        let a = Tensor::new(vec![4, 4], vec![
            st, 0.0, st, 0.0,
            0.0, st, 0.0, st,
            -half, 0.0, half, 0.0,
            0.0, -half, 0.0, half,
        ])?;
        let a = tape.constant(a);
        let lin = tape.matmul(u, a)?;
        let (cx, cy) = grid.center(cell);
        let base = tape.constant(Tensor::new(vec![1, 4], vec![cx, cy, cx, cy])?);
        Ok(tape.add(lin, base)?)
    }
}

pub(super) fn decode_cell(grid: &Grid, cell: usize, offset: [f64; 2], size: [f64; 2]) -> BBox {
    let (cx, cy) = grid.center(cell);
    let res = grid.res();
    BBox::from_center(
        cx + offset[0] * grid.stride,
        cy + offset[1] * grid.stride,
        size[0] * res,
        size[1] * res,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct CenterLabels {
    /// Gaussian bump on the gt centre, 1 at the centre cell.
    pub heatmap: Vec<f64>,
    pub center_cell: Option<usize>,
    pub offset: [f64; 2],
    pub size: [f64; 2],
    pub gt: Option<BBox>,
}

pub fn assign_labels_center(gt: Option<&BBox>, grid: &Grid) -> Result<CenterLabels> {
    let mut heatmap = vec![0.0; grid.cells()];
    let Some(gt) = gt else {
        return Ok(CenterLabels {
            heatmap,
            center_cell: None,
            offset: [0.0; 2],
            size: [0.0; 2],
            gt: None,
        });
    };
    check_visible(gt, grid)?;
    let s = grid.stride;
    let (gx, gy) = (gt.cx() / s, gt.cy() / s);
    let sigma = (gt.w.hypot(gt.h) / s) / 6.0;
    for (c, h) in heatmap.iter_mut().enumerate() {
        let (cx, cy) = grid.center(c);
        let d2 = (cx / s - gx).powi(2) + (cy / s - gy).powi(2);
        *h = (-d2 / (2.0 * sigma * sigma)).exp();
    }
    let cell = grid.cell_at(gt.cx(), gt.cy());
    heatmap[cell] = 1.0;
    let (cx, cy) = grid.center(cell);
    Ok(CenterLabels {
        heatmap,
        center_cell: Some(cell),
        offset: [(gt.cx() - cx) / s, (gt.cy() - cy) / s],
        size: [gt.w / grid.res(), gt.h / grid.res()],
        gt: Some(*gt),
    })
}

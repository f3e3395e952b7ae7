//! Loss primitives against finite differences, and composite losses against scalar recomputation.

use jn_autodiff::{Tape, Tensor, Var};
use jn_track::geometry::{giou, BBox};
use jn_track::heads::{
    assign_labels_center, assign_labels_corner, assign_labels_dist, CenterOutput, CornerOutput, DistLabels, DistOutput,
    Grid,
};
use jn_track::losses::{
    composite_center, composite_corner, composite_dist, dfl, focal, giou_loss, l1_box, qfl, LossWeights,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn value(x: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v);
    tape.value(out).item()
}

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
fn fd_error(x: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Var) -> f64 {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v);
    tape.backward(out).unwrap();
    let g = tape.grad(v).unwrap();
    let mut worst = 0.0f64;
    for j in 0..x.numel() {
        let mut p = x.clone();
        p.data_mut()[j] += H;
        let mut m = x.clone();
        m.data_mut()[j] -= H;
        let numeric = (value(&p, f) - value(&m, f)) / (2.0 * H);
        worst = worst.max((g.data()[j] - numeric).abs() / g.data()[j].abs().max(1.0));
    }
    worst
}

fn random_box(rng: &mut ChaCha8Rng, res: f64) -> BBox {
    let w = rng.random_range(0.1 * res..0.6 * res);
    let h = rng.random_range(0.1 * res..0.6 * res);
    BBox::new(rng.random_range(0.0..res - w), rng.random_range(0.0..res - h), w, h)
}

#[test]
fn qfl_and_focal_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let n = rng.random_range(1..12);
        let x = Tensor::from_fn(vec![n], |_| rng.random_range(0.05..0.95));
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let yb: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect();
        let beta = rng.random_range(1.5..3.0);
        assert!(fd_error(&x, &|t, v| qfl(t, v, &y, beta).unwrap()) < TOL);
        assert!(fd_error(&x, &|t, v| focal(t, v, &yb, 0.75, 2.0).unwrap()) < TOL);
        assert!(fd_error(&x, &|t, v| focal(t, v, &y, 0.25, 1.0).unwrap()) < TOL);
    }
}

#[test]
fn dfl_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 16;
    for _ in 0..30 {
        let cells = rng.random_range(1..4);
        let x = Tensor::from_fn(vec![cells, 4, n + 1], |_| rng.random_range(0.02..1.0));
        let idx: Vec<usize> = (0..cells).collect();
        let ltrb: Vec<[f64; 4]> = (0..cells)
            .map(|_| std::array::from_fn(|_| rng.random_range(0.0..n as f64)))
            .collect();
        assert!(fd_error(&x, &|t, v| dfl(t, v, &idx, &ltrb).unwrap()) < TOL);
    }
}

#[test]
fn box_losses_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let res = 64.0;
    for _ in 0..50 {
        let rows = rng.random_range(1..4);
        let targets: Vec<BBox> = (0..rows).map(|_| random_box(&mut rng, res)).collect();
        let preds: Vec<f64> = (0..rows)
            .flat_map(|_| {
                let b = random_box(&mut rng, res);
                [b.x, b.y, b.x1(), b.y1()]
            })
            .collect();
        let x = Tensor::new(vec![rows, 4], preds).unwrap();
        assert!(fd_error(&x, &|t, v| l1_box(t, v, &targets, res).unwrap()) < TOL);
        assert!(fd_error(&x, &|t, v| giou_loss(t, v, &targets).unwrap()) < TOL);
    }
}

fn ln(v: f64) -> f64 {
    v.max(1e-12).ln()
}

fn qfl_scalar(s: f64, y: f64, beta: f64) -> f64 {
    let s = s.clamp(1e-12, 1.0 - 1e-12);
    -(y - s).abs().powf(beta) * ((1.0 - y) * (1.0 - s).ln() + y * s.ln())
}

fn l1_scalar(p: &BBox, t: &BBox, res: f64) -> f64 {
    (p.cx() - t.cx()).abs() / res + (p.cy() - t.cy()).abs() / res + (p.w - t.w).abs() / res + (p.h - t.h).abs() / res
}

fn dfl_scalar(probs: &[f64], y: f64) -> f64 {
    let i = y.floor() as usize;
    let lo = (i as f64 + 1.0 - y) * ln(probs[i]);
    let hi = if i + 1 < probs.len() { (y - i as f64) * ln(probs[i + 1]) } else { 0.0 };
    -(lo + hi)
}

struct DistCase {
    grid: Grid,
    n: usize,
    quality: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
    gts: Vec<Option<BBox>>,
}

impl DistCase {
    fn random(rng: &mut ChaCha8Rng, gts: Vec<Option<BBox>>) -> Self {
        let (grid, n) = (Grid::new(8, 64), 16);
        let m = n + 1;
        let quality = gts.iter().map(|_| (0..64).map(|_| rng.random_range(0.01..0.99)).collect()).collect();
        let probs = gts
            .iter()
            .map(|_| {
                let raw: Vec<f64> = (0..64 * 4 * m).map(|_| rng.random_range(0.05..1.0)).collect();
                raw.chunks(m).flat_map(|c| {
                    let s: f64 = c.iter().sum();
                    c.iter().map(move |v| v / s)
                }).collect()
            })
            .collect();
        Self { grid, n, quality, probs, gts }
    }

    fn boxes(&self, k: usize) -> Vec<BBox> {
        let m = self.n + 1;
        (0..64)
            .map(|c| {
                let e: Vec<f64> = (0..4)
                    .map(|d| {
                        let p = &self.probs[k][(c * 4 + d) * m..(c * 4 + d + 1) * m];
                        p.iter().enumerate().map(|(i, v)| i as f64 * v).sum()
                    })
                    .collect();
                let (cx, cy) = self.grid.center(c);
                let s = self.grid.stride;
                BBox::from_corners(cx - e[0] * s, cy - e[1] * s, cx + e[2] * s, cy + e[3] * s)
            })
            .collect()
    }

    fn run(&self, w: &LossWeights) -> (f64, Vec<(&'static str, f64)>, Vec<DistLabels>) {
        let mut tape = Tape::new();
        let m = self.n + 1;
        let mut outs = Vec::new();
        let mut labels = Vec::new();
        for k in 0..self.gts.len() {
            let boxes = self.boxes(k);
            let flat: Vec<f64> = boxes.iter().flat_map(|b| [b.x, b.y, b.x1(), b.y1()]).collect();
            let constant = |tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>| tape.constant(Tensor::new(shape, data).unwrap());
            let quality = constant(&mut tape, vec![64], self.quality[k].clone());
            outs.push(DistOutput {
                cls: quality,
                probs: constant(&mut tape, vec![64, 4, m], self.probs[k].clone()),
                feature: quality,
                aware: quality,
                quality,
                boxes: constant(&mut tape, vec![64, 4], flat),
                n: self.n,
            });
            labels.push(assign_labels_dist(self.gts[k].as_ref(), &self.grid, self.n, &boxes).unwrap());
        }
        let batch: Vec<_> = outs.iter().zip(&labels).collect();
        let (total, report) = composite_dist(&mut tape, &batch, w, &self.grid).unwrap();
        assert!((tape.value(total).item() - report.total).abs() < 1e-12);
        (report.total, report.terms, labels)
    }

    /// Independent recomputation of the weighted, normalized terms.
    fn oracle(&self, w: &LossWeights, labels: &[DistLabels]) -> Vec<(&'static str, f64)> {
        let m = self.n + 1;
        let (mut l1, mut gi, mut df, mut qp, mut qn) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let (mut n_pos, mut n_neg) = (0usize, 0usize);
        for (k, lab) in labels.iter().enumerate() {
            let boxes = self.boxes(k);
            let q: f64 = (0..64).map(|c| qfl_scalar(self.quality[k][c], lab.quality[c], w.qfl_beta)).sum();
            match self.gts[k] {
                Some(gt) => {
                    for (j, &c) in lab.inside.iter().enumerate() {
                        n_pos += 1;
                        l1 += l1_scalar(&boxes[c], &gt, 64.0);
                        gi += 1.0 - giou(&boxes[c], &gt);
                        df += (0..4)
                            .map(|d| dfl_scalar(&self.probs[k][(c * 4 + d) * m..(c * 4 + d + 1) * m], lab.ltrb[j][d]))
                            .sum::<f64>()
                            / 4.0;
                    }
                    qp += q;
                }
                None => {
                    n_neg += 1;
                    qn += q;
                }
            }
        }
        let p = |v: f64, wt: f64| if n_pos == 0 { 0.0 } else { wt * v / n_pos as f64 };
        let n = |v: f64, wt: f64| if n_neg == 0 { 0.0 } else { wt * v / n_neg as f64 };
        vec![
            ("l1", p(l1, w.l1)),
            ("giou", p(gi, w.giou)),
            ("dfl", p(df, w.dfl)),
            ("qfl_pos", p(qp, 1.0)),
            ("qfl_neg", n(qn, w.qfl)),
        ]
    }
}

#[test]
fn dist_composite_matches_scalar_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = LossWeights::default();
    for _ in 0..10 {
        let gt = random_box(&mut rng, 64.0);
        let case = DistCase::random(&mut rng, vec![Some(gt), None]);
        let (total, terms, labels) = case.run(&w);
        let expected = case.oracle(&w, &labels);
        assert_eq!(terms.len(), expected.len());
        for ((name, got), (ename, want)) in terms.iter().zip(&expected) {
            assert_eq!(name, ename);
            assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "{name}: {got} vs {want}");
        }
        let sum: f64 = expected.iter().map(|t| t.1).sum();
        assert!((total - sum).abs() < 1e-9 * sum.max(1.0));
    }
}

#[test]
fn dist_composite_is_zero_on_a_perfect_prediction() {
    let (grid, n) = (Grid::new(8, 64), 16);
    let m = n + 1;
    // corners on cell centres so every inside-cell distance is an integer bin
    let gt = BBox::from_corners(4.0, 12.0, 28.0, 44.0);
    let probs: Vec<f64> = (0..64)
        .flat_map(|c| {
            let (cx, cy) = grid.center(c);
            let d = [(cx - gt.x) / 8.0, (cy - gt.y) / 8.0, (gt.x1() - cx) / 8.0, (gt.y1() - cy) / 8.0];
            (0..4).flat_map(move |k| {
                let j = d[k].clamp(0.0, n as f64) as usize;
                (0..m).map(move |i| if i == j { 1.0 } else { 0.0 })
            })
        })
        .collect();
    let mut case = DistCase {
        grid,
        n,
        quality: vec![vec![0.0; 64]],
        probs: vec![probs],
        gts: vec![Some(gt)],
    };
    let boxes = case.boxes(0);
    let labels = assign_labels_dist(Some(&gt), &grid, n, &boxes).unwrap();
    assert_eq!(labels.inside.len(), 4 * 5);
    case.quality[0] = labels.quality.clone();
    let (total, terms, _) = case.run(&LossWeights::default());
    assert!(total <= 1e-9, "{terms:?}");
}

#[test]
fn composite_terms_are_linear_in_their_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gt = random_box(&mut rng, 64.0);
    let case = DistCase::random(&mut rng, vec![Some(gt), None]);
    let base = LossWeights::default();
    let (t0, r0, _) = case.run(&base);
    for (name, set) in [
        ("l1", (|w: &mut LossWeights| w.l1 *= 2.0) as fn(&mut LossWeights)),
        ("giou", |w| w.giou *= 2.0),
        ("dfl", |w| w.dfl *= 2.0),
        ("qfl_neg", |w| w.qfl *= 2.0),
    ] {
        let mut w = base.clone();
        set(&mut w);
        let (t1, r1, _) = case.run(&w);
        let before = r0.iter().find(|t| t.0 == name).unwrap().1;
        let after = r1.iter().find(|t| t.0 == name).unwrap().1;
        assert!((after - 2.0 * before).abs() < 1e-12 * before.max(1.0), "{name}");
        assert!((t1 - t0 - before).abs() < 1e-9 * t0.max(1.0), "{name}");
        for ((n0, v0), (_, v1)) in r0.iter().zip(&r1) {
            if *n0 != name {
                assert_eq!(v0, v1);
            }
        }
    }
}

#[test]
fn single_polarity_batches_zero_the_other_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = LossWeights::default();
    let gts = vec![Some(random_box(&mut rng, 64.0)), Some(random_box(&mut rng, 64.0))];
    let (_, terms, _) = DistCase::random(&mut rng, gts).run(&w);
    assert_eq!(terms.iter().find(|t| t.0 == "qfl_neg").unwrap().1, 0.0);
    let (total, terms, _) = DistCase::random(&mut rng, vec![None, None]).run(&w);
    for (name, v) in &terms {
        if *name != "qfl_neg" {
            assert_eq!(*v, 0.0, "{name}");
        }
    }
    assert!(total.is_finite() && total > 0.0);

    let grid = Grid::new(8, 64);
    let mut tape = Tape::new();
    assert!(composite_dist(&mut tape, &[], &w, &grid).is_err());
}

#[test]
fn center_and_corner_composites_match_scalar_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = LossWeights::default();
    let grid = Grid::new(8, 64);
    let gt = random_box(&mut rng, 64.0);

    let mut tape = Tape::new();
    let ctr: Vec<Vec<f64>> = (0..2).map(|_| (0..64).map(|_| rng.random_range(0.02..0.98)).collect()).collect();
    let off: Vec<f64> = (0..128).map(|_| rng.random_range(-0.5..0.5)).collect();
    let size: Vec<f64> = (0..128).map(|_| rng.random_range(0.1..0.6)).collect();
    let outs: Vec<CenterOutput> = ctr
        .iter()
        .map(|c| CenterOutput {
            centerness: tape.constant(Tensor::from_vec(c.clone())),
            offset: tape.constant(Tensor::new(vec![64, 2], off.clone()).unwrap()),
            size: tape.constant(Tensor::new(vec![64, 2], size.clone()).unwrap()),
        })
        .collect();
    let labels = [assign_labels_center(Some(&gt), &grid).unwrap(), assign_labels_center(None, &grid).unwrap()];
    let batch: Vec<_> = outs.iter().zip(&labels).collect();
    let (_, r) = composite_center(&mut tape, &batch, &w, &grid).unwrap();
    let focal_scalar = |p: &[f64], y: &[f64]| -> f64 {
        p.iter()
            .zip(y)
            .map(|(&p, &y)| {
                -w.focal_alpha * y * (1.0 - p).powf(w.focal_gamma) * p.ln()
                    - (1.0 - w.focal_alpha) * (1.0 - y) * p.powf(w.focal_gamma) * (1.0 - p).ln()
            })
            .sum()
    };
    let cell = labels[0].center_cell.unwrap();
    let (cx, cy) = grid.center(cell);
    let pred = BBox::from_center(cx + off[2 * cell] * 8.0, cy + off[2 * cell + 1] * 8.0, size[2 * cell] * 64.0, size[2 * cell + 1] * 64.0);
    let want = [
        ("l1", w.l1 * l1_scalar(&pred, &gt, 64.0)),
        ("giou", w.giou * (1.0 - giou(&pred, &gt))),
        ("fl_pos", w.fl * focal_scalar(&ctr[0], &labels[0].heatmap)),
        ("fl_neg", w.fl * focal_scalar(&ctr[1], &labels[1].heatmap)),
    ];
    for (name, v) in want {
        let got = r.term(name).unwrap();
        assert!((got - v).abs() < 1e-9 * v.abs().max(1.0), "{name}: {got} vs {v}");
    }

    let mut tape = Tape::new();
    let logits: Vec<Vec<f64>> = (0..2).map(|_| (0..128).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    let corners = [gt.x, gt.y, gt.x1(), gt.y1()].map(|v| v + rng.random_range(-3.0..3.0));
    let outs: Vec<CornerOutput> = logits
        .iter()
        .map(|l| {
            let lv = tape.constant(Tensor::new(vec![64, 2], l.clone()).unwrap());
            CornerOutput {
                logits: lv,
                tl: lv,
                br: lv,
                boxes: tape.constant(Tensor::new(vec![1, 4], corners.to_vec()).unwrap()),
            }
        })
        .collect();
    let labels = [assign_labels_corner(Some(&gt), &grid).unwrap(), assign_labels_corner(None, &grid).unwrap()];
    let batch: Vec<_> = outs.iter().zip(&labels).collect();
    let (_, r) = composite_corner(&mut tape, &batch, &w, &grid).unwrap();
    let pred = BBox::from_corners(corners[0], corners[1], corners[2], corners[3]);
    let bce: f64 = logits[1].iter().map(|&z| -(1.0 - 1.0 / (1.0 + (-z).exp())).ln()).sum::<f64>() / 128.0;
    let want = [
        ("l1", w.l1 * l1_scalar(&pred, &gt, 64.0)),
        ("giou", w.giou * (1.0 - giou(&pred, &gt))),
        ("ce_neg", w.ce * bce),
    ];
    for (name, v) in want {
        let got = r.term(name).unwrap();
        assert!((got - v).abs() < 1e-9 * v.abs().max(1.0), "{name}: {got} vs {v}");
    }
}

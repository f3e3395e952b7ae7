//! Joint positive/negative pair schedule and crop realization.

use jn_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{make_crop, BBox, CropTransform};
use crate::imaging::{mean_color, render_crop, Photometric};
use crate::model::PairInput;

const JITTER_RETRIES: usize = 10;
const REALIZE_SALT: u64 = 0x6a09_e667_f3bc_c908;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Fraction of positive pairs per epoch.
    pub rho: f64,
    pub max_gap: usize,
    pub pairs_per_epoch: usize,
    pub seed: u64,
    /// Maximum centre shift as a fraction of the search crop side.
    pub center_jitter: f64,
    /// Half-width of the uniform log-scale jitter.
    pub scale_jitter: f64,
    pub flip_prob: f64,
    pub brightness: (f64, f64),
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            rho: 0.7,
            max_gap: 30,
            pairs_per_epoch: 2000,
            seed: 0,
            center_jitter: 0.1,
            scale_jitter: 0.15,
            flip_prob: 0.5,
            brightness: (0.8, 1.2),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho must lie in (0, 1], got {}", self.rho));
        }
        if self.pairs_per_epoch == 0 {
            return bad("pairs_per_epoch must be positive".into());
        }
        if !(self.center_jitter >= 0.0 && self.scale_jitter >= 0.0) {
            return bad("jitter magnitudes must be nonnegative".into());
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip_prob must lie in [0, 1], got {}", self.flip_prob));
        }
        let (lo, hi) = self.brightness;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("brightness range ({lo}, {hi}) is invalid"));
        }
        Ok(())
    }

    pub fn num_positives(&self) -> usize {
        (self.rho * self.pairs_per_epoch as f64).round() as usize
    }
}

/// Crop geometry shared by training, tracking and the histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    pub template_factor: f64,
    pub search_factor: f64,
    pub template_res: usize,
    pub search_res: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            template_factor: 2.0,
            search_factor: 4.0,
            template_res: 32,
            search_res: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairDescriptor {
    pub epoch: u64,
    pub index: usize,
    pub polarity: Polarity,
    pub template_seq: usize,
    pub template_frame: usize,
    pub search_seq: usize,
    pub search_frame: usize,
}

#[derive(Clone, Debug)]
pub struct SamplePair {
    pub descriptor: PairDescriptor,
    pub template: Tensor,
    pub template_transform: CropTransform,
    pub search: Tensor,
    /// Geometric transform before the optional flip.
    pub search_transform: CropTransform,
    pub flipped: bool,
    pub polarity: Polarity,
    /// Target in search-crop pixels (after flip); positives only.
    pub gt_box_search: Option<BBox>,
    /// Target in template-crop pixels (after flip).
    pub template_box: BBox,
}

impl SamplePair {
    pub fn to_input(&self) -> PairInput {
        let r = self.template.shape()[1] as f64;
        let b = &self.template_box;
        PairInput {
            template: self.template.clone(),
            search: self.search.clone(),
            template_box: BBox::new(b.x / r, b.y / r, b.w / r, b.h / r),
        }
    }
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[T]) -> T {
    items[rng.random_range(0..items.len())]
}

/// Descriptors for one epoch: an exact positive quota, shuffled by `(seed, epoch)`.
pub fn sample_epoch_schedule(data: &Dataset, cfg: &SamplerConfig, epoch: u64) -> Result<Vec<PairDescriptor>> {
    cfg.validate()?;
    let visible: Vec<Vec<usize>> = data.sequences.iter().map(|s| s.visible_frames()).collect();
    let usable: Vec<usize> = (0..data.len()).filter(|&i| !visible[i].is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Data("no sequence has a visible frame".into()));
    }
    let n_pos = cfg.num_positives();
    let n = cfg.pairs_per_epoch;
    if n_pos < n && data.len() < 2 {
        return Err(Error::Data("negative pairs need at least two sequences".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(epoch);
    let mut polarities: Vec<Polarity> = (0..n)
        .map(|i| if i < n_pos { Polarity::Positive } else { Polarity::Negative })
        .collect();
    polarities.shuffle(&mut rng);
    let mut out = Vec::with_capacity(n);
    for (index, polarity) in polarities.into_iter().enumerate() {
        let ts = pick(&mut rng, &usable);
        let tf = pick(&mut rng, &visible[ts]);
        let (ss, sf) = match polarity {
            Polarity::Positive => {
                let near: Vec<usize> = visible[ts]
                    .iter()
                    .copied()
                    .filter(|&f| f != tf && f.abs_diff(tf) <= cfg.max_gap)
                    .collect();
                (ts, if near.is_empty() { tf } else { pick(&mut rng, &near) })
            }
            Polarity::Negative => {
                let absent = data.sequences[ts].absent_frames();
                if absent.is_empty() {
                    let mut other = rng.random_range(0..data.len() - 1);
                    if other >= ts {
                        other += 1;
                    }
                    (other, rng.random_range(0..data.sequences[other].len()))
                } else {
                    (ts, pick(&mut rng, &absent))
                }
            }
        };
        out.push(PairDescriptor {
            epoch,
            index,
            polarity,
            template_seq: ts,
            template_frame: tf,
            search_seq: ss,
            search_frame: sf,
        });
    }
    Ok(out)
}

fn realize_rng(seed: u64, epoch: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ REALIZE_SALT);
    rng.set_stream((epoch << 32) ^ index as u64);
    rng
}

/// Search crop around a positive target with centre and log-scale jitter.
/// Retries when the jittered crop would lose the target, then falls back to no jitter.
pub fn jittered_search_crop(
    gt: &BBox,
    cfg: &SamplerConfig,
    crop: &CropConfig,
    rng: &mut impl Rng,
) -> Result<CropTransform> {
    let base = make_crop(gt, crop.search_factor, crop.search_res)?;
    let side = base.side();
    for _ in 0..JITTER_RETRIES {
        let s = if cfg.scale_jitter > 0.0 {
            side * rng.random_range(-cfg.scale_jitter..=cfg.scale_jitter).exp()
        } else {
            side
        };
        let mut shift = || {
            if cfg.center_jitter > 0.0 {
                rng.random_range(-cfg.center_jitter..=cfg.center_jitter) * s
            } else {
                0.0
            }
        };
        let (dx, dy) = (shift(), shift());
        let t = CropTransform::centered(gt.cx() + dx, gt.cy() + dy, s, crop.search_res)?;
        let mapped = t.apply(gt);
        let res = crop.search_res as f64;
        if mapped.clipped(res, res).area() > 0.0 {
            return Ok(t);
        }
    }
    Ok(base)
}

/// Crops and augments a pair; depends only on the dataset, configs and the descriptor.
pub fn realize_pair(data: &Dataset, d: &PairDescriptor, cfg: &SamplerConfig, crop: &CropConfig) -> Result<SamplePair> {
    let mut rng = realize_rng(cfg.seed, d.epoch, d.index);
    let tseq = &data.sequences[d.template_seq];
    let tbox = tseq.boxes[d.template_frame];
    let timg = &tseq.frames[d.template_frame];
    let t_tf = make_crop(&tbox, crop.template_factor, crop.template_res)?;
    let flipped = rng.random_bool(cfg.flip_prob);
    let (lo, hi) = cfg.brightness;
    let mut bright = || if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let (bt, bs) = (bright(), bright());

    let sseq = &data.sequences[d.search_seq];
    let simg = &sseq.frames[d.search_frame];
    let (s_tf, gt) = match d.polarity {
        Polarity::Positive => {
            let gt = sseq.boxes[d.search_frame];
            let t = jittered_search_crop(&gt, cfg, crop, &mut rng)?;
            (t, Some(t.apply(&gt)))
        }
        Polarity::Negative => {
            let side = crop.search_factor * (tbox.w * tbox.h).sqrt();
            let (w, h) = (simg.width() as f64, simg.height() as f64);
            (CropTransform::centered(w / 2.0, h / 2.0, side, crop.search_res)?, None)
        }
    };
    let tres = crop.template_res as f64;
    let sres = crop.search_res as f64;
    let flip_box = |b: BBox, r: f64| if flipped { b.hflipped(r) } else { b };
    Ok(SamplePair {
        descriptor: *d,
        template: render_crop(
            timg,
            &t_tf,
            mean_color(timg),
            Photometric {
                brightness: bt,
                flip: flipped,
            },
        ),
        template_transform: t_tf,
        search: render_crop(
            simg,
            &s_tf,
            mean_color(simg),
            Photometric {
                brightness: bs,
                flip: flipped,
            },
        ),
        search_transform: s_tf,
        flipped,
        polarity: d.polarity,
        gt_box_search: gt.map(|b| flip_box(b, sres)),
        template_box: flip_box(t_tf.apply(&tbox), tres),
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use image::RgbImage;

    use super::*;
    use crate::data::Sequence;

    fn toy(absent: &[&[bool]]) -> Dataset {
        Dataset {
            sequences: absent
                .iter()
                .enumerate()
                .map(|(k, flags)| Sequence {
                    name: format!("s{k}"),
                    class_id: "c".into(),
                    frames: (0..flags.len())
                        .map(|i| Arc::new(RgbImage::from_fn(48, 48, move |x, y| image::Rgb([(x * 5) as u8, (y * 5) as u8, (i * 9 + k) as u8]))))
                        .collect(),
                    boxes: (0..flags.len()).map(|i| BBox::new(10.0 + i as f64, 12.0, 10.0, 8.0)).collect(),
                    absent: flags.to_vec(),
                })
                .collect(),
        }
    }

    #[test]
    fn exact_positive_quota() {
        let data = toy(&[&[false; 5], &[false; 5]]);
        for (rho, n, want) in [(0.7, 1000, 700), (1.0, 37, 37), (0.5, 7, 4), (0.3, 10, 3)] {
            let cfg = SamplerConfig {
                rho,
                pairs_per_epoch: n,
                ..SamplerConfig::default()
            };
            let s = sample_epoch_schedule(&data, &cfg, 2).unwrap();
            assert_eq!(s.len(), n);
            assert_eq!(s.iter().filter(|d| d.polarity == Polarity::Positive).count(), want);
        }
    }

    #[test]
    fn negatives_prefer_absent_frames_of_same_sequence() {
        let data = toy(&[&[false, false, true, false], &[false; 4], &[false, true, true, false]]);
        let cfg = SamplerConfig {
            rho: 0.2,
            pairs_per_epoch: 500,
            ..SamplerConfig::default()
        };
        for d in sample_epoch_schedule(&data, &cfg, 0).unwrap() {
            let tseq = &data.sequences[d.template_seq];
            assert!(!tseq.absent[d.template_frame]);
            match d.polarity {
                Polarity::Positive => {
                    assert_eq!(d.search_seq, d.template_seq);
                    assert!(!tseq.absent[d.search_frame]);
                    assert!(d.search_frame.abs_diff(d.template_frame) <= cfg.max_gap);
                }
                Polarity::Negative if tseq.absent.iter().any(|&a| a) => {
                    assert_eq!(d.search_seq, d.template_seq);
                    assert!(tseq.absent[d.search_frame]);
                }
                Polarity::Negative => assert_ne!(d.search_seq, d.template_seq),
            }
        }
    }

    #[test]
    fn schedule_depends_on_epoch_and_seed_only() {
        let data = toy(&[&[false; 6], &[false; 6]]);
        let cfg = SamplerConfig {
            pairs_per_epoch: 50,
            ..SamplerConfig::default()
        };
        let a = sample_epoch_schedule(&data, &cfg, 3).unwrap();
        assert_eq!(a, sample_epoch_schedule(&data, &cfg, 3).unwrap());
        assert_ne!(a, sample_epoch_schedule(&data, &cfg, 4).unwrap());
    }

    #[test]
    fn zero_jitter_centres_the_target() {
        let data = toy(&[&[false; 3], &[false; 3]]);
        let cfg = SamplerConfig {
            center_jitter: 0.0,
            scale_jitter: 0.0,
            ..SamplerConfig::default()
        };
        let crop = CropConfig::default();
        let d = PairDescriptor {
            epoch: 0,
            index: 0,
            polarity: Polarity::Positive,
            template_seq: 0,
            template_frame: 0,
            search_seq: 0,
            search_frame: 2,
        };
        let p = realize_pair(&data, &d, &cfg, &crop).unwrap();
        let gt = p.gt_box_search.unwrap();
        assert!((gt.cx() - 32.0).abs() < 1e-9 && (gt.cy() - 32.0).abs() < 1e-9);
        // crop side is 4 sqrt(wh) so the target spans res / (4 sqrt(wh)) * w
        let s = 64.0 / (4.0 * 80f64.sqrt());
        assert!((gt.w - 10.0 * s).abs() < 1e-9);
        assert!((p.template_box.cx() - 16.0).abs() < 1e-9);
    }

    #[test]
    fn flip_mirrors_boxes() {
        let data = toy(&[&[false; 3], &[false; 3]]);
        let crop = CropConfig::default();
        let d = PairDescriptor {
            epoch: 0,
            index: 5,
            polarity: Polarity::Positive,
            template_seq: 1,
            template_frame: 0,
            search_seq: 1,
            search_frame: 1,
        };
        let on = SamplerConfig {
            flip_prob: 1.0,
            ..SamplerConfig::default()
        };
        let off = SamplerConfig {
            flip_prob: 0.0,
            ..SamplerConfig::default()
        };
        let a = realize_pair(&data, &d, &off, &crop).unwrap();
        let b = realize_pair(&data, &d, &on, &crop).unwrap();
        let t = a.template_box;
        assert!((b.template_box.x - (32.0 - t.x - t.w)).abs() < 1e-9);
        assert_eq!(b.template_box.y, t.y);
    }

    #[test]
    fn negative_has_no_target_and_is_reproducible() {
        let data = toy(&[&[false; 3], &[false; 3]]);
        let cfg = SamplerConfig::default();
        let crop = CropConfig::default();
        let d = PairDescriptor {
            epoch: 1,
            index: 3,
            polarity: Polarity::Negative,
            template_seq: 0,
            template_frame: 0,
            search_seq: 1,
            search_frame: 2,
        };
        let a = realize_pair(&data, &d, &cfg, &crop).unwrap();
        let b = realize_pair(&data, &d, &cfg, &crop).unwrap();
        assert!(a.gt_box_search.is_none());
        assert_eq!(a.search, b.search);
        assert_eq!(a.template, b.template);
        let (cx, cy) = a.search_transform.invert_point(32.0, 32.0);
        assert!((cx - 24.0).abs() < 1e-9 && (cy - 24.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_rho_is_rejected() {
        for rho in [0.0, -0.1, 1.5, f64::NAN] {
            let cfg = SamplerConfig {
                rho,
                ..SamplerConfig::default()
            };
            assert!(cfg.validate().is_err());
        }
    }
}

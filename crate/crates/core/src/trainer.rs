//! Training loop: joint pair schedule, composite loss, AdamW, checkpoints and loss logs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use jn_autodiff::{ParamStore, Tape};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{realize_pair, sample_epoch_schedule, CropConfig, Dataset, PairDescriptor, SamplePair, SamplerConfig};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::heads::{Grid, HeadOutput, Labels};
use crate::losses::{composite, BatchLossReport, LossWeights};
use crate::model::{save_checkpoint, CheckpointMeta, Model, ModelConfig, OptimizerState, PairInput};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Final fraction of epochs trained at `lr * lr_drop_factor`.
    pub lr_drop_fraction: f64,
    pub lr_drop_factor: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Model initialization seed.
    pub seed: u64,
    pub log_every: usize,
    pub template_factor: f64,
    pub search_factor: f64,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-4,
            lr_drop_fraction: 0.1,
            lr_drop_factor: 0.1,
            grad_clip: 1.0,
            seed: 0,
            log_every: 25,
            template_factor: 2.0,
            search_factor: 4.0,
            model: ModelConfig::default(),
            sampler: SamplerConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("lr must be positive; weight_decay and grad_clip nonnegative".into());
        }
        if !(self.lr_drop_fraction > 0.0 && self.lr_drop_fraction < 1.0) {
            return bad(format!("lr_drop_fraction must lie in (0, 1), got {}", self.lr_drop_fraction));
        }
        if !(self.lr_drop_factor > 0.0) {
            return bad("lr_drop_factor must be positive".into());
        }
        if !(self.template_factor >= 1.0 && self.search_factor >= 1.0) {
            return bad("crop factors must be at least 1".into());
        }
        self.model.encoder.validate()?;
        self.model.dist.validate()?;
        self.sampler.validate()?;
        self.loss.validate()
    }

    pub fn crop(&self) -> CropConfig {
        CropConfig {
            template_factor: self.template_factor,
            search_factor: self.search_factor,
            template_res: self.model.encoder.template_res,
            search_res: self.model.encoder.search_res,
        }
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let dropped = (self.lr_drop_fraction * self.epochs as f64).round() as usize;
        if epoch + dropped >= self.epochs {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.sampler.pairs_per_epoch.div_ceil(self.batch_size)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn sha256(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

/// One AdamW step with decoupled weight decay on parameters flagged for decay.
pub fn adamw_step(store: &mut ParamStore, opt: &mut OptimizerState, lr: f64, weight_decay: f64) {
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, e) in store.iter_mut().enumerate() {
        let m = opt.m[i].data_mut();
        let v = opt.v[i].data_mut();
        let g = e.grad.data();
        let decay = if e.decay { weight_decay } else { 0.0 };
        for (k, p) in e.value.data_mut().iter_mut().enumerate() {
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
            let update = (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
            *p -= lr * (update + decay * *p);
        }
    }
}

/// Scales gradients so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for e in store.iter_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Forward, label and compose the loss for a realized batch on `tape`.
pub fn batch_loss(
    model: &Model,
    tape: &mut Tape,
    pairs: &[SamplePair],
    weights: &LossWeights,
) -> Result<(jn_autodiff::Var, BatchLossReport, Vec<HeadOutput>, Vec<Labels>)> {
    let grid = model.grid();
    let mut outputs = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    for p in pairs {
        let out = model.forward(tape, &p.to_input(), false)?.head;
        labels.push(model.head.assign_labels(tape, &out, p.gt_box_search.as_ref(), &grid)?);
        outputs.push(out);
    }
    let (loss, report) = composite(tape, &outputs, &labels, weights, &grid)?;
    Ok((loss, report, outputs, labels))
}

/// Mean IoU of the top-scoring decoded box against the target over positive pairs.
pub fn positive_iou(tape: &Tape, grid: &Grid, outputs: &[HeadOutput], pairs: &[SamplePair]) -> Option<f64> {
    let ious: Vec<f64> = outputs
        .iter()
        .zip(pairs)
        .filter_map(|(o, p)| p.gt_box_search.map(|gt| (o, gt)))
        .map(|(o, gt)| iou(&o.maps(tape).decode(grid, None).0, &gt))
        .collect();
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    /// Mean over positive pairs of the epoch; `None` without positives.
    pub train_iou: Option<f64>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub opt: OptimizerState,
    pub epochs: Vec<EpochStats>,
    pub final_loss: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `checkpoint.bin`, `loss.csv` and `epochs.csv`.
    pub out_dir: Option<PathBuf>,
    /// Print `epoch=E step=S loss=... lr=...` lines to stdout.
    pub progress: bool,
}

struct LossLog {
    out: BufWriter<File>,
    path: PathBuf,
    header: bool,
}

impl LossLog {
    fn create(path: PathBuf) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path,
            header: false,
        })
    }

    fn row(&mut self, step: usize, epoch: usize, lr: f64, r: &BatchLossReport, train_iou: Option<f64>, norm: f64) -> Result<()> {
        let io = |e| Error::io(&self.path, e);
        if !self.header {
            let names: Vec<&str> = r.terms.iter().map(|t| t.0).collect();
            writeln!(self.out, "step,epoch,lr,total,{},n_pos,n_neg,train_iou,grad_norm", names.join(",")).map_err(io)?;
            self.header = true;
        }
        let terms: Vec<String> = r.terms.iter().map(|t| t.1.to_string()).collect();
        let tiou = train_iou.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            self.out,
            "{step},{epoch},{lr},{},{},{},{},{tiou},{norm}",
            r.total,
            terms.join(","),
            r.n_pos,
            r.n_neg
        )
        .map_err(io)
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn describe(batch: &[PairDescriptor]) -> String {
    serde_json::to_string(batch).unwrap_or_else(|_| format!("{batch:?}"))
}

pub fn train(cfg: &TrainConfig, data: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let crop = cfg.crop();
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = OptimizerState::new(&model.store);
    let grid = model.grid();
    let mut log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(LossLog::create(dir.join("loss.csv"))?)
        }
        None => None,
    };
    let ckpt_path = opts.out_dir.as_ref().map(|d| d.join("checkpoint.bin"));
    let meta = |epoch: usize| CheckpointMeta {
        epoch: epoch as u64,
        config_sha256: cfg.sha256(),
    };
    if let Some(p) = &ckpt_path {
        save_checkpoint(p, &model, &opt, &meta(0))?;
    }
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let schedule = sample_epoch_schedule(data, &cfg.sampler, epoch as u64)?;
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let (mut iou_sum, mut iou_n) = (0.0, 0usize);
        for batch in schedule.chunks(cfg.batch_size) {
            let pairs = batch
                .iter()
                .map(|d| realize_pair(data, d, &cfg.sampler, &crop))
                .collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let (loss, report, outputs, _) = batch_loss(&model, &mut tape, &pairs, &cfg.loss)?;
            if !report.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("loss {} on batch {}", report.total, describe(batch)),
                });
            }
            let train_iou = positive_iou(&tape, &grid, &outputs, &pairs);
            tape.backward(loss)?;
            model.store.zero_grad();
            tape.accumulate_param_grads(&mut model.store);
            let norm = clip_grad_norm(&mut model.store, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("gradient norm {norm} on batch {}", describe(batch)),
                });
            }
            adamw_step(&mut model.store, &mut opt, lr, cfg.weight_decay);
            if let Some(log) = &mut log {
                log.row(step, epoch, lr, &report, train_iou, norm)?;
            }
            if opts.progress && (step % cfg.log_every.max(1) == 0) {
                println!("epoch={epoch} step={step} loss={:.6} lr={lr:e}", report.total);
            }
            let n_pos = pairs.iter().filter(|p| p.gt_box_search.is_some()).count();
            if let Some(v) = train_iou {
                iou_sum += v * n_pos as f64;
                iou_n += n_pos;
            }
            loss_sum += report.total;
            batches += 1;
            final_loss = report.total;
            step += 1;
        }
        stats.push(EpochStats {
            epoch,
            lr,
            mean_loss: loss_sum / batches.max(1) as f64,
            train_iou: (iou_n > 0).then(|| iou_sum / iou_n as f64),
        });
        if let Some(p) = &ckpt_path {
            save_checkpoint(p, &model, &opt, &meta(epoch + 1))?;
        }
    }
    if let Some(log) = &mut log {
        log.flush()?;
    }
    if let Some(dir) = &opts.out_dir {
        write_epoch_csv(&dir.join("epochs.csv"), &stats)?;
    }
    Ok(TrainOutcome {
        model,
        opt,
        epochs: stats,
        final_loss,
        checkpoint: ckpt_path,
    })
}

fn write_epoch_csv(path: &Path, stats: &[EpochStats]) -> Result<()> {
    let mut s = String::from("epoch,lr,mean_loss,train_iou\n");
    for e in stats {
        let tiou = e.train_iou.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{tiou}\n", e.epoch, e.lr, e.mean_loss));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checks: Vec<ParamCheck>,
    /// Coordinates whose one-sided differences disagree (a kink lies within `h`); not compared.
    pub skipped_nonsmooth: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.checks.iter().filter(|c| !(c.rel_error < self.tolerance)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty() && !self.checks.is_empty()
    }
}

/// Relative error with a small absolute floor so that near-zero gradients compare by difference.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()) + 1e-6)
}

/// Compares the end-to-end composite loss gradient of `count` random scalar parameters with
/// central differences on a frozen 2-pair batch (one positive, one negative).
pub fn grad_check(
    model_cfg: &ModelConfig,
    weights: &LossWeights,
    seed: u64,
    count: usize,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut model = Model::new(model_cfg.clone(), seed)?;
    let grid = model.grid();
    let e = &model_cfg.encoder;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut image = |res: usize| jn_autodiff::Tensor::from_fn(vec![3, res, res], |_| rng.random_range(-2.0..2.0));
    let inputs = [
        PairInput {
            template: image(e.template_res),
            search: image(e.search_res),
            template_box: BBox::new(0.27, 0.3, 0.45, 0.4),
        },
        PairInput {
            template: image(e.template_res),
            search: image(e.search_res),
            template_box: BBox::new(0.22, 0.26, 0.5, 0.52),
        },
    ];
    let r = e.search_res as f64;
    let gts = [Some(BBox::new(0.31 * r, 0.28 * r, 0.33 * r, 0.37 * r)), None];

    let mut tape = Tape::new();
    let outs = inputs
        .iter()
        .map(|x| Ok(model.forward(&mut tape, x, false)?.head))
        .collect::<Result<Vec<_>>>()?;
    let labels = outs
        .iter()
        .zip(&gts)
        .map(|(o, g)| model.head.assign_labels(&tape, o, g.as_ref(), &grid))
        .collect::<Result<Vec<_>>>()?;
    let (loss, _) = composite(&mut tape, &outs, &labels, weights, &grid)?;
    tape.backward(loss)?;
    model.store.zero_grad();
    tape.accumulate_param_grads(&mut model.store);
    let analytic: Vec<Vec<f64>> = model.store.iter().map(|(_, e)| e.grad.data().to_vec()).collect();

    let eval = |m: &Model| -> Result<f64> {
        let mut t = Tape::inference();
        let outs = inputs
            .iter()
            .map(|x| Ok(m.forward(&mut t, x, false)?.head))
            .collect::<Result<Vec<_>>>()?;
        let (l, _) = composite(&mut t, &outs, &labels, weights, &grid)?;
        Ok(t.value(l).item())
    };
    let f0 = eval(&model)?;
    let sizes: Vec<(String, usize)> = model.store.iter().map(|(_, e)| (e.name.clone(), e.value.data().len())).collect();
    let total: usize = sizes.iter().map(|s| s.1).sum();
    let mut checks = Vec::new();
    let mut skipped = 0;
    let mut attempts = 0;
    while checks.len() < count && attempts < 20 * count {
        attempts += 1;
        let mut flat = rng.random_range(0..total);
        let mut p = 0;
        while flat >= sizes[p].1 {
            flat -= sizes[p].1;
            p += 1;
        }
        let id = model.store.ids().nth(p).expect("parameter index in range");
        let orig = model.store.value(id).data()[flat];
        model.store.value_mut(id).data_mut()[flat] = orig + h;
        let fp = eval(&model)?;
        model.store.value_mut(id).data_mut()[flat] = orig - h;
        let fm = eval(&model)?;
        model.store.value_mut(id).data_mut()[flat] = orig;
        let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
        // one-sided slopes differ by O(h) on smooth coordinates, by O(1) across a kink
        if (fwd - bwd).abs() > 1e-3 * (fwd.abs().max(bwd.abs()) + 1e-3) && (fwd - bwd).abs() > 100.0 * h {
            skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[p][flat];
        checks.push(ParamCheck {
            name: sizes[p].0.clone(),
            index: flat,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    Ok(GradCheckReport {
        checks,
        skipped_nonsmooth: skipped,
        tolerance,
    })
}

/// Small model used by the gradient check and quick tests.
pub fn tiny_model_config(head: crate::heads::HeadKind) -> ModelConfig {
    use crate::encoder::EncoderConfig;
    ModelConfig {
        encoder: EncoderConfig {
            embed_dim: 16,
            num_layers: 1,
            num_heads: 2,
            patch_size: 8,
            template_res: 16,
            search_res: 32,
            ..EncoderConfig::default()
        },
        head,
        ..ModelConfig::default()
    }
}

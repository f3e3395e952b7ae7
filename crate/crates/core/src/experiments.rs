//! Scaled-down ablations: positive-ratio sweep, head designs and TIT variants.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::data::Dataset;
use crate::encoder::{TitSource, TitTokens};
use crate::error::Result;
use crate::eval::{evaluate, TrackerConfig};
use crate::heads::HeadKind;
use crate::trainer::{train, TrainConfig, TrainOptions};
use crate::visuals::{sweep_svg, write_text};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialResult {
    pub label: String,
    pub rho: f64,
    pub seed: u64,
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
    /// Mean training IoU over the first `early_epochs` epochs.
    pub early_train_iou: f64,
    pub final_train_iou: f64,
    pub train_secs: f64,
}

/// Trains with `seed` driving both initialization and sampling, then evaluates on `test`.
pub fn run_trial(
    label: &str,
    base: &TrainConfig,
    seed: u64,
    train_data: &Dataset,
    test_data: &Dataset,
    tracker: &TrackerConfig,
    early_epochs: usize,
) -> Result<TrialResult> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.sampler.seed = seed;
    let start = Instant::now();
    let out = train(&cfg, train_data, &TrainOptions::default())?;
    let train_secs = start.elapsed().as_secs_f64();
    let ious: Vec<f64> = out.epochs.iter().filter_map(|e| e.train_iou).collect();
    let k = early_epochs.clamp(1, ious.len().max(1));
    let early = if ious.is_empty() { 0.0 } else { ious[..k.min(ious.len())].iter().sum::<f64>() / k.min(ious.len()) as f64 };
    let ev = evaluate(&out.model, test_data, tracker)?;
    Ok(TrialResult {
        label: label.to_string(),
        rho: cfg.sampler.rho,
        seed,
        ao: ev.summary.ao,
        sr50: ev.summary.sr50,
        sr75: ev.summary.sr75,
        early_train_iou: early,
        final_train_iou: ious.last().copied().unwrap_or(0.0),
        train_secs,
    })
}

pub fn mean_ao(results: &[TrialResult], label: &str) -> f64 {
    mean_of(results, label, |r| r.ao)
}

pub fn mean_of(results: &[TrialResult], label: &str, f: impl Fn(&TrialResult) -> f64) -> f64 {
    let v: Vec<f64> = results.iter().filter(|r| r.label == label).map(f).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn rho_label(rho: f64) -> String {
    format!("rho={rho}")
}

/// One trial per (ρ, seed); the lr drop fraction is overridden for the sweep.
#[allow(clippy::too_many_arguments)]
pub fn sweep_rho(
    base: &TrainConfig,
    rhos: &[f64],
    seeds: &[u64],
    lr_drop_fraction: f64,
    early_epochs: usize,
    train_data: &Dataset,
    test_data: &Dataset,
    tracker: &TrackerConfig,
    mut on_trial: impl FnMut(&TrialResult),
) -> Result<Vec<TrialResult>> {
    let mut out = Vec::with_capacity(rhos.len() * seeds.len());
    for &rho in rhos {
        let mut cfg = base.clone();
        cfg.sampler.rho = rho;
        cfg.lr_drop_fraction = lr_drop_fraction;
        for &seed in seeds {
            let r = run_trial(&rho_label(rho), &cfg, seed, train_data, test_data, tracker, early_epochs)?;
            on_trial(&r);
            out.push(r);
        }
    }
    Ok(out)
}

pub fn results_csv(results: &[TrialResult]) -> String {
    let mut s = String::from("label,rho,seed,ao,sr50,sr75,early_train_iou,final_train_iou,train_secs\n");
    for r in results {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.1}\n",
            r.label, r.rho, r.seed, r.ao, r.sr50, r.sr75, r.early_train_iou, r.final_train_iou, r.train_secs
        ));
    }
    s
}

/// Writes `sweep.csv` and the AO-vs-ρ plot `sweep.svg`.
pub fn write_sweep(dir: &Path, results: &[TrialResult]) -> Result<()> {
    write_text(&dir.join("sweep.csv"), &results_csv(results))?;
    let pts: Vec<(f64, u64, f64)> = results.iter().map(|r| (r.rho, r.seed, r.ao)).collect();
    write_text(&dir.join("sweep.svg"), &sweep_svg(&pts, "AO"))
}

/// Variant label and the config change it applies.
pub type Variant = (&'static str, fn(&mut TrainConfig));

pub const HEAD_VARIANTS: [Variant; 3] = [
    ("dist", |c| c.model.head = HeadKind::Dist),
    ("center", |c| c.model.head = HeadKind::Center),
    ("corner", |c| c.model.head = HeadKind::Corner),
];

pub const TIT_VARIANTS: [Variant; 3] = [
    ("tit_cxcywh", |c| {
        c.model.encoder.tit_token_count = TitTokens::OneMlp;
        c.model.encoder.tit_source = TitSource::Cxcywh;
    }),
    ("tit_wh", |c| {
        c.model.encoder.tit_token_count = TitTokens::OneMlp;
        c.model.encoder.tit_source = TitSource::Wh;
    }),
    ("no_tit", |c| c.model.encoder.tit_token_count = TitTokens::None),
];

pub fn run_variants(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    early_epochs: usize,
    train_data: &Dataset,
    test_data: &Dataset,
    tracker: &TrackerConfig,
    mut on_trial: impl FnMut(&TrialResult),
) -> Result<Vec<TrialResult>> {
    let mut out = Vec::new();
    for (label, apply) in variants {
        let mut cfg = base.clone();
        apply(&mut cfg);
        for &seed in seeds {
            let r = run_trial(label, &cfg, seed, train_data, test_data, tracker, early_epochs)?;
            on_trial(&r);
            out.push(r);
        }
    }
    Ok(out)
}

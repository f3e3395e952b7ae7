//! Encoder plus head, parameter ownership, and checkpoint files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use jn_autodiff::{checkpoint, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::geometry::{BBox, CropTransform};
use crate::heads::{DistHeadConfig, Grid, Head, HeadKind, HeadMaps, HeadOutput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadKind,
    pub dist: DistHeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head: HeadKind::Dist,
            dist: DistHeadConfig::default(),
        }
    }
}

/// One template/search input.
#[derive(Clone, Debug)]
pub struct PairInput {
    pub template: Tensor,
    pub search: Tensor,
    /// Target box normalized to the template crop.
    pub template_box: BBox,
}

/// Where a search crop came from; lets oracle predictors look up ground truth.
#[derive(Clone, Copy, Debug)]
pub struct SearchContext {
    pub frame: usize,
    pub transform: CropTransform,
}

/// Anything that maps a pair to head maps; the tracker only needs this.
pub trait Predictor {
    fn model_config(&self) -> &ModelConfig;
    fn predict(&self, input: &PairInput, ctx: &SearchContext) -> Result<HeadMaps>;

    fn grid(&self) -> Grid {
        let e = &self.model_config().encoder;
        Grid::new(e.search_grid(), e.search_res)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub head: Head,
}

pub struct ForwardOutput {
    pub head: HeadOutput,
    pub attention: Vec<Tensor>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, cfg.encoder.clone(), &mut rng)?;
        let head = Head::new(&mut store, cfg.head, cfg.dist.clone(), cfg.encoder.embed_dim, &mut rng)?;
        Ok(Self {
            cfg,
            store,
            encoder,
            head,
        })
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.cfg.encoder.search_grid(), self.cfg.encoder.search_res)
    }

    pub fn forward(&self, tape: &mut Tape, input: &PairInput, keep_attention: bool) -> Result<ForwardOutput> {
        let enc = self.encoder.forward(
            tape,
            &self.store,
            &input.template,
            &input.search,
            &input.template_box,
            keep_attention,
        )?;
        let head = self.head.forward(tape, &self.store, enc.features, &self.grid())?;
        Ok(ForwardOutput {
            head,
            attention: enc.attention,
        })
    }

    /// Inference forward returning head maps and per-layer attention.
    pub fn infer(&self, input: &PairInput, keep_attention: bool) -> Result<(HeadMaps, Vec<Tensor>)> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, input, keep_attention)?;
        Ok((out.head.maps(&tape), out.attention))
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }
}

impl Predictor for Model {
    fn model_config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn predict(&self, input: &PairInput, _ctx: &SearchContext) -> Result<HeadMaps> {
        Ok(self.infer(input, false)?.0)
    }
}

/// Adam moments keyed by parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, e)| Tensor::zeros(e.value.shape().to_vec())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub config_sha256: [u8; 32],
}

/// Writes parameters, optimizer moments and metadata as one record file.
pub fn save_checkpoint(path: &Path, model: &Model, opt: &OptimizerState, meta: &CheckpointMeta) -> Result<()> {
    let mut records: Vec<(String, Tensor)> = Vec::new();
    for (i, (_, e)) in model.store.iter().enumerate() {
        records.push((e.name.clone(), e.value.clone()));
        records.push((format!("opt.m.{}", e.name), opt.m[i].clone()));
        records.push((format!("opt.v.{}", e.name), opt.v[i].clone()));
    }
    records.push(("meta.epoch".into(), Tensor::scalar(meta.epoch as f64)));
    records.push(("meta.step".into(), Tensor::scalar(opt.step as f64)));
    let hash: Vec<f64> = meta
        .config_sha256
        .chunks(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    records.push(("meta.config_sha256".into(), Tensor::from_vec(hash)));
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    checkpoint::write_records(&mut w, records.iter().map(|(n, t)| (n.as_str(), t)))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads a checkpoint into a freshly built `model` with matching architecture.
pub fn load_checkpoint(path: &Path, model: &mut Model) -> Result<(OptimizerState, CheckpointMeta)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let records = checkpoint::read_records(&mut BufReader::new(file))?;
    let (params, rest): (Vec<_>, Vec<_>) = records
        .into_iter()
        .partition(|(n, _)| !n.starts_with("opt.") && !n.starts_with("meta."));
    let unexpected = model.store.load_records(params)?;
    if let Some((name, _)) = unexpected.first() {
        return Err(Error::Data(format!("{}: unknown parameter {name}", path.display())));
    }
    let mut opt = OptimizerState::new(&model.store);
    let mut meta = CheckpointMeta {
        epoch: 0,
        config_sha256: [0; 32],
    };
    let index = |name: &str| model.store.id(name).map(|id| id.index());
    for (name, t) in rest {
        if let Some(p) = name.strip_prefix("opt.m.") {
            let i = index(p).ok_or_else(|| Error::Data(format!("moment for unknown parameter {p}")))?;
            opt.m[i] = t;
        } else if let Some(p) = name.strip_prefix("opt.v.") {
            let i = index(p).ok_or_else(|| Error::Data(format!("moment for unknown parameter {p}")))?;
            opt.v[i] = t;
        } else if name == "meta.epoch" {
            meta.epoch = t.item() as u64;
        } else if name == "meta.step" {
            opt.step = t.item() as u64;
        } else if name == "meta.config_sha256" {
            for (k, v) in t.data().iter().enumerate().take(8) {
                meta.config_sha256[4 * k..4 * k + 4].copy_from_slice(&(*v as u32).to_le_bytes());
            }
        }
    }
    Ok((opt, meta))
}

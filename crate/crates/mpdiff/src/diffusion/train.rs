//! Training records, dataset normalization, the conditional training loop,
//! and checkpoint serialization.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_diffuse, AdamState, ArchDescriptor, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::fields::{resize_bilinear, Field2D, Mask2D, VelocityField2D};

const MPD1_MAGIC: &[u8; 4] = b"MPD1";
const CHECKPOINT_VERSION: u32 = 1;

/// Expensive-simulation payload attached to a record, when available.
#[derive(Debug, Clone)]
pub enum C2Data {
    /// Mid-resolution scalar fields (one per target channel or a single one).
    Fields(Vec<Field2D>),
    /// Dense flows for adjacent target-frame pairs.
    Flows(Vec<VelocityField2D>),
}

/// One training example: context states, the target state(s), inexpensive
/// simulator output, and optionally the expensive one.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub id: String,
    pub split: Split,
    pub context: Vec<Field2D>,
    pub target: Vec<Field2D>,
    pub c1: Vec<Field2D>,
    pub c2: Option<C2Data>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Affine map of one channel role onto [−1, 1].
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ChannelNorm {
    pub lo: f64,
    pub hi: f64,
}

impl ChannelNorm {
    pub fn identity() -> Self {
        Self { lo: -1.0, hi: 1.0 }
    }

    fn span(&self) -> f64 {
        if self.hi > self.lo {
            self.hi - self.lo
        } else {
            1.0
        }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        2.0 * (v - self.lo) / self.span() - 1.0
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        (v + 1.0) * 0.5 * self.span() + self.lo
    }

    pub fn normalize_field(&self, f: &Field2D) -> Field2D {
        f.map(|v| self.normalize(v))
    }

    pub fn denormalize_field(&self, f: &Field2D) -> Field2D {
        f.map(|v| self.denormalize(v))
    }
}

/// Normalization recorded with a dataset and its checkpoints: targets,
/// context frames, and scalar c2 fields share the target map; c1 channels
/// carry their own.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetNorm {
    pub target: ChannelNorm,
    pub c1: Vec<ChannelNorm>,
}

impl DatasetNorm {
    /// Min–max over the train-split targets/contexts and per-channel c1.
    pub fn fit(records: &[TrajectoryRecord], c1_channels: usize) -> Self {
        let mut t_lo = f64::INFINITY;
        let mut t_hi = f64::NEG_INFINITY;
        let mut c1_lo = vec![f64::INFINITY; c1_channels];
        let mut c1_hi = vec![f64::NEG_INFINITY; c1_channels];
        for r in records.iter().filter(|r| r.split == Split::Train) {
            for f in r.target.iter().chain(&r.context) {
                t_lo = t_lo.min(f.min());
                t_hi = t_hi.max(f.max());
            }
            for (c, f) in r.c1.iter().enumerate().take(c1_channels) {
                c1_lo[c] = c1_lo[c].min(f.min());
                c1_hi[c] = c1_hi[c].max(f.max());
            }
        }
        let fix = |lo: f64, hi: f64| {
            if lo.is_finite() && hi.is_finite() && hi > lo {
                ChannelNorm { lo, hi }
            } else {
                ChannelNorm::identity()
            }
        };
        DatasetNorm {
            target: fix(t_lo, t_hi),
            c1: c1_lo.into_iter().zip(c1_hi).map(|(lo, hi)| fix(lo, hi)).collect(),
        }
    }
}

/// Context and c1 channels resized to the denoiser grid and normalized.
pub fn prep_conditioning(
    record: &TrajectoryRecord,
    arch: &ArchDescriptor,
    norm: &DatasetNorm,
) -> Result<(Vec<Field2D>, Vec<Field2D>)> {
    if record.context.len() != arch.context_channels {
        return Err(Error::RejectedInput(format!(
            "record {}: expected {} context channels, got {}",
            record.id,
            arch.context_channels,
            record.context.len()
        )));
    }
    let context = record
        .context
        .iter()
        .map(|f| {
            let r = resize_bilinear(f, arch.width, arch.height)?;
            Ok(norm.target.normalize_field(&r))
        })
        .collect::<Result<Vec<_>>>()?;
    if arch.c1_channels > 0 && record.c1.len() != arch.c1_channels {
        return Err(Error::RejectedInput(format!(
            "record {}: expected {} c1 channels, got {}",
            record.id,
            arch.c1_channels,
            record.c1.len()
        )));
    }
    let c1 = if arch.c1_channels == 0 {
        Vec::new()
    } else {
        record
            .c1
            .iter()
            .enumerate()
            .map(|(c, f)| {
                let r = resize_bilinear(f, arch.width, arch.height)?;
                let cn = norm.c1.get(c).copied().unwrap_or_else(ChannelNorm::identity);
                Ok(cn.normalize_field(&r))
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok((context, c1))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub seed: u64,
}

pub struct TrainOutcome {
    pub denoiser: Denoiser,
    /// (global step, per-cell mean loss) for every step taken.
    pub loss_trace: Vec<(u64, f64)>,
}

/// Conditional denoiser training: per step, draw a record, a step `t`, and a
/// noise field; descend the squared noise-prediction error with Adam.
/// Deterministic given the seed.
pub fn train(
    records: &[TrajectoryRecord],
    sched: &NoiseSchedule,
    arch: &ArchDescriptor,
    norm: &DatasetNorm,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut denoiser = Denoiser::seeded(arch.clone(), cfg.seed)?;
    let trace = train_loop(&mut denoiser, records, sched, norm, cfg, 0)?;
    Ok(TrainOutcome { denoiser, loss_trace: trace })
}

/// Continues training an existing denoiser from `start_step`.
pub fn train_loop(
    denoiser: &mut Denoiser,
    records: &[TrajectoryRecord],
    sched: &NoiseSchedule,
    norm: &DatasetNorm,
    cfg: &TrainConfig,
    start_step: u64,
) -> Result<Vec<(u64, f64)>> {
    if records.is_empty() {
        return Err(Error::RejectedInput("training dataset is empty".into()));
    }
    let arch = denoiser.arch().clone();
    if arch.c1_channels > 0 {
        if let Some(bad) = records.iter().find(|r| r.c1.len() != arch.c1_channels) {
            return Err(Error::RejectedInput(format!(
                "record {} lacks the {} required c1 channels",
                bad.id, arch.c1_channels
            )));
        }
    }

    struct Prepped {
        target: Vec<Field2D>,
        context: Vec<Field2D>,
        c1: Vec<Field2D>,
    }
    let prepped: Vec<Prepped> = records
        .iter()
        .map(|r| {
            if r.target.len() != arch.noisy_channels {
                return Err(Error::RejectedInput(format!(
                    "record {}: expected {} target channels, got {}",
                    r.id,
                    arch.noisy_channels,
                    r.target.len()
                )));
            }
            for f in &r.target {
                if f.width() != arch.width || f.height() != arch.height {
                    return Err(Error::RejectedInput(format!(
                        "record {}: target grid mismatch",
                        r.id
                    )));
                }
            }
            let (context, c1) = prep_conditioning(r, &arch, norm)?;
            let target = r.target.iter().map(|f| norm.target.normalize_field(f)).collect();
            Ok(Prepped { target, context, c1 })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(start_step));
    let mut adam = AdamState::new(denoiser.params().len(), cfg.lr);
    let cells = (arch.noisy_channels * arch.width * arch.height) as f64;
    let total = cfg.epochs * cfg.steps_per_epoch;
    let mut trace = Vec::with_capacity(total);
    for step in 0..total {
        let rec = &prepped[rng.gen_range(0..prepped.len())];
        let t = rng.gen_range(1..=sched.steps());
        let mut noisy = Vec::with_capacity(arch.noisy_channels);
        let mut eps = Vec::with_capacity(arch.noisy_channels);
        for ch in rec.target.iter() {
            let e = Field2D::from_fn(arch.width, arch.height, |_, _| rng.sample(StandardNormal));
            noisy.push(forward_diffuse(ch, t, &e, sched)?);
            eps.push(e);
        }
        let (loss, grad) = denoiser.loss_and_grad(&noisy, t, &rec.context, &rec.c1, &eps)?;
        adam.update(denoiser.params_mut(), &grad)?;
        trace.push((start_step + step as u64 + 1, loss / cells));
    }
    Ok(trace)
}

/// Metadata stored in the checkpoint JSON header.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: ArchDescriptor,
    pub norm: DatasetNorm,
    pub train_step: u64,
}

/// Checkpoint layout: magic `MPD1`, u32 LE format version, u32 LE JSON
/// length, JSON metadata, then little-endian f32 parameters.
pub fn save_checkpoint(path: &Path, denoiser: &Denoiser, norm: &DatasetNorm, train_step: u64) -> Result<()> {
    let meta = CheckpointMeta { arch: denoiser.arch().clone(), norm: norm.clone(), train_step };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(12 + json.len() + denoiser.params().len() * 4);
    out.extend_from_slice(MPD1_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in denoiser.params() {
        out.extend_from_slice(&(*p as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Denoiser, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != MPD1_MAGIC {
        return Err(Error::Format(format!("{}: missing MPD1 magic", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + json_len {
        return Err(Error::Format("truncated checkpoint header".into()));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[12..12 + json_len])?;
    let payload = &bytes[12 + json_len..];
    let expect = Denoiser::param_count(&meta.arch);
    if payload.len() != expect * 4 {
        return Err(Error::Format(format!(
            "parameter payload {} bytes, expected {}",
            payload.len(),
            expect * 4
        )));
    }
    let mut params = Vec::with_capacity(expect);
    for chunk in payload.chunks_exact(4) {
        params.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    let mut denoiser = Denoiser::zeros(meta.arch.clone())?;
    denoiser.set_params(params)?;
    Ok((denoiser, meta))
}

/// Derives the spatter-region masks for a record's flow guidance from its
/// c1 melt-pool fields.
pub fn flow_masks(c1: &[Field2D], threshold: f64, width: usize, height: usize) -> Result<Vec<Mask2D>> {
    c1.iter()
        .map(|f| {
            let r = resize_bilinear(f, width, height)?;
            crate::thermal::spatter_mask(&r, threshold)
        })
        .collect()
}

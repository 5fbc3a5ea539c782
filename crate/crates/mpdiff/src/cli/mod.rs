//! The operator surface: dataset generation, training, sampling, evaluation,
//! uncertainty quantification, and the analytic sampling checks, all driven
//! by one JSON config. Every command is reproducible byte-for-byte given the
//! same config and seeds; wall-clock timings live only in run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{
    flow_masks, load_checkpoint, prep_conditioning, save_checkpoint, train_loop, ArchDescriptor,
    C2Data, DatasetNorm, Denoiser, NoiseSchedule, Split, TrainConfig, TrajectoryRecord,
};
use crate::error::{Error, Result};
use crate::fields::{Field2D, VelocityField2D};
use crate::fluidsim::{gen_fluid_dataset, FluidDatasetSpec, FluidTrajectoryInfo};
use crate::io::{read_mpf1, write_mpf1, write_pgm};
use crate::metrics::{aggregate, consistency_score, mse, psnr, ssim, wasserstein_1d, Aggregate, MetricRow};
use crate::sampler::{
    sample_ensemble, sample_run, AnalyticGaussianScore, ConditionedDenoiser, GuidanceModel,
    GuidanceWeight, NoisePredictor, SampleOptions,
};
use crate::thermal::{
    calibrate, gen_thermal_dataset, CalibrateOptions, HeatParams, ThermalClipInfo,
    ThermalDatasetSpec,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Fluid,
    Thermal,
    Theory,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { steps: 200, beta_start: 1e-4, beta_end: 0.1 }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSpec {
    #[serde(default = "default_time_embed")]
    pub time_embed_dim: usize,
}

fn default_time_embed() -> usize {
    32
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self { time_embed_dim: 32 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSpec {
    /// PatchPool temperature (fluid).
    #[serde(default = "default_gamma_patch")]
    pub gamma_patch: f64,
    /// FlowWarp temperature (thermal).
    #[serde(default = "default_gamma_flow")]
    pub gamma_flow: f64,
    #[serde(default)]
    pub weight: GuidanceWeight,
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    #[serde(default = "default_k2")]
    pub pool_k2: usize,
    #[serde(default = "default_k4")]
    pub pool_k4: usize,
    #[serde(default = "default_mask_threshold")]
    pub mask_threshold: f64,
}

fn default_gamma_patch() -> f64 {
    0.01
}
fn default_gamma_flow() -> f64 {
    0.05
}
fn default_clip() -> Option<f64> {
    Some(10.0)
}
fn default_k2() -> usize {
    1
}
fn default_k4() -> usize {
    2
}
fn default_mask_threshold() -> f64 {
    0.15
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            gamma_patch: default_gamma_patch(),
            gamma_flow: default_gamma_flow(),
            weight: GuidanceWeight::default(),
            clip_norm: default_clip(),
            pool_k2: default_k2(),
            pool_k4: default_k4(),
            mask_threshold: default_mask_threshold(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSpec {
    pub seed: u64,
    /// Clamp the implied denoised estimate to the normalized data range
    /// during model-based sampling.
    #[serde(default = "default_true")]
    pub clamp_denoised: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    #[serde(default = "default_ensemble")]
    pub size: usize,
    pub base_seed: u64,
}

fn default_ensemble() -> usize {
    40
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySpec {
    #[serde(default = "default_chains")]
    pub chains: usize,
    #[serde(default = "default_mu")]
    pub target_mu: f64,
    #[serde(default = "default_sigma")]
    pub target_sigma: f64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    pub seed: u64,
}

fn default_chains() -> usize {
    10_000
}
fn default_mu() -> f64 {
    0.5
}
fn default_sigma() -> f64 {
    0.7
}
fn default_threshold() -> f64 {
    0.05
}

/// The one config file all commands read.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub denoiser: DenoiserSpec,
    #[serde(default)]
    pub fluid: Option<FluidDatasetSpec>,
    #[serde(default)]
    pub thermal: Option<ThermalDatasetSpec>,
    #[serde(default)]
    pub training: Option<TrainingSpec>,
    #[serde(default)]
    pub guidance: GuidanceSpec,
    #[serde(default)]
    pub sampling: Option<SamplingSpec>,
    #[serde(default)]
    pub ensemble: Option<EnsembleSpec>,
    #[serde(default)]
    pub theory: Option<TheorySpec>,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(path)?;
        let cfg: ExperimentConfig = serde_json::from_slice(&bytes)?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::RejectedInput(format!(
                "unsupported schema version {}",
                cfg.schema_version
            )));
        }
        Ok((cfg, hex_digest(&bytes)))
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.out_dir.join("dataset")
    }

    fn training(&self) -> Result<&TrainingSpec> {
        self.training.as_ref().ok_or_else(|| Error::RejectedInput("config lacks `training`".into()))
    }

    fn sampling(&self) -> Result<&SamplingSpec> {
        self.sampling.as_ref().ok_or_else(|| Error::RejectedInput("config lacks `sampling`".into()))
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Stable id → seed offset so per-record sampling seeds survive reordering.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Run manifest written next to every command's outputs. Timings are the only
/// non-reproducible content, and they live nowhere else.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub command: String,
    pub timings_ms: BTreeMap<String, u128>,
    pub digests: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(config_hash: &str, command: &str) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            timings_ms: BTreeMap::new(),
            digests: BTreeMap::new(),
        }
    }

    fn digest_file(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path)?;
        self.digests.insert(path.file_name().unwrap().to_string_lossy().into_owned(), hex_digest(&bytes));
        Ok(())
    }

    fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordFiles {
    pub context: String,
    pub target: String,
    pub c1: String,
    pub c2_fields: Option<String>,
    pub c2_flows: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordEntry {
    pub id: String,
    pub split: Split,
    pub files: RecordFiles,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThermalIndexExtra {
    pub spec: ThermalDatasetSpec,
    pub phi_calibrated: HeatParams,
    pub clips: Vec<ThermalClipInfo>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    pub norm: DatasetNorm,
    pub fluid: Option<FluidIndexExtra>,
    pub thermal: Option<ThermalIndexExtra>,
    pub records: Vec<RecordEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FluidIndexExtra {
    pub spec: FluidDatasetSpec,
    pub trajectories: Vec<FluidTrajectoryInfo>,
}

fn write_record_files(dir: &Path, rec: &TrajectoryRecord) -> Result<RecordFiles> {
    let ctx = format!("{}_context.mpf1", rec.id);
    let tgt = format!("{}_target.mpf1", rec.id);
    let c1 = format!("{}_c1.mpf1", rec.id);
    write_mpf1(&dir.join(&ctx), &rec.context)?;
    write_mpf1(&dir.join(&tgt), &rec.target)?;
    write_mpf1(&dir.join(&c1), &rec.c1)?;
    let mut files = RecordFiles { context: ctx, target: tgt, c1, c2_fields: None, c2_flows: None };
    match &rec.c2 {
        Some(C2Data::Fields(fields)) => {
            let name = format!("{}_c2.mpf1", rec.id);
            write_mpf1(&dir.join(&name), fields)?;
            files.c2_fields = Some(name);
        }
        Some(C2Data::Flows(flows)) => {
            let name = format!("{}_c2flow.mpf1", rec.id);
            let mut channels = Vec::with_capacity(flows.len() * 2);
            for f in flows {
                channels.push(f.vx.clone());
                channels.push(f.vy.clone());
            }
            write_mpf1(&dir.join(&name), &channels)?;
            files.c2_flows = Some(name);
        }
        None => {}
    }
    Ok(files)
}

fn read_record(dir: &Path, entry: &RecordEntry) -> Result<TrajectoryRecord> {
    let context = read_mpf1(&dir.join(&entry.files.context))?;
    let target = read_mpf1(&dir.join(&entry.files.target))?;
    let c1 = read_mpf1(&dir.join(&entry.files.c1))?;
    let c2 = if let Some(name) = &entry.files.c2_fields {
        Some(C2Data::Fields(read_mpf1(&dir.join(name))?))
    } else if let Some(name) = &entry.files.c2_flows {
        let channels = read_mpf1(&dir.join(name))?;
        if channels.len() % 2 != 0 {
            return Err(Error::Format(format!("{name}: flow channels must pair up")));
        }
        let flows = channels
            .chunks_exact(2)
            .map(|pair| VelocityField2D::new(pair[0].clone(), pair[1].clone()))
            .collect::<Result<Vec<_>>>()?;
        Some(C2Data::Flows(flows))
    } else {
        None
    };
    Ok(TrajectoryRecord { id: entry.id.clone(), split: entry.split, context, target, c1, c2 })
}

pub fn load_dataset(dir: &Path) -> Result<(Vec<TrajectoryRecord>, DatasetIndex)> {
    let index_path = dir.join("index.json");
    let index: DatasetIndex = serde_json::from_slice(&fs::read(&index_path)?)?;
    let records = index
        .records
        .iter()
        .map(|e| read_record(dir, e))
        .collect::<Result<Vec<_>>>()?;
    Ok((records, index))
}

/// `gen-data`: runs the configured generator, writes one MPF1 file per field
/// per record plus `index.json` and a manifest.
pub fn cmd_gen_data(cfg: &ExperimentConfig, config_hash: &str) -> Result<PathBuf> {
    let dir = cfg.dataset_dir();
    fs::create_dir_all(&dir)?;
    let mut manifest = RunManifest::new(config_hash, "gen-data");
    let start = Instant::now();
    let index = match cfg.kind {
        ExperimentKind::Fluid => {
            let spec = cfg
                .fluid
                .clone()
                .ok_or_else(|| Error::RejectedInput("fluid config section required".into()))?;
            let (records, infos) = gen_fluid_dataset(&spec)?;
            let norm = DatasetNorm::fit(&records, 2);
            let mut entries = Vec::with_capacity(records.len());
            for rec in &records {
                entries.push(RecordEntry {
                    id: rec.id.clone(),
                    split: rec.split,
                    files: write_record_files(&dir, rec)?,
                });
            }
            DatasetIndex {
                schema_version: SCHEMA_VERSION,
                kind: cfg.kind,
                norm,
                fluid: Some(FluidIndexExtra { spec, trajectories: infos }),
                thermal: None,
                records: entries,
            }
        }
        ExperimentKind::Thermal => {
            let spec = cfg
                .thermal
                .clone()
                .ok_or_else(|| Error::RejectedInput("thermal config section required".into()))?;
            // calibrate the melt-pool parameters on the first clip's frames
            // before computing c1 with them
            let (clip_records, infos_probe) = gen_thermal_dataset(
                &ThermalDatasetSpec { n_clips: 1, ..spec.clone() },
                &spec.phi_true,
            )?;
            let probe = &clip_records[0];
            let times = &infos_probe[0].frame_times;
            let t0 = spec.frames_per_clip - spec.target_frames;
            let obs: Vec<(f64, Field2D)> = probe
                .context
                .iter()
                .cloned()
                .zip(times.iter().copied())
                .map(|(f, s)| (s, f))
                .chain(
                    probe
                        .target
                        .iter()
                        .cloned()
                        .zip(times[t0..].iter().copied())
                        .map(|(f, s)| (s, f)),
                )
                .collect();
            let phi0 = HeatParams { rho: 1.0, kappa_x: 0.006, kappa_y: 0.006, c_n: 0.03 };
            let calib = calibrate(
                &obs,
                &infos_probe[0].path,
                &spec.grid,
                &phi0,
                &CalibrateOptions {
                    quad_step: spec.delta_s / crate::thermal::QUAD_STEPS_PER_FRAME as f64,
                    ..Default::default()
                },
            )?;
            let (records, infos) = gen_thermal_dataset(&spec, &calib.params)?;
            let norm = DatasetNorm::fit(&records, spec.target_frames);
            let mut entries = Vec::with_capacity(records.len());
            for rec in &records {
                entries.push(RecordEntry {
                    id: rec.id.clone(),
                    split: rec.split,
                    files: write_record_files(&dir, rec)?,
                });
            }
            DatasetIndex {
                schema_version: SCHEMA_VERSION,
                kind: cfg.kind,
                norm,
                fluid: None,
                thermal: Some(ThermalIndexExtra {
                    spec,
                    phi_calibrated: calib.params,
                    clips: infos,
                }),
                records: entries,
            }
        }
        ExperimentKind::Theory => {
            return Err(Error::RejectedInput("theory configs have no dataset".into()))
        }
    };
    let index_path = dir.join("index.json");
    fs::write(&index_path, serde_json::to_vec_pretty(&index)?)?;
    manifest.timings_ms.insert("gen".into(), start.elapsed().as_millis());
    for entry in &index.records {
        manifest.digest_file(&dir.join(&entry.files.target))?;
    }
    manifest.digest_file(&index_path)?;
    manifest.write(&dir.join("manifest_gen.json"))?;
    Ok(dir)
}

/// Method tags mirroring the three-way comparison: plain diffusion, cheap
/// conditioning, expensive guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodTag {
    SDdim,
    C1,
    C2,
}

impl MethodTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            MethodTag::SDdim => "s-ddim",
            MethodTag::C1 => "c1",
            MethodTag::C2 => "c2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "s-ddim" => Ok(MethodTag::SDdim),
            "c1" => Ok(MethodTag::C1),
            "c2" => Ok(MethodTag::C2),
            other => Err(Error::RejectedInput(format!("unknown method tag {other}"))),
        }
    }
}

fn arch_for(cfg: &ExperimentConfig, index: &DatasetIndex, with_c1: bool) -> Result<ArchDescriptor> {
    let arch = match cfg.kind {
        ExperimentKind::Fluid => {
            let spec = &index
                .fluid
                .as_ref()
                .ok_or_else(|| Error::RejectedInput("dataset is not a fluid dataset".into()))?
                .spec;
            ArchDescriptor {
                noisy_channels: 1,
                context_channels: 1,
                c1_channels: if with_c1 { 2 } else { 0 },
                width: spec.fine,
                height: spec.fine,
                time_embed_dim: cfg.denoiser.time_embed_dim,
            }
        }
        ExperimentKind::Thermal => {
            let spec = &index
                .thermal
                .as_ref()
                .ok_or_else(|| Error::RejectedInput("dataset is not a thermal dataset".into()))?
                .spec;
            ArchDescriptor {
                noisy_channels: spec.target_frames,
                context_channels: spec.context_frames,
                c1_channels: if with_c1 { spec.target_frames } else { 0 },
                width: spec.grid.width,
                height: spec.grid.height,
                time_embed_dim: cfg.denoiser.time_embed_dim,
            }
        }
        ExperimentKind::Theory => {
            return Err(Error::RejectedInput("theory configs have no denoiser".into()))
        }
    };
    arch.validate()?;
    Ok(arch)
}

/// `train`: fits the denoiser on the train split and writes a checkpoint,
/// the per-step loss CSV, and a manifest. `method` selects whether the c1
/// channels are wired in; resuming continues the step counter.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    config_hash: &str,
    method: MethodTag,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    if method == MethodTag::C2 {
        return Err(Error::RejectedInput(
            "expensive guidance has no trained model; train s-ddim or c1".into(),
        ));
    }
    let (records, index) = load_dataset(&cfg.dataset_dir())?;
    let train_records: Vec<TrajectoryRecord> =
        records.into_iter().filter(|r| r.split == Split::Train).collect();
    let spec = cfg.training()?;
    let sched = cfg.schedule.build()?;
    let dir = cfg.out_dir.join("train");
    fs::create_dir_all(&dir)?;

    let (mut denoiser, start_step) = match resume {
        Some(path) => {
            let (d, meta) = load_checkpoint(path)?;
            (d, meta.train_step)
        }
        None => {
            let arch = arch_for(cfg, &index, method == MethodTag::C1)?;
            (Denoiser::seeded(arch, spec.seed)?, 0)
        }
    };
    let tc = TrainConfig {
        epochs: spec.epochs,
        steps_per_epoch: spec.steps_per_epoch,
        lr: spec.lr,
        seed: spec.seed,
    };
    let mut manifest = RunManifest::new(config_hash, "train");
    let start = Instant::now();
    let trace = train_loop(&mut denoiser, &train_records, &sched, &index.norm, &tc, start_step)?;
    manifest.timings_ms.insert("train".into(), start.elapsed().as_millis());

    let ck_path = dir.join(format!("checkpoint_{}.mpd1", method.as_str()));
    let final_step = trace.last().map(|(s, _)| *s).unwrap_or(start_step);
    save_checkpoint(&ck_path, &denoiser, &index.norm, final_step)?;
    let csv_path = dir.join(format!("loss_{}.csv", method.as_str()));
    let mut csv = String::from("step,loss\n");
    for (step, loss) in &trace {
        csv.push_str(&format!("{step},{loss}\n"));
    }
    fs::write(&csv_path, csv)?;
    manifest.digest_file(&ck_path)?;
    manifest.digest_file(&csv_path)?;
    manifest.write(&dir.join(format!("manifest_train_{}.json", method.as_str())))?;
    Ok(ck_path)
}

fn method_for(choice: u8, arch: &ArchDescriptor) -> MethodTag {
    if choice == 2 {
        MethodTag::C2
    } else if arch.c1_channels > 0 {
        MethodTag::C1
    } else {
        MethodTag::SDdim
    }
}

/// Builds the guidance model for one record, normalized consistently with
/// the denoiser inputs.
fn guidance_for_record(
    cfg: &ExperimentConfig,
    index: &DatasetIndex,
    record: &TrajectoryRecord,
    arch: &ArchDescriptor,
) -> Result<GuidanceModel> {
    match (&record.c2, cfg.kind) {
        (Some(C2Data::Fields(fields)), ExperimentKind::Fluid) => Ok(GuidanceModel::PatchPool {
            c2: fields.iter().map(|f| index.norm.target.normalize_field(f)).collect(),
            k2: cfg.guidance.pool_k2,
            k4: cfg.guidance.pool_k4,
            gamma: cfg.guidance.gamma_patch,
        }),
        (Some(C2Data::Flows(flows)), ExperimentKind::Thermal) => {
            // masks come from the PDE melt-pool solution for the destination
            // frame of each pair (channels 1..)
            let masks = flow_masks(
                &record.c1[1..],
                cfg.guidance.mask_threshold,
                arch.width,
                arch.height,
            )?;
            Ok(GuidanceModel::FlowWarp {
                flows: flows.clone(),
                masks,
                prev: None,
                delta_s: 1.0,
                gamma: cfg.guidance.gamma_flow,
            })
        }
        (None, _) => Err(Error::UnavailableSimulation(format!(
            "record {} has no expensive-simulation output",
            record.id
        ))),
        _ => Err(Error::RejectedInput("c2 payload does not match experiment kind".into())),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRunManifest {
    pub id: String,
    pub method: String,
    pub choice: u8,
    pub seed: u64,
    pub gamma: f64,
    pub weight_form: GuidanceWeight,
    pub clip_norm: Option<f64>,
    pub schedule_digest: String,
}

/// `sample`: reverse-samples the requested records. Choice 2 demands the
/// record's expensive output and never falls back to choice 1.
#[allow(clippy::too_many_arguments)]
pub fn cmd_sample(
    cfg: &ExperimentConfig,
    config_hash: &str,
    checkpoint: &Path,
    choice: u8,
    ids: &[String],
    out_override: Option<&Path>,
    dump_trajectory: bool,
) -> Result<Vec<PathBuf>> {
    if !(choice == 1 || choice == 2) {
        return Err(Error::RejectedInput(format!("choice must be 1 or 2, got {choice}")));
    }
    let (denoiser, meta) = load_checkpoint(checkpoint)?;
    let (records, index) = load_dataset(&cfg.dataset_dir())?;
    let sched = cfg.schedule.build()?;
    let sampling = cfg.sampling()?;
    let base_seed = sampling.seed;
    let dir = out_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join("samples"));
    fs::create_dir_all(&dir)?;
    let arch = denoiser.arch().clone();
    let tag = method_for(choice, &arch);

    let chosen: Vec<&TrajectoryRecord> = if ids.is_empty() {
        records.iter().filter(|r| r.split == Split::Test).collect()
    } else {
        ids.iter()
            .map(|id| {
                records
                    .iter()
                    .find(|r| &r.id == id)
                    .ok_or_else(|| Error::RejectedInput(format!("unknown record id {id}")))
            })
            .collect::<Result<Vec<_>>>()?
    };

    let mut manifest = RunManifest::new(config_hash, "sample");
    let start = Instant::now();
    let opts = SampleOptions {
        weight: cfg.guidance.weight,
        clip_norm: cfg.guidance.clip_norm,
        denoised_clamp: sampling.clamp_denoised.then_some((-1.0, 1.0)),
        retain_trajectory: dump_trajectory,
    };
    let mut outputs = Vec::new();
    for record in chosen {
        let (context, c1) = prep_conditioning(record, &arch, &meta.norm)?;
        let predictor = ConditionedDenoiser { denoiser: &denoiser, context, c1 };
        let model = if choice == 2 {
            Some(guidance_for_record(cfg, &index, record, &arch)?)
        } else {
            None
        };
        let seed = base_seed ^ fnv1a(&record.id);
        let run = sample_run(
            &predictor,
            model.as_ref(),
            &opts,
            &sched,
            arch.width,
            arch.height,
            arch.noisy_channels,
            seed,
        )?;
        let denorm: Vec<Field2D> =
            run.x0.iter().map(|f| meta.norm.target.denormalize_field(f)).collect();
        let sample_path = dir.join(format!("sample_{}_{}.mpf1", record.id, tag.as_str()));
        write_mpf1(&sample_path, &denorm)?;
        for (c, f) in denorm.iter().enumerate() {
            write_pgm(&dir.join(format!("sample_{}_{}_ch{c}.pgm", record.id, tag.as_str())), f)?;
        }
        if let Some(traj) = &run.trajectory {
            let flat: Vec<Field2D> = traj.iter().flat_map(|step| step.iter().cloned()).collect();
            write_mpf1(
                &dir.join(format!("trajectory_{}_{}.mpf1", record.id, tag.as_str())),
                &flat,
            )?;
        }
        let run_manifest = SampleRunManifest {
            id: record.id.clone(),
            method: tag.as_str().to_string(),
            choice,
            seed,
            gamma: match cfg.kind {
                ExperimentKind::Fluid => cfg.guidance.gamma_patch,
                _ => cfg.guidance.gamma_flow,
            },
            weight_form: cfg.guidance.weight,
            clip_norm: cfg.guidance.clip_norm,
            schedule_digest: sched.digest(),
        };
        fs::write(
            dir.join(format!("run_{}_{}.json", record.id, tag.as_str())),
            serde_json::to_vec_pretty(&run_manifest)?,
        )?;
        manifest.digest_file(&sample_path)?;
        outputs.push(sample_path);
    }
    manifest.timings_ms.insert("sample".into(), start.elapsed().as_millis());
    manifest.write(&dir.join(format!("manifest_sample_{}.json", tag.as_str())))?;
    Ok(outputs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub mse: Aggregate,
    pub psnr: Aggregate,
    pub ssim: Aggregate,
    pub consistency: Option<Aggregate>,
    /// Perceptual metric deliberately absent (needs a pretrained network).
    pub lpips: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub methods: BTreeMap<String, MethodSummary>,
    /// Set when all three methods are present and mean MSE satisfies
    /// c2 <= c1 <= s-ddim.
    pub mse_ordering_holds: Option<bool>,
}

/// `evaluate`: scores every sample in the directory against its ground-truth
/// record, grouped by the method tag embedded in the file name.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    config_hash: &str,
    samples_dir: Option<&Path>,
    dataset_dir: Option<&Path>,
) -> Result<(PathBuf, EvalSummary)> {
    let samples_dir =
        samples_dir.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join("samples"));
    let dataset_dir = dataset_dir.map(Path::to_path_buf).unwrap_or_else(|| cfg.dataset_dir());
    let (records, index) = load_dataset(&dataset_dir)?;
    let dir = cfg.out_dir.join("eval");
    fs::create_dir_all(&dir)?;

    let mut names: Vec<String> = fs::read_dir(&samples_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("sample_") && n.ends_with(".mpf1"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::RejectedInput(format!(
            "no sample files under {}",
            samples_dir.display()
        )));
    }

    let span = index.norm.target.hi - index.norm.target.lo;
    let to_unit = |f: &Field2D| {
        let lo = index.norm.target.lo;
        f.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
    };

    let mut rows: Vec<MetricRow> = Vec::new();
    for name in &names {
        let stem = name.trim_start_matches("sample_").trim_end_matches(".mpf1");
        let (id, tag) = stem
            .rsplit_once('_')
            .ok_or_else(|| Error::RejectedInput(format!("unparseable sample name {name}")))?;
        MethodTag::parse(tag)?;
        let record = records
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::RejectedInput(format!("sample {id} has no dataset record")))?;
        let sample = read_mpf1(&samples_dir.join(name))?;
        if sample.len() != record.target.len() {
            return Err(Error::RejectedInput(format!("sample {id}: channel count mismatch")));
        }
        let mut mse_acc = 0.0;
        let mut psnr_acc = 0.0;
        let mut ssim_acc = 0.0;
        for (s, t) in sample.iter().zip(&record.target) {
            mse_acc += mse(s, t)?;
            psnr_acc += psnr(s, t, span)?;
            ssim_acc += ssim(&to_unit(s), &to_unit(t))?;
        }
        let n = sample.len() as f64;
        let consistency = match (&record.c2, cfg.kind) {
            (Some(C2Data::Flows(flows)), ExperimentKind::Thermal) => {
                let masks = flow_masks(
                    &record.c1[1..],
                    cfg.guidance.mask_threshold,
                    sample[0].width(),
                    sample[0].height(),
                )?;
                Some(consistency_score(&sample, flows, &masks)?)
            }
            _ => None,
        };
        rows.push(MetricRow {
            id: id.to_string(),
            method: tag.to_string(),
            split: match record.split {
                Split::Train => "train".into(),
                Split::Test => "test".into(),
            },
            mse: mse_acc / n,
            psnr: psnr_acc / n,
            ssim: ssim_acc / n,
            consistency,
        });
    }

    rows.sort_by_key(|r| (r.method.clone(), r.id.clone()));
    let mut csv = String::from("id,method,split,mse,psnr,ssim,consistency,lpips\n");
    for r in &rows {
        let cons = r.consistency.map(|c| c.to_string()).unwrap_or_else(|| "na".into());
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},unavailable\n",
            r.id, r.method, r.split, r.mse, r.psnr, r.ssim, cons
        ));
    }

    let mut methods = BTreeMap::new();
    for tag in ["s-ddim", "c1", "c2"] {
        let group: Vec<&MetricRow> = rows.iter().filter(|r| r.method == tag).collect();
        if group.is_empty() {
            continue;
        }
        let collect = |f: &dyn Fn(&MetricRow) -> f64| -> Vec<f64> { group.iter().map(|r| f(r)).collect() };
        let mse_agg = aggregate(&collect(&|r| r.mse));
        let consistency = if group.iter().all(|r| r.consistency.is_some()) {
            Some(aggregate(&group.iter().map(|r| r.consistency.unwrap()).collect::<Vec<_>>()))
        } else {
            None
        };
        csv.push_str(&format!(
            "aggregate,{},test,{},{},{},{},unavailable\n",
            tag,
            mse_agg.mean,
            aggregate(&collect(&|r| r.psnr)).mean,
            aggregate(&collect(&|r| r.ssim)).mean,
            consistency.as_ref().map(|a| a.mean.to_string()).unwrap_or_else(|| "na".into()),
        ));
        methods.insert(
            tag.to_string(),
            MethodSummary {
                mse: mse_agg,
                psnr: aggregate(&collect(&|r| r.psnr)),
                ssim: aggregate(&collect(&|r| r.ssim)),
                consistency,
                lpips: "unavailable".into(),
            },
        );
    }
    let mse_ordering_holds = match (methods.get("c2"), methods.get("c1"), methods.get("s-ddim")) {
        (Some(c2), Some(c1), Some(sd)) => {
            Some(c2.mse.mean <= c1.mse.mean && c1.mse.mean <= sd.mse.mean)
        }
        _ => None,
    };
    let summary = EvalSummary { methods, mse_ordering_holds };

    let csv_path = dir.join("report.csv");
    fs::write(&csv_path, csv)?;
    let json_path = dir.join("summary.json");
    fs::write(&json_path, serde_json::to_vec_pretty(&summary)?)?;
    let mut manifest = RunManifest::new(config_hash, "evaluate");
    manifest.digest_file(&csv_path)?;
    manifest.digest_file(&json_path)?;
    manifest.write(&dir.join("manifest_eval.json"))?;
    Ok((csv_path, summary))
}

/// `uq`: seeded ensemble for one record; emits per-cell mean and standard
/// deviation fields.
pub fn cmd_uq(
    cfg: &ExperimentConfig,
    config_hash: &str,
    checkpoint: &Path,
    id: &str,
    choice: u8,
) -> Result<(PathBuf, PathBuf)> {
    let (denoiser, meta) = load_checkpoint(checkpoint)?;
    let (records, index) = load_dataset(&cfg.dataset_dir())?;
    let record = records
        .iter()
        .find(|r| r.id == id)
        .ok_or_else(|| Error::RejectedInput(format!("unknown record id {id}")))?;
    let ens = cfg
        .ensemble
        .as_ref()
        .ok_or_else(|| Error::RejectedInput("config lacks `ensemble`".into()))?;
    let sched = cfg.schedule.build()?;
    let arch = denoiser.arch().clone();
    let tag = method_for(choice, &arch);
    let (context, c1) = prep_conditioning(record, &arch, &meta.norm)?;
    let predictor = ConditionedDenoiser { denoiser: &denoiser, context, c1 };
    let model = if choice == 2 {
        Some(guidance_for_record(cfg, &index, record, &arch)?)
    } else {
        None
    };
    let opts = SampleOptions {
        weight: cfg.guidance.weight,
        clip_norm: cfg.guidance.clip_norm,
        denoised_clamp: cfg
            .sampling
            .as_ref()
            .map(|s| s.clamp_denoised)
            .unwrap_or(true)
            .then_some((-1.0, 1.0)),
        retain_trajectory: false,
    };
    let dir = cfg.out_dir.join("uq");
    fs::create_dir_all(&dir)?;
    let mut manifest = RunManifest::new(config_hash, "uq");
    let start = Instant::now();
    let ensemble = sample_ensemble(
        ens.size,
        &predictor,
        model.as_ref(),
        &opts,
        &sched,
        arch.width,
        arch.height,
        arch.noisy_channels,
        ens.base_seed ^ fnv1a(id),
    )?;
    manifest.timings_ms.insert("ensemble".into(), start.elapsed().as_millis());
    // mean in raw units; std only rescales by the span
    let mean: Vec<Field2D> =
        ensemble.mean.iter().map(|f| meta.norm.target.denormalize_field(f)).collect();
    let half_span = (meta.norm.target.hi - meta.norm.target.lo) * 0.5;
    let std: Vec<Field2D> = ensemble.std.iter().map(|f| f.scaled(half_span)).collect();
    let mean_path = dir.join(format!("uq_{}_{}_mean.mpf1", id, tag.as_str()));
    let std_path = dir.join(format!("uq_{}_{}_std.mpf1", id, tag.as_str()));
    write_mpf1(&mean_path, &mean)?;
    write_mpf1(&std_path, &std)?;
    write_pgm(&dir.join(format!("uq_{}_{}_mean.pgm", id, tag.as_str())), &mean[0])?;
    write_pgm(&dir.join(format!("uq_{}_{}_std.pgm", id, tag.as_str())), &std[0])?;
    manifest.digest_file(&mean_path)?;
    manifest.digest_file(&std_path)?;
    manifest.write(&dir.join(format!("manifest_uq_{}_{}.json", id, tag.as_str())))?;
    Ok((mean_path, std_path))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryCheckResult {
    pub name: String,
    pub w2: f64,
    pub threshold: f64,
    pub expect_within: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryReport {
    pub checks: Vec<TheoryCheckResult>,
    pub all_pass: bool,
}

/// W2 of a sample set against an analytic Gaussian via quantiles at
/// `(i+0.5)/n`.
pub fn w2_to_gaussian(samples: &[f64], mu: f64, sigma: f64) -> Result<f64> {
    use statrs::distribution::{ContinuousCDF, Normal};
    let n = samples.len();
    let normal = Normal::new(mu, sigma)
        .map_err(|e| Error::RejectedInput(format!("bad gaussian target: {e}")))?;
    let reference: Vec<f64> =
        (0..n).map(|i| normal.inverse_cdf((i as f64 + 0.5) / n as f64)).collect();
    wasserstein_1d(samples, &reference)
}

fn run_chains(
    predictor: &dyn NoisePredictor,
    model: Option<&GuidanceModel>,
    opts: &SampleOptions,
    sched: &NoiseSchedule,
    chains: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    (0..chains)
        .into_par_iter()
        .map(|i| {
            sample_run(predictor, model, opts, sched, 1, 1, 1, seed.wrapping_add(i as u64))
                .map(|r| r.x0[0].get(0, 0))
        })
        .collect()
}

/// `theory-check`: the two analytic sampling checks plus corrupted-score
/// controls, reported as pass/fail lines and a JSON report.
pub fn cmd_theory_check(cfg: &ExperimentConfig, config_hash: &str) -> Result<TheoryReport> {
    let spec = cfg
        .theory
        .clone()
        .ok_or_else(|| Error::RejectedInput("config lacks `theory`".into()))?;
    let sched = cfg.schedule.build()?;
    let mut checks = Vec::new();

    // choice 1: exact score of N(mu, sigma^2)
    let plain_opts = SampleOptions::default();
    for (name, scale, expect_within) in [
        ("choice1-exact-score", 1.0, true),
        ("choice1-corrupted-score", 2.0, false),
    ] {
        let oracle = AnalyticGaussianScore {
            mu: spec.target_mu,
            sigma: spec.target_sigma,
            scale,
            sched: sched.clone(),
        };
        let samples = run_chains(&oracle, None, &plain_opts, &sched, spec.chains, spec.seed)?;
        let w2 = w2_to_gaussian(&samples, spec.target_mu, spec.target_sigma)?;
        let pass = if expect_within { w2 <= spec.threshold } else { w2 > spec.threshold };
        checks.push(TheoryCheckResult {
            name: name.into(),
            w2,
            threshold: spec.threshold,
            expect_within,
            pass,
        });
    }

    // choice 2: exact prior score N(0,1) + conjugate observation c2 = 1 with
    // unit observation noise → posterior N(0.5, 0.5)
    let guided_opts = SampleOptions {
        weight: GuidanceWeight::DdimConsistent,
        clip_norm: None,
        denoised_clamp: None,
        retain_trajectory: false,
    };
    let model = GuidanceModel::GaussianConjugate {
        c2: vec![Field2D::constant(1, 1, 1.0)],
        sigma_sq: 1.0,
        noise_aware: true,
    };
    for (name, scale, expect_within) in [
        ("choice2-exact-posterior", 1.0, true),
        ("choice2-corrupted-score", 2.0, false),
    ] {
        let prior =
            AnalyticGaussianScore { mu: 0.0, sigma: 1.0, scale, sched: sched.clone() };
        let samples = run_chains(
            &prior,
            Some(&model),
            &guided_opts,
            &sched,
            spec.chains,
            spec.seed.wrapping_add(0x5eed),
        )?;
        let w2 = w2_to_gaussian(&samples, 0.5, 0.5f64.sqrt())?;
        let pass = if expect_within { w2 <= spec.threshold } else { w2 > spec.threshold };
        checks.push(TheoryCheckResult {
            name: name.into(),
            w2,
            threshold: spec.threshold,
            expect_within,
            pass,
        });
    }

    let all_pass = checks.iter().all(|c| c.pass);
    let report = TheoryReport { checks, all_pass };
    let dir = cfg.out_dir.join("theory");
    fs::create_dir_all(&dir)?;
    let path = dir.join("theory_report.json");
    fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
    let mut manifest = RunManifest::new(config_hash, "theory-check");
    manifest.digest_file(&path)?;
    manifest.write(&dir.join("manifest_theory.json"))?;
    Ok(report)
}

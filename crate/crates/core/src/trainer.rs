//! Two-stage adversarial distillation.
//!
//! Stage 1 trains the generator through the image-space branch against a
//! pose-conditioned critic on cached prior samples. Stage 2 bakes the
//! image-space upsampler into the 3D upsampler: patches of the volumetric
//! render are pulled toward the matching crop of the (constant) image-space
//! render and scored by a pose-free patch critic.
//!
//! Every random draw of iteration `k` of stage `s` is keyed by
//! `(seed, s, k)`, so a run resumed from a checkpoint replays the
//! uninterrupted one exactly.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{ada_update, augment, augment_backward, AdaState, AugmentConfig};
use crate::cache::{to_json, write_atomic, SampleCache};
use crate::camera::{relative_pose, CameraPose};
use crate::discriminator::{Critic, Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, GROUP_MAPPING, GROUP_SYNTHESIS, GROUP_UPSAMPLER2D, GROUP_UPSAMPLER3D};
use crate::image::{contact_sheet, write_png, FeatureMap};
use crate::losses::{consistency_loss, d_loss, g_loss, LossConvention, LossWeights};
use crate::optim::{Adam, AdamConfig};
use crate::perceptual::{PerceptualDistance, RandomPyramid};
use crate::pipeline::{
    render_2d, render_2d_backward, render_2d_from_triplane, render_2d_traced, render_3d, render_3d_backward,
    render_3d_window_traced, GradSinks,
};
use crate::render::{RenderConfig, Window};
use crate::rng::{derive, rng_for, stream};

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const SAMPLE_DIR: &str = "samples";
/// Name of the field decoder in [`Stage2Config::trainable`].
pub const DECODER_GROUP: &str = "decoder";
const FORMAT_VERSION: u32 = 1;

const REFERENCE_STAGE1: &str = include_str!("../../../configs/reference-stage1.json");
const REFERENCE_STAGE2: &str = include_str!("../../../configs/reference-stage2.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaConfig {
    pub enabled: bool,
    pub target_rt: f64,
    pub adjustment_step: f64,
    /// Iterations between probability updates.
    pub interval: u64,
    pub augment: AugmentConfig,
}

impl Default for AdaConfig {
    fn default() -> Self {
        let s = AdaState::default();
        Self {
            enabled: true,
            target_rt: s.target_rt,
            adjustment_step: s.adjustment_step,
            interval: 4,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub patch_size: usize,
    /// Generator groups updated in stage 2, by parameter prefix; the field
    /// decoder is named [`DECODER_GROUP`]. The main critic stays frozen.
    pub trainable: Vec<String>,
    /// Fixed latents whose consistency loss is tracked across the stage.
    pub probe_latents: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            patch_size: 64,
            trainable: vec![GROUP_UPSAMPLER3D.into(), DECODER_GROUP.into()],
            probe_latents: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub log_interval: u64,
    /// Not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
    pub convention: LossConvention,
    /// `r1_weight` is `γ`.
    pub weights: LossWeights,
    pub ada: AdaConfig,
    pub image_resolution: usize,
    pub generator: GeneratorConfig,
    pub render: RenderConfig,
    pub discriminator: DiscriminatorConfig,
    pub patch_discriminator: DiscriminatorConfig,
    pub stage2: Stage2Config,
}

impl TrainConfig {
    /// The pinned desk-scale configuration of a stage.
    pub fn reference(stage: u8) -> Self {
        let text = if stage == 2 { REFERENCE_STAGE2 } else { REFERENCE_STAGE1 };
        serde_json::from_str(text).expect("embedded reference config parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::json("training config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !matches!(self.stage, 1 | 2) {
            return bad(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if self.batch_size == 0 || self.log_interval == 0 || self.checkpoint_interval == 0 || self.ada.interval == 0 {
            return bad("batch_size and all intervals must be ≥ 1".into());
        }
        if ![self.lr_g, self.lr_d].iter().all(|v| v.is_finite() && *v > 0.0) {
            return bad("learning rates must be finite and positive".into());
        }
        self.weights.validate()?;
        self.generator.validate()?;
        self.render.validate()?;
        self.discriminator.validate()?;
        self.patch_discriminator.validate()?;
        let res = self.render.raw_resolution * self.generator.upsampler2d_factor;
        if self.image_resolution != res {
            return bad(format!(
                "image_resolution {} differs from raw_resolution × upsampler2d_factor = {res}",
                self.image_resolution
            ));
        }
        if self.discriminator.resolution != res {
            return bad(format!("discriminator resolution {} must equal image_resolution {res}", self.discriminator.resolution));
        }
        if self.discriminator.pose_embedding.is_none() {
            return bad("the main discriminator is pose-conditioned; set pose_embedding".into());
        }
        let p = self.stage2.patch_size;
        if p == 0 || p > res || self.patch_discriminator.resolution != p {
            return bad(format!(
                "patch_size {p} must be in [1, {res}] and equal the patch discriminator resolution {}",
                self.patch_discriminator.resolution
            ));
        }
        if !(self.ada.target_rt > 0.0 && self.ada.target_rt < 1.0) || !(self.ada.adjustment_step > 0.0) {
            return bad("ADA target must lie in (0, 1) and the step must be positive".into());
        }
        let known = [GROUP_MAPPING, GROUP_SYNTHESIS, GROUP_UPSAMPLER2D, GROUP_UPSAMPLER3D, DECODER_GROUP];
        if let Some(g) = self.stage2.trainable.iter().find(|g| !known.contains(&g.as_str())) {
            return bad(format!("unknown trainable group {g:?}; expected one of {known:?}"));
        }
        if self.stage2.probe_latents == 0 {
            return bad("probe_latents must be ≥ 1".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, without the cache path.
    pub fn hash(&self) -> String {
        let canonical = Self {
            cache: None,
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Checks that a checkpoint written under `other` can continue under
    /// `self`.
    fn check_model_shapes(&self, other: &TrainConfig) -> Result<()> {
        if self.generator != other.generator
            || self.discriminator != other.discriminator
            || self.patch_discriminator != other.patch_discriminator
        {
            return Err(Error::Config("model shapes differ from the checkpoint's".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log. Losses are instantaneous batch values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub stage: u8,
    pub iteration: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r1: Option<f64>,
    pub ada_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub real_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fake_score: Option<f64>,
    /// Critic accuracy on held-out reals and fresh fakes, at score sign 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consistency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe_consistency: Option<f64>,
}

/// Run directory layout: config snapshots, JSON-lines metrics, checkpoints
/// and sample grids.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for d in [root.to_path_buf(), root.join(CHECKPOINT_DIR), root.join(SAMPLE_DIR)] {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn config_path(&self, stage: u8) -> PathBuf {
        self.root.join(format!("config-stage{stage}.json"))
    }

    pub fn metrics_path(&self, stage: u8) -> PathBuf {
        self.root.join(format!("metrics-stage{stage}.jsonl"))
    }

    pub fn checkpoint_path(&self, stage: u8, iteration: u64) -> PathBuf {
        self.root.join(CHECKPOINT_DIR).join(format!("stage{stage}-{iteration:06}.json"))
    }

    pub fn sample_path(&self, stage: u8, iteration: u64) -> PathBuf {
        self.root.join(SAMPLE_DIR).join(format!("stage{stage}-{iteration:06}.png"))
    }

    /// Highest-iteration checkpoint of a stage.
    pub fn latest_checkpoint(&self, stage: u8) -> Option<PathBuf> {
        let prefix = format!("stage{stage}-");
        fs::read_dir(self.root.join(CHECKPOINT_DIR))
            .ok()?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter_map(|p| {
                let name = p.file_name()?.to_str()?;
                let it: u64 = name.strip_prefix(&prefix)?.strip_suffix(".json")?.parse().ok()?;
                Some((it, p))
            })
            .max_by_key(|(it, _)| *it)
            .map(|(_, p)| p)
    }

    fn write_metrics(&self, stage: u8, records: &[MetricsRecord]) -> Result<()> {
        let mut text = String::new();
        for r in records {
            text.push_str(&serde_json::to_string(r).map_err(|e| Error::json("metrics record", e))?);
            text.push('\n');
        }
        write_atomic(&self.metrics_path(stage), text.as_bytes())
    }

    fn append_metrics(&self, record: &MetricsRecord) -> Result<()> {
        let path = self.metrics_path(record.stage);
        let mut f = fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(record).map_err(|e| Error::json("metrics record", e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path.display().to_string(), e)))
        .collect()
}

/// Everything that changes during training. Randomness is not stored: it
/// is recomputed from `(seed, stage, iteration)`.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub stage: u8,
    /// Completed iterations of the current stage.
    pub iteration: u64,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub patch_discriminator: Discriminator,
    pub opt_generator: Adam,
    pub opt_decoder: Adam,
    pub opt_discriminator: Adam,
    pub opt_patch: Adam,
    pub ada: AdaState,
    /// Real scores since the last ADA update.
    pub ada_scores: Vec<f64>,
    /// Probe-set consistency at the start of stage 2.
    pub probe_baseline: Option<f64>,
    pub records: Vec<MetricsRecord>,
}

fn init_seed(seed: u64, what: &str) -> u64 {
    derive(seed, &[stream("init"), stream(what)])
}

impl TrainState {
    /// Freshly initialized models at stage 1, iteration 0.
    pub fn initial(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let generator = Generator::new(cfg.generator.clone(), init_seed(cfg.seed, "generator"))?;
        let discriminator = Discriminator::new(cfg.discriminator.clone(), init_seed(cfg.seed, "discriminator"))?;
        let patch_discriminator = Discriminator::new(cfg.patch_discriminator.clone(), init_seed(cfg.seed, "patch"))?;
        Ok(Self {
            stage: 1,
            iteration: 0,
            opt_generator: Adam::new(AdamConfig::gan(cfg.lr_g), generator.params.len()),
            opt_decoder: Adam::new(AdamConfig::gan(cfg.lr_g), generator.decoder.params.len()),
            opt_discriminator: Adam::new(AdamConfig::gan(cfg.lr_d), discriminator.params.len()),
            opt_patch: Adam::new(AdamConfig::gan(cfg.lr_d), patch_discriminator.params.len()),
            generator,
            discriminator,
            patch_discriminator,
            ada: AdaState {
                p: 0.0,
                target_rt: cfg.ada.target_rt,
                adjustment_step: cfg.ada.adjustment_step,
            },
            ada_scores: Vec::new(),
            probe_baseline: None,
            records: Vec::new(),
        })
    }

    /// Stage-2 start from a finished stage-1 state: models carry over,
    /// optimizers and the patch critic start fresh and ADA is off.
    pub fn begin_stage2(stage1: &TrainState, cfg: &TrainConfig) -> Result<Self> {
        if stage1.stage != 1 {
            return Err(Error::Checkpoint(format!("stage 2 needs a stage-1 state, got stage {}", stage1.stage)));
        }
        let mut st = Self::initial(cfg)?;
        if st.generator.config != stage1.generator.config || st.discriminator.config != stage1.discriminator.config {
            return Err(Error::Config("stage-2 model shapes differ from the stage-1 checkpoint".into()));
        }
        st.stage = 2;
        st.generator = stage1.generator.clone();
        st.discriminator = stage1.discriminator.clone();
        Ok(st)
    }

    fn sections(&self) -> [(&'static str, &[f64]); 12] {
        [
            ("generator", &self.generator.params.values),
            ("decoder", &self.generator.decoder.params.values),
            ("discriminator", &self.discriminator.params.values),
            ("patch_discriminator", &self.patch_discriminator.params.values),
            ("adam.generator.m", &self.opt_generator.m),
            ("adam.generator.v", &self.opt_generator.v),
            ("adam.decoder.m", &self.opt_decoder.m),
            ("adam.decoder.v", &self.opt_decoder.v),
            ("adam.discriminator.m", &self.opt_discriminator.m),
            ("adam.discriminator.v", &self.opt_discriminator.v),
            ("adam.patch.m", &self.opt_patch.m),
            ("adam.patch.v", &self.opt_patch.v),
        ]
    }

    fn sections_mut(&mut self) -> [&mut Vec<f64>; 12] {
        [
            &mut self.generator.params.values,
            &mut self.generator.decoder.params.values,
            &mut self.discriminator.params.values,
            &mut self.patch_discriminator.params.values,
            &mut self.opt_generator.m,
            &mut self.opt_generator.v,
            &mut self.opt_decoder.m,
            &mut self.opt_decoder.v,
            &mut self.opt_discriminator.m,
            &mut self.opt_discriminator.v,
            &mut self.opt_patch.m,
            &mut self.opt_patch.v,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stage: u8,
    /// Key of the next iteration's draws.
    pub iteration: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamSteps {
    pub generator: u64,
    pub decoder: u64,
    pub discriminator: u64,
    pub patch_discriminator: u64,
}

/// JSON half of a checkpoint; the parameters live in a little-endian `f64`
/// blob next to it, in `sections` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub stage: u8,
    pub iteration: u64,
    pub config_hash: String,
    pub config: TrainConfig,
    pub rng: RngState,
    pub ada: AdaState,
    pub ada_scores: Vec<f64>,
    pub probe_baseline: Option<f64>,
    pub adam_steps: AdamSteps,
    pub sections: Vec<Section>,
    pub blob_sha256: String,
    pub records: Vec<MetricsRecord>,
}

/// Writes `<stem>.bin` then `<stem>.json` (the manifest last, atomically).
pub fn save_checkpoint(path: &Path, cfg: &TrainConfig, st: &TrainState) -> Result<()> {
    let path = path.with_extension("json");
    let mut blob = Vec::new();
    let mut sections = Vec::new();
    for (name, values) in st.sections() {
        sections.push(Section {
            name: name.into(),
            len: values.len(),
        });
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        stage: st.stage,
        iteration: st.iteration,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        rng: RngState {
            seed: cfg.seed,
            stage: st.stage,
            iteration: st.iteration,
        },
        ada: st.ada.clone(),
        ada_scores: st.ada_scores.clone(),
        probe_baseline: st.probe_baseline,
        adam_steps: AdamSteps {
            generator: st.opt_generator.steps,
            decoder: st.opt_decoder.steps,
            discriminator: st.opt_discriminator.steps,
            patch_discriminator: st.opt_patch.steps,
        },
        sections,
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        records: st.records.clone(),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_atomic(&path.with_extension("bin"), &blob)?;
    write_atomic(&path, &to_json(&manifest, "checkpoint manifest")?)
}

/// Loads a checkpoint written by [`save_checkpoint`]; `path` may name either
/// half.
pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, TrainState)> {
    let mpath = path.with_extension("json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::json(mpath.display().to_string(), e))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", m.format_version)));
    }
    m.config.validate()?;
    if m.config.hash() != m.config_hash {
        return Err(Error::Checkpoint(format!("{}: embedded config does not match its hash", mpath.display())));
    }
    let bpath = mpath.with_extension("bin");
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if hex::encode(Sha256::digest(&blob)) != m.blob_sha256 {
        return Err(Error::Checkpoint(format!("{}: parameter blob checksum mismatch", bpath.display())));
    }
    let mut st = TrainState::initial(&m.config)?;
    st.stage = m.stage;
    st.iteration = m.iteration;
    let expected: Vec<(&str, usize)> = st.sections().iter().map(|(n, v)| (*n, v.len())).collect();
    let found: Vec<(&str, usize)> = m.sections.iter().map(|s| (s.name.as_str(), s.len)).collect();
    if expected != found {
        return Err(Error::Checkpoint("parameter sections do not match the model layout".into()));
    }
    let total: usize = expected.iter().map(|(_, n)| n).sum();
    if blob.len() != 8 * total {
        return Err(Error::Checkpoint(format!("blob holds {} bytes, expected {}", blob.len(), 8 * total)));
    }
    let mut words = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for dst in st.sections_mut() {
        for v in dst.iter_mut() {
            *v = words.next().expect("length checked");
        }
    }
    st.opt_generator.steps = m.adam_steps.generator;
    st.opt_decoder.steps = m.adam_steps.decoder;
    st.opt_discriminator.steps = m.adam_steps.discriminator;
    st.opt_patch.steps = m.adam_steps.patch_discriminator;
    st.ada = m.ada;
    st.ada_scores = m.ada_scores;
    st.probe_baseline = m.probe_baseline;
    st.records = m.records;
    Ok((m.config, st))
}

/// Latest checkpoint of `cfg.stage` in `run`, refusing a different config
/// unless `allow_config_change`.
pub fn resume_state(run: &RunDir, cfg: &TrainConfig, allow_config_change: bool) -> Result<Option<TrainState>> {
    let Some(path) = run.latest_checkpoint(cfg.stage) else {
        return Ok(None);
    };
    let (old, st) = load_checkpoint(&path)?;
    if old.hash() != cfg.hash() {
        if !allow_config_change {
            return Err(Error::Config(format!(
                "config hash {} differs from the checkpoint's {}; pass --allow-config-change to continue anyway",
                cfg.hash(),
                old.hash()
            )));
        }
        cfg.check_model_shapes(&old)?;
    }
    Ok(Some(st))
}

fn check_cache(cfg: &TrainConfig, cache: &SampleCache) -> Result<()> {
    if cache.resolution() != cfg.image_resolution {
        return Err(Error::Config(format!(
            "cache images are {0}x{0}, the model renders {1}x{1}",
            cache.resolution(),
            cfg.image_resolution
        )));
    }
    if cache.len() < 10 * cfg.batch_size {
        return Err(Error::Config(format!(
            "cache holds {} samples; at least 10 × batch_size = {} are needed",
            cache.len(),
            10 * cfg.batch_size
        )));
    }
    Ok(())
}

/// Training draws reals from the first 90% of the cache; the rest is held
/// out for the critic-accuracy probe.
fn train_split(cache: &SampleCache) -> usize {
    cache.len() - cache.len() / 10
}

fn iteration_seed(cfg: &TrainConfig, stage: u8, k: u64) -> u64 {
    derive(cfg.seed, &[stage as u64, k])
}

fn finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

fn non_finite(k: u64, what: &str) -> Error {
    Error::NonFinite {
        iteration: k + 1,
        what: what.into(),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sign_accuracy(real: &[f64], fake: &[f64]) -> f64 {
    let hits = real.iter().filter(|s| **s > 0.0).count() + fake.iter().filter(|s| **s < 0.0).count();
    hits as f64 / (real.len() + fake.len()) as f64
}

/// Called with every metrics record as it is produced.
pub type Progress<'a> = &'a mut dyn FnMut(&MetricsRecord);

fn start(cfg: &TrainConfig, st: &mut TrainState, run: Option<&RunDir>) -> Result<()> {
    if let Some(run) = run {
        write_atomic(&run.config_path(cfg.stage), &to_json(cfg, "config snapshot")?)?;
        st.records.retain(|r| r.iteration <= st.iteration);
        run.write_metrics(cfg.stage, &st.records)?;
    }
    Ok(())
}

fn record(st: &mut TrainState, rec: MetricsRecord, run: Option<&RunDir>, progress: &mut Progress) -> Result<()> {
    if let Some(run) = run {
        run.append_metrics(&rec)?;
    }
    progress(&rec);
    st.records.push(rec);
    Ok(())
}

/// Saves the state as the last good checkpoint before handing back a
/// non-finite error.
fn abort(cfg: &TrainConfig, st: &TrainState, run: Option<&RunDir>, e: Error) -> Error {
    if let (Some(run), Error::NonFinite { .. }) = (run, &e) {
        if let Err(save) = save_checkpoint(&run.checkpoint_path(st.stage, st.iteration), cfg, st) {
            return Error::Checkpoint(format!("{e}; saving the last good state also failed: {save}"));
        }
    }
    e
}

/// Four latents at four azimuths around the cache reference view; the
/// volumetric branch adds a second block of rows in stage 2.
pub fn sample_grid(cfg: &TrainConfig, gen: &Generator, reference: &CameraPose, stage: u8) -> Result<FeatureMap> {
    let mut frames = Vec::new();
    let branches: &[bool] = if stage == 2 { &[false, true] } else { &[false] };
    for &volumetric in branches {
        for j in 0..4u64 {
            let w = gen.map_latent(&gen.sample_z(derive(cfg.seed, &[stream("samples"), j])))?;
            for a in 0..4 {
                let pose = relative_pose(reference, 90.0 * a as f64, 0.0)?;
                let seed = derive(cfg.seed, &[stream("samples.render"), j]);
                frames.push(if volumetric {
                    render_3d(gen, &w, &pose, &cfg.render, cfg.image_resolution, seed)?
                } else {
                    render_2d(gen, &w, &pose, &cfg.render, seed)?
                });
            }
        }
    }
    Ok(contact_sheet(&frames, 4, [1.0, 1.0, 1.0]))
}

fn checkpoint(cfg: &TrainConfig, st: &TrainState, cache: &SampleCache, run: Option<&RunDir>) -> Result<()> {
    let Some(run) = run else { return Ok(()) };
    save_checkpoint(&run.checkpoint_path(st.stage, st.iteration), cfg, st)?;
    let grid = sample_grid(cfg, &st.generator, &cache.manifest.reference_pose, st.stage)?;
    write_png(&run.sample_path(st.stage, st.iteration), &grid)
}

fn due(k: u64, interval: u64, last: u64) -> bool {
    (k + 1) % interval == 0 || k + 1 == last
}

struct Stage1Step {
    d_loss: f64,
    g_loss: f64,
    r1: f64,
    real_score: f64,
    fake_score: f64,
    d_accuracy: Option<f64>,
}

fn stage1_step(cfg: &TrainConfig, cache: &SampleCache, st: &mut TrainState, k: u64, probe: bool) -> Result<Stage1Step> {
    let s = iteration_seed(cfg, 1, k);
    let b = cfg.batch_size;
    let n_train = train_split(cache);
    let mut r = rng_for(s, "batch", &[]);
    let real_idx: Vec<usize> = (0..b).map(|_| r.random_range(0..n_train)).collect();
    let fake_idx: Vec<usize> = (0..b).map(|_| r.random_range(0..n_train)).collect();

    let gen = &st.generator;
    let mut fakes = Vec::with_capacity(b);
    let mut traces = Vec::with_capacity(b);
    for (i, &idx) in fake_idx.iter().enumerate() {
        let z = gen.sample_z(derive(s, &[stream("z"), i as u64]));
        let (w, mt) = gen.map_latent_traced(&z)?;
        let pose = cache.pose(idx);
        let (img, t) = render_2d_traced(gen, &w, &pose, &cfg.render, derive(s, &[stream("render"), i as u64]))?;
        fakes.push(img);
        traces.push((w, mt, t, pose));
    }
    let reals: Vec<FeatureMap> = real_idx.iter().map(|&i| cache.image(i)).collect();
    let p = if cfg.ada.enabled { st.ada.p } else { 0.0 };
    let (aug_fakes, plans) = augment(&fakes, p, &cfg.ada.augment, derive(s, &[stream("augment.fake")]))?;
    let (aug_reals, _) = augment(&reals, p, &cfg.ada.augment, derive(s, &[stream("augment.real")]))?;
    let fake_batch: Vec<(FeatureMap, CameraPose)> = aug_fakes.into_iter().zip(traces.iter().map(|t| t.3)).collect();
    let real_batch: Vec<(FeatureMap, CameraPose)> = aug_reals.into_iter().zip(real_idx.iter().map(|&i| cache.pose(i))).collect();

    // Critic step.
    let mut gd = st.discriminator.params.zeros_like();
    let dl = d_loss(&st.discriminator, &fake_batch, &real_batch, cfg.weights.r1_weight, cfg.convention, Some(&mut gd))?;
    if !dl.total.is_finite() || !finite(&gd) {
        return Err(non_finite(k, "discriminator loss"));
    }
    let d_backup = (st.discriminator.params.values.clone(), st.opt_discriminator.clone());
    st.opt_discriminator.step(&mut st.discriminator.params.values, &gd, None);

    let d_accuracy = if probe {
        let held: Vec<usize> = (0..b).map(|_| r.random_range(n_train..cache.len())).collect();
        let real: Vec<f64> = held
            .iter()
            .map(|&i| st.discriminator.score(&cache.image(i), &cache.pose(i)))
            .collect::<Result<_>>()?;
        let fake: Vec<f64> = fakes
            .iter()
            .zip(&traces)
            .map(|(img, t)| st.discriminator.score(img, &t.3))
            .collect::<Result<_>>()?;
        Some(sign_accuracy(&real, &fake))
    } else {
        None
    };

    // Generator step against the updated critic, through the same
    // augmentation draws.
    let gl = g_loss(&st.discriminator, &fake_batch)?;
    let gen = &st.generator;
    let mut gg = gen.params.zeros_like();
    let mut gdec = gen.decoder.params.zeros_like();
    for ((g_img, plan), (w, mt, t, _)) in gl.image_grads.iter().zip(&plans).zip(&traces) {
        let g_img = augment_backward(g_img, plan);
        let gw = render_2d_backward(
            gen,
            w,
            t,
            &g_img,
            GradSinks {
                generator: Some(&mut gg),
                decoder: Some(&mut gdec),
            },
        );
        gen.map_latent_backward(mt, &gw, &mut gg);
    }
    if !gl.loss.is_finite() || !finite(&gg) || !finite(&gdec) {
        (st.discriminator.params.values, st.opt_discriminator) = d_backup;
        return Err(non_finite(k, "generator loss"));
    }
    let mask = gen.group_mask(&[GROUP_MAPPING, GROUP_SYNTHESIS, GROUP_UPSAMPLER2D]);
    st.opt_generator.step(&mut st.generator.params.values, &gg, Some(&mask));
    st.opt_decoder.step(&mut st.generator.decoder.params.values, &gdec, None);

    st.ada_scores.extend_from_slice(&dl.real_scores);
    if (k + 1) % cfg.ada.interval == 0 {
        st.ada = ada_update(&st.ada, &st.ada_scores, cfg.ada.enabled)?;
        st.ada_scores.clear();
    }
    st.iteration = k + 1;
    Ok(Stage1Step {
        d_loss: dl.total,
        g_loss: gl.loss,
        r1: dl.r1,
        real_score: mean(&dl.real_scores),
        fake_score: mean(&dl.fake_scores),
        d_accuracy,
    })
}

/// Runs stage 1 up to `cfg.iterations`, from `state` or a fresh
/// initialization.
pub fn train_stage1(
    cfg: &TrainConfig,
    cache: &SampleCache,
    state: Option<TrainState>,
    run: Option<&RunDir>,
    progress: Progress,
) -> Result<TrainState> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(Error::Config(format!("train_stage1 called with a stage-{} config", cfg.stage)));
    }
    check_cache(cfg, cache)?;
    let mut st = match state {
        Some(st) => st,
        None => TrainState::initial(cfg)?,
    };
    if st.stage != 1 {
        return Err(Error::Checkpoint(format!("cannot continue stage 1 from a stage-{} state", st.stage)));
    }
    let mut progress = progress;
    start(cfg, &mut st, run)?;
    for k in st.iteration..cfg.iterations {
        let log = due(k, cfg.log_interval, cfg.iterations);
        let step = match stage1_step(cfg, cache, &mut st, k, log) {
            Ok(s) => s,
            Err(e) => return Err(abort(cfg, &st, run, e)),
        };
        if log {
            let rec = MetricsRecord {
                stage: 1,
                iteration: k + 1,
                d_loss: Some(step.d_loss),
                g_loss: Some(step.g_loss),
                r1: Some(step.r1),
                ada_p: st.ada.p,
                real_score: Some(step.real_score),
                fake_score: Some(step.fake_score),
                d_accuracy: step.d_accuracy,
                ..MetricsRecord::default()
            };
            record(&mut st, rec, run, &mut progress)?;
        }
        if due(k, cfg.checkpoint_interval, cfg.iterations) {
            checkpoint(cfg, &st, cache, run)?;
        }
    }
    Ok(st)
}

struct Stage2Step {
    d_loss: f64,
    g_loss: f64,
    r1: f64,
    real_score: f64,
    fake_score: f64,
    consistency: f64,
}

fn stage2_masks(cfg: &TrainConfig, gen: &Generator) -> (Vec<bool>, bool) {
    let prefixes: Vec<&str> = cfg
        .stage2
        .trainable
        .iter()
        .map(String::as_str)
        .filter(|g| *g != DECODER_GROUP)
        .collect();
    let decoder = cfg.stage2.trainable.iter().any(|g| g == DECODER_GROUP);
    (gen.group_mask(&prefixes), decoder)
}

fn trains(cfg: &TrainConfig, group: &str) -> bool {
    cfg.stage2.trainable.iter().any(|g| g == group)
}

fn centered_window(cfg: &TrainConfig) -> Window {
    let o = (cfg.image_resolution - cfg.stage2.patch_size) / 2;
    Window {
        row0: o,
        col0: o,
        height: cfg.stage2.patch_size,
        width: cfg.stage2.patch_size,
    }
}

/// Mean consistency loss over the fixed probe latents, each at a cached
/// pose with a centered patch.
pub fn probe_consistency(cfg: &TrainConfig, gen: &Generator, cache: &SampleCache, perceptual: &dyn PerceptualDistance) -> Result<f64> {
    let win = centered_window(cfg);
    let mut total = 0.0;
    for j in 0..cfg.stage2.probe_latents {
        let w = gen.map_latent(&gen.sample_z(derive(cfg.seed, &[stream("probe"), j as u64])))?;
        let pose = cache.pose(j % cache.len());
        let seed = derive(cfg.seed, &[stream("probe.render"), j as u64]);
        let tp = gen.synthesize_triplane(&w)?;
        let target = render_2d_from_triplane(gen, &w, &tp, &pose, &cfg.render, seed)?.crop(win.row0, win.col0, win.height, win.width)?;
        let (patch, _) = render_3d_window_traced(gen, &w, &tp, &pose, &cfg.render, cfg.image_resolution, win, seed)?;
        total += consistency_loss(&patch, &target, perceptual)?.value;
    }
    Ok(total / cfg.stage2.probe_latents as f64)
}

fn stage2_step(
    cfg: &TrainConfig,
    cache: &SampleCache,
    st: &mut TrainState,
    k: u64,
    perceptual: &dyn PerceptualDistance,
) -> Result<Stage2Step> {
    let s = iteration_seed(cfg, 2, k);
    let (b, ps, res) = (cfg.batch_size, cfg.stage2.patch_size, cfg.image_resolution);
    let n_train = train_split(cache);
    let mut r = rng_for(s, "batch", &[]);
    let real_idx: Vec<usize> = (0..b).map(|_| r.random_range(0..n_train)).collect();
    let fake_idx: Vec<usize> = (0..b).map(|_| r.random_range(0..n_train)).collect();
    let mut corner = || (r.random_range(0..=res - ps), r.random_range(0..=res - ps));
    let fake_at: Vec<(usize, usize)> = (0..b).map(|_| corner()).collect();
    let real_at: Vec<(usize, usize)> = (0..b).map(|_| corner()).collect();
    let need_synthesis = trains(cfg, GROUP_SYNTHESIS) || trains(cfg, GROUP_MAPPING);

    let gen = &st.generator;
    let mut fakes = Vec::with_capacity(b);
    let mut targets = Vec::with_capacity(b);
    let mut traces = Vec::with_capacity(b);
    for (i, (&idx, &(py, px))) in fake_idx.iter().zip(&fake_at).enumerate() {
        let z = gen.sample_z(derive(s, &[stream("z"), i as u64]));
        let (w, mt) = gen.map_latent_traced(&z)?;
        let (tp, synth) = gen.synthesize_traced(&w)?;
        let pose = cache.pose(idx);
        let seed = derive(s, &[stream("render"), i as u64]);
        // The image-space render is a constant target.
        targets.push(render_2d_from_triplane(gen, &w, &tp, &pose, &cfg.render, seed)?.crop(py, px, ps, ps)?);
        let win = Window {
            row0: py,
            col0: px,
            height: ps,
            width: ps,
        };
        let (patch, t3) = render_3d_window_traced(gen, &w, &tp, &pose, &cfg.render, res, win, seed)?;
        fakes.push((patch, pose));
        traces.push((w, mt, synth, t3));
    }
    let reals: Vec<(FeatureMap, CameraPose)> = real_idx
        .iter()
        .zip(&real_at)
        .map(|(&i, &(qy, qx))| Ok((cache.image(i).crop(qy, qx, ps, ps)?, cache.pose(i))))
        .collect::<Result<_>>()?;

    // Patch critic step.
    let mut gd = st.patch_discriminator.params.zeros_like();
    let dl = d_loss(&st.patch_discriminator, &fakes, &reals, cfg.weights.r1_weight, cfg.convention, Some(&mut gd))?;
    if !dl.total.is_finite() || !finite(&gd) {
        return Err(non_finite(k, "patch discriminator loss"));
    }
    let d_backup = (st.patch_discriminator.params.values.clone(), st.opt_patch.clone());
    st.opt_patch.step(&mut st.patch_discriminator.params.values, &gd, None);

    // Generator step: consistency toward the image-space crop plus the
    // patch adversarial term.
    let gl = g_loss(&st.patch_discriminator, &fakes)?;
    let gen = &st.generator;
    let mut gg = gen.params.zeros_like();
    let mut gdec = gen.decoder.params.zeros_like();
    let (mask, train_decoder) = stage2_masks(cfg, gen);
    let (wc, wp) = (cfg.weights.consistency_weight, cfg.weights.patch_gan_weight);
    let mut consistency = 0.0;
    for (((patch, _), target), (g_adv, (w, mt, synth, t3))) in fakes.iter().zip(&targets).zip(gl.image_grads.iter().zip(&traces)) {
        let c = consistency_loss(patch, target, perceptual)?;
        consistency += c.value / b as f64;
        let mut g = c.grad_3d;
        for (a, v) in g.data.iter_mut().zip(&g_adv.data) {
            *a = *a * wc / b as f64 + wp * v;
        }
        let (g_base, mut gw) = render_3d_backward(
            gen,
            w,
            t3,
            &g,
            GradSinks {
                generator: Some(&mut gg),
                decoder: train_decoder.then_some(&mut gdec[..]),
            },
        );
        if need_synthesis {
            for (a, v) in gw.iter_mut().zip(gen.synthesize_backward(synth, w, &g_base, &mut gg)) {
                *a += v;
            }
        }
        if trains(cfg, GROUP_MAPPING) {
            gen.map_latent_backward(mt, &gw, &mut gg);
        }
    }
    let g_total = wc * consistency + wp * gl.loss;
    if !g_total.is_finite() || !finite(&gg) || !finite(&gdec) {
        (st.patch_discriminator.params.values, st.opt_patch) = d_backup;
        return Err(non_finite(k, "stage-2 generator loss"));
    }
    st.opt_generator.step(&mut st.generator.params.values, &gg, Some(&mask));
    if train_decoder {
        st.opt_decoder.step(&mut st.generator.decoder.params.values, &gdec, None);
    }
    st.iteration = k + 1;
    Ok(Stage2Step {
        d_loss: dl.total,
        g_loss: g_total,
        r1: dl.r1,
        real_score: mean(&dl.real_scores),
        fake_score: mean(&dl.fake_scores),
        consistency,
    })
}

/// Runs stage 2 up to `cfg.iterations`. A fresh run starts from
/// `stage1`; `state` continues an interrupted stage-2 run instead.
pub fn train_stage2(
    cfg: &TrainConfig,
    stage1: &TrainState,
    cache: &SampleCache,
    state: Option<TrainState>,
    run: Option<&RunDir>,
    progress: Progress,
) -> Result<TrainState> {
    cfg.validate()?;
    if cfg.stage != 2 {
        return Err(Error::Config(format!("train_stage2 called with a stage-{} config", cfg.stage)));
    }
    check_cache(cfg, cache)?;
    let mut st = match state {
        Some(st) if st.stage == 2 => st,
        Some(st) => return Err(Error::Checkpoint(format!("cannot continue stage 2 from a stage-{} state", st.stage))),
        None => TrainState::begin_stage2(stage1, cfg)?,
    };
    let perceptual = RandomPyramid::default();
    let mut progress = progress;
    start(cfg, &mut st, run)?;
    if st.probe_baseline.is_none() {
        let base = probe_consistency(cfg, &st.generator, cache, &perceptual)?;
        st.probe_baseline = Some(base);
        let rec = MetricsRecord {
            stage: 2,
            iteration: 0,
            ada_p: 0.0,
            probe_consistency: Some(base),
            ..MetricsRecord::default()
        };
        record(&mut st, rec, run, &mut progress)?;
    }
    for k in st.iteration..cfg.iterations {
        let step = match stage2_step(cfg, cache, &mut st, k, &perceptual) {
            Ok(s) => s,
            Err(e) => return Err(abort(cfg, &st, run, e)),
        };
        if due(k, cfg.log_interval, cfg.iterations) {
            let rec = MetricsRecord {
                stage: 2,
                iteration: k + 1,
                d_loss: Some(step.d_loss),
                g_loss: Some(step.g_loss),
                r1: Some(step.r1),
                ada_p: st.ada.p,
                real_score: Some(step.real_score),
                fake_score: Some(step.fake_score),
                consistency: Some(step.consistency),
                probe_consistency: Some(probe_consistency(cfg, &st.generator, cache, &perceptual)?),
                ..MetricsRecord::default()
            };
            record(&mut st, rec, run, &mut progress)?;
        }
        if due(k, cfg.checkpoint_interval, cfg.iterations) {
            checkpoint(cfg, &st, cache, run)?;
        }
    }
    Ok(st)
}

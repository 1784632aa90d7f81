//! The persisted sample cache: pruned, refined prior samples on disk.
//!
//! Layout of a cache directory:
//!
//! ```text
//! manifest.json     header + one entry per kept sample (written last)
//! stats.json        per-reason discard counts
//! reference.png     the condition's reference image
//! images/NNNNNN.png one 8-bit RGB image per kept view
//! ```

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat};
use serde::{Deserialize, Serialize};

use crate::camera::{sample_pose_uniform, CameraPose, DEFAULT_RADIUS};
use crate::error::{Error, Result};
use crate::image::{read_png, write_png, FeatureMap};
use crate::prior::{ConditionSpec, Corruption, CorruptionConfig, OracleSampler, PriorSampler, RefineMode};
use crate::prune::{calibrate, prune_view, Embedder, PruneOutcome, PruneStatus, PruneThresholds};
use crate::rng::derive;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATS_FILE: &str = "stats.json";
pub const REFERENCE_FILE: &str = "reference.png";
pub const IMAGE_DIR: &str = "images";
pub const ABORT_WINDOW: usize = 1000;
pub const ABORT_DISCARD_RATE: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Refinement {
    pub mode: RefineMode,
    pub strength: f64,
}

impl Default for Refinement {
    fn default() -> Self {
        Self {
            mode: RefineMode::GeometryLocked,
            strength: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub view_id: u64,
    /// Relative to the cache directory.
    pub file: String,
    pub pose: CameraPose,
    pub prune_status: PruneStatus,
    pub semantic_score: f64,
    pub bad_pixel_max: usize,
    pub refinement: Refinement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub condition_seed: u64,
    pub reference_pose: CameraPose,
    pub thresholds: PruneThresholds,
    pub rng_seed: u64,
    pub created_utc: String,
    pub resolution: usize,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub views: usize,
    pub kept: usize,
    pub discarded_geometry: usize,
    pub discarded_semantic: usize,
    /// Views whose samples carried an injected corruption, per kind.
    pub injected_pose_error: usize,
    pub injected_geometry_warp: usize,
    pub injected_semantic_swap: usize,
}

impl CacheStats {
    pub fn discard_rate(&self) -> f64 {
        (self.discarded_geometry + self.discarded_semantic) as f64 / self.views.max(1) as f64
    }
}

/// Timestamp recorded in manifests: `SOURCE_DATE_EPOCH` if set, else the
/// epoch, so identical inputs give byte-identical manifests.
pub fn manifest_timestamp() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .unwrap_or(0);
    DateTime::from_timestamp(secs, 0)
        .unwrap_or_default()
        .to_rfc3339_opts(SecondsFormat::Secs, true)
}

struct ViewResult {
    view_id: u64,
    pose: CameraPose,
    outcome: PruneOutcome,
    corruptions: Vec<Corruption>,
    refined: Option<FeatureMap>,
}

fn process_view(
    sampler: &dyn PriorSampler,
    embedder: &dyn Embedder,
    thresholds: &PruneThresholds,
    refinement: &Refinement,
    seed: u64,
    view_id: u64,
) -> Result<ViewResult> {
    let view_seed = derive(seed, &[view_id]);
    let pose = sample_pose_uniform(derive(view_seed, &[0]), DEFAULT_RADIUS)?;
    let drawn = sampler.sample(&pose, thresholds.n_parallel, derive(view_seed, &[1]))?;
    let corruptions = drawn.iter().filter_map(|(_, c)| *c).collect();
    let images: Vec<FeatureMap> = drawn.into_iter().map(|(i, _)| i).collect();
    let outcome = prune_view(&images, &sampler.condition().reference_image, thresholds, embedder)?;
    let refined = if outcome.kept() {
        Some(sampler.refine(
            &images[outcome.best_index],
            &pose,
            refinement.mode,
            refinement.strength,
            derive(view_seed, &[2]),
        )?)
    } else {
        None
    };
    Ok(ViewResult {
        view_id,
        pose,
        outcome,
        corruptions,
        refined,
    })
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn to_json<T: Serialize>(value: &T, what: &str) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(value).map_err(|e| Error::json(what, e))?;
    s.push(b'\n');
    Ok(s)
}

/// Samples uniform views until `n_samples` survive pruning, refines the
/// best sample of each kept view and writes the cache to `out_dir`.
///
/// Views are processed in batches across `workers` threads with per-view
/// seeds `hash(seed, view_id)` and consumed in `view_id` order, so the
/// output does not depend on `workers`. The manifest is written last; an
/// aborted build leaves none.
#[allow(clippy::too_many_arguments)]
pub fn build_cache(
    sampler: &dyn PriorSampler,
    embedder: &dyn Embedder,
    n_samples: usize,
    thresholds: &PruneThresholds,
    refinement: &Refinement,
    out_dir: &Path,
    seed: u64,
    workers: usize,
) -> Result<SampleCache> {
    thresholds.validate()?;
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be ≥ 1".into()));
    }
    if !(0.0..=1.0).contains(&refinement.strength) {
        return Err(Error::Config(format!("refinement strength {} outside [0, 1]", refinement.strength)));
    }
    let image_dir = out_dir.join(IMAGE_DIR);
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let _ = fs::remove_file(out_dir.join(MANIFEST_FILE));
    let condition = sampler.condition();
    write_png(&out_dir.join(REFERENCE_FILE), &condition.reference_image)?;

    let workers = workers.max(1);
    let mut stats = CacheStats::default();
    let mut window: VecDeque<bool> = VecDeque::with_capacity(ABORT_WINDOW);
    let mut entries = Vec::with_capacity(n_samples);
    let mut next_view = 0u64;
    'outer: while entries.len() < n_samples {
        let batch: Vec<u64> = (next_view..next_view + 2 * workers as u64).collect();
        next_view += batch.len() as u64;
        let results = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let ids: Vec<u64> = batch.iter().copied().skip(w).step_by(workers).collect();
                    s.spawn(move || {
                        ids.into_iter()
                            .map(|v| process_view(sampler, embedder, thresholds, refinement, seed, v))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            let mut all: Vec<Result<ViewResult>> = handles
                .into_iter()
                .flat_map(|h| h.join().expect("cache worker panicked"))
                .collect();
            all.sort_by_key(|r| r.as_ref().map(|v| v.view_id).unwrap_or(0));
            all
        });
        for r in results {
            let view = r?;
            stats.views += 1;
            for c in &view.corruptions {
                match c {
                    Corruption::PoseError => stats.injected_pose_error += 1,
                    Corruption::GeometryWarp => stats.injected_geometry_warp += 1,
                    Corruption::SemanticSwap => stats.injected_semantic_swap += 1,
                }
            }
            match view.outcome.status {
                PruneStatus::DiscardedGeometry => stats.discarded_geometry += 1,
                PruneStatus::DiscardedSemantic => stats.discarded_semantic += 1,
                PruneStatus::Kept => stats.kept += 1,
            }
            if window.len() == ABORT_WINDOW {
                window.pop_front();
            }
            window.push_back(!view.outcome.kept());
            let discards = window.iter().filter(|d| **d).count();
            if window.len() == ABORT_WINDOW && discards as f64 > ABORT_DISCARD_RATE * ABORT_WINDOW as f64 {
                let _ = fs::write(out_dir.join(STATS_FILE), to_json(&stats, "cache stats")?);
                return Err(Error::CacheAborted(format!(
                    "{discards} of the last {ABORT_WINDOW} views discarded ({} geometry, {} semantic in total); \
                     thresholds are likely miscalibrated (tau_geo {}, tau_sem {:.4})",
                    stats.discarded_geometry, stats.discarded_semantic, thresholds.tau_geo, thresholds.tau_sem
                )));
            }
            if let Some(img) = view.refined {
                let file = format!("{IMAGE_DIR}/{:06}.png", view.view_id);
                write_png(&out_dir.join(&file), &img)?;
                entries.push(ManifestEntry {
                    view_id: view.view_id,
                    file,
                    pose: view.pose,
                    prune_status: PruneStatus::Kept,
                    semantic_score: view.outcome.best_score(),
                    bad_pixel_max: view.outcome.bad_pixel_max,
                    refinement: *refinement,
                });
                if entries.len() == n_samples {
                    break 'outer;
                }
            }
        }
    }

    let manifest = Manifest {
        condition_seed: condition.condition_seed,
        reference_pose: condition.reference_pose,
        thresholds: thresholds.clone(),
        rng_seed: seed,
        created_utc: manifest_timestamp(),
        resolution: condition.reference_image.width,
        entries,
    };
    write_atomic(&out_dir.join(STATS_FILE), &to_json(&stats, "cache stats")?)?;
    write_atomic(&out_dir.join(MANIFEST_FILE), &to_json(&manifest, "cache manifest")?)?;
    SampleCache::load(out_dir)
}

/// Everything that determines an oracle-prior cache: the condition, the
/// injected corruption, threshold calibration and the build itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheRecipe {
    pub condition_seed: u64,
    pub reference_polar_deg: f64,
    pub resolution: usize,
    pub n_samples: usize,
    pub corruption: CorruptionConfig,
    pub refinement: Refinement,
    /// Clean views used to calibrate the thresholds; 0 uses the
    /// resolution defaults with `tau_sem` = `default_tau_sem`.
    pub calibration_views: usize,
    pub default_tau_sem: f64,
    pub seed: u64,
}

impl CacheRecipe {
    /// The cache behind the desk-scale reference run.
    pub fn reference() -> Self {
        Self {
            condition_seed: 0,
            reference_polar_deg: 75.0,
            resolution: 128,
            n_samples: 2000,
            // Per-sample rates; about 31% of 4-sample views carry one.
            corruption: CorruptionConfig {
                pose_error: 0.03,
                geometry_warp: 0.03,
                semantic_swap: 0.03,
                ..CorruptionConfig::default()
            },
            refinement: Refinement::default(),
            calibration_views: 200,
            default_tau_sem: 0.5,
            seed: 0,
        }
    }

    pub fn sampler(&self) -> Result<OracleSampler> {
        let condition = ConditionSpec::oracle(self.condition_seed, self.reference_polar_deg, self.resolution)?;
        OracleSampler::new(condition, self.corruption.clone())
    }

    pub fn thresholds(&self, sampler: &OracleSampler, embedder: &dyn Embedder) -> Result<PruneThresholds> {
        if self.calibration_views == 0 {
            return Ok(PruneThresholds::for_resolution(self.resolution, self.default_tau_sem));
        }
        let clean = OracleSampler::new(sampler.condition().clone(), CorruptionConfig::default())?;
        Ok(calibrate(&clean, embedder, self.calibration_views, derive(self.seed, &[u64::MAX]))?.thresholds)
    }

    pub fn build(&self, embedder: &dyn Embedder, out_dir: &Path, workers: usize) -> Result<SampleCache> {
        let sampler = self.sampler()?;
        let thresholds = self.thresholds(&sampler, embedder)?;
        build_cache(&sampler, embedder, self.n_samples, &thresholds, &self.refinement, out_dir, self.seed, workers)
    }
}

/// A loaded cache. Images are held as 8-bit RGB to bound memory.
#[derive(Clone, Debug)]
pub struct SampleCache {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub stats: Option<CacheStats>,
    images: Vec<Vec<u8>>,
}

impl SampleCache {
    /// Loads and checks the manifest against the image files.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        let stats = fs::read_to_string(dir.join(STATS_FILE))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok());
        let res = manifest.resolution;
        let mut images = Vec::with_capacity(manifest.entries.len());
        let mut seen = std::collections::HashSet::new();
        for e in &manifest.entries {
            if !seen.insert(e.view_id) {
                return Err(Error::Config(format!("duplicate view_id {} in {}", e.view_id, path.display())));
            }
            let img = read_png(&dir.join(&e.file))?;
            if (img.height, img.width) != (res, res) {
                return Err(Error::Config(format!(
                    "{} is {}x{}, manifest says {res}x{res}",
                    e.file, img.height, img.width
                )));
            }
            images.push(img.to_rgb8());
        }
        let on_disk = fs::read_dir(dir.join(IMAGE_DIR))
            .map_err(|e| Error::io(dir.join(IMAGE_DIR), e))?
            .filter(|e| e.as_ref().is_ok_and(|e| e.path().extension().is_some_and(|x| x == "png")))
            .count();
        if on_disk != manifest.entries.len() {
            return Err(Error::Config(format!(
                "{on_disk} images on disk but {} manifest entries",
                manifest.entries.len()
            )));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            stats,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.manifest.resolution
    }

    pub fn image(&self, i: usize) -> FeatureMap {
        let r = self.manifest.resolution;
        FeatureMap::from_rgb8(r, r, &self.images[i])
    }

    pub fn pose(&self, i: usize) -> CameraPose {
        self.manifest.entries[i].pose
    }

    pub fn reference_image(&self) -> Result<FeatureMap> {
        read_png(&self.dir.join(REFERENCE_FILE))
    }
}

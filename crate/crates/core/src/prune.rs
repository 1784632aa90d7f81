//! Pose and semantic pruning of prior samples.
//!
//! A viewpoint is sampled `N` times. The shared foreground of the samples,
//! dilated, is the overlap mask; any sample with too many foreground
//! pixels outside it signals a geometric disagreement. Separately every
//! sample must stay semantically close to the reference image.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::sample_pose_uniform;
use crate::error::{ensure, Error, Result};
use crate::image::FeatureMap;
use crate::prior::{Corruption, OracleSampler, PriorSampler, BACKGROUND};
use crate::rng::{derive, hash_unit, rng_for};

/// Default foreground tolerance: 8 gray levels.
pub const FOREGROUND_TOL: f64 = 8.0 / 255.0;
pub const DEFAULT_N_PARALLEL: usize = 4;
/// Fraction of the image area allowed outside the overlap mask.
pub const DEFAULT_GEO_FRACTION: f64 = 0.02;
/// Clean-score percentile used as the semantic threshold.
pub const SEMANTIC_PERCENTILE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    fn check_shape(&self, other: &Mask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Contract(format!(
                "mask {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        self.check_shape(other)?;
        Ok(Mask {
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
            ..*self
        })
    }

    /// Intersection over union; two empty masks have IoU 1.
    pub fn iou(&self, other: &Mask) -> Result<f64> {
        self.check_shape(other)?;
        let (mut i, mut u) = (0usize, 0usize);
        for (a, b) in self.data.iter().zip(&other.data) {
            i += (*a && *b) as usize;
            u += (*a || *b) as usize;
        }
        Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
    }

    /// Dilation by a `(2r+1)²` square, done as two separable passes.
    pub fn dilate(&self, r: usize) -> Mask {
        if r == 0 {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        let mut rows = Mask::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
                rows.set(y, x, (lo..=hi).any(|k| self.get(y, k)));
            }
        }
        let mut out = Mask::empty(h, w);
        for y in 0..h {
            let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
            for x in 0..w {
                out.set(y, x, (lo..=hi).any(|k| rows.get(k, x)));
            }
        }
        out
    }
}

/// Foreground iff the largest per-channel deviation from `background` is
/// strictly greater than `tol`; with `tol = 0` any deviation counts.
pub fn foreground_mask(image: &FeatureMap, background: [f64; 3], tol: f64) -> Mask {
    let (h, w) = (image.height, image.width);
    let mut m = Mask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let dev = (0..image.channels.min(3))
                .map(|c| (image.at(c, y, x) - background[c]).abs())
                .fold(0.0, f64::max);
            m.set(y, x, dev > tol);
        }
    }
    m
}

/// Dilated intersection of the samples' foregrounds.
pub fn overlap_mask(samples: &[FeatureMap], dilation_radius: usize) -> Result<Mask> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("overlap mask needs at least one sample".into()))?;
    let mut m = foreground_mask(first, BACKGROUND, FOREGROUND_TOL);
    for s in &samples[1..] {
        m = m.intersect(&foreground_mask(s, BACKGROUND, FOREGROUND_TOL))?;
    }
    Ok(m.dilate(dilation_radius))
}

/// Foreground pixels of `sample` that fall outside `m`.
pub fn bad_pixel_count(sample: &FeatureMap, m: &Mask) -> Result<usize> {
    let fg = foreground_mask(sample, BACKGROUND, FOREGROUND_TOL);
    fg.check_shape(m)?;
    Ok(fg.data.iter().zip(&m.data).filter(|(f, k)| **f && !**k).count())
}

/// Deterministic image embedding used for semantic similarity.
pub trait Embedder: Send + Sync {
    fn embed(&self, image: &FeatureMap) -> Vec<f64>;
}

/// Cosine similarity of the two embeddings, in `[-1, 1]`.
pub fn semantic_score(image: &FeatureMap, reference: &FeatureMap, embedder: &dyn Embedder) -> f64 {
    cosine(&embedder.embed(image), &embedder.embed(reference))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    pub seed: u64,
    pub projection_dim: usize,
    /// Side of the area-downsampled image fed to the projection.
    pub downsample: usize,
    pub histogram_bins: usize,
    /// Relative weight of the (unit-norm) histogram block.
    pub histogram_weight: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            seed: 0xc11b_5eed,
            projection_dim: 64,
            downsample: 32,
            histogram_bins: 8,
            histogram_weight: 2.0,
        }
    }
}

/// Random Gaussian projection of the downsampled image (offset by the white
/// background so empty space maps to the origin) concatenated with the
/// per-channel color histogram of the foreground pixels. Both blocks are
/// unit-normalized before weighting; the concatenation is L2-normalized.
#[derive(Clone, Debug)]
pub struct RandomProjectionEmbedder {
    pub config: EmbedderConfig,
    projection: Vec<f64>,
}

impl RandomProjectionEmbedder {
    pub fn new(config: EmbedderConfig) -> Result<Self> {
        if config.projection_dim == 0 || config.downsample == 0 || config.histogram_bins == 0 {
            return Err(Error::Config("embedder sizes must be positive".into()));
        }
        if !(config.histogram_weight >= 0.0) {
            return Err(Error::Config("histogram_weight must be non-negative".into()));
        }
        let inputs = 3 * config.downsample * config.downsample;
        let mut r = rng_for(config.seed, "embedder", &[]);
        let scale = 1.0 / (inputs as f64).sqrt();
        let projection = (0..config.projection_dim * inputs)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r))
            .collect();
        Ok(Self { config, projection })
    }
}

impl Default for RandomProjectionEmbedder {
    fn default() -> Self {
        Self::new(EmbedderConfig::default()).expect("default embedder config is valid")
    }
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl Embedder for RandomProjectionEmbedder {
    fn embed(&self, image: &FeatureMap) -> Vec<f64> {
        let cfg = &self.config;
        let small = image.resize_area(cfg.downsample);
        let x: Vec<f64> = (0..3)
            .flat_map(|c| small.channel(c.min(small.channels - 1)).iter().map(move |v| v - BACKGROUND[c]))
            .collect();
        let mut proj: Vec<f64> = self
            .projection
            .chunks_exact(x.len())
            .map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum())
            .collect();
        unit(&mut proj);

        let bins = cfg.histogram_bins;
        let mut hist = vec![0.0; 3 * bins];
        let fg = foreground_mask(image, BACKGROUND, FOREGROUND_TOL);
        for c in 0..3 {
            let channel = image.channel(c.min(image.channels - 1));
            for (v, _) in channel.iter().zip(&fg.data).filter(|(_, f)| **f) {
                let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
                hist[c * bins + b] += 1.0;
            }
        }
        unit(&mut hist);
        proj.extend(hist.iter().map(|h| h * cfg.histogram_weight));
        unit(&mut proj);
        proj
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneThresholds {
    /// Largest tolerated bad-pixel count.
    pub tau_geo: usize,
    /// Smallest tolerated semantic score.
    pub tau_sem: f64,
    pub dilation_radius: usize,
    pub n_parallel: usize,
}

impl PruneThresholds {
    /// Geometry defaults for a square image of side `resolution`: 2% of
    /// the pixels and a 5 px dilation at 64², scaled with the side.
    pub fn for_resolution(resolution: usize, tau_sem: f64) -> Self {
        Self {
            tau_geo: (DEFAULT_GEO_FRACTION * (resolution * resolution) as f64).round() as usize,
            tau_sem,
            dilation_radius: ((5 * resolution) as f64 / 64.0).round() as usize,
            n_parallel: DEFAULT_N_PARALLEL,
        }
    }

    /// Thresholds that keep every view.
    pub fn permissive(resolution: usize) -> Self {
        Self {
            tau_geo: resolution * resolution,
            tau_sem: f64::MIN_POSITIVE,
            dilation_radius: 0,
            n_parallel: DEFAULT_N_PARALLEL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.tau_geo > 0 && self.n_parallel > 0, Config, "tau_geo and n_parallel must be positive");
        ensure!(self.tau_sem > 0.0 && self.tau_sem <= 1.0, Config, "tau_sem {} outside (0, 1]", self.tau_sem);
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneStatus {
    Kept,
    DiscardedGeometry,
    DiscardedSemantic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneOutcome {
    pub status: PruneStatus,
    /// Highest-scoring sample, lowest index on ties.
    pub best_index: usize,
    pub scores: Vec<f64>,
    pub bad_pixel_max: usize,
}

impl PruneOutcome {
    pub fn kept(&self) -> bool {
        self.status == PruneStatus::Kept
    }

    pub fn best_score(&self) -> f64 {
        self.scores[self.best_index]
    }
}

/// Geometry is checked first: a view failing both checks reports
/// `DiscardedGeometry`.
pub fn prune_view(
    samples: &[FeatureMap],
    reference: &FeatureMap,
    thresholds: &PruneThresholds,
    embedder: &dyn Embedder,
) -> Result<PruneOutcome> {
    let m = overlap_mask(samples, thresholds.dilation_radius)?;
    let mut bad_pixel_max = 0;
    for s in samples {
        bad_pixel_max = bad_pixel_max.max(bad_pixel_count(s, &m)?);
    }
    let reference_embedding = embedder.embed(reference);
    let scores: Vec<f64> = samples
        .iter()
        .map(|s| cosine(&embedder.embed(s), &reference_embedding))
        .collect();
    let mut best_index = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best_index] {
            best_index = i;
        }
    }
    let min_score = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let status = if bad_pixel_max > thresholds.tau_geo {
        PruneStatus::DiscardedGeometry
    } else if min_score < thresholds.tau_sem {
        PruneStatus::DiscardedSemantic
    } else {
        PruneStatus::Kept
    };
    Ok(PruneOutcome {
        status,
        best_index,
        scores,
        bad_pixel_max,
    })
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument("percentile needs values and q in [0, 1]".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Ok(v[rank - 1])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub thresholds: PruneThresholds,
    /// Semantic scores of the clean calibration views.
    pub clean_scores: Vec<f64>,
    /// Detection rate of injected geometric corruptions, indexed by radius.
    pub geometry_recall: Vec<f64>,
}

impl Calibration {
    pub fn clean_mean(&self) -> f64 {
        self.clean_scores.iter().sum::<f64>() / self.clean_scores.len() as f64
    }
}

/// Required detection rate of geometric corruptions at the chosen radius.
pub const GEOMETRY_CALIBRATION_RECALL: f64 = 0.95;

/// Derives thresholds for one condition from ground-truth oracle views.
///
/// `tau_sem` is the 5th percentile of the semantic scores of `n_views`
/// clean renders at uniform poses. `tau_geo` is 2% of the image area. The
/// dilation radius is the largest one, up to the resolution default, that
/// still flags [`GEOMETRY_CALIBRATION_RECALL`] of views carrying one
/// pose-error or warped sample; clean oracle views never produce bad
/// pixels, so only the corrupted side constrains it.
pub fn calibrate(sampler: &OracleSampler, embedder: &dyn Embedder, n_views: usize, seed: u64) -> Result<Calibration> {
    if n_views == 0 {
        return Err(Error::InvalidArgument("calibration needs at least one view".into()));
    }
    let condition = sampler.condition();
    let res = condition.reference_image.width;
    let radius = condition.reference_pose.radius();
    let reference = embedder.embed(&condition.reference_image);
    let defaults = PruneThresholds::for_resolution(res, 1.0);
    let max_r = defaults.dilation_radius;
    let mut detected = vec![0usize; max_r + 1];
    let mut clean_scores = Vec::with_capacity(n_views);
    for v in 0..n_views as u64 {
        let pose = sample_pose_uniform(derive(seed, &[v, 0]), radius)?;
        let clean = sampler.clean(&pose);
        clean_scores.push(cosine(&embedder.embed(&clean), &reference));
        let kind = if v % 2 == 0 { Corruption::PoseError } else { Corruption::GeometryWarp };
        let corrupt = sampler.corrupted(&pose, kind, derive(seed, &[v, 1]))?;
        let set = [clean, corrupt];
        for (r, d) in detected.iter_mut().enumerate() {
            let m = overlap_mask(&set, r)?;
            let bad = bad_pixel_count(&set[0], &m)?.max(bad_pixel_count(&set[1], &m)?);
            *d += (bad > defaults.tau_geo) as usize;
        }
    }
    let geometry_recall: Vec<f64> = detected.iter().map(|d| *d as f64 / n_views as f64).collect();
    let dilation_radius = (0..=max_r)
        .rev()
        .find(|r| geometry_recall[*r] >= GEOMETRY_CALIBRATION_RECALL)
        .unwrap_or(0);
    let tau_sem = percentile(&clean_scores, SEMANTIC_PERCENTILE)?;
    Ok(Calibration {
        thresholds: PruneThresholds {
            tau_sem: tau_sem.max(f64::MIN_POSITIVE),
            dilation_radius,
            ..defaults
        },
        clean_scores,
        geometry_recall,
    })
}

/// Detection quality of pruning against injected ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub views: usize,
    pub corrupted_views: usize,
    pub detected: usize,
    pub clean_views: usize,
    pub false_discards: usize,
    /// Detected / corrupted, per corruption kind in declaration order.
    pub recall_by_kind: [f64; 3],
}

impl BenchmarkReport {
    pub fn recall(&self) -> f64 {
        self.detected as f64 / self.corrupted_views.max(1) as f64
    }

    pub fn false_discard_rate(&self) -> f64 {
        self.false_discards as f64 / self.clean_views.max(1) as f64
    }
}

/// Views at uniform poses; each view is corrupted with probability
/// `corruption_rate`, in which case one of its `n_parallel` samples (chosen
/// uniformly) is replaced by a corruption of a uniformly chosen kind.
pub fn pruning_benchmark(
    sampler: &OracleSampler,
    thresholds: &PruneThresholds,
    embedder: &dyn Embedder,
    n_views: usize,
    corruption_rate: f64,
    seed: u64,
) -> Result<BenchmarkReport> {
    const KINDS: [Corruption; 3] = [Corruption::PoseError, Corruption::GeometryWarp, Corruption::SemanticSwap];
    let reference = &sampler.condition().reference_image;
    let mut report = BenchmarkReport {
        views: n_views,
        corrupted_views: 0,
        detected: 0,
        clean_views: 0,
        false_discards: 0,
        recall_by_kind: [0.0; 3],
    };
    let mut per_kind = [(0usize, 0usize); 3];
    for v in 0..n_views as u64 {
        let pose = sample_pose_uniform(derive(seed, &[v, 0]), sampler.condition().reference_pose.radius())?;
        let mut samples = vec![sampler.clean(&pose); thresholds.n_parallel];
        let corrupt = hash_unit(seed, &[v, 1]) < corruption_rate;
        let kind = ((hash_unit(seed, &[v, 2]) * 3.0) as usize).min(2);
        if corrupt {
            let slot = ((hash_unit(seed, &[v, 3]) * samples.len() as f64) as usize).min(samples.len() - 1);
            samples[slot] = sampler.corrupted(&pose, KINDS[kind], derive(seed, &[v, 4]))?;
        }
        let discarded = !prune_view(&samples, reference, thresholds, embedder)?.kept();
        if corrupt {
            report.corrupted_views += 1;
            report.detected += discarded as usize;
            per_kind[kind].0 += 1;
            per_kind[kind].1 += discarded as usize;
        } else {
            report.clean_views += 1;
            report.false_discards += discarded as usize;
        }
    }
    report.recall_by_kind = per_kind.map(|(n, d)| d as f64 / n.max(1) as f64);
    Ok(report)
}

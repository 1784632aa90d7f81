//! The pinned desk-scale run: reference cache, both training stages and
//! the evaluations compared across them. Every step is resumable; finished
//! steps are detected from their outputs under the run root.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cache::{to_json, write_atomic, CacheRecipe, SampleCache, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport};
use crate::generator::Generator;
use crate::perceptual::RandomPyramid;
use crate::prune::RandomProjectionEmbedder;
use crate::trainer::{load_checkpoint, resume_state, train_stage1, train_stage2, MetricsRecord, RunDir, TrainConfig, TrainState};

pub const CACHE_DIR: &str = "cache";
pub const RUN_DIR: &str = "run";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSummary {
    pub untrained: EvalReport,
    pub after_stage1: EvalReport,
    pub after_stage2: EvalReport,
    pub probe_consistency_start: f64,
    pub probe_consistency_end: f64,
    /// Peak and final held-out critic accuracy over stage 1.
    pub d_accuracy_peak: f64,
    pub d_accuracy_final: f64,
}

/// Stages and steps of a reference run.
#[derive(Clone, Debug)]
pub struct ReferencePlan {
    pub recipe: CacheRecipe,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub eval: EvalConfig,
    pub workers: usize,
}

impl Default for ReferencePlan {
    fn default() -> Self {
        Self {
            recipe: CacheRecipe::reference(),
            stage1: TrainConfig::reference(1),
            stage2: TrainConfig::reference(2),
            eval: EvalConfig::default(),
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

fn cached_eval(
    path: &Path,
    gen: &Generator,
    cfg: &TrainConfig,
    cache: &SampleCache,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    if let Ok(text) = fs::read_to_string(path) {
        if let Ok(rep) = serde_json::from_str(&text) {
            return Ok(rep);
        }
    }
    let reference = cache.reference_image()?;
    let rep = evaluate(
        gen,
        &cfg.render,
        &reference,
        &cache.manifest.reference_pose,
        &RandomProjectionEmbedder::default(),
        &RandomPyramid::default(),
        eval,
    )?;
    write_atomic(path, &to_json(&rep, "evaluation report")?)?;
    Ok(rep)
}

fn final_state(run: &RunDir, cfg: &TrainConfig) -> Result<Option<TrainState>> {
    Ok(resume_state(run, cfg, false)?.filter(|s| s.iteration >= cfg.iterations))
}

/// Runs (or finishes) the reference pipeline under `root`.
pub fn run_reference(root: &Path, plan: &ReferencePlan, progress: &mut dyn FnMut(&str)) -> Result<ReferenceSummary> {
    let cache_dir = root.join(CACHE_DIR);
    let cache = if cache_dir.join(MANIFEST_FILE).exists() {
        SampleCache::load(&cache_dir)?
    } else {
        progress("building the reference cache");
        plan.recipe.build(&RandomProjectionEmbedder::default(), &cache_dir, plan.workers)?
    };
    let run = RunDir::create(&root.join(RUN_DIR))?;

    let untrained = cached_eval(
        &root.join("eval-untrained.json"),
        &TrainState::initial(&plan.stage1)?.generator,
        &plan.stage1,
        &cache,
        &plan.eval,
    )?;
    progress(&format!("untrained: {untrained:?}"));

    let s1 = match final_state(&run, &plan.stage1)? {
        Some(s) => s,
        None => {
            let resume = resume_state(&run, &plan.stage1, false)?;
            train_stage1(&plan.stage1, &cache, resume, Some(&run), &mut |r: &MetricsRecord| {
                progress(&serde_json::to_string(r).unwrap_or_default())
            })?
        }
    };
    let after_stage1 = cached_eval(&root.join("eval-stage1.json"), &s1.generator, &plan.stage1, &cache, &plan.eval)?;
    progress(&format!("after stage 1: {after_stage1:?}"));

    let s2 = match final_state(&run, &plan.stage2)? {
        Some(s) => s,
        None => {
            let resume = resume_state(&run, &plan.stage2, false)?;
            train_stage2(&plan.stage2, &s1, &cache, resume, Some(&run), &mut |r: &MetricsRecord| {
                progress(&serde_json::to_string(r).unwrap_or_default())
            })?
        }
    };
    let after_stage2 = cached_eval(&root.join("eval-stage2.json"), &s2.generator, &plan.stage2, &cache, &plan.eval)?;
    progress(&format!("after stage 2: {after_stage2:?}"));

    let acc: Vec<f64> = s1.records.iter().filter_map(|r| r.d_accuracy).collect();
    let probe_end = s2
        .records
        .iter()
        .rev()
        .find_map(|r| r.probe_consistency)
        .ok_or_else(|| Error::Checkpoint("stage 2 recorded no probe consistency".into()))?;
    let summary = ReferenceSummary {
        untrained,
        after_stage1,
        after_stage2,
        probe_consistency_start: s2
            .probe_baseline
            .ok_or_else(|| Error::Checkpoint("stage 2 has no probe baseline".into()))?,
        probe_consistency_end: probe_end,
        d_accuracy_peak: acc.iter().cloned().fold(f64::NAN, f64::max),
        d_accuracy_final: acc.last().copied().unwrap_or(f64::NAN),
    };
    write_atomic(&root.join(SUMMARY_FILE), &to_json(&summary, "reference summary")?)?;
    Ok(summary)
}

/// The final stage-2 checkpoint of a finished reference run.
pub fn reference_checkpoint(root: &Path) -> Option<PathBuf> {
    let run = RunDir { root: root.join(RUN_DIR) };
    let path = run.latest_checkpoint(2)?;
    let (cfg, st) = load_checkpoint(&path).ok()?;
    (st.iteration >= cfg.iterations).then_some(path)
}

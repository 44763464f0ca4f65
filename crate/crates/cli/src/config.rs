use std::path::{Path, PathBuf};

use emednext::inference::{EnsembleWeights, SlidingWindowConfig, TtaMode};
use emednext::metrics::EvalConfig;
use emednext::postprocess::PostprocessConfig;
use emednext::preprocess::PreprocessConfig;
use serde::{Deserialize, Serialize};

use crate::ConfigError;

/// Model directories and their per-class (TC, WT, ET) weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub models: Vec<PathBuf>,
    /// Uniform when absent.
    pub weights: Option<Vec<[f64; 3]>>,
}

impl EnsembleConfig {
    pub fn weights(&self) -> EnsembleWeights {
        match &self.weights {
            Some(w) => EnsembleWeights(w.clone()),
            None => EnsembleWeights::uniform(self.models.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub input_dir: PathBuf,
    pub work_dir: PathBuf,
    pub output_dir: PathBuf,
    pub preprocess: PreprocessConfig,
    pub sliding_window: SlidingWindowConfig,
    pub tta: TtaMode,
    pub ensemble: EnsembleConfig,
    pub postprocess: PostprocessConfig,
    pub eval: EvalConfig,
    pub workers: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input_dir: "input".into(),
            work_dir: "work".into(),
            output_dir: "output".into(),
            preprocess: PreprocessConfig::default(),
            sliding_window: SlidingWindowConfig::default(),
            tta: TtaMode::default(),
            ensemble: EnsembleConfig::default(),
            postprocess: PostprocessConfig::default(),
            eval: EvalConfig::default(),
            workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
    }

    /// Checks everything that does not need the filesystem.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: emednext::Error| ConfigError(e.to_string());
        if self.workers == 0 {
            return Err(ConfigError("workers must be at least 1".into()));
        }
        let dirs = [&self.input_dir, &self.work_dir, &self.output_dir];
        for i in 0..3 {
            for j in i + 1..3 {
                if dirs[i] == dirs[j] {
                    return Err(ConfigError(format!("input, work and output directories must differ ({})", dirs[i].display())));
                }
            }
        }
        self.preprocess.validate().map_err(bad)?;
        self.sliding_window.validate().map_err(bad)?;
        self.postprocess.validate().map_err(bad)?;
        if self.eval.nsd_tolerances_mm.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(ConfigError(format!("nsd tolerances {:?}", self.eval.nsd_tolerances_mm)));
        }
        if !self.ensemble.models.is_empty() {
            let w = self.ensemble.weights();
            if w.0.len() != self.ensemble.models.len() {
                return Err(ConfigError(format!("{} weight vectors for {} models", w.0.len(), self.ensemble.models.len())));
            }
            w.validate().map_err(bad)?;
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        if self.preprocess.add_foreground_channel {
            5
        } else {
            4
        }
    }

    pub fn preprocessed_dir(&self, case: &str) -> PathBuf {
        self.work_dir.join("preprocessed").join(case)
    }

    pub fn meta_path(&self, case: &str) -> PathBuf {
        self.preprocessed_dir(case).join(format!("{case}-meta.json"))
    }

    pub fn acc_dir(&self, case: &str) -> PathBuf {
        self.work_dir.join("acc").join(case)
    }

    pub fn probs_path(&self, case: &str) -> PathBuf {
        self.output_dir.join("probs").join(format!("{case}-probs.nii.gz"))
    }

    pub fn seg_path(&self, case: &str) -> PathBuf {
        self.output_dir.join("seg").join(format!("{case}-seg.nii.gz"))
    }

    pub fn gt_path(&self, case: &str) -> PathBuf {
        self.input_dir.join(case).join(format!("{case}-seg.nii.gz"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.work_dir.join("manifest.jsonl")
    }
}

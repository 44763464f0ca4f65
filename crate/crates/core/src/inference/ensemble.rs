//! Weighted two-pass ensembling: each model adds `w * P` to a per-case
//! accumulator on disk; a final pass divides by the accumulated weights.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{GridGeometry, ProbMaps, Region};

/// One `(TC, WT, ET)` weight triple per model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights(pub Vec<[f64; 3]>);

impl EnsembleWeights {
    pub fn uniform(models: usize) -> Self {
        EnsembleWeights(vec![[1.0; 3]; models])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().flatten().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("ensemble weights must be finite and nonnegative".into()));
        }
        for (c, region) in Region::ALL.iter().enumerate() {
            if self.0.iter().map(|w| w[c]).sum::<f64>() <= 0.0 {
                return Err(Error::Config(format!("ensemble weights for {} sum to zero", region.name())));
            }
        }
        Ok(())
    }
}

/// Running weighted sums (f64, so that a single model divides back to its
/// own probabilities exactly) and weight totals per region.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleAccumulator {
    geometry: GridGeometry,
    sums: [Vec<f64>; 3],
    totals: [f64; 3],
    models_seen: Vec<String>,
    weights: Vec<[f64; 3]>,
}

#[derive(Serialize, Deserialize)]
struct State {
    geometry: GridGeometry,
    models_seen: Vec<String>,
    weights: Vec<[f64; 3]>,
    totals: [f64; 3],
}

const BLOBS: [&str; 3] = ["tc.f64", "wt.f64", "et.f64"];

impl EnsembleAccumulator {
    pub fn new(geometry: GridGeometry) -> Self {
        let n = geometry.len();
        EnsembleAccumulator {
            geometry,
            sums: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            totals: [0.0; 3],
            models_seen: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn totals(&self) -> [f64; 3] {
        self.totals
    }

    pub fn sums(&self, region: Region) -> &[f64] {
        &self.sums[region.channel()]
    }

    pub fn models_seen(&self) -> &[String] {
        &self.models_seen
    }

    pub fn has_seen(&self, model_id: &str) -> bool {
        self.models_seen.iter().any(|m| m == model_id)
    }

    pub fn accumulate(&mut self, model_id: &str, probs: &ProbMaps, w: [f64; 3]) -> Result<()> {
        if probs.geometry().shape != self.geometry.shape {
            return Err(Error::Shape(format!(
                "probabilities {:?} vs accumulator {:?}",
                probs.geometry().shape,
                self.geometry.shape
            )));
        }
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Argument(format!("weights {w:?} must be finite and nonnegative")));
        }
        for region in Region::ALL {
            let c = region.channel();
            if w[c] == 0.0 {
                continue;
            }
            for (s, &p) in self.sums[c].iter_mut().zip(probs.get(region)) {
                *s += w[c] * p as f64;
            }
            self.totals[c] += w[c];
        }
        self.models_seen.push(model_id.to_string());
        self.weights.push(w);
        Ok(())
    }

    /// `sum / total` per region.
    pub fn normalize(&self) -> Result<ProbMaps> {
        let mut out = ProbMaps::zeros(self.geometry);
        for region in Region::ALL {
            let c = region.channel();
            let t = self.totals[c];
            if !(t > 0.0) {
                return Err(Error::Argument(format!("no weight accumulated for {}", region.name())));
            }
            for (o, s) in out.get_mut(region).iter_mut().zip(&self.sums[c]) {
                *o = ((s / t) as f32).clamp(0.0, 1.0);
            }
        }
        Ok(out)
    }

    fn write_into(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (c, name) in BLOBS.iter().enumerate() {
            let path = dir.join(name);
            let bytes: Vec<u8> = self.sums[c].iter().flat_map(|v| v.to_le_bytes()).collect();
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        let state = State {
            geometry: self.geometry,
            models_seen: self.models_seen.clone(),
            weights: self.weights.clone(),
            totals: self.totals,
        };
        let path = dir.join("state.json");
        let text = serde_json::to_string_pretty(&state).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Replaces `dir` with the current state. The previous contents stay
    /// readable (as `dir.old`) until the new directory is in place.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = sibling(dir, "tmp");
        let old = sibling(dir, "old");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        self.write_into(&tmp)?;
        if dir.exists() {
            if old.exists() {
                fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
            }
            fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(&tmp, e))?;
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        Ok(())
    }

    /// Loads the last completed state, or `None` if nothing was saved.
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let old = sibling(dir, "old");
        let src = if dir.join("state.json").exists() {
            dir.to_path_buf()
        } else if old.join("state.json").exists() {
            old
        } else {
            return Ok(None);
        };
        let path = src.join("state.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: State = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        state.geometry.validate()?;
        let n = state.geometry.len();
        let mut sums: [Vec<f64>; 3] = Default::default();
        for (c, name) in BLOBS.iter().enumerate() {
            let path = src.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() != 8 * n {
                return Err(Error::Format(format!("{}: {} bytes, expected {}", path.display(), bytes.len(), 8 * n)));
            }
            sums[c] = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        }
        Ok(Some(EnsembleAccumulator {
            geometry: state.geometry,
            sums,
            totals: state.totals,
            models_seen: state.models_seen,
            weights: state.weights,
        }))
    }
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{suffix}"));
    dir.with_file_name(name)
}

/// Free-function form of [`EnsembleAccumulator::normalize`].
pub fn normalize_ensemble(acc: &EnsembleAccumulator) -> Result<ProbMaps> {
    acc.normalize()
}

//! Probability maps to a fused label map: per-region thresholds,
//! component filtering, ET ⊆ TC ⊆ WT nesting, priority fusion.

mod components;

pub use components::{label_components_26, ComponentStats, Components};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelMap, ProbMaps, Region};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub tau_tc: f64,
    pub tau_wt: f64,
    pub tau_et: f64,
    pub gamma_tc: usize,
    pub gamma_wt: usize,
    pub gamma_et: usize,
    pub eta_tc: f64,
    pub eta_wt: f64,
    pub eta_et: f64,
    pub max_components: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            tau_tc: 0.625,
            tau_wt: 0.5,
            tau_et: 0.625,
            gamma_tc: 150,
            gamma_wt: 500,
            gamma_et: 100,
            eta_tc: 0.1,
            eta_wt: 0.1,
            eta_et: 0.1,
            max_components: 10,
        }
    }
}

impl PostprocessConfig {
    /// Final-submission setting: default thresholds with ET components of
    /// 30 voxels or more kept.
    pub fn final_submission() -> Self {
        PostprocessConfig {
            gamma_et: 30,
            ..Default::default()
        }
    }

    /// Same threshold for every region (the 0.5 / 0.7 sweeps).
    pub fn with_threshold(tau: f64) -> Self {
        PostprocessConfig {
            tau_tc: tau,
            tau_wt: tau,
            tau_et: tau,
            ..Default::default()
        }
    }

    pub fn tau(&self, r: Region) -> f64 {
        match r {
            Region::Tc => self.tau_tc,
            Region::Wt => self.tau_wt,
            Region::Et => self.tau_et,
        }
    }

    pub fn gamma(&self, r: Region) -> usize {
        match r {
            Region::Tc => self.gamma_tc,
            Region::Wt => self.gamma_wt,
            Region::Et => self.gamma_et,
        }
    }

    pub fn eta(&self, r: Region) -> f64 {
        match r {
            Region::Tc => self.eta_tc,
            Region::Wt => self.eta_wt,
            Region::Et => self.eta_et,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for r in Region::ALL {
            let (t, g, e) = (self.tau(r), self.gamma(r), self.eta(r));
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("tau_{} = {t} not in (0, 1)", r.name().to_lowercase())));
            }
            if g < 1 {
                return Err(Error::Config(format!("gamma_{} must be at least 1", r.name().to_lowercase())));
            }
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config(format!("eta_{} = {e} not in [0, 1]", r.name().to_lowercase())));
            }
        }
        if self.max_components == 0 {
            return Err(Error::Config("max_components must be at least 1".into()));
        }
        Ok(())
    }
}

/// Binary masks per region, all on one grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMasks {
    pub shape: [usize; 3],
    pub tc: Vec<bool>,
    pub wt: Vec<bool>,
    pub et: Vec<bool>,
}

impl RegionMasks {
    /// WT = {1,2,3}, TC = {2,3}, ET = {3}.
    pub fn from_labels(labels: &LabelMap) -> Self {
        RegionMasks {
            shape: labels.geometry().shape,
            tc: labels.mask_of(Region::Tc.labels()),
            wt: labels.mask_of(Region::Wt.labels()),
            et: labels.mask_of(Region::Et.labels()),
        }
    }

    pub fn get(&self, r: Region) -> &[bool] {
        match r {
            Region::Tc => &self.tc,
            Region::Wt => &self.wt,
            Region::Et => &self.et,
        }
    }

    pub fn is_nested(&self) -> bool {
        (0..self.et.len()).all(|i| (!self.et[i] || self.tc[i]) && (!self.tc[i] || self.wt[i]))
    }
}

/// `mask_c = P_c >= tau_c`.
pub fn threshold_channels(probs: &ProbMaps, cfg: &PostprocessConfig) -> RegionMasks {
    let th = |r: Region| probs.get(r).iter().map(|&p| p as f64 >= cfg.tau(r)).collect();
    RegionMasks {
        shape: probs.geometry().shape,
        tc: th(Region::Tc),
        wt: th(Region::Wt),
        et: th(Region::Et),
    }
}

/// Keeps components with at least `gamma` voxels and mean probability at
/// least `eta`; of those, the `max_components` largest (ties: lower id).
pub fn prune_components(
    mask: &[bool],
    probs: &[f32],
    shape: [usize; 3],
    gamma: usize,
    eta: f64,
    max_components: usize,
) -> Vec<bool> {
    let cc = label_components_26(mask, shape);
    let mut passing: Vec<ComponentStats> = cc
        .stats(probs)
        .into_iter()
        .filter(|s| s.voxel_count >= gamma && s.mean_prob >= eta)
        .collect();
    passing.sort_by(|a, b| b.voxel_count.cmp(&a.voxel_count).then(a.id.cmp(&b.id)));
    passing.truncate(max_components);
    let mut keep = vec![false; cc.count + 1];
    for s in &passing {
        keep[s.id as usize] = true;
    }
    cc.labels.iter().map(|&l| keep[l as usize]).collect()
}

fn prune_region(mask: &[bool], probs: &ProbMaps, r: Region, cfg: &PostprocessConfig) -> Vec<bool> {
    prune_components(mask, probs.get(r), probs.geometry().shape, cfg.gamma(r), cfg.eta(r), cfg.max_components)
}

fn or_into(dst: &mut [bool], src: &[bool]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d |= s);
}

/// Propagates ET into TC and TC into WT, re-prunes each region, and
/// re-adds the surviving subsets so nesting holds on output.
pub fn enforce_hierarchy(masks: &RegionMasks, probs: &ProbMaps, cfg: &PostprocessConfig) -> RegionMasks {
    let mut tc = masks.tc.clone();
    or_into(&mut tc, &masks.et);
    let mut wt = masks.wt.clone();
    or_into(&mut wt, &tc);

    let et = prune_region(&masks.et, probs, Region::Et, cfg);
    let mut tc = prune_region(&tc, probs, Region::Tc, cfg);
    or_into(&mut tc, &et);
    let mut wt = prune_region(&wt, probs, Region::Wt, cfg);
    or_into(&mut wt, &tc);
    RegionMasks {
        shape: masks.shape,
        tc,
        wt,
        et,
    }
}

/// 3 where ET, else 2 where TC, else 1 where WT, else 0.
pub fn fuse_labels(masks: &RegionMasks) -> Vec<u8> {
    (0..masks.et.len())
        .map(|i| {
            if masks.et[i] {
                3
            } else if masks.tc[i] {
                2
            } else if masks.wt[i] {
                1
            } else {
                0
            }
        })
        .collect()
}

pub fn postprocess_pipeline(probs: &ProbMaps, cfg: &PostprocessConfig) -> Result<LabelMap> {
    cfg.validate()?;
    let t = threshold_channels(probs, cfg);
    let pruned = RegionMasks {
        shape: t.shape,
        tc: prune_region(&t.tc, probs, Region::Tc, cfg),
        wt: prune_region(&t.wt, probs, Region::Wt, cfg),
        et: prune_region(&t.et, probs, Region::Et, cfg),
    };
    let nested = enforce_hierarchy(&pruned, probs, cfg);
    LabelMap::new(*probs.geometry(), fuse_labels(&nested))
}

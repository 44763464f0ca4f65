//! Overlap and surface metrics: Dice, normalised surface Dice (NSD) and
//! their lesion-wise variants.
//!
//! Lesion-wise protocol (the usual BraTS convention): ground-truth lesions
//! are 26-connected components; a predicted component matches a lesion if it
//! touches the lesion dilated by `dilation_vox` voxels (26-neighbourhood
//! cube). Each lesion is scored against the union of its matches; missed
//! lesions and unmatched predicted components each add a score of 0; the
//! result is the mean. No lesions and no predictions scores 1.

mod edt;

pub use edt::squared_edt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::postprocess::{label_components_26, RegionMasks};
use crate::volume::{LabelMap, Region};

fn check_len(a: &[bool], b: &[bool], shape: [usize; 3]) -> Result<()> {
    let n: usize = shape.iter().product();
    if a.len() != n || b.len() != n {
        return Err(Error::Shape(format!("masks of {} and {} voxels on a {shape:?} grid", a.len(), b.len())));
    }
    Ok(())
}

/// `2|P ∩ G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("masks of {} and {} voxels", pred.len(), gt.len())));
    }
    let (mut inter, mut sp, mut sg) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        sp += p as usize;
        sg += g as usize;
    }
    if sp + sg == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sp + sg) as f64)
}

/// Mask voxels with at least one face neighbour outside the mask (the
/// grid boundary counts as outside).
pub fn surface_voxels(mask: &[bool], shape: [usize; 3]) -> Vec<bool> {
    let [nx, ny, nz] = shape;
    let at = |x: isize, y: isize, z: isize| {
        x >= 0 && y >= 0 && z >= 0 && (x as usize) < nx && (y as usize) < ny && (z as usize) < nz && mask[x as usize + nx * (y as usize + ny * z as usize)]
    };
    let mut out = vec![false; mask.len()];
    for z in 0..nz as isize {
        for y in 0..ny as isize {
            for x in 0..nx as isize {
                let i = x as usize + nx * (y as usize + ny * z as usize);
                if mask[i] {
                    out[i] = !(at(x - 1, y, z) && at(x + 1, y, z) && at(x, y - 1, z) && at(x, y + 1, z) && at(x, y, z - 1) && at(x, y, z + 1));
                }
            }
        }
    }
    out
}

const TOL_EPS: f64 = 1e-9;

/// Squared surface-to-surface distances in both directions.
struct SurfaceDistances {
    pred_to_gt: Vec<f64>,
    gt_to_pred: Vec<f64>,
}

fn surface_distances(pred: &[bool], gt: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> SurfaceDistances {
    let sp = surface_voxels(pred, shape);
    let sg = surface_voxels(gt, shape);
    let dg = squared_edt(&sg, shape, spacing);
    let dp = squared_edt(&sp, shape, spacing);
    SurfaceDistances {
        pred_to_gt: sp.iter().zip(&dg).filter(|(&s, _)| s).map(|(_, &d)| d).collect(),
        gt_to_pred: sg.iter().zip(&dp).filter(|(&s, _)| s).map(|(_, &d)| d).collect(),
    }
}

impl SurfaceDistances {
    fn nsd(&self, tol: f64) -> f64 {
        let t2 = tol * tol + TOL_EPS;
        let within = self.pred_to_gt.iter().chain(&self.gt_to_pred).filter(|&&d| d <= t2).count();
        within as f64 / (self.pred_to_gt.len() + self.gt_to_pred.len()) as f64
    }
}

fn empty_convention(pred: &[bool], gt: &[bool]) -> Option<f64> {
    match (pred.iter().any(|&v| v), gt.iter().any(|&v| v)) {
        (false, false) => Some(1.0),
        (true, false) | (false, true) => Some(0.0),
        _ => None,
    }
}

/// Share of both surfaces lying within `tolerance_mm` of the other one.
pub fn nsd(pred: &[bool], gt: &[bool], shape: [usize; 3], spacing: [f64; 3], tolerance_mm: f64) -> Result<f64> {
    nsd_multi(pred, gt, shape, spacing, &[tolerance_mm]).map(|v| v[0])
}

/// [`nsd`] at several tolerances, sharing one pair of distance transforms.
pub fn nsd_multi(pred: &[bool], gt: &[bool], shape: [usize; 3], spacing: [f64; 3], tolerances: &[f64]) -> Result<Vec<f64>> {
    check_len(pred, gt, shape)?;
    if let Some(t) = tolerances.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::Argument(format!("NSD tolerance must be positive, got {t}")));
    }
    if let Some(v) = empty_convention(pred, gt) {
        return Ok(vec![v; tolerances.len()]);
    }
    let d = surface_distances(pred, gt, shape, spacing);
    Ok(tolerances.iter().map(|&t| d.nsd(t)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LesionMetric {
    Dice,
    /// Tolerance in mm.
    Nsd(f64),
}

/// Copies the `[lo, hi]` box (inclusive) of `labels`, keeping voxels for
/// which `keep` holds.
fn crop_where(labels: &[u32], shape: [usize; 3], lo: [usize; 3], hi: [usize; 3], keep: impl Fn(u32) -> bool) -> (Vec<bool>, [usize; 3]) {
    let cs: [usize; 3] = std::array::from_fn(|a| hi[a] - lo[a] + 1);
    let mut out = Vec::with_capacity(cs.iter().product());
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            let s = lo[0] + shape[0] * (y + shape[1] * z);
            out.extend(labels[s..s + cs[0]].iter().map(|&l| keep(l)));
        }
    }
    (out, cs)
}

struct Lesion {
    gt: Vec<bool>,
    pred: Vec<bool>,
    shape: [usize; 3],
}

fn match_lesions(pred: &[bool], gt: &[bool], shape: [usize; 3], dilation_vox: usize) -> (Vec<Lesion>, usize) {
    let [nx, ny, nz] = shape;
    let gcc = label_components_26(gt, shape);
    let pcc = label_components_26(pred, shape);
    let gstats = gcc.stats(&vec![0.0; gt.len()]);
    let pstats = pcc.stats(&vec![0.0; pred.len()]);
    let mut matched = vec![false; pcc.count + 1];
    let d = dilation_vox;
    let mut lesions = Vec::with_capacity(gcc.count);
    for s in &gstats {
        let lo: [usize; 3] = std::array::from_fn(|a| s.bbox_min[a].saturating_sub(d));
        let hi: [usize; 3] = std::array::from_fn(|a| (s.bbox_max[a] + d).min(shape[a] - 1));
        // predicted components touching the dilated lesion
        let mut hits = Vec::new();
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let p = pcc.labels[x + nx * (y + ny * z)];
                    if p == 0 || hits.contains(&p) {
                        continue;
                    }
                    let near = (z.saturating_sub(d)..=(z + d).min(nz - 1)).any(|zz| {
                        (y.saturating_sub(d)..=(y + d).min(ny - 1)).any(|yy| {
                            (x.saturating_sub(d)..=(x + d).min(nx - 1)).any(|xx| gcc.labels[xx + nx * (yy + ny * zz)] == s.id)
                        })
                    });
                    if near {
                        hits.push(p);
                    }
                }
            }
        }
        for &h in &hits {
            matched[h as usize] = true;
        }
        // box covering the lesion and its matches, plus one voxel so that
        // surfaces are unchanged by the crop
        let mut blo = s.bbox_min;
        let mut bhi = s.bbox_max;
        for &h in &hits {
            let ps = &pstats[h as usize - 1];
            for a in 0..3 {
                blo[a] = blo[a].min(ps.bbox_min[a]);
                bhi[a] = bhi[a].max(ps.bbox_max[a]);
            }
        }
        let blo: [usize; 3] = std::array::from_fn(|a| blo[a].saturating_sub(1));
        let bhi: [usize; 3] = std::array::from_fn(|a| (bhi[a] + 1).min(shape[a] - 1));
        let (g, cs) = crop_where(&gcc.labels, shape, blo, bhi, |l| l == s.id);
        let (p, _) = crop_where(&pcc.labels, shape, blo, bhi, |l| l != 0 && hits.contains(&l));
        lesions.push(Lesion { gt: g, pred: p, shape: cs });
    }
    let false_pos = (1..=pcc.count).filter(|&k| !matched[k]).count();
    (lesions, false_pos)
}

/// Lesion-wise scores for several metrics over one matching.
pub fn lesionwise_multi(
    pred: &[bool],
    gt: &[bool],
    shape: [usize; 3],
    spacing: [f64; 3],
    metrics: &[LesionMetric],
    dilation_vox: usize,
) -> Result<Vec<f64>> {
    check_len(pred, gt, shape)?;
    let (lesions, fp) = match_lesions(pred, gt, shape, dilation_vox);
    let n = lesions.len() + fp;
    if n == 0 {
        return Ok(vec![1.0; metrics.len()]);
    }
    let tols: Vec<f64> = metrics
        .iter()
        .filter_map(|m| match m {
            LesionMetric::Nsd(t) => Some(*t),
            LesionMetric::Dice => None,
        })
        .collect();
    let per_lesion = par::map_slice(&lesions, |l| -> Result<Vec<f64>> {
        let nsds = if tols.is_empty() { Vec::new() } else { nsd_multi(&l.pred, &l.gt, l.shape, spacing, &tols)? };
        let mut k = 0;
        metrics
            .iter()
            .map(|m| match m {
                LesionMetric::Dice => dice(&l.pred, &l.gt),
                LesionMetric::Nsd(_) => {
                    k += 1;
                    Ok(nsds[k - 1])
                }
            })
            .collect()
    });
    let mut sums = vec![0.0; metrics.len()];
    for s in per_lesion {
        for (acc, v) in sums.iter_mut().zip(s?) {
            *acc += v;
        }
    }
    Ok(sums.into_iter().map(|s| s / n as f64).collect())
}

pub fn lesionwise(
    pred: &[bool],
    gt: &[bool],
    shape: [usize; 3],
    spacing: [f64; 3],
    metric: LesionMetric,
    dilation_vox: usize,
) -> Result<f64> {
    lesionwise_multi(pred, gt, shape, spacing, &[metric], dilation_vox).map(|v| v[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub dilation_vox: usize,
    /// The two NSD tolerances reported, in mm.
    pub nsd_tolerances_mm: [f64; 2],
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            dilation_vox: 1,
            nsd_tolerances_mm: [0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub dice: f64,
    pub nsd05: f64,
    pub nsd10: f64,
    pub lw_dice: f64,
    pub lw_nsd05: f64,
    pub lw_nsd10: f64,
}

impl RegionMetrics {
    pub fn values(&self) -> [f64; 6] {
        [self.dice, self.nsd05, self.nsd10, self.lw_dice, self.lw_nsd05, self.lw_nsd10]
    }

    fn from_values(v: [f64; 6]) -> Self {
        RegionMetrics {
            dice: v[0],
            nsd05: v[1],
            nsd10: v[2],
            lw_dice: v[3],
            lw_nsd05: v[4],
            lw_nsd10: v[5],
        }
    }
}

/// Report order of regions.
pub const REPORT_REGIONS: [Region; 3] = [Region::Wt, Region::Tc, Region::Et];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub wt: RegionMetrics,
    pub tc: RegionMetrics,
    pub et: RegionMetrics,
}

impl CaseMetrics {
    pub fn get(&self, r: Region) -> &RegionMetrics {
        match r {
            Region::Wt => &self.wt,
            Region::Tc => &self.tc,
            Region::Et => &self.et,
        }
    }
}

/// All six metrics for WT, TC and ET.
pub fn evaluate_case(case_id: &str, pred: &LabelMap, gt: &LabelMap, cfg: &EvalConfig) -> Result<CaseMetrics> {
    let (gp, gg) = (pred.geometry(), gt.geometry());
    if gp.shape != gg.shape || gp.spacing.iter().zip(&gg.spacing).any(|(a, b)| (a - b).abs() > 1e-6 * b.abs().max(1.0)) {
        return Err(Error::Shape(format!(
            "prediction grid {:?}/{:?} vs ground truth {:?}/{:?}",
            gp.shape, gp.spacing, gg.shape, gg.spacing
        )));
    }
    let [t0, t1] = cfg.nsd_tolerances_mm;
    let shape = gg.shape;
    let spacing = gg.spacing;
    let pm = RegionMasks::from_labels(pred);
    let gm = RegionMasks::from_labels(gt);
    let rows = par::map_slice(&REPORT_REGIONS, |&r| -> Result<RegionMetrics> {
        let (p, g) = (pm.get(r), gm.get(r));
        let d = dice(p, g)?;
        let n = nsd_multi(p, g, shape, spacing, &[t0, t1])?;
        let lw = lesionwise_multi(
            p,
            g,
            shape,
            spacing,
            &[LesionMetric::Dice, LesionMetric::Nsd(t0), LesionMetric::Nsd(t1)],
            cfg.dilation_vox,
        )?;
        Ok(RegionMetrics::from_values([d, n[0], n[1], lw[0], lw[1], lw[2]]))
    });
    let mut it = rows.into_iter();
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        wt: it.next().unwrap()?,
        tc: it.next().unwrap()?,
        et: it.next().unwrap()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    pub mean: Option<CohortMeans>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortMeans {
    pub wt: RegionMetrics,
    pub tc: RegionMetrics,
    pub et: RegionMetrics,
}

impl MetricsReport {
    /// Sorts cases by id and computes cohort means.
    pub fn new(mut cases: Vec<CaseMetrics>) -> Self {
        cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        let mean = (!cases.is_empty()).then(|| {
            let avg = |r: Region| {
                let mut s = [0.0; 6];
                for c in &cases {
                    for (a, v) in s.iter_mut().zip(c.get(r).values()) {
                        *a += v;
                    }
                }
                RegionMetrics::from_values(s.map(|v| v / cases.len() as f64))
            };
            CohortMeans {
                wt: avg(Region::Wt),
                tc: avg(Region::Tc),
                et: avg(Region::Et),
            }
        });
        MetricsReport { cases, mean }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// `case_id,class,dice,nsd05,nsd10,lw_dice,lw_nsd05,lw_nsd10`, one row
    /// per case and region.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("case_id,class,dice,nsd05,nsd10,lw_dice,lw_nsd05,lw_nsd10\n");
        for c in &self.cases {
            for r in REPORT_REGIONS {
                let v = c.get(r).values();
                s.push_str(&format!("{},{}", c.case_id, r.name()));
                for x in v {
                    s.push_str(&format!(",{x:.6}"));
                }
                s.push('\n');
            }
        }
        s
    }
}

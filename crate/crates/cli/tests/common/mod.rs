#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use emednext::model::{save_model, PointwiseModel, StoredModel};
use emednext::volume::{write_labels_nifti, write_nifti, GridGeometry, LabelMap, Volume};
use emednext_cli::PipelineConfig;

pub struct Phantom {
    pub shape: [usize; 3],
    pub center: [f64; 3],
    pub brain: f64,
    /// WT, TC, ET radii.
    pub radii: [f64; 3],
}

impl Phantom {
    pub fn new(shape: [usize; 3], center: [f64; 3]) -> Self {
        Phantom {
            shape,
            center,
            brain: 20.0,
            radii: [10.0, 6.0, 4.0],
        }
    }

    fn r(&self, i: usize) -> f64 {
        let [nx, ny, _] = self.shape;
        let p = [(i % nx) as f64, ((i / nx) % ny) as f64, (i / (nx * ny)) as f64];
        (0..3).map(|a| (p[a] - self.center[a]).powi(2)).sum::<f64>().sqrt()
    }

    pub fn labels(&self) -> Vec<u8> {
        let n = self.shape.iter().product();
        (0..n)
            .map(|i| match self.r(i) {
                d if d < self.radii[2] => 3,
                d if d < self.radii[1] => 2,
                d if d < self.radii[0] => 1,
                _ => 0,
            })
            .collect()
    }

    /// FLAIR lights up WT, T1ce ET, T2 TC; T1 is just textured brain. Each
    /// encoding modality is two-level inside the brain, so after z-scoring
    /// the region is exactly where the channel is positive.
    pub fn modalities(&self) -> [Vec<f32>; 4] {
        let labels = self.labels();
        let n = labels.len();
        let inside = |i: usize| self.r(i) < self.brain;
        let level = |i: usize, hi: bool| if !inside(i) { 0.0 } else if hi { 200.0 } else { 100.0 };
        [
            (0..n).map(|i| level(i, labels[i] >= 1)).collect(),
            (0..n).map(|i| if inside(i) { 150.0 + (i % 5) as f32 } else { 0.0 }).collect(),
            (0..n).map(|i| level(i, labels[i] == 3)).collect(),
            (0..n).map(|i| level(i, labels[i] >= 2)).collect(),
        ]
    }

    pub fn write_case(&self, input_dir: &Path, case: &str, with_label: bool, skip: Option<&str>) {
        let dir = input_dir.join(case);
        std::fs::create_dir_all(&dir).unwrap();
        let g = GridGeometry::new(self.shape, [1.0; 3]).unwrap();
        for (name, data) in ["flair", "t1", "t1ce", "t2"].iter().zip(self.modalities()) {
            if Some(*name) == skip {
                continue;
            }
            write_nifti(&Volume::new(1, g, data).unwrap(), dir.join(format!("{case}-{name}.nii.gz"))).unwrap();
        }
        if with_label {
            let l = LabelMap::new(g, self.labels()).unwrap();
            write_labels_nifti(&l, None, dir.join(format!("{case}-seg.nii.gz"))).unwrap();
        }
    }
}

/// Logit(TC) = g·t2, logit(WT) = g·flair, logit(ET) = g·t1ce, minus 1 so that
/// zero-valued background stays below every threshold.
pub fn oracle_model(gain: f32) -> StoredModel {
    let mut w = vec![0.0; 15];
    w[3] = gain;
    w[5] = gain;
    w[10 + 2] = gain;
    StoredModel::Pointwise(PointwiseModel::new(5, 3, w, vec![-1.0; 3]).unwrap())
}

pub fn save(dir: &Path, m: &StoredModel) -> PathBuf {
    save_model(dir, m).unwrap();
    dir.to_path_buf()
}

pub struct Layout {
    pub root: tempfile::TempDir,
}

impl Layout {
    pub fn new() -> Self {
        Layout {
            root: tempfile::tempdir().unwrap(),
        }
    }

    pub fn input(&self) -> PathBuf {
        self.root.path().join("input")
    }

    /// Config rooted under `<root>/<tag>`, sharing the input directory.
    pub fn config(&self, tag: &str, models: Vec<PathBuf>) -> PipelineConfig {
        let mut c = PipelineConfig {
            input_dir: self.input(),
            work_dir: self.root.path().join(tag).join("work"),
            output_dir: self.root.path().join(tag).join("out"),
            workers: 2,
            ..Default::default()
        };
        c.preprocess.target_shape = [48, 48, 48];
        c.sliding_window.patch_shape = [32, 32, 32];
        c.ensemble.models = models;
        c
    }

    pub fn write_config(&self, c: &PipelineConfig, name: &str) -> PathBuf {
        let p = self.root.path().join(name);
        std::fs::write(&p, serde_json::to_string_pretty(c).unwrap()).unwrap();
        p
    }
}

pub fn emednext(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_emednext"))
        .args(args)
        .env_remove("EMEDNEXT_WORKERS")
        .output()
        .unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

pub fn sha256(path: &Path) -> String {
    emednext_cli::manifest::sha256_file(path).unwrap()
}

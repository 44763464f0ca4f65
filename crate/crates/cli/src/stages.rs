use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use emednext::inference::{check_model_input, normalize_ensemble, restore_labels, tta_predict, EnsembleAccumulator};
use emednext::metrics::{evaluate_case, MetricsReport};
use emednext::model::{load_model, StoredModel};
use emednext::par;
use emednext::postprocess::postprocess_pipeline;
use emednext::preprocess::{stack_case, CaseMeta, MODALITIES};
use emednext::volume::{read_nifti, read_nifti_with_affine, write_labels_nifti, write_nifti, AffineBlock, LabelMap, ProbMaps};

use crate::config::PipelineConfig;
use crate::manifest::{now, sha256_file, CaseManifest, ManifestWriter, Status};
use crate::{ConfigError, EXIT_OK, EXIT_PARTIAL};

/// Cases that went through a stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub ok: Vec<String>,
    pub failed: Vec<(String, String)>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.failed.is_empty() {
            EXIT_OK
        } else {
            EXIT_PARTIAL
        }
    }

    fn merge(&mut self, other: Outcome) {
        self.ok.extend(other.ok);
        self.failed.extend(other.failed);
    }
}

#[derive(Default)]
struct CaseRecord {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    warnings: Vec<String>,
}

/// Sorted names of the subdirectories of `dir`.
pub fn discover_cases(dir: &Path) -> Result<Vec<String>, ConfigError> {
    let entries = fs::read_dir(dir).map_err(|e| ConfigError(format!("{}: {e}", dir.display())))?;
    let mut cases = Vec::new();
    for e in entries {
        let e = e.map_err(|e| ConfigError(format!("{}: {e}", dir.display())))?;
        if e.file_type().map(|t| t.is_dir()).unwrap_or(false) {
            if let Some(name) = e.file_name().to_str() {
                if !name.starts_with('.') {
                    cases.push(name.to_string());
                }
            }
        }
    }
    cases.sort();
    Ok(cases)
}

/// Writes through a hidden sibling and renames, so readers never see half a
/// file. The temporary keeps the extension (gzip is chosen by it).
fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let dir = path.parent().ok_or_else(|| anyhow!("{} has no parent", path.display()))?;
    fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
    let name = path.file_name().and_then(|n| n.to_str()).ok_or_else(|| anyhow!("bad file name {}", path.display()))?;
    let tmp = dir.join(format!(".tmp-{name}"));
    write(&tmp)?;
    fs::rename(&tmp, path).with_context(|| format!("rename to {}", path.display()))?;
    Ok(())
}

fn model_id(i: usize, path: &Path) -> String {
    format!("{i}:{}", path.display())
}

pub struct Runner {
    pub cfg: PipelineConfig,
    manifest: ManifestWriter,
    #[cfg(feature = "parallel")]
    pool: rayon::ThreadPool,
}

impl Runner {
    pub fn new(cfg: PipelineConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let manifest = ManifestWriter::open(&cfg.manifest_path()).map_err(|e| ConfigError(format!("{}: {e}", cfg.manifest_path().display())))?;
        #[cfg(feature = "parallel")]
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| ConfigError(e.to_string()))?;
        Ok(Runner {
            cfg,
            manifest,
            #[cfg(feature = "parallel")]
            pool,
        })
    }

    fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        #[cfg(feature = "parallel")]
        {
            self.pool.install(f)
        }
        #[cfg(not(feature = "parallel"))]
        {
            f()
        }
    }

    fn log(&self, case: &str, stage: &str, started: f64, res: &anyhow::Result<CaseRecord>) {
        let (status, rec, error) = match res {
            Ok(r) => (Status::Ok, Some(r), None),
            Err(e) => (Status::Failed, None, Some(format!("{e:#}"))),
        };
        let input_hashes = rec
            .map(|r| {
                r.inputs
                    .iter()
                    .filter_map(|p| sha256_file(p).ok().map(|h| (p.display().to_string(), h)))
                    .collect()
            })
            .unwrap_or_default();
        let entry = CaseManifest {
            case_id: case.to_string(),
            stage: stage.to_string(),
            started,
            finished: now(),
            status,
            input_hashes,
            outputs: rec.map(|r| r.outputs.clone()).unwrap_or_default(),
            warnings: rec.map(|r| r.warnings.clone()).unwrap_or_default(),
            error,
        };
        if let Err(e) = self.manifest.append(&entry) {
            eprintln!("warning: manifest append failed for {case}: {e}");
        }
    }

    /// Runs `f` for every case on the worker pool and logs each result.
    fn per_case(&self, stage: &str, cases: &[String], f: impl Fn(&str) -> anyhow::Result<CaseRecord> + Sync + Send) -> Outcome {
        let results = self.install(|| {
            par::map_slice(cases, |case| {
                let started = now();
                let res = f(case);
                self.log(case, stage, started, &res);
                res.map_err(|e| format!("{e:#}"))
            })
        });
        let mut out = Outcome::default();
        for (case, r) in cases.iter().zip(results) {
            match r {
                Ok(_) => out.ok.push(case.clone()),
                Err(e) => {
                    eprintln!("{stage}: {case} failed: {e}");
                    out.failed.push((case.clone(), e));
                }
            }
        }
        out
    }

    pub fn input_cases(&self) -> Result<Vec<String>, ConfigError> {
        discover_cases(&self.cfg.input_dir)
    }

    pub fn preprocess(&self, cases: &[String]) -> Outcome {
        self.per_case("preprocess", cases, |case| self.preprocess_case(case))
    }

    fn preprocess_case(&self, case: &str) -> anyhow::Result<CaseRecord> {
        let cfg = &self.cfg;
        let out_dir = cfg.preprocessed_dir(case);
        // a failed rerun must not leave stale outputs for later stages
        let _ = fs::remove_dir_all(&out_dir);
        let _ = fs::remove_dir_all(cfg.acc_dir(case));
        let src = cfg.input_dir.join(case);
        let mut rec = CaseRecord::default();
        let mut vols = Vec::with_capacity(4);
        let mut affine = None;
        for m in MODALITIES {
            let p = src.join(format!("{case}-{m}.nii.gz"));
            if !p.is_file() {
                bail!("missing modality file {}", p.display());
            }
            let (v, a) = read_nifti_with_affine(&p).with_context(|| p.display().to_string())?;
            affine.get_or_insert(a);
            vols.push(v);
            rec.inputs.push(p);
        }
        let gt = cfg.gt_path(case);
        let label = if gt.is_file() {
            rec.inputs.push(gt.clone());
            Some(LabelMap::from_volume(&read_nifti(&gt)?).with_context(|| gt.display().to_string())?)
        } else {
            None
        };
        let pre = stack_case(case, [&vols[0], &vols[1], &vols[2], &vols[3]], label.as_ref(), &cfg.preprocess)?;
        let image = out_dir.join("image.nii.gz");
        write_atomic(&image, |t| Ok(write_nifti(&pre.image, t)?))?;
        rec.outputs.push(image);
        if let Some(l) = &pre.label {
            let p = out_dir.join("label.nii.gz");
            write_atomic(&p, |t| Ok(write_labels_nifti(l, None, t)?))?;
            rec.outputs.push(p);
        }
        let aff = out_dir.join("affine.bin");
        let block = affine.expect("four modalities read");
        write_atomic(&aff, |t| Ok(fs::write(t, block.0)?))?;
        rec.outputs.push(aff);
        let meta = cfg.meta_path(case);
        write_atomic(&meta, |t| Ok(fs::write(t, serde_json::to_string_pretty(&pre.meta)?)?))?;
        rec.outputs.push(meta);
        rec.warnings = pre.meta.warnings.clone();
        Ok(rec)
    }

    /// Loads every model up front; any unreadable model aborts the run.
    pub fn load_models(&self) -> Result<Vec<StoredModel>, ConfigError> {
        if self.cfg.ensemble.models.is_empty() {
            return Err(ConfigError("no models configured".into()));
        }
        self.cfg
            .ensemble
            .models
            .iter()
            .map(|p| {
                let m = load_model(p).map_err(|e| ConfigError(format!("model {}: {e}", p.display())))?;
                check_model_input(&m, self.cfg.in_channels()).map_err(|e| ConfigError(format!("model {}: {e}", p.display())))?;
                Ok(m)
            })
            .collect()
    }

    /// One accumulation pass per model over all cases, then a normalization
    /// pass. Models already recorded in a case's accumulator are skipped, so
    /// an interrupted run resumes where it stopped.
    pub fn infer(&self, cases: &[String]) -> Result<Outcome, ConfigError> {
        let models = self.load_models()?;
        let weights = self.cfg.ensemble.weights();
        let ids: Vec<String> = self.cfg.ensemble.models.iter().enumerate().map(|(i, p)| model_id(i, p)).collect();
        let mut failed = Outcome::default();
        let mut live: Vec<String> = cases.to_vec();
        for (k, model) in models.iter().enumerate() {
            let pass = self.per_case_quiet(&live, |case| self.accumulate_case(case, &ids[k], model, weights.0[k]));
            for (case, e) in pass {
                self.log(case.as_str(), "infer", now(), &Err(anyhow!("{e}")));
                failed.failed.push((case.clone(), e));
            }
            live.retain(|c| !failed.failed.iter().any(|(f, _)| f == c));
        }
        let mut out = self.per_case("infer", &live, |case| self.finish_case(case, &ids));
        out.merge(failed);
        Ok(out)
    }

    /// Like `per_case` but only reports failures, without logging successes.
    fn per_case_quiet(&self, cases: &[String], f: impl Fn(&str) -> anyhow::Result<()> + Sync + Send) -> Vec<(String, String)> {
        let res = self.install(|| par::map_slice(cases, |c| f(c).map_err(|e| format!("{e:#}"))));
        cases
            .iter()
            .zip(res)
            .filter_map(|(c, r)| r.err().map(|e| (c.clone(), e)))
            .collect()
    }

    fn accumulate_case(&self, case: &str, id: &str, model: &StoredModel, w: [f64; 3]) -> anyhow::Result<()> {
        let dir = self.cfg.acc_dir(case);
        let image_path = self.cfg.preprocessed_dir(case).join("image.nii.gz");
        let mut acc = EnsembleAccumulator::load(&dir)?;
        if acc.as_ref().is_some_and(|a| a.has_seen(id)) {
            return Ok(());
        }
        let image = read_nifti(&image_path).with_context(|| image_path.display().to_string())?;
        let acc = acc.get_or_insert_with(|| EnsembleAccumulator::new(*image.geometry()));
        let probs = tta_predict(&image, model, &self.cfg.sliding_window, self.cfg.tta)?;
        acc.accumulate(id, &probs, w)?;
        acc.save(&dir)?;
        Ok(())
    }

    fn finish_case(&self, case: &str, ids: &[String]) -> anyhow::Result<CaseRecord> {
        let dir = self.cfg.acc_dir(case);
        let acc = EnsembleAccumulator::load(&dir)?.ok_or_else(|| anyhow!("no accumulator in {}", dir.display()))?;
        let seen: BTreeSet<&str> = acc.models_seen().iter().map(String::as_str).collect();
        let want: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        if seen != want {
            bail!("accumulator holds models {seen:?}, configuration lists {want:?}");
        }
        let probs = normalize_ensemble(&acc)?;
        let out = self.cfg.probs_path(case);
        write_atomic(&out, |t| Ok(write_nifti(&probs.to_volume(), t)?))?;
        Ok(CaseRecord {
            inputs: vec![self.cfg.preprocessed_dir(case).join("image.nii.gz")],
            outputs: vec![dir, out],
            warnings: vec![],
        })
    }

    /// Cases with a `<case>-probs.nii.gz` in the output directory.
    pub fn prob_cases(&self) -> Vec<String> {
        files_with_suffix(&self.cfg.output_dir.join("probs"), "-probs.nii.gz")
    }

    pub fn seg_cases(&self) -> Vec<String> {
        files_with_suffix(&self.cfg.output_dir.join("seg"), "-seg.nii.gz")
    }

    pub fn postprocess(&self, cases: &[String]) -> Outcome {
        self.per_case("postprocess", cases, |case| self.postprocess_case(case))
    }

    fn postprocess_case(&self, case: &str) -> anyhow::Result<CaseRecord> {
        let meta_path = self.cfg.meta_path(case);
        if !meta_path.is_file() {
            bail!("missing meta {}", meta_path.display());
        }
        let meta: CaseMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?).with_context(|| meta_path.display().to_string())?;
        meta.validate()?;
        let probs_path = self.cfg.probs_path(case);
        let probs = ProbMaps::from_volume(&read_nifti(&probs_path).with_context(|| probs_path.display().to_string())?)?;
        let labels = postprocess_pipeline(&probs, &self.cfg.postprocess)?;
        let restored = restore_labels(&labels, &meta)?;
        let aff_path = self.cfg.preprocessed_dir(case).join("affine.bin");
        let mut inputs = vec![probs_path, meta_path];
        let affine = match fs::read(&aff_path) {
            Ok(b) => {
                inputs.push(aff_path);
                Some(AffineBlock(b.try_into().map_err(|_| anyhow!("affine.bin has the wrong size"))?))
            }
            Err(_) => None,
        };
        let out = self.cfg.seg_path(case);
        write_atomic(&out, |t| Ok(write_labels_nifti(&restored, affine.as_ref(), t)?))?;
        Ok(CaseRecord {
            inputs,
            outputs: vec![out],
            warnings: vec![],
        })
    }

    /// Scores each case's segmentation against `<input>/<case>/<case>-seg.nii.gz`
    /// and writes `report.json` / `report.csv` for the cases that succeeded.
    pub fn evaluate(&self, cases: &[String]) -> Outcome {
        let results = self.install(|| {
            par::map_slice(cases, |case| {
                let started = now();
                let pred = self.cfg.seg_path(case);
                let gt = self.cfg.gt_path(case);
                let res = (|| -> anyhow::Result<_> {
                    if !gt.is_file() {
                        bail!("missing ground truth {}", gt.display());
                    }
                    let p = LabelMap::from_volume(&read_nifti(&pred)?).with_context(|| pred.display().to_string())?;
                    let g = LabelMap::from_volume(&read_nifti(&gt)?).with_context(|| gt.display().to_string())?;
                    Ok(evaluate_case(case, &p, &g, &self.cfg.eval)?)
                })();
                let rec = res.as_ref().map(|_| CaseRecord {
                    inputs: vec![pred.clone(), gt.clone()],
                    ..Default::default()
                });
                let rec = rec.map_err(|e| anyhow!("{e:#}"));
                self.log(case, "evaluate", started, &rec);
                res.map_err(|e| format!("{e:#}"))
            })
        });
        let mut out = Outcome::default();
        let mut rows = Vec::new();
        for (case, r) in cases.iter().zip(results) {
            match r {
                Ok(m) => {
                    rows.push(m);
                    out.ok.push(case.clone());
                }
                Err(e) => {
                    eprintln!("evaluate: {case} failed: {e}");
                    out.failed.push((case.clone(), e));
                }
            }
        }
        let started = now();
        let report = MetricsReport::new(rows);
        let json = self.cfg.output_dir.join("report.json");
        let csv = self.cfg.output_dir.join("report.csv");
        let res = write_atomic(&json, |t| Ok(fs::write(t, report.to_json())?))
            .and_then(|_| write_atomic(&csv, |t| Ok(fs::write(t, report.to_csv())?)))
            .map(|_| CaseRecord {
                outputs: vec![json, csv],
                ..Default::default()
            });
        if let Err(e) = &res {
            out.failed.push(("cohort".into(), format!("{e:#}")));
        }
        self.log("cohort", "evaluate", started, &res);
        out
    }

    /// All four stages; each stage only sees the cases that survived the
    /// previous one. Cases without ground truth are not evaluated.
    pub fn pipeline(&self) -> Result<Outcome, ConfigError> {
        self.load_models()?;
        let cases = self.input_cases()?;
        let mut total = Outcome::default();
        let pre = self.preprocess(&cases);
        let live = pre.ok.clone();
        total.failed.extend(pre.failed);
        let inf = self.infer(&live)?;
        let live = inf.ok.clone();
        total.failed.extend(inf.failed);
        let post = self.postprocess(&live);
        let live: Vec<String> = post.ok.iter().filter(|c| self.cfg.gt_path(c).is_file()).cloned().collect();
        total.failed.extend(post.failed);
        if !live.is_empty() {
            let ev = self.evaluate(&live);
            total.failed.extend(ev.failed);
        }
        total.ok = post.ok.into_iter().filter(|c| !total.failed.iter().any(|(f, _)| f == c)).collect();
        Ok(total)
    }
}

fn files_with_suffix(dir: &Path, suffix: &str) -> Vec<String> {
    let mut out: Vec<String> = fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(suffix)).map(str::to_string))
        .filter(|n| !n.starts_with(".tmp-"))
        .collect();
    out.sort();
    out
}

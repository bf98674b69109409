use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, VariantId};
use super::dataset::{augment, generate_corpus, load_samples, read_index, read_split, save_samples, write_corpus, write_preview};
use super::trends::{self, Verdict};
use crate::attack::AttackConfig;
use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::netmodel::{Model, DEFAULT_THRESHOLD};
use crate::objectives::{evaluate, EvalReport, ObjectiveKind, PAPER_EPS_LEVELS};
use crate::ood::{run_ood_attack_experiment, OodConfig, OodReport};
use crate::rng::{derive_seed, stream};
use crate::shape_model::{build_ssm, PhantomSample, ShapeModel};
use crate::trainer::{train, LossMode, TrainConfig, TrainLog};

pub const MANIFEST_FILE: &str = "manifest.json";
const PREVIEW_COUNT: usize = 8;

/// Stage names, as used on the command line and in error messages.
pub mod stage {
    pub const GEN_DATA: &str = "gen-data";
    pub const BUILD_SSM: &str = "build-ssm";
    pub const AUGMENT: &str = "augment";
    pub const TRAIN: &str = "train";
    pub const SWEEP: &str = "sweep";
    pub const OOD_ATTACK: &str = "ood-attack";
    pub const OOD_DETECT: &str = "ood-detect";
    pub const REPORT: &str = "report";
}

/// Table file names, in metric order.
pub const TABLE_FILES: [&str; 3] = ["table1_error_reg.csv", "table2_dice_reg.csv", "table3_dice_seg.csv"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// Stage name to artifact paths relative to the run directory.
    pub artifacts: BTreeMap<String, Vec<String>>,
    pub tool_version: String,
    pub created_unix: u64,
    pub updated_unix: u64,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let t = now_unix();
        Ok(Self {
            run_id: Self::run_id_for(&config)?,
            seed: config.seed,
            config,
            artifacts: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            created_unix: t,
            updated_unix: t,
        })
    }

    /// Content hash of the config, so equal configs share a run id.
    pub fn run_id_for(config: &ExperimentConfig) -> Result<String> {
        let text = serde_json::to_string(config)?;
        Ok(format!("run-{:016x}", derive_seed(config.seed, &text)))
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes through a temporary sibling so an interrupted stage never leaves
/// a truncated artifact that looks finished.
fn write_atomic(path: &Path, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("partial");
    f(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn file_stem(kind: ObjectiveKind) -> String {
    kind.name().to_ascii_lowercase()
}

/// Initializes and trains one model variant with seeds derived from its name.
pub fn train_variant(cfg: &ExperimentConfig, name: &str, mode: LossMode, reconstruction: bool, data: &[PhantomSample]) -> Result<(Model, TrainLog)> {
    let mut mcfg = cfg.model.clone();
    mcfg.reconstruction_head = reconstruction;
    let mut model = Model::init(mcfg, &mut stream(derive_seed(cfg.seed, &format!("init/{name}")), 0))?;
    let tcfg = TrainConfig {
        loss_mode: mode,
        seed: derive_seed(cfg.seed, &format!("train/{name}")),
        ..cfg.train.clone()
    };
    let log = train(&mut model, data, &tcfg)?;
    Ok((model, log))
}

fn ood_attack_config(cfg: &ExperimentConfig, objective: ObjectiveKind) -> AttackConfig {
    let o = &cfg.ood;
    AttackConfig {
        eps: o.eps,
        norm: o.norm,
        iterations: o.iterations,
        step_size: o.step_size,
        ..AttackConfig::ood(objective)
    }
}

/// Metric tables in report row order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tables {
    pub variants: Vec<String>,
    pub eps: Vec<f64>,
    /// `values[m][v][e]` for metric `m` (error_reg, dice_reg, dice_seg).
    pub values: [Vec<Vec<f64>>; 3],
}

impl Tables {
    pub fn from_reports(reports: &[(String, EvalReport)]) -> Result<Self> {
        let eps = PAPER_EPS_LEVELS.to_vec();
        let mut values: [Vec<Vec<f64>>; 3] = Default::default();
        for (name, r) in reports {
            let mut per_metric: [Vec<f64>; 3] = Default::default();
            for &e in &eps {
                let row = r
                    .row(e)
                    .ok_or_else(|| Error::Incomplete(format!("{name} has no row for noise level {e}")))?;
                for (m, v) in [row.error_reg, row.dice_reg, row.dice_seg].into_iter().enumerate() {
                    per_metric[m].push(v.ok_or_else(|| Error::Incomplete(format!("{name} lacks a metric at noise level {e}")))?);
                }
            }
            for (dst, src) in values.iter_mut().zip(per_metric) {
                dst.push(src);
            }
        }
        Ok(Self {
            variants: reports.iter().map(|(n, _)| n.clone()).collect(),
            eps,
            values,
        })
    }

    pub fn to_csv(&self, metric: usize) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["variant".to_string()];
        header.extend(self.eps.iter().map(|e| e.to_string()));
        w.write_record(&header)?;
        for (name, vals) in self.variants.iter().zip(&self.values[metric]) {
            let mut rec = vec![name.clone()];
            rec.extend(vals.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format {
            what: "csv",
            detail: e.to_string(),
        })?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// A run directory with its manifest. Each stage checks its inputs, skips
/// outputs that already exist and records what it wrote.
pub struct Pipeline {
    root: PathBuf,
    manifest: RunManifest,
}

impl Pipeline {
    /// Opens `root`, creating it and writing the manifest when absent. With
    /// `config` given, an existing manifest must hold the same config.
    pub fn open(root: &Path, config: Option<ExperimentConfig>) -> Result<Self> {
        ensure_dir(root)?;
        let mpath = root.join(MANIFEST_FILE);
        let manifest = if mpath.exists() {
            let m: RunManifest = read_json(&mpath)?;
            if let Some(c) = config {
                if c != m.config {
                    return Err(Error::InvalidArgument(format!(
                        "config differs from the one recorded in {}; use a fresh --out-dir",
                        mpath.display()
                    )));
                }
            }
            m
        } else {
            let c = config.unwrap_or_default();
            c.validate()?;
            let m = RunManifest::new(c)?;
            write_json(&mpath, &m)?;
            m
        };
        manifest.config.validate()?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.manifest.config
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn require(&self, stage: &'static str, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact { stage, path: p })
        }
    }

    fn record(&mut self, stage: &str, rels: impl IntoIterator<Item = String>) -> Result<()> {
        let entry = self.manifest.artifacts.entry(stage.to_string()).or_default();
        entry.extend(rels);
        entry.sort();
        entry.dedup();
        self.manifest.updated_unix = now_unix();
        write_json(&self.root.join(MANIFEST_FILE), &self.manifest)
    }

    pub fn model_rel(name: &str) -> String {
        format!("models/{name}.ckpt")
    }

    pub fn sweep_rel(name: &str) -> String {
        format!("sweep/{name}.json")
    }

    fn augmented_rel(k: usize) -> String {
        format!("augmented/p{k}.samples")
    }

    fn ssm_rel(k: usize) -> String {
        format!("ssm/p{k}.json")
    }

    pub fn detector_name(&self, mode: LossMode) -> String {
        format!("P{}_{}_rec", self.config().ood.detector_ssm, mode.name())
    }

    fn split(&self, test: bool, limit: Option<usize>) -> Result<Vec<PhantomSample>> {
        self.require(stage::GEN_DATA, "data/dataset.json")?;
        let dir = self.path("data");
        let index = read_index(&dir)?;
        let ids = if test { &index.test } else { &index.train };
        let n = limit.map_or(ids.len(), |l| l.min(ids.len()));
        read_split(&dir, &ids[..n])
    }

    pub fn train_set(&self) -> Result<Vec<PhantomSample>> {
        self.split(false, None)
    }

    pub fn test_set(&self, limit: Option<usize>) -> Result<Vec<PhantomSample>> {
        self.split(true, limit)
    }

    pub fn gen_data(&mut self) -> Result<()> {
        let dir = self.path("data");
        if dir.join("dataset.json").exists() {
            log::info!("gen-data: {} exists, skipping", dir.display());
            return Ok(());
        }
        let cfg = self.config().clone();
        let samples = generate_corpus(cfg.seed, cfg.data.real_samples, &cfg.data.phantom);
        let tmp = self.path("data.partial");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        write_corpus(&tmp, cfg.seed, &cfg.data.phantom, &samples, cfg.data.train_count())?;
        fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
        log::info!("gen-data: wrote {} samples", samples.len());
        self.record(stage::GEN_DATA, ["data/dataset.json".to_string()])
    }

    pub fn build_ssm(&mut self) -> Result<()> {
        let shapes: Vec<_> = self.train_set()?.into_iter().map(|s| s.contour).collect();
        ensure_dir(&self.path("ssm"))?;
        let mut rows = Vec::new();
        let mut written = Vec::new();
        for &k in &self.config().data.ssm_components {
            let rel = Self::ssm_rel(k);
            let model = if self.path(&rel).exists() {
                read_json::<ShapeModel>(&self.path(&rel))?
            } else {
                let m = build_ssm(&shapes, k)?;
                write_json(&self.path(&rel), &m)?;
                m
            };
            let cov = *model.coverage.last().unwrap_or(&0.0);
            log::info!("build-ssm: k={k} coverage {cov:.4}");
            rows.push(CoverageRow { k, coverage: cov });
            written.push(rel);
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format {
            what: "csv",
            detail: e.to_string(),
        })?;
        fs::write(self.path("ssm/coverage.csv"), bytes).map_err(|e| Error::io(self.path("ssm/coverage.csv"), e))?;
        write_json(&self.path("ssm/coverage.json"), &rows)?;
        written.push("ssm/coverage.csv".into());
        self.record(stage::BUILD_SSM, written)
    }

    pub fn augment(&mut self) -> Result<()> {
        let ks = self.config().data.ssm_components.clone();
        let mut pool = None;
        let mut written = Vec::new();
        ensure_dir(&self.path("augmented"))?;
        for k in ks {
            let rel = Self::augmented_rel(k);
            written.push(rel.clone());
            if self.path(&rel).exists() {
                log::info!("augment: {rel} exists, skipping");
                continue;
            }
            let ssm: ShapeModel = read_json(&self.require(stage::BUILD_SSM, &Self::ssm_rel(k))?)?;
            if pool.is_none() {
                pool = Some(self.train_set()?);
            }
            let seed = derive_seed(self.config().seed, &format!("augment/p{k}"));
            let samples = augment(&ssm, pool.as_ref().unwrap(), self.config().data.virtual_samples, seed)?;
            write_atomic(&self.path(&rel), |p| save_samples(p, &samples))?;
            write_preview(&self.path(&format!("augmented/p{k}_preview")), &samples, PREVIEW_COUNT)?;
            log::info!("augment: k={k} wrote {} samples", samples.len());
        }
        self.record(stage::AUGMENT, written)
    }

    fn augmented(&self, k: usize) -> Result<Vec<PhantomSample>> {
        load_samples(&self.require(stage::AUGMENT, &Self::augmented_rel(k))?)
    }

    fn train_one(&mut self, name: &str, k: usize, mode: LossMode, rec: bool, cache: &mut BTreeMap<usize, Vec<PhantomSample>>) -> Result<()> {
        let rel = Self::model_rel(name);
        if self.path(&rel).exists() {
            log::info!("train: {rel} exists, skipping");
            return Ok(());
        }
        if !cache.contains_key(&k) {
            cache.insert(k, self.augmented(k)?);
        }
        log::info!("train: {name}");
        let (model, mut log) = train_variant(self.config(), name, mode, rec, &cache[&k])?;
        ensure_dir(&self.path("models"))?;
        log.checkpoint = Some(rel.clone());
        log.write_csv(&self.path(&format!("models/{name}_train.csv")))?;
        log.write_json(&self.path(&format!("models/{name}_train.json")))?;
        write_atomic(&self.path(&rel), |p| model.save(p))?;
        self.record(stage::TRAIN, [rel])
    }

    pub fn train(&mut self, variants: &[VariantId]) -> Result<()> {
        let mut cache = BTreeMap::new();
        for id in variants {
            self.train_one(&id.name(), id.ssm_k, id.mode, false, &mut cache)?;
        }
        Ok(())
    }

    fn load_model(&self, name: &str, rec: bool, stage_name: &'static str) -> Result<Model> {
        let mut mcfg = self.config().model.clone();
        mcfg.reconstruction_head = rec;
        Model::load(mcfg, &self.require(stage_name, &Self::model_rel(name))?)
    }

    /// Robustness sweep per variant; `eps_levels` overrides the configured grid.
    pub fn sweep(&mut self, variants: &[VariantId], eps_levels: Option<&[f64]>) -> Result<()> {
        let mut eval = self.config().sweep.eval.clone();
        if let Some(e) = eps_levels {
            eval.eps_levels = e.to_vec();
        }
        eval.seed = derive_seed(self.config().seed, "sweep");
        let test = self.test_set(self.config().sweep.test_limit)?;
        ensure_dir(&self.path("sweep"))?;
        for id in variants {
            let name = id.name();
            let rel = Self::sweep_rel(&name);
            if let Ok(prev) = read_json::<EvalReport>(&self.path(&rel)) {
                let same_grid = prev.k_test == test.len() && prev.rows.iter().map(|r| r.eps).eq(eval.eps_levels.iter().copied());
                if same_grid {
                    log::info!("sweep: {rel} exists, skipping");
                    continue;
                }
            }
            let model = self.load_model(&name, false, stage::TRAIN)?;
            log::info!("sweep: {name} over {:?}", eval.eps_levels);
            let report = evaluate(&model, &test, &eval)?;
            report.write_csv(&self.path(&format!("sweep/{name}.csv")))?;
            report.write_json(&self.path(&rel))?;
            self.record(stage::SWEEP, [format!("sweep/{name}.csv"), rel])?;
        }
        Ok(())
    }

    fn ood_experiment(&mut self, model: &Model, objective: ObjectiveKind, stem: &str, seed_label: &str) -> Result<OodReport> {
        let json = self.path(&format!("ood/{stem}.json"));
        if let Ok(prev) = read_json::<OodReport>(&json) {
            log::info!("ood: {} exists, skipping", json.display());
            return Ok(prev);
        }
        let c = self.config().clone();
        let test = self.test_set(c.ood.test_limit)?;
        let ocfg = OodConfig {
            attack: ood_attack_config(&c, objective),
            source: c.ood.source.clone(),
            threshold: DEFAULT_THRESHOLD,
            seed: derive_seed(c.seed, seed_label),
            export_dir: (c.ood.export_images > 0).then(|| self.path(&format!("ood/{stem}_images"))),
            export_limit: Some(c.ood.export_images),
        };
        let report = run_ood_attack_experiment(model, &test, &ocfg)?;
        report.write(&self.path("ood"), stem)?;
        Ok(report)
    }

    /// OOD attacks against the configured target variant.
    pub fn ood_attack(&mut self) -> Result<Vec<OodReport>> {
        let target = self.config().ood.target_variant.clone();
        let model = self.load_model(&target, false, stage::TRAIN)?;
        let mut out = Vec::new();
        for obj in self.config().ood.objectives.clone() {
            let stem = format!("attack_{}", file_stem(obj));
            let r = self.ood_experiment(&model, obj, &stem, &format!("ood-attack/{obj}"))?;
            log::info!("ood-attack: {obj} mean dice {:.4}", r.mean_dice());
            out.push(r);
            self.record(stage::OOD_ATTACK, [format!("ood/{stem}.json")])?;
        }
        Ok(out)
    }

    /// Trains reconstruction-head detectors and attacks each of them.
    pub fn ood_detect(&mut self) -> Result<Vec<(String, OodReport)>> {
        let c = self.config().clone();
        let mut cache = BTreeMap::new();
        let mut out = Vec::new();
        for mode in c.ood.detector_modes.clone() {
            let name = self.detector_name(mode);
            self.train_one(&name, c.ood.detector_ssm, mode, true, &mut cache)?;
            let model = self.load_model(&name, true, stage::OOD_DETECT)?;
            let stem = format!("detect_{name}");
            let r = self.ood_experiment(&model, c.ood.detector_objective, &stem, &format!("ood-detect/{name}"))?;
            log::info!("ood-detect: {name} AUROC {:?}", r.auroc);
            self.record(stage::OOD_DETECT, [format!("ood/{stem}.json")])?;
            out.push((name, r));
        }
        Ok(out)
    }

    /// Merges all sweeps into the three tables and evaluates the trend checks.
    /// Fails if any variant or noise level is missing.
    pub fn report(&mut self) -> Result<Vec<Verdict>> {
        let variants = self.config().variants();
        let mut reports = Vec::with_capacity(variants.len());
        for id in &variants {
            let name = id.name();
            let r: EvalReport = read_json(&self.require(stage::SWEEP, &Self::sweep_rel(&name))?)?;
            reports.push((name, r));
        }
        let tables = Tables::from_reports(&reports)?;
        ensure_dir(&self.path("report"))?;
        let mut written = Vec::new();
        for (m, file) in TABLE_FILES.iter().enumerate() {
            let rel = format!("report/{file}");
            write_text(&self.path(&rel), &tables.to_csv(m)?)?;
            written.push(rel);
        }

        let k = *self.config().data.ssm_components.iter().max().expect("validated non-empty");
        let get = |mode: LossMode| &reports.iter().find(|(n, _)| *n == VariantId::new(k, mode).name()).unwrap().1;
        let (std, rand, adv_r, adv_s, adv_rs) = (
            get(LossMode::Standard),
            get(LossMode::Rand),
            get(LossMode::AdvR),
            get(LossMode::AdvS),
            get(LossMode::AdvRS),
        );
        let mut verdicts = vec![
            trends::std_vulnerable(std),
            trends::adversarial_training_helps(adv_rs, std),
            trends::random_noise_not_robust(rand, std, adv_rs),
            trends::clean_side_effect(adv_rs, std),
            trends::asymmetric_transfer(adv_s, adv_r, std),
        ];
        for obj in &self.config().ood.objectives {
            if let Ok(r) = read_json::<OodReport>(&self.path(&format!("ood/attack_{}.json", file_stem(*obj)))) {
                verdicts.push(trends::ood_attack_succeeds(&r));
            }
        }
        for mode in &self.config().ood.detector_modes {
            let name = self.detector_name(*mode);
            if let Ok(r) = read_json::<OodReport>(&self.path(&format!("ood/detect_{name}.json"))) {
                verdicts.push(trends::detector_fooled(&name, &r));
            }
        }
        write_json(&self.path("report/verdicts.json"), &verdicts)?;
        let text: String = verdicts.iter().map(|v| v.line() + "\n").collect();
        write_text(&self.path("report/verdicts.txt"), &text)?;
        written.push("report/verdicts.json".into());
        self.record(stage::REPORT, written)?;
        Ok(verdicts)
    }

    /// Every stage in order.
    pub fn run_all(&mut self) -> Result<Vec<Verdict>> {
        let variants = self.config().variants();
        self.gen_data()?;
        self.build_ssm()?;
        self.augment()?;
        self.train(&variants)?;
        self.sweep(&variants, None)?;
        self.ood_attack()?;
        self.ood_detect()?;
        self.report()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CoverageRow {
    k: usize,
    coverage: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::EvalRow;

    fn full_report(v: f64) -> EvalReport {
        EvalReport {
            k_test: 1,
            i_max: 4,
            rows: PAPER_EPS_LEVELS
                .iter()
                .map(|&eps| EvalRow {
                    eps,
                    error_reg: Some(v + eps),
                    dice_reg: Some(0.5),
                    dice_seg: Some(0.25),
                })
                .collect(),
        }
    }

    #[test]
    fn tables_layout() {
        let t = Tables::from_reports(&[("P3_std".into(), full_report(1.0)), ("P5_std".into(), full_report(2.0))]).unwrap();
        let csv = t.to_csv(0).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "variant,0,0.01,0.03,0.05,0.07,0.1,0.2");
        assert_eq!(lines.next().unwrap(), "P3_std,1,1.01,1.03,1.05,1.07,1.1,1.2");
        assert!(t.to_csv(2).unwrap().contains("P5_std,0.25,"));
    }

    #[test]
    fn tables_reject_gaps() {
        let mut r = full_report(1.0);
        r.rows.remove(3);
        assert!(matches!(Tables::from_reports(&[("P3_std".into(), r)]), Err(Error::Incomplete(_))));
        let mut r = full_report(1.0);
        r.rows[0].dice_seg = None;
        assert!(matches!(Tables::from_reports(&[("P3_std".into(), r)]), Err(Error::Incomplete(_))));
    }

    #[test]
    fn manifest_guards_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let p = Pipeline::open(dir.path(), Some(cfg.clone())).unwrap();
        assert!(dir.path().join(MANIFEST_FILE).exists());
        assert_eq!(p.manifest().run_id, RunManifest::run_id_for(&cfg).unwrap());
        assert!(Pipeline::open(dir.path(), None).is_ok());
        let other = ExperimentConfig { seed: 1, ..cfg };
        assert!(Pipeline::open(dir.path(), Some(other)).is_err());
    }

    #[test]
    fn stages_name_missing_prerequisites() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Pipeline::open(dir.path(), None).unwrap();
        match p.build_ssm() {
            Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, stage::GEN_DATA),
            other => panic!("unexpected {other:?}"),
        }
        match p.report() {
            Err(Error::MissingArtifact { stage, .. }) => assert_eq!(stage, stage::SWEEP),
            other => panic!("unexpected {other:?}"),
        }
    }
}

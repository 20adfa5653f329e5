//! End-to-end pipeline driven by one TOML file: dataset generation, score and
//! classifier training, guided sampling, evaluation and the downstream
//! comparison. Every stage writes under the output directory and records
//! content hashes in `manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{generate, SplitConfig, Splits};
use crate::downstream::{run_comparison, summarize, ClassifierConfig, Mode};
use crate::error::{Error, Result};
use crate::eval::{
    is_connected, mmd_rbf, passes_validate, preservation_score, validity_fraction, LambdaRow,
    MetricReport, RandomGinConfig,
};
use crate::graph::GraphDataset;
use crate::guidance::GuidanceConfig;
use crate::io::{read_dataset, write_dataset};
use crate::models::checkpoint::{load_classifier, load_score, save_classifier, save_score};
use crate::models::{
    train_classifier, train_score, ArchConfig, ClassGuide, GraphClassifier, GraphDims, ScoreNetwork,
    TrainConfig,
};
use crate::sampler::{augment_dataset, AugmentRequest, NodeCountRule, Networks, SamplerConfig, Solver};
use crate::sde::DiffusionSde;

pub const MANIFEST: &str = "manifest.json";
pub const TRAIN_FILE: &str = "data/train.graphs.jsonl";
pub const VAL_FILE: &str = "data/val.graphs.jsonl";
pub const TEST_FILE: &str = "data/test.graphs.jsonl";
pub const SCORE_CKPT: &str = "checkpoints/score.ckpt";
pub const CLASSIFIER_CKPT: &str = "checkpoints/classifier.ckpt";
pub const LAMBDA_CSV: &str = "metrics/lambda_metrics.csv";
pub const DOWNSTREAM_CSV: &str = "metrics/downstream.csv";
pub const MMD_SVG: &str = "metrics/mmd.svg";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdeSection {
    pub x: DiffusionSde,
    pub a: DiffusionSde,
}

impl Default for SdeSection {
    fn default() -> Self {
        SdeSection {
            x: DiffusionSde::vp(0.1, 1.0, 1000),
            a: DiffusionSde::vp(0.1, 1.0, 1000),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: ArchConfig,
    pub score: TrainConfig,
    pub classifier: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSection {
    /// λ values evaluated by `evaluate`.
    pub lambdas: Vec<f64>,
    pub r1: f64,
    pub r2: f64,
    pub alpha_cap: f64,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        GuidanceSection {
            lambdas: (0..10).map(|k| k as f64 / 10.0).collect(),
            r1: 0.5,
            r2: 0.5,
            alpha_cap: 10.0,
        }
    }
}

impl GuidanceSection {
    pub fn guidance(&self, lambda: f64, target_class: usize) -> GuidanceConfig {
        GuidanceConfig {
            lambda,
            target_class,
            r1: self.r1,
            r2: self.r2,
            alpha_cap: self.alpha_cap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub solver: Solver,
    pub snr: f64,
    pub scale_coeff: f64,
    pub corrector_steps: usize,
    pub num_steps: usize,
    pub debug: bool,
    /// Graphs per class and λ in the evaluation grid.
    pub per_class: usize,
    pub node_counts: NodeCountRule,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let s = SamplerConfig::default();
        SamplerSection {
            solver: s.solver,
            snr: s.snr,
            scale_coeff: s.scale_coeff,
            corrector_steps: s.corrector_steps,
            num_steps: s.num_steps,
            debug: s.debug,
            per_class: 30,
            node_counts: NodeCountRule::Empirical,
        }
    }
}

impl SamplerSection {
    pub fn config(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            solver: self.solver,
            snr: self.snr,
            scale_coeff: self.scale_coeff,
            corrector_steps: self.corrector_steps,
            num_steps: self.num_steps,
            seed,
            debug: self.debug,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamSection {
    pub modes: Vec<Mode>,
    /// Nonzero λ values used by the exploring modes.
    pub lambdas: Vec<f64>,
    /// Augmented graphs per class and λ.
    pub per_class: usize,
    pub classifier: ClassifierConfig,
}

impl Default for DownstreamSection {
    fn default() -> Self {
        DownstreamSection {
            modes: Mode::ALL.to_vec(),
            lambdas: vec![0.1, 0.2, 0.3],
            per_class: 20,
            classifier: ClassifierConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Every stage seed is derived from this one.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: SplitConfig,
    pub sde: SdeSection,
    pub model: ModelSection,
    pub guidance: GuidanceSection,
    pub sampler: SamplerSection,
    pub eval: RandomGinConfig,
    pub downstream: DownstreamSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            dataset: SplitConfig::default(),
            sde: SdeSection::default(),
            model: ModelSection::default(),
            guidance: GuidanceSection::default(),
            sampler: SamplerSection::default(),
            eval: RandomGinConfig::default(),
            downstream: DownstreamSection::default(),
        }
    }
}

fn prefix_key(section: &str, e: Error) -> Error {
    match e {
        Error::Config { key, msg } if !key.starts_with(section) => Error::Config {
            key: format!("{section}.{}", key.split_once('.').map_or(key.as_str(), |k| k.1)),
            msg,
        },
        other => other,
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let de = toml::Deserializer::new(s);
        let cfg: PipelineConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            Error::Config {
                key: if key == "." { "<root>".into() } else { key },
                msg: e.into_inner().message().trim().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate().map_err(|e| prefix_key("dataset", e))?;
        for (name, sde) in [("sde.x", &self.sde.x), ("sde.a", &self.sde.a)] {
            sde.validate().map_err(|e| match e {
                Error::Config { key, msg } => Error::Config {
                    key: format!("{name}.{}", key.rsplit('.').next().unwrap_or(&key)),
                    msg,
                },
                other => other,
            })?;
        }
        self.model.arch.validate().map_err(|e| prefix_key("model.arch", e))?;
        self.model.score.validate().map_err(|e| prefix_key("model.score", e))?;
        self.model
            .classifier
            .validate()
            .map_err(|e| prefix_key("model.classifier", e))?;
        for (k, &l) in self.guidance.lambdas.iter().enumerate() {
            if !(0.0..1.0).contains(&l) {
                return Err(Error::config(
                    format!("guidance.lambdas[{k}]"),
                    format!("{l} outside [0, 1)"),
                ));
            }
        }
        self.guidance
            .guidance(0.0, 0)
            .validate()
            .map_err(|e| prefix_key("guidance", e))?;
        self.sampler.config(0).validate()?;
        if let NodeCountRule::Range { lo, hi } = self.sampler.node_counts {
            if lo == 0 || lo > hi || hi > self.dataset.layout().n_max {
                return Err(Error::config(
                    "sampler.node_counts",
                    format!("need 1 <= lo <= hi <= n_max, got ({lo}, {hi})"),
                ));
            }
        }
        self.eval.validate()?;
        for (k, &l) in self.downstream.lambdas.iter().enumerate() {
            if !(l > 0.0 && l < 1.0) {
                return Err(Error::config(
                    format!("downstream.lambdas[{k}]"),
                    format!("{l} outside (0, 1)"),
                ));
            }
        }
        if self.downstream.lambdas.is_empty()
            && self
                .downstream
                .modes
                .iter()
                .any(|m| matches!(m, Mode::Ooda | Mode::LambdaOnly))
        {
            return Err(Error::config(
                "downstream.lambdas",
                "exploring modes need at least one lambda",
            ));
        }
        self.downstream
            .classifier
            .validate()
            .map_err(|e| prefix_key("downstream.classifier", e))?;
        Ok(())
    }

    /// Hash of the configuration with the output directory left out, so runs
    /// in different directories compare equal.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    /// Stage seed derived from the global seed and a stage tag.
    pub fn derive_seed(&self, tag: &str) -> u64 {
        let digest = Sha256::digest(format!("{}/{tag}", self.seed).as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    /// Output path (relative to the run directory) → SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
    /// Output path → hash of the configuration sections and input artifacts
    /// it was produced from.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
}

/// A run directory bound to a configuration.
pub struct Run {
    pub cfg: PipelineConfig,
    pub dir: PathBuf,
    manifest: Manifest,
    /// Manifest found in the directory on open; artifacts listed there with
    /// matching inputs may be reused by [`Run::pipeline`].
    previous: Option<Manifest>,
}

impl Run {
    /// Open `dir` (or the configured output directory) for `cfg`.
    pub fn new(cfg: PipelineConfig, dir: Option<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let dir = dir.unwrap_or_else(|| cfg.out_dir.clone());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let config_hash = cfg.hash();
        let path = dir.join(MANIFEST);
        let previous = fs::read_to_string(&path)
            .ok()
            .and_then(|s| serde_json::from_str::<Manifest>(&s).ok());
        let manifest = previous
            .clone()
            .filter(|m| m.config_hash == config_hash)
            .unwrap_or(Manifest {
                config_hash,
                seed: cfg.seed,
                ..Default::default()
            });
        Ok(Run {
            cfg,
            dir,
            manifest,
            previous,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn seed(&mut self, tag: &str) -> u64 {
        let s = self.cfg.derive_seed(tag);
        self.manifest.seeds.insert(tag.to_string(), s);
        s
    }

    fn ensure_parent(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(p)
    }

    fn record(&mut self, rel: &str) -> Result<()> {
        let h = file_hash(&self.path(rel))?;
        self.manifest.files.insert(rel.to_string(), h);
        Ok(())
    }

    fn record_with(&mut self, rel: &str, key: &str) -> Result<()> {
        self.record(rel)?;
        self.manifest.inputs.insert(rel.to_string(), key.to_string());
        Ok(())
    }

    fn input_hash(&self, rel: &str) -> Result<String> {
        file_hash(&self.path(rel))
    }

    fn data_key(&self) -> String {
        let v = serde_json::json!({ "seed": self.cfg.seed, "dataset": self.cfg.dataset });
        sha256_hex(v.to_string().as_bytes())
    }

    fn training_key(&self, tag: &str, train: &TrainConfig) -> Result<String> {
        let c = &self.cfg;
        let v = serde_json::json!({
            "seed": c.seed,
            "stage": tag,
            "sde": c.sde,
            "arch": c.model.arch,
            "train": train,
            "data": self.input_hash(TRAIN_FILE)?,
        });
        Ok(sha256_hex(v.to_string().as_bytes()))
    }

    fn save_manifest(&self) -> Result<()> {
        let p = self.path(MANIFEST);
        let s = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&p, s + "\n").map_err(|e| Error::io(&p, e))
    }

    /// True when `rel` exists, matches the hash an earlier run recorded for
    /// it, and was produced from the same inputs `key`.
    fn reusable(&self, rel: &str, key: &str) -> bool {
        let Some(prev) = &self.previous else {
            return false;
        };
        if prev.inputs.get(rel).map(String::as_str) != Some(key) {
            return false;
        }
        match (prev.files.get(rel), file_hash(&self.path(rel))) {
            (Some(want), Ok(have)) => *want == have,
            _ => false,
        }
    }

    fn require(&self, rel: &str, stage: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(Error::MissingStage {
                stage: stage.to_string(),
                path: p,
            });
        }
        Ok(p)
    }

    fn dims(&self) -> GraphDims {
        let layout = self.cfg.dataset.layout();
        GraphDims {
            n_max: layout.n_max,
            node_dim: layout.node_dim(),
            edge_dim: 1,
        }
    }

    pub fn load_splits(&self) -> Result<Splits> {
        Ok(Splits {
            train: read_dataset(&self.require(TRAIN_FILE, "gen-data")?)?,
            val: read_dataset(&self.require(VAL_FILE, "gen-data")?)?,
            test: read_dataset(&self.require(TEST_FILE, "gen-data")?)?,
        })
    }

    pub fn load_score(&self) -> Result<ScoreNetwork> {
        let net = load_score(&self.require(SCORE_CKPT, "train-score")?, None)?;
        if net.dims() != self.dims() || net.arch() != self.cfg.model.arch {
            return Err(Error::Checkpoint(format!(
                "{} does not match the configured architecture; rerun train-score",
                SCORE_CKPT
            )));
        }
        Ok(net)
    }

    pub fn load_classifier(&self) -> Result<GraphClassifier> {
        let phi = load_classifier(&self.require(CLASSIFIER_CKPT, "train-classifier")?, None)?;
        if phi.dims() != self.dims() || phi.arch() != self.cfg.model.arch {
            return Err(Error::Checkpoint(format!(
                "{} does not match the configured architecture; rerun train-classifier",
                CLASSIFIER_CKPT
            )));
        }
        Ok(phi)
    }

    pub fn gen_data(&mut self) -> Result<Vec<PathBuf>> {
        let mut ds_cfg = self.cfg.dataset.clone();
        ds_cfg.seed = self.seed("dataset");
        let splits = generate(&ds_cfg)?;
        let key = self.data_key();
        let mut out = Vec::new();
        for (rel, ds) in [
            (TRAIN_FILE, &splits.train),
            (VAL_FILE, &splits.val),
            (TEST_FILE, &splits.test),
        ] {
            let p = self.ensure_parent(rel)?;
            write_dataset(ds, &p)?;
            self.record_with(rel, &key)?;
            out.push(p);
        }
        self.save_manifest()?;
        info!(
            "generated {}/{}/{} graphs",
            splits.train.len(),
            splits.val.len(),
            splits.test.len()
        );
        Ok(out)
    }

    pub fn train_score(&mut self) -> Result<PathBuf> {
        let train = read_dataset(&self.require(TRAIN_FILE, "gen-data")?)?;
        let mut tc = self.cfg.model.score;
        tc.seed = self.seed("train-score");
        let (net, report) = train_score(&train, self.cfg.sde.x, self.cfg.sde.a, self.cfg.model.arch, &tc)?;
        if let Some((head, tail)) = report.head_tail(50) {
            info!("score loss {head:.4} -> {tail:.4} over {} steps", report.losses.len());
        }
        let key = self.training_key("score", &self.cfg.model.score)?;
        let p = self.ensure_parent(SCORE_CKPT)?;
        save_score(&net, &p)?;
        self.record_with(SCORE_CKPT, &key)?;
        self.save_manifest()?;
        Ok(p)
    }

    pub fn train_classifier(&mut self) -> Result<PathBuf> {
        let train = read_dataset(&self.require(TRAIN_FILE, "gen-data")?)?;
        let mut tc = self.cfg.model.classifier;
        tc.seed = self.seed("train-classifier");
        let (phi, report) =
            train_classifier(&train, self.cfg.sde.x, self.cfg.sde.a, self.cfg.model.arch, &tc)?;
        if let Some((head, tail)) = report.head_tail(50) {
            info!("classifier loss {head:.4} -> {tail:.4} over {} steps", report.losses.len());
        }
        let key = self.training_key("classifier", &self.cfg.model.classifier)?;
        let p = self.ensure_parent(CLASSIFIER_CKPT)?;
        save_classifier(&phi, &p)?;
        self.record_with(CLASSIFIER_CKPT, &key)?;
        self.save_manifest()?;
        Ok(p)
    }

    fn provenance(&self) -> Result<BTreeMap<String, String>> {
        let mut m = BTreeMap::new();
        m.insert(
            "score_checkpoint".into(),
            file_hash(&self.require(SCORE_CKPT, "train-score")?)?,
        );
        m.insert(
            "classifier_checkpoint".into(),
            file_hash(&self.require(CLASSIFIER_CKPT, "train-classifier")?)?,
        );
        Ok(m)
    }

    #[allow(clippy::too_many_arguments)]
    fn generate_set(
        &mut self,
        rel: &str,
        seed_tag: &str,
        train: &GraphDataset,
        nets: &Networks<'_>,
        lambdas: Vec<f64>,
        per_class: Vec<usize>,
        guidance: GuidanceConfig,
        reuse: bool,
    ) -> Result<GraphDataset> {
        let seed = self.seed(seed_tag);
        let provenance = self.provenance()?;
        let scfg = self.cfg.sampler.config(seed);
        let key = sha256_hex(
            serde_json::json!({
                "seed": seed,
                "lambdas": lambdas,
                "per_class": per_class,
                "guidance": guidance,
                "sampler": scfg,
                "node_counts": self.cfg.sampler.node_counts,
                "checkpoints": provenance,
                "data": self.input_hash(TRAIN_FILE)?,
            })
            .to_string()
            .as_bytes(),
        );
        if reuse && self.reusable(rel, &key) {
            info!("reusing {rel}");
            self.record_with(rel, &key)?;
            return read_dataset(&self.path(rel));
        }
        let req = AugmentRequest {
            lambdas,
            per_class,
            node_counts: self.cfg.sampler.node_counts,
            provenance,
        };
        let ds = augment_dataset(train, nets, &req, &guidance, &scfg)?;
        let p = self.ensure_parent(rel)?;
        write_dataset(&ds, &p)?;
        self.record_with(rel, &key)?;
        Ok(ds)
    }

    /// Draw `count` graphs at `lambda`, for one class or spread evenly over
    /// all classes.
    pub fn sample(&mut self, lambda: f64, class: Option<usize>, count: usize) -> Result<PathBuf> {
        if !(0.0..1.0).contains(&lambda) {
            return Err(Error::Domain(format!("lambda = {lambda} outside [0, 1)")));
        }
        let train = read_dataset(&self.require(TRAIN_FILE, "gen-data")?)?;
        let m = train.schema.num_classes;
        let per_class = match class {
            Some(y) if y >= m => {
                return Err(Error::Domain(format!("class {y} out of range for {m} classes")))
            }
            Some(y) => (0..m).map(|k| if k == y { count } else { 0 }).collect(),
            None => (0..m).map(|k| count / m + usize::from(k < count % m)).collect(),
        };
        let net = self.load_score()?;
        let phi = self.load_classifier()?;
        let nets = self.networks(&net, &phi);
        let class_tag = class.map_or("all".to_string(), |y| y.to_string());
        let rel = format!("samples/lambda_{lambda:.2}_class_{class_tag}_n{count}.graphs.jsonl");
        let tag = format!("sample/{lambda}/{class_tag}/{count}");
        let guidance = self.cfg.guidance.guidance(lambda, 0);
        self.generate_set(&rel, &tag, &train, &nets, vec![lambda], per_class, guidance, false)?;
        self.save_manifest()?;
        Ok(self.path(&rel))
    }

    fn networks<'a>(&self, net: &'a ScoreNetwork, phi: &'a GraphClassifier) -> Networks<'a> {
        Networks {
            score: net,
            guide: Some(phi as &dyn ClassGuide),
            sde_x: self.cfg.sde.x,
            sde_a: self.cfg.sde.a,
            dims: net.dims(),
        }
    }

    /// λ-grid metrics and the downstream comparison.
    pub fn evaluate(&mut self, reuse: bool) -> Result<MetricReport> {
        let splits = self.load_splits()?;
        let net = self.load_score()?;
        let phi = self.load_classifier()?;
        let nets = self.networks(&net, &phi);
        let m = splits.train.schema.num_classes;
        let eps = self.cfg.sde.x.eps_time.max(self.cfg.sde.a.eps_time);
        let mut eval_cfg = self.cfg.eval;
        eval_cfg.base_seed = self.seed("eval");

        let mut report = MetricReport::default();
        for lambda in self.cfg.guidance.lambdas.clone() {
            let rel = format!("samples/grid/lambda_{lambda:.2}.graphs.jsonl");
            let aug = self.generate_set(
                &rel,
                &format!("sample/grid/{lambda}"),
                &splits.train,
                &nets,
                vec![lambda],
                vec![self.cfg.sampler.per_class; m],
                self.cfg.guidance.guidance(lambda, 0),
                reuse,
            )?;
            let mmd = mmd_rbf(&splits.train.graphs, &aug.graphs, &eval_cfg, None)?;
            let row = LambdaRow {
                lambda,
                mmd_mean: mmd.mean,
                mmd_stderr: mmd.stderr,
                preservation: preservation_score(&phi, &aug, eps)?,
                validity: validity_fraction(&aug.graphs, passes_validate),
                connected: validity_fraction(&aug.graphs, is_connected),
            };
            info!(
                "lambda {lambda:.2}: mmd {:.4} ± {:.4}, preservation {:.3}, valid {:.3}, connected {:.3}",
                row.mmd_mean, row.mmd_stderr, row.preservation, row.validity, row.connected
            );
            report.lambda_rows.push(row);
        }

        let ds = self.cfg.downstream.clone();
        let mut classifier_cfg = ds.classifier.clone();
        classifier_cfg.seeds = ds
            .classifier
            .seeds
            .iter()
            .map(|s| self.seed(&format!("downstream/{s}")))
            .collect();
        for mode in ds.modes.clone() {
            let augmented = match mode.wiring() {
                None => None,
                Some((explore, guided)) => {
                    let lambdas = if explore { ds.lambdas.clone() } else { vec![0.0] };
                    let mut guidance = self.cfg.guidance.guidance(0.0, 0);
                    if !guided {
                        guidance.r1 = 0.0;
                        guidance.r2 = 0.0;
                    }
                    Some(self.generate_set(
                        &format!("samples/downstream/{mode}.graphs.jsonl"),
                        &format!("sample/downstream/{mode}"),
                        &splits.train,
                        &nets,
                        lambdas,
                        vec![ds.per_class; m],
                        guidance,
                        reuse,
                    )?)
                }
            };
            let rows = run_comparison(&splits, augmented.as_ref(), &classifier_cfg, mode)?;
            let (mean, std) = summarize(&rows);
            info!("{mode}: OOD test accuracy {mean:.4} ± {std:.4}");
            report.downstream_rows.extend(rows);
        }

        let p = self.ensure_parent(LAMBDA_CSV)?;
        report.write_lambda_csv(&p)?;
        self.record(LAMBDA_CSV)?;
        report.write_downstream_csv(&self.path(DOWNSTREAM_CSV))?;
        self.record(DOWNSTREAM_CSV)?;
        let svg = self.path(MMD_SVG);
        fs::write(&svg, report.mmd_svg()).map_err(|e| Error::io(&svg, e))?;
        self.record(MMD_SVG)?;
        self.save_manifest()?;
        Ok(report)
    }

    /// All stages in order. An artifact is reused when an earlier run in the
    /// same directory produced it from the same configuration sections and
    /// inputs, and its bytes are unchanged on disk.
    pub fn pipeline(&mut self) -> Result<MetricReport> {
        let key = self.data_key();
        if [TRAIN_FILE, VAL_FILE, TEST_FILE]
            .iter()
            .all(|f| self.reusable(f, &key))
        {
            info!("reusing generated data");
            for f in [TRAIN_FILE, VAL_FILE, TEST_FILE] {
                self.record_with(f, &key)?;
            }
            self.seed("dataset");
        } else {
            self.gen_data()?;
        }
        let key = self.training_key("score", &self.cfg.model.score)?;
        if self.reusable(SCORE_CKPT, &key) {
            info!("reusing {SCORE_CKPT}");
            self.record_with(SCORE_CKPT, &key)?;
            self.seed("train-score");
        } else {
            self.train_score()?;
        }
        let key = self.training_key("classifier", &self.cfg.model.classifier)?;
        if self.reusable(CLASSIFIER_CKPT, &key) {
            info!("reusing {CLASSIFIER_CKPT}");
            self.record_with(CLASSIFIER_CKPT, &key)?;
            self.seed("train-classifier");
        } else {
            self.train_classifier()?;
        }
        self.evaluate(true)
    }
}

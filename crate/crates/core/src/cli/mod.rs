//! Run configuration and the operator commands behind the binary.
//!
//! Configuration is layered: built-in defaults, then an optional JSON file,
//! then `key.path=value` overrides. Every command writes its outputs and a
//! `manifest_<command>.json` into the configured output directory.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::evalharness::{config_hash, evaluate_cohort, target_sweep, Agent, CohortSpec, Report, RunManifest};
use crate::model::{load_checkpoint, overfit, save_checkpoint, train_model_with, HyperParams, ModelParams, TokenSeq};
use crate::policies::{MctsConfig, PolicyKind};
use crate::probe::{run_probe, ProbeConfig, ProbeReport};
use crate::simenv::{
    fit_group_model, gen_offline_dataset, make_pd1, parse_triples, pd1, pd2, GroupModel, OfflineDataset,
};

/// Embedding width used for ingested catalogues when the config leaves
/// `model.d` unset.
pub const INGESTED_D: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Pd1,
    Pd2,
    GroupModel { path: PathBuf },
    Triples { path: PathBuf, n_groups: usize },
}

impl DatasetSpec {
    fn is_ingested(&self) -> bool {
        matches!(self, DatasetSpec::GroupModel { .. } | DatasetSpec::Triples { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub users_per_group: usize,
    pub seq_len: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            users_per_group: 1250,
            seq_len: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub policies: Vec<PolicyKind>,
    pub users_per_group: usize,
    pub horizon: usize,
    pub ks: Vec<usize>,
    pub threshold: f64,
    pub warmup: usize,
    pub target_rating: f64,
    /// Targets used when a sweep is requested.
    pub sweep_targets: Vec<f64>,
    pub mcts: MctsConfig,
    /// Checkpoint trained without the bottleneck, for `rlt4rec_no_bottleneck`.
    pub ablation_checkpoint: Option<PathBuf>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            policies: vec![
                PolicyKind::Rlt4rec,
                PolicyKind::BestStar,
                PolicyKind::RandomUniform,
                PolicyKind::BayesGreedy,
            ],
            users_per_group: 200,
            horizon: 25,
            ks: vec![5, 10, 15, 20],
            threshold: 4.0,
            warmup: 25,
            target_rating: 5.0,
            sweep_targets: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            mcts: MctsConfig::default(),
            ablation_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    /// `model.seed` always mirrors the top-level seed.
    pub model: HyperParams,
    pub data: DataSpec,
    pub eval: EvalSpec,
    pub probe: ProbeConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::Pd1,
            model: HyperParams::default(),
            data: DataSpec::default(),
            eval: EvalSpec::default(),
            probe: ProbeConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Sets `path` (dot-separated) inside a JSON object tree, creating
/// intermediate objects.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(Error::Config(format!("empty key in '{path}'")));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("'{}' is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one key")
}

/// Parses `key.path=value`; the value is read as JSON when possible and as
/// a bare string otherwise.
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{text}' is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let mut root = match file {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::MissingFile(p.to_path_buf()));
                }
                serde_json::from_str(&std::fs::read_to_string(p)?)?
            }
            None => Value::Object(Default::default()),
        };
        if !root.is_object() {
            return Err(Error::Config("configuration must be a JSON object".into()));
        }
        for (k, v) in overrides {
            set_path(&mut root, k, v.clone())?;
        }
        let d_given = root.pointer("/model/d").is_some();
        let mut cfg: RunConfig = serde_json::from_value(root)?;
        if cfg.dataset.is_ingested() && !d_given {
            cfg.model.d = INGESTED_D;
        }
        cfg.model.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let paths = match &self.dataset {
            DatasetSpec::GroupModel { path } | DatasetSpec::Triples { path, .. } => vec![path],
            _ => vec![],
        };
        for p in paths.into_iter().chain(self.eval.ablation_checkpoint.as_ref()) {
            if !p.exists() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
        if let DatasetSpec::Triples { n_groups: 0, .. } = self.dataset {
            return Err(Error::Config("dataset.n_groups must be >= 1".into()));
        }
        if self.data.seq_len == 0 || self.data.users_per_group == 0 {
            return Err(Error::Config("data.seq_len and data.users_per_group must be positive".into()));
        }
        if self.eval.horizon == 0 || self.eval.users_per_group == 0 {
            return Err(Error::Config("eval.horizon and eval.users_per_group must be positive".into()));
        }
        Ok(())
    }

    pub fn dataset_name(&self) -> String {
        match &self.dataset {
            DatasetSpec::Pd1 => "pd1".into(),
            DatasetSpec::Pd2 => "pd2".into(),
            DatasetSpec::GroupModel { path } | DatasetSpec::Triples { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "custom".into()),
        }
    }

    pub fn group_model(&self) -> Result<GroupModel> {
        match &self.dataset {
            DatasetSpec::Pd1 => Ok(pd1()),
            DatasetSpec::Pd2 => Ok(pd2()),
            DatasetSpec::GroupModel { path } => GroupModel::load(path),
            DatasetSpec::Triples { path, n_groups } => {
                let text = std::fs::read_to_string(path)?;
                fit_group_model(&parse_triples(&text, &path.display().to_string())?, *n_groups, self.seed)
            }
        }
    }

    /// Model hyperparameters with the catalogue size taken from `gm`.
    pub fn hyperparams(&self, gm: &GroupModel) -> HyperParams {
        HyperParams {
            n_items: gm.n_items,
            ..self.model.clone()
        }
    }

    pub fn cohort(&self) -> CohortSpec {
        CohortSpec {
            users_per_group: self.eval.users_per_group,
            horizon: self.eval.horizon,
            ks: self.eval.ks.clone(),
            threshold: self.eval.threshold,
            warmup: self.eval.warmup,
            seed: self.seed,
        }
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.output_dir.join("dataset.csv")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("model.ckpt")
    }

    pub fn ablation_path(&self) -> PathBuf {
        self.output_dir.join("model_no_bottleneck.ckpt")
    }
}

fn prepare_output(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    Ok(())
}

fn write_manifest(cfg: &RunConfig, command: &str, started: Instant, outputs: &[PathBuf]) -> Result<PathBuf> {
    let names = outputs.iter().map(|p| p.display().to_string()).collect();
    let path = cfg.output_dir.join(format!("manifest_{command}.json"));
    RunManifest::new(command, cfg.seed, cfg.hash()?, started, names).save(&path)?;
    Ok(path)
}

/// Samples the offline corpus and writes it to `dataset.csv`.
pub fn cmd_gen(cfg: &RunConfig) -> Result<PathBuf> {
    let started = Instant::now();
    prepare_output(cfg)?;
    let gm = cfg.group_model()?;
    let (data, _) = gen_offline_dataset(&gm, cfg.data.users_per_group, cfg.data.seq_len, cfg.seed)?;
    let path = cfg.dataset_path();
    data.save(&path)?;
    write_manifest(cfg, "gen", started, std::slice::from_ref(&path))?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TrainOptions {
    /// Train the ablation model without the rating bottleneck.
    pub no_bottleneck: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Trains on the dataset file and writes the checkpoint and training log.
pub fn cmd_train(cfg: &RunConfig, dataset: Option<&Path>, opts: TrainOptions) -> Result<TrainOutcome> {
    let started = Instant::now();
    prepare_output(cfg)?;
    let dataset_path = dataset.map(Path::to_path_buf).unwrap_or_else(|| cfg.dataset_path());
    let data = OfflineDataset::load(&dataset_path)?;
    let mut hp = HyperParams {
        n_items: data.n_items,
        ..cfg.model.clone()
    };
    let (checkpoint, log_path) = if opts.no_bottleneck {
        hp.bottleneck_enabled = false;
        (cfg.ablation_path(), cfg.output_dir.join("train_log_no_bottleneck.csv"))
    } else {
        (cfg.checkpoint_path(), cfg.output_dir.join("train_log.csv"))
    };
    let (params, log) = train_model_with(&data, &hp, |r| {
        eprintln!(
            "epoch {:>3}  train {:>9}  val {:.5}",
            r.epoch,
            r.train_loss.map_or("-".into(), |l| format!("{l:.5}")),
            r.val_loss
        )
    })?;
    save_checkpoint(&params, &checkpoint)?;
    std::fs::write(&log_path, log.to_csv())?;
    write_manifest(
        cfg,
        if opts.no_bottleneck { "train_no_bottleneck" } else { "train" },
        started,
        &[checkpoint.clone(), log_path.clone()],
    )?;
    Ok(TrainOutcome {
        checkpoint,
        log: log_path,
        best_epoch: log.best_epoch,
        best_val_loss: log.best_val_loss(),
    })
}

/// Eight fixed sequences on a 20-item, 4-group catalogue.
pub fn overfit_fixture() -> Result<(HyperParams, Vec<TokenSeq>)> {
    let gm = make_pd1(4, 5, 5.0, 1.0, 0.25)?;
    let (data, _) = gen_offline_dataset(&gm, 2, 5, 0)?;
    let hp = HyperParams {
        d: 64,
        n_items: gm.n_items,
        max_timesteps: 5,
        lr: 3e-3,
        ..HyperParams::default()
    };
    Ok((hp, data.sequences.iter().map(TokenSeq::from_history).collect()))
}

pub const OVERFIT_STEPS: usize = 200;

/// Full-batch training on the built-in fixture; returns the initial and
/// final loss and writes `model_overfit.ckpt`.
pub fn cmd_overfit(cfg: &RunConfig) -> Result<(f64, f64)> {
    let started = Instant::now();
    prepare_output(cfg)?;
    let (hp, seqs) = overfit_fixture()?;
    let (params, initial, last) = overfit(&hp, &seqs, OVERFIT_STEPS)?;
    let path = cfg.output_dir.join("model_overfit.ckpt");
    save_checkpoint(&params, &path)?;
    write_manifest(cfg, "train_overfit", started, &[path])?;
    Ok((initial, last))
}

fn check_model_fits(model: &ModelParams<f32>, gm: &GroupModel, horizon: usize, what: &Path) -> Result<()> {
    if model.hp.n_items != gm.n_items {
        return Err(Error::Config(format!(
            "{} has {} items but the dataset has {}",
            what.display(),
            model.hp.n_items,
            gm.n_items
        )));
    }
    if horizon > model.hp.max_timesteps {
        return Err(Error::Config(format!(
            "horizon {horizon} exceeds max_timesteps {} of {}",
            model.hp.max_timesteps,
            what.display()
        )));
    }
    Ok(())
}

fn write_report(report: &Report, dir: &Path, sweep: bool, outputs: &mut Vec<PathBuf>) -> Result<()> {
    let stem = match report.target {
        Some(t) if sweep => format!("{}_target{}", report.policy, t),
        _ => report.policy.clone(),
    };
    let curve = dir.join(format!("curve_{stem}.csv"));
    report.write_curve_csv(BufWriter::new(File::create(&curve)?))?;
    outputs.push(curve);
    if !report.precision.is_empty() {
        let prec = dir.join(format!("precision_{stem}.csv"));
        report.write_precision_csv(BufWriter::new(File::create(&prec)?))?;
        outputs.push(prec);
    }
    Ok(())
}

/// Evaluates every configured policy; with `sweep`, model policies run once
/// per sweep target instead of once at `target_rating`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, sweep: bool) -> Result<Vec<Report>> {
    let started = Instant::now();
    prepare_output(cfg)?;
    let gm = cfg.group_model()?;
    let spec = cfg.cohort();
    let name = cfg.dataset_name();
    let ckpt_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.checkpoint_path());
    let needs = |k: PolicyKind| cfg.eval.policies.contains(&k);
    let model = if needs(PolicyKind::Rlt4rec) {
        let m = load_checkpoint(&ckpt_path)?;
        check_model_fits(&m, &gm, spec.horizon, &ckpt_path)?;
        Some(m)
    } else {
        None
    };
    let ablation = if needs(PolicyKind::Rlt4recNoBottleneck) {
        let p = cfg.eval.ablation_checkpoint.clone().unwrap_or_else(|| cfg.ablation_path());
        let m = load_checkpoint(&p)?;
        check_model_fits(&m, &gm, spec.horizon, &p)?;
        Some(m)
    } else {
        None
    };

    let mut reports = Vec::new();
    for &kind in &cfg.eval.policies {
        let model = match kind {
            PolicyKind::Rlt4rec => model.as_ref(),
            PolicyKind::Rlt4recNoBottleneck => ablation.as_ref(),
            _ => None,
        };
        match model {
            Some(m) if sweep => {
                reports.extend(target_sweep(kind, m, &cfg.eval.sweep_targets, &gm, &spec, &name)?);
            }
            Some(m) => {
                let agent = Agent::with_model(kind, m, cfg.eval.target_rating);
                reports.push(evaluate_cohort(&agent, &gm, &spec, &name)?.0);
            }
            None => {
                let mut agent = Agent::new(kind);
                agent.mcts = cfg.eval.mcts;
                reports.push(evaluate_cohort(&agent, &gm, &spec, &name)?.0);
            }
        }
    }
    let mut outputs = Vec::new();
    for r in &reports {
        write_report(r, &cfg.output_dir, sweep, &mut outputs)?;
    }
    write_manifest(cfg, "eval", started, &outputs)?;
    Ok(reports)
}

/// Probes the checkpoint and a fresh initialization; writes `probe.csv`.
pub fn cmd_probe(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<ProbeReport> {
    let started = Instant::now();
    prepare_output(cfg)?;
    let gm = cfg.group_model()?;
    let ckpt_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.checkpoint_path());
    let model = load_checkpoint(&ckpt_path)?;
    check_model_fits(&model, &gm, cfg.probe.horizon, &ckpt_path)?;
    let report = run_probe(&model, &gm, &cfg.probe, cfg.seed)?;
    let path = cfg.output_dir.join("probe.csv");
    report.write_csv(BufWriter::new(File::create(&path)?))?;
    write_manifest(cfg, "probe", started, &[path])?;
    Ok(report)
}

/// Fits a group model to a triples file and writes it as JSON.
/// Item-id mapping written next to an ingested group model.
pub fn item_map_path(group_model: &Path) -> PathBuf {
    group_model.with_extension("items.csv")
}

pub fn cmd_ingest(triples: &Path, n_groups: usize, seed: u64, out: &Path) -> Result<GroupModel> {
    if !triples.exists() {
        return Err(Error::MissingFile(triples.to_path_buf()));
    }
    let text = std::fs::read_to_string(triples)?;
    let parsed = parse_triples(&text, &triples.display().to_string())?;
    let gm = fit_group_model(&parsed, n_groups, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    gm.save(out)?;
    parsed.write_item_map(BufWriter::new(File::create(item_map_path(out))?))?;
    Ok(gm)
}

/// Worker count: the explicit value, else `RLT4REC_THREADS`, else rayon's
/// default.
pub fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("RLT4REC_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("RLT4REC_THREADS='{v}' is not a number")))?,
            ),
            Err(_) => None,
        },
    };
    if n == Some(0) {
        return Err(Error::Config("worker count must be >= 1".into()));
    }
    Ok(n)
}

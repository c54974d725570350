//! Experiment configuration: sectioned key-value files (TOML) with unknown
//! keys rejected. Every field is optional; missing values resolve to the task
//! family's defaults. `--override section.key=value` edits apply before
//! resolution.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use omni_core::eval::{ClassEvalCfg, RegressionEvalCfg, RlEvalCfg};
use omni_core::optim::OptimKind;
use omni_core::train::{Mode, TaskFamily, TrainConfig};

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    mode: Option<String>,
    family: Option<String>,
    seed: Option<u64>,
    iterations: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    hidden: Option<Vec<usize>>,
    /// 0 keeps branches at full rank.
    branch_rank: Option<usize>,
    head_bias: Option<bool>,
    policy_logstd_init: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObjective {
    lambda: Option<f64>,
    alpha: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptim {
    outer: Option<String>,
    outer_lr: Option<f64>,
    inner_lr: Option<f64>,
    inner_steps: Option<usize>,
    first_order: Option<bool>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEpisode {
    batch_size: Option<usize>,
    k_support: Option<usize>,
    n_query: Option<usize>,
    n_way: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSinusoid {
    bank_tasks: Option<usize>,
    bank_points: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNavigation {
    tasks_per_iter: Option<usize>,
    traj_per_task: Option<usize>,
    gamma: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClassification {
    dim: Option<usize>,
    sigma_c: Option<f64>,
    sigma_w: Option<f64>,
    train_classes: Option<usize>,
    val_classes: Option<usize>,
    test_classes: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawValidation {
    cadence: Option<usize>,
    tasks: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvalRegression {
    n_tasks: Option<usize>,
    n_query: Option<usize>,
    adapt_steps: Option<usize>,
    finetune_lr: Option<f64>,
    meta_lr: Option<f64>,
    smooth_grid: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvalRl {
    n_tasks: Option<usize>,
    grad_steps: Option<usize>,
    n_traj: Option<usize>,
    inner_lr: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvalClassification {
    n_tasks: Option<usize>,
    head_fit_steps: Option<usize>,
    head_fit_lr: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    #[serde(default)]
    regression: RawEvalRegression,
    #[serde(default)]
    rl: RawEvalRl,
    #[serde(default)]
    classification: RawEvalClassification,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    run: RawRun,
    #[serde(default)]
    model: RawModel,
    #[serde(default)]
    objective: RawObjective,
    #[serde(default)]
    optim: RawOptim,
    #[serde(default)]
    episode: RawEpisode,
    #[serde(default)]
    sinusoid: RawSinusoid,
    #[serde(default)]
    navigation: RawNavigation,
    #[serde(default)]
    classification: RawClassification,
    #[serde(default)]
    validation: RawValidation,
    #[serde(default)]
    eval: RawEval,
}

/// A fully resolved experiment: the training configuration plus the
/// per-protocol evaluation settings.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub eval_regression: RegressionEvalCfg,
    pub eval_rl: RlEvalCfg,
    pub eval_classification: ClassEvalCfg,
}

fn set_path(value: &mut toml::Value, dotted: &str, raw: &str) -> anyhow::Result<()> {
    let mut parts = dotted.split('.').peekable();
    let mut cur = value;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            let table = cur
                .as_table_mut()
                .with_context(|| format!("{dotted}: parent is not a table"))?;
            let parsed: toml::Value = if let Ok(b) = raw.parse::<bool>() {
                toml::Value::Boolean(b)
            } else if let Ok(i) = raw.parse::<i64>() {
                toml::Value::Integer(i)
            } else if let Ok(f) = raw.parse::<f64>() {
                toml::Value::Float(f)
            } else if raw.starts_with('[') {
                raw.parse::<toml::Value>()
                    .with_context(|| format!("{dotted}: bad array value"))?
            } else {
                toml::Value::String(raw.to_string())
            };
            table.insert(part.to_string(), parsed);
        } else {
            let table = cur
                .as_table_mut()
                .with_context(|| format!("{dotted}: parent is not a table"))?;
            cur = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
    }
    Ok(())
}

/// Parse a config file, apply `key=value` overrides, resolve defaults.
pub fn load_experiment(
    path: Option<&Path>,
    overrides: &[String],
    seed_override: Option<u64>,
) -> anyhow::Result<ExperimentConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .with_context(|| format!("reading config {}", p.display()))?,
        None => String::new(),
    };
    let mut value: toml::Value = text
        .parse()
        .map_err(|e| anyhow::anyhow!("config parse error: {e}"))?;
    if !value.is_table() {
        bail!("config root must be a table");
    }
    for ov in overrides {
        let (key, val) = ov
            .split_once('=')
            .with_context(|| format!("override '{ov}' is not key=value"))?;
        set_path(&mut value, key.trim(), val.trim())?;
    }
    let raw: RawConfig = value
        .try_into()
        .map_err(|e| anyhow::anyhow!("config error: {e}"))?;
    resolve(raw, seed_override)
}

fn resolve(raw: RawConfig, seed_override: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let family = match &raw.run.family {
        Some(f) => TaskFamily::parse(f)?,
        None => TaskFamily::Sinusoid,
    };
    let mut t = TrainConfig::defaults(family);
    if let Some(m) = &raw.run.mode {
        t.mode = Mode::parse(m)?;
    }
    if let Some(s) = raw.run.seed {
        t.seed = s;
    }
    if let Some(s) = seed_override {
        t.seed = s;
    }
    if let Some(i) = raw.run.iterations {
        t.iterations = i;
    }
    if let Some(h) = raw.model.hidden {
        t.hidden = h;
    }
    if let Some(r) = raw.model.branch_rank {
        t.branch_rank = if r == 0 { None } else { Some(r) };
    }
    if let Some(b) = raw.model.head_bias {
        t.head_bias = b;
    }
    if let Some(v) = raw.model.policy_logstd_init {
        t.policy_logstd_init = v;
    }
    if let Some(l) = raw.objective.lambda {
        t.lambda = l;
    }
    if let Some(a) = raw.objective.alpha {
        t.alpha = a;
    }
    if let Some(o) = &raw.optim.outer {
        t.outer = match o.as_str() {
            "sgd" => OptimKind::Sgd,
            "adam" => OptimKind::Adam,
            other => bail!("unknown optimizer '{other}'; valid: sgd, adam"),
        };
    }
    if let Some(v) = raw.optim.outer_lr {
        t.outer_lr = v;
    }
    if let Some(v) = raw.optim.inner_lr {
        t.inner_lr = v;
    }
    if let Some(v) = raw.optim.inner_steps {
        t.inner_steps = v;
    }
    if let Some(v) = raw.optim.first_order {
        t.first_order = v;
    }
    if let Some(v) = raw.episode.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = raw.episode.k_support {
        t.k_support = v;
    }
    if let Some(v) = raw.episode.n_query {
        t.n_query = v;
    }
    if let Some(v) = raw.episode.n_way {
        t.n_way = v;
    }
    if let Some(v) = raw.sinusoid.bank_tasks {
        t.sinusoid.bank_tasks = v;
    }
    if let Some(v) = raw.sinusoid.bank_points {
        t.sinusoid.bank_points = v;
    }
    if let Some(v) = raw.navigation.tasks_per_iter {
        t.navigation.tasks_per_iter = v;
    }
    if let Some(v) = raw.navigation.traj_per_task {
        t.navigation.traj_per_task = v;
    }
    if let Some(v) = raw.navigation.gamma {
        t.navigation.gamma = v;
    }
    if let Some(v) = raw.classification.dim {
        t.classification.dim = v;
    }
    if let Some(v) = raw.classification.sigma_c {
        t.classification.sigma_c = v;
    }
    if let Some(v) = raw.classification.sigma_w {
        t.classification.sigma_w = v;
    }
    if let Some(v) = raw.classification.train_classes {
        t.classification.train_classes = v;
    }
    if let Some(v) = raw.classification.val_classes {
        t.classification.val_classes = v;
    }
    if let Some(v) = raw.classification.test_classes {
        t.classification.test_classes = v;
    }
    if let Some(v) = raw.validation.cadence {
        t.validation_cadence = v;
    }
    if let Some(v) = raw.validation.tasks {
        t.validation_tasks = v;
    }
    t.validate()?;

    let mut er = RegressionEvalCfg {
        seed: t.seed,
        k_support: t.k_support,
        ..RegressionEvalCfg::default()
    };
    if let Some(v) = raw.eval.regression.n_tasks {
        er.n_tasks = v;
    }
    if let Some(v) = raw.eval.regression.n_query {
        er.n_query = v;
    }
    if let Some(v) = raw.eval.regression.adapt_steps {
        er.adapt_steps = v;
    }
    if let Some(v) = raw.eval.regression.finetune_lr {
        er.finetune_lr = v;
    }
    if let Some(v) = raw.eval.regression.meta_lr {
        er.meta_lr = v;
    }
    if let Some(v) = raw.eval.regression.smooth_grid {
        er.smooth_grid = v;
    }

    let mut erl = RlEvalCfg {
        seed: t.seed,
        gamma: t.navigation.gamma,
        ..RlEvalCfg::default()
    };
    if let Some(v) = raw.eval.rl.n_tasks {
        erl.n_tasks = v;
    }
    if let Some(v) = raw.eval.rl.grad_steps {
        erl.grad_steps = v;
    }
    if let Some(v) = raw.eval.rl.n_traj {
        erl.n_traj = v;
    }
    if let Some(v) = raw.eval.rl.inner_lr {
        erl.inner_lr = v;
    }

    let mut ec = ClassEvalCfg {
        seed: t.seed,
        n_way: t.n_way,
        k_shot: t.k_support,
        n_query: 16,
        ..ClassEvalCfg::default()
    };
    if let Some(v) = raw.eval.classification.n_tasks {
        ec.n_tasks = v;
    }
    if let Some(v) = raw.eval.classification.head_fit_steps {
        ec.head_fit_steps = v;
    }
    if let Some(v) = raw.eval.classification.head_fit_lr {
        ec.head_fit_lr = v;
    }

    Ok(ExperimentConfig {
        train: t,
        eval_regression: er,
        eval_rl: erl,
        eval_classification: ec,
    })
}

/// Serialized copy of the resolved configuration, written into every run
/// directory so outputs are self-describing.
pub fn resolved_toml(cfg: &ExperimentConfig) -> anyhow::Result<String> {
    Ok(toml::to_string_pretty(cfg)?)
}

#[allow(dead_code)]
pub fn default_out_dir(mode: Mode, family: TaskFamily, seed: u64) -> PathBuf {
    PathBuf::from(format!("runs/{}-{}-seed{}", family.name(), mode.name(), seed))
}

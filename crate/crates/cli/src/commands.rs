//! The four CLI verbs: train, eval, compare, gradcheck.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;

use omni_core::checkpoint::{load_model, save_model};
use omni_core::eval::{
    classification_headline, eval_classification, eval_rl_adaptation, finetune_eval_regression,
    regression_headline, EvalReport,
};
use omni_core::gradcheck::run_checks;
use omni_core::metrics::write_metrics_csv;
use omni_core::rng::{domain, stream};
use omni_core::train::{
    classification_test_pool, train, Mode, NetRole, TaskFamily, TrainConfig, TrainedModel,
};
use omni_core::net::OmniNet;

use crate::config::{resolved_toml, ExperimentConfig};
use crate::manifest::{config_hash, now_unix_s, RunManifest};

/// Process exit codes: 0 success, 2 configuration error, 3 numeric failure,
/// 4 acceptance/check failure.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

pub fn error_exit_code(err: &anyhow::Error) -> i32 {
    if let Some(core) = err.downcast_ref::<omni_core::CoreError>() {
        match core {
            omni_core::CoreError::Numeric(_) => EXIT_NUMERIC,
            omni_core::CoreError::Autodiff(_) => EXIT_NUMERIC,
            _ => EXIT_CONFIG,
        }
    } else {
        EXIT_CONFIG
    }
}

pub struct TrainOutput {
    pub dir: PathBuf,
    pub model: TrainedModel,
}

/// Train per the config, writing metrics, checkpoint, config copy and
/// manifest into the run directory.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<TrainOutput> {
    let started = now_unix_s();
    std::fs::create_dir_all(out)?;

    let mut train_cfg = cfg.train.clone();
    if train_cfg.family == TaskFamily::Sinusoid && train_cfg.sinusoid.cache.is_none() {
        train_cfg.sinusoid.cache = Some(out.join("sinusoid_bank.bin"));
    }

    let config_text = resolved_toml(cfg)?;
    std::fs::write(out.join("config.toml"), &config_text)?;

    let result = train(&train_cfg)?;
    write_metrics_csv(&out.join("metrics.csv"), &result.rows)?;
    let ckpt_dir = out.join("checkpoint");
    save_model(&ckpt_dir, &result.model)?;

    let mut outputs = vec![
        "config.toml".to_string(),
        "metrics.csv".to_string(),
        "checkpoint/params.bin".to_string(),
        "checkpoint/params.manifest".to_string(),
        "checkpoint/model_meta.json".to_string(),
    ];
    if train_cfg.family == TaskFamily::Sinusoid {
        outputs.push("sinusoid_bank.bin".to_string());
    }
    RunManifest {
        config_sha256: config_hash(&config_text),
        seed: train_cfg.seed,
        build: format!("omni {}", env!("CARGO_PKG_VERSION")),
        started_unix_s: started,
        finished_unix_s: now_unix_s(),
        outputs,
    }
    .write_atomic(out)?;

    Ok(TrainOutput {
        dir: out.to_path_buf(),
        model: result.model,
    })
}

fn protocol_for(family: TaskFamily) -> &'static str {
    match family {
        TaskFamily::Sinusoid => "regression",
        TaskFamily::Navigation => "rl",
        TaskFamily::Classification => "classification",
    }
}

/// Evaluate a checkpoint under a protocol; emits a JSON report and a
/// plot-ready columnar file.
pub fn cmd_eval(
    checkpoint: &Path,
    protocol: &str,
    cfg: &ExperimentConfig,
    out: &Path,
) -> anyhow::Result<EvalReport> {
    let model = load_model(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let expected = protocol_for(model.family);
    if protocol != expected {
        anyhow::bail!(
            "checkpoint/config mismatch: checkpoint family {} expects protocol {expected}, got {protocol}",
            model.family.name()
        );
    }
    let report = run_protocol(&model, cfg)?;
    std::fs::create_dir_all(out)?;
    report.write_json(&out.join("report.json"))?;
    report.write_columnar(&out.join("report.dat"))?;
    Ok(report)
}

pub fn run_protocol(model: &TrainedModel, cfg: &ExperimentConfig) -> anyhow::Result<EvalReport> {
    Ok(match model.family {
        TaskFamily::Sinusoid => finetune_eval_regression(model, &cfg.eval_regression)?,
        TaskFamily::Navigation => eval_rl_adaptation(model, &cfg.eval_rl)?,
        TaskFamily::Classification => {
            let pool = classification_test_pool(&cfg.train);
            eval_classification(model, &pool, &cfg.eval_classification)?
        }
    })
}

/// A freshly initialized, untrained model of the baseline architecture:
/// the random-init reference for adaptation curves.
pub fn random_init_model(cfg: &TrainConfig) -> anyhow::Result<TrainedModel> {
    let mut rng = stream(cfg.seed, domain::INIT, 0);
    let net = OmniNet::new(cfg.net_config(NetRole::PlainMeta), &mut rng)?;
    Ok(TrainedModel {
        mode: Mode::MetaOnly,
        family: cfg.family,
        primary: net,
        secondary: None,
    })
}

#[derive(Debug, Clone)]
pub struct CompareRow {
    pub mode: Mode,
    pub seed_means: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
    pub status: String,
}

/// The headline scalar of a report: final-step MSE for regression, return
/// after two steps for navigation, headline accuracy for classification.
pub fn headline_metric(model_mode: Mode, family: TaskFamily, report: &EvalReport) -> Option<(f64, f64)> {
    match family {
        TaskFamily::Sinusoid => {
            let curve = report.curve(regression_headline(model_mode))?;
            let last = curve.last()?;
            Some((last.mean, last.stderr))
        }
        TaskFamily::Navigation => {
            let s = report.scalars.get("return_at_2")?;
            Some((s.mean, s.ci95 / 1.96))
        }
        TaskFamily::Classification => {
            let s = report.scalars.get(classification_headline(model_mode))?;
            Some((s.mean, s.ci95 / 1.96))
        }
    }
}

/// Train and evaluate every mode under shared seeds; emits one comparison
/// table. A failed mode is kept in the table with an abort marker.
pub fn cmd_compare(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    out: &Path,
) -> anyhow::Result<Vec<CompareRow>> {
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for mode in Mode::ALL {
        let mut seed_means = Vec::new();
        let mut pooled_sq = 0.0;
        let mut status = "ok".to_string();
        for &seed in seeds {
            let mut sub = cfg.clone();
            sub.train.mode = mode;
            sub.train.seed = seed;
            sub.eval_regression.seed = seed;
            sub.eval_rl.seed = seed;
            sub.eval_classification.seed = seed;
            let dir = out.join(format!("{}-seed{}", mode.name(), seed));
            let outcome = cmd_train(&sub, &dir).and_then(|t| {
                let report = run_protocol(&t.model, &sub)?;
                report.write_json(&dir.join("report.json"))?;
                report.write_columnar(&dir.join("report.dat"))?;
                headline_metric(mode, sub.train.family, &report)
                    .ok_or_else(|| anyhow::anyhow!("missing headline metric"))
            });
            match outcome {
                Ok((mean, stderr)) => {
                    seed_means.push(mean);
                    pooled_sq += stderr * stderr;
                }
                Err(err) => {
                    eprintln!("mode {} seed {} aborted: {err}", mode.name(), seed);
                    status = format!("abort: {err}");
                    break;
                }
            }
        }
        let (mean, stderr) = if seed_means.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (
                seed_means.iter().sum::<f64>() / seed_means.len() as f64,
                pooled_sq.sqrt() / seed_means.len() as f64,
            )
        };
        rows.push(CompareRow {
            mode,
            seed_means,
            mean,
            stderr,
            status,
        });
    }

    let mut w = BufWriter::new(File::create(out.join("comparison.csv"))?);
    writeln!(w, "mode,metric_mean,metric_stderr,status,per_seed")?;
    for row in &rows {
        let per_seed: Vec<String> = row.seed_means.iter().map(|m| format!("{m:.6e}")).collect();
        writeln!(
            w,
            "{},{:.12e},{:.12e},{},{}",
            row.mode.name(),
            row.mean,
            row.stderr,
            row.status,
            per_seed.join(";")
        )?;
    }
    w.flush()?;
    Ok(rows)
}

/// Run registered finite-difference checks; prints one line per check.
/// Returns false when any check fails.
pub fn cmd_gradcheck(scope: &str, points: usize) -> anyhow::Result<bool> {
    let outcomes = run_checks(scope, points)?;
    let mut all_ok = true;
    for o in &outcomes {
        let status = if o.passed() { "pass" } else { "FAIL" };
        println!(
            "{status} {:<28} scope={:<10} points={:<4} max_rel_err={:.3e} tol={:.0e}",
            o.name, o.scope, o.points, o.max_rel_err, o.tolerance
        );
        all_ok &= o.passed();
    }
    Ok(all_ok)
}

//! Evaluation protocols: few-shot regression fine-tuning curves, policy
//! adaptation in the navigation environment, and episodic classification with
//! per-head and ensemble predictions.
//!
//! Evaluation always works on parameter snapshots. Tasks are independent and
//! run in parallel; results are reduced in task order, so reports are
//! reproducible bit-for-bit from (seed, config). `OMNI_THREADS` caps the
//! worker count.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use omni_autodiff::{backward, ops, Tensor};

use crate::data::{Episode, Targets};
use crate::error::{CoreError, Result};
use crate::loss::{
    ce_pre_loss, maml_adapt, proto_logits, proto_prototypes, supervised_pre_loss, MamlCfg,
    ProtoDistance,
};
use crate::net::{FlowId, OmniNet};
use crate::rng::{domain, stream};
use crate::tasks::classification::ClassPool;
use crate::tasks::navigation::{sample_nav_task, NavTask};
use crate::tasks::sinusoid::sample_sinusoid_episode;
use crate::train::{collect_task_batch, Mode, TrainedModel};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScalarStat {
    pub mean: f64,
    pub ci95: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub n_tasks: usize,
    /// Metric-vs-adaptation-step curves, keyed by predictor name.
    pub curves: BTreeMap<String, Vec<CurvePoint>>,
    pub scalars: BTreeMap<String, ScalarStat>,
    pub notes: Vec<String>,
}

impl EvalReport {
    fn new(protocol: &str, n_tasks: usize) -> EvalReport {
        EvalReport {
            protocol: protocol.to_string(),
            n_tasks,
            curves: BTreeMap::new(),
            scalars: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::Data(format!("report serialization: {e}")))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    /// Plot-ready columnar text: `series step mean stderr` per curve point,
    /// then `scalar name mean ci95` lines.
    pub fn write_columnar(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "# protocol {} tasks {}", self.protocol, self.n_tasks)?;
        writeln!(w, "# series step mean stderr")?;
        for (name, points) in &self.curves {
            for p in points {
                writeln!(w, "{name} {} {:.12e} {:.12e}", p.step, p.mean, p.stderr)?;
            }
        }
        for (name, s) in &self.scalars {
            writeln!(w, "scalar {name} {:.12e} {:.12e}", s.mean, s.ci95)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn curve(&self, name: &str) -> Option<&[CurvePoint]> {
        self.curves.get(name).map(Vec::as_slice)
    }
}

pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

fn curve_from_per_task(per_task: &[Vec<f64>], steps: usize) -> Vec<CurvePoint> {
    (0..=steps)
        .map(|s| {
            let col: Vec<f64> = per_task.iter().map(|t| t[s]).collect();
            let (mean, stderr) = mean_stderr(&col);
            CurvePoint {
                step: s,
                mean,
                stderr,
            }
        })
        .collect()
}

pub use crate::par::run_tasks as par_tasks;

fn sgd_cfg(lr: f64) -> MamlCfg {
    MamlCfg {
        inner_lr: lr,
        inner_steps: 1,
        first_order: false,
    }
}

// ---------------------------------------------------------------------------
// Regression protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionEvalCfg {
    pub n_tasks: usize,
    pub k_support: usize,
    pub n_query: usize,
    pub adapt_steps: usize,
    /// Fine-tuning rate for the pre-flow and plain pre-trained models.
    pub finetune_lr: f64,
    /// Adaptation rate for meta-flows (the inner-loop rate).
    pub meta_lr: f64,
    pub seed: u64,
    /// Grid resolution for the recovered-curve smoothness diagnostic.
    pub smooth_grid: usize,
}

impl Default for RegressionEvalCfg {
    fn default() -> Self {
        RegressionEvalCfg {
            n_tasks: 100,
            k_support: 5,
            n_query: 50,
            adapt_steps: 10,
            finetune_lr: 0.01,
            meta_lr: 0.02,
            seed: 0,
            smooth_grid: 101,
        }
    }
}

struct Predictor {
    name: &'static str,
    flow: FlowId,
    lr: f64,
    /// Index into the model's member list (0 = primary, 1 = secondary).
    member: usize,
}

fn regression_predictors(model: &TrainedModel, cfg: &RegressionEvalCfg) -> Vec<Predictor> {
    match model.mode {
        Mode::Omni => vec![
            Predictor {
                name: "meta",
                flow: FlowId::Meta,
                lr: cfg.meta_lr,
                member: 0,
            },
            Predictor {
                name: "pre",
                flow: FlowId::Pre,
                lr: cfg.finetune_lr,
                member: 0,
            },
            Predictor {
                name: "joint",
                flow: FlowId::Joint,
                lr: cfg.meta_lr,
                member: 0,
            },
        ],
        Mode::PreOnly => vec![Predictor {
            name: "pre",
            flow: FlowId::Joint,
            lr: cfg.finetune_lr,
            member: 0,
        }],
        Mode::MetaOnly => vec![Predictor {
            name: "meta",
            flow: FlowId::Joint,
            lr: cfg.meta_lr,
            member: 0,
        }],
        Mode::JointTraining => vec![Predictor {
            name: "joint",
            flow: FlowId::Joint,
            lr: cfg.meta_lr,
            member: 0,
        }],
        Mode::Ensemble => vec![
            Predictor {
                name: "pre",
                flow: FlowId::Joint,
                lr: cfg.finetune_lr,
                member: 0,
            },
            Predictor {
                name: "meta",
                flow: FlowId::Joint,
                lr: cfg.meta_lr,
                member: 1,
            },
        ],
    }
}

/// The curve used when modes are compared against each other.
pub fn regression_headline(mode: Mode) -> &'static str {
    match mode {
        Mode::Omni | Mode::MetaOnly => "meta",
        Mode::PreOnly => "pre",
        Mode::JointTraining => "joint",
        Mode::Ensemble => "ensemble",
    }
}

fn member_net<'m>(model: &'m TrainedModel, member: usize) -> &'m OmniNet {
    if member == 0 {
        &model.primary
    } else {
        model
            .secondary
            .as_ref()
            .expect("ensemble models carry a second member")
    }
}

/// Mean squared second difference of the model's recovered curve on a fixed
/// grid over the input range.
fn smoothness_of(net: &OmniNet, params: &[Tensor], flow: FlowId, grid: usize) -> Result<f64> {
    let xs: Vec<f64> = (0..grid)
        .map(|i| -5.0 + 10.0 * i as f64 / (grid - 1) as f64)
        .collect();
    let x = Tensor::constant(xs, vec![grid, 1])?;
    let y = net.head_output(params, &x, flow)?;
    let d = y.data();
    let mut acc = 0.0;
    for i in 1..grid - 1 {
        let second = d[i + 1] - 2.0 * d[i] + d[i - 1];
        acc += second * second;
    }
    Ok(acc / (grid - 2) as f64)
}

/// Per-task adaptation curves: query MSE after 0..=adapt_steps SGD steps on
/// the support set, for each of the model's predictors plus their mean
/// ensemble. Also logs a smoothness diagnostic of the recovered curves at the
/// final step.
pub fn finetune_eval_regression(
    model: &TrainedModel,
    cfg: &RegressionEvalCfg,
) -> Result<EvalReport> {
    let predictors = regression_predictors(model, cfg);
    let steps = cfg.adapt_steps;

    struct TaskOut {
        mse: Vec<Vec<f64>>,      // [predictor][step]
        ensemble_mse: Vec<f64>,  // [step]
        smooth: Vec<f64>,        // [predictor]
        ensemble_smooth: f64,
    }

    let results: Vec<Result<TaskOut>> = par_tasks(cfg.n_tasks, |ti| {
        let mut rng = stream(cfg.seed, domain::EVAL_TASKS, ti as u64);
        let ep = sample_sinusoid_episode(&mut rng, cfg.k_support, cfg.n_query);
        let mut mse = vec![vec![0.0; steps + 1]; predictors.len()];
        let mut preds_per_step: Vec<Vec<Tensor>> = vec![Vec::new(); steps + 1];
        let mut smooth = vec![0.0; predictors.len()];
        let mut ensemble_smooth_terms: Vec<Tensor> = Vec::new();

        for (pi, p) in predictors.iter().enumerate() {
            let net = member_net(model, p.member);
            let mask = net.path_mask(p.flow);
            let mut params = net.params_vec();
            for s in 0..=steps {
                let out = net.head_output(&params, &ep.query_x, p.flow)?;
                mse[pi][s] = supervised_pre_loss(&out, &ep.query_y)?.item();
                preds_per_step[s].push(out.detach());
                if s < steps {
                    params = maml_adapt(
                        &params,
                        &mask,
                        |q: &[Tensor]| {
                            let o = net.head_output(q, &ep.support_x, p.flow)?;
                            supervised_pre_loss(&o, &ep.support_y)
                        },
                        &sgd_cfg(p.lr),
                        false,
                    )?;
                }
            }
            smooth[pi] = smoothness_of(net, &params, p.flow, cfg.smooth_grid)?;
            // grid predictions of the adapted model for the ensemble diagnostic
            let xs: Vec<f64> = (0..cfg.smooth_grid)
                .map(|i| -5.0 + 10.0 * i as f64 / (cfg.smooth_grid - 1) as f64)
                .collect();
            let gx = Tensor::constant(xs, vec![cfg.smooth_grid, 1])?;
            ensemble_smooth_terms.push(net.head_output(&params, &gx, p.flow)?.detach());
        }

        // mean-prediction ensemble across predictors, per step
        let mut ensemble_mse = vec![0.0; steps + 1];
        for s in 0..=steps {
            let k = preds_per_step[s].len() as f64;
            let mut acc = preds_per_step[s][0].clone();
            for t in &preds_per_step[s][1..] {
                acc = ops::add(&acc, t)?;
            }
            let mean_pred = ops::scale_const(&acc, 1.0 / k)?;
            ensemble_mse[s] = supervised_pre_loss(&mean_pred, &ep.query_y)?.item();
        }
        let ensemble_smooth = {
            let k = ensemble_smooth_terms.len() as f64;
            let mut acc = ensemble_smooth_terms[0].clone();
            for t in &ensemble_smooth_terms[1..] {
                acc = ops::add(&acc, t)?;
            }
            let d = ops::scale_const(&acc, 1.0 / k)?;
            let d = d.data();
            let g = cfg.smooth_grid;
            let mut s2 = 0.0;
            for i in 1..g - 1 {
                let second = d[i + 1] - 2.0 * d[i] + d[i - 1];
                s2 += second * second;
            }
            s2 / (g - 2) as f64
        };

        Ok(TaskOut {
            mse,
            ensemble_mse,
            smooth,
            ensemble_smooth,
        })
    });

    let mut report = EvalReport::new("regression", cfg.n_tasks);
    let oks: Vec<TaskOut> = results.into_iter().collect::<Result<_>>()?;

    for (pi, p) in predictors.iter().enumerate() {
        let per_task: Vec<Vec<f64>> = oks.iter().map(|t| t.mse[pi].clone()).collect();
        report
            .curves
            .insert(p.name.to_string(), curve_from_per_task(&per_task, steps));
        let smooth_vals: Vec<f64> = oks.iter().map(|t| t.smooth[pi]).collect();
        let (m, se) = mean_stderr(&smooth_vals);
        report.scalars.insert(
            format!("smoothness_{}", p.name),
            ScalarStat {
                mean: m,
                ci95: 1.96 * se,
            },
        );
    }
    let per_task_ens: Vec<Vec<f64>> = oks.iter().map(|t| t.ensemble_mse.clone()).collect();
    report
        .curves
        .insert("ensemble".to_string(), curve_from_per_task(&per_task_ens, steps));
    let ens_smooth: Vec<f64> = oks.iter().map(|t| t.ensemble_smooth).collect();
    let (m, se) = mean_stderr(&ens_smooth);
    report.scalars.insert(
        "smoothness_ensemble".to_string(),
        ScalarStat {
            mean: m,
            ci95: 1.96 * se,
        },
    );

    let headline = regression_headline(model.mode);
    if let Some(points) = report.curve(headline) {
        let last = points[points.len() - 1];
        report.scalars.insert(
            format!("mse_at_{}", steps),
            ScalarStat {
                mean: last.mean,
                ci95: 1.96 * last.stderr,
            },
        );
    }
    report
        .notes
        .push(format!("headline predictor: {headline}"));
    Ok(report)
}

// ---------------------------------------------------------------------------
// Navigation protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RlEvalCfg {
    pub n_tasks: usize,
    pub grad_steps: usize,
    pub n_traj: usize,
    pub inner_lr: f64,
    pub gamma: f64,
    pub normalize_advantages: bool,
    pub seed: u64,
}

impl Default for RlEvalCfg {
    fn default() -> Self {
        RlEvalCfg {
            n_tasks: 200,
            grad_steps: 4,
            n_traj: 20,
            inner_lr: 0.1,
            gamma: 0.99,
            normalize_advantages: true,
            seed: 0,
        }
    }
}

fn rl_flow(mode: Mode) -> FlowId {
    match mode {
        Mode::Omni => FlowId::Meta,
        _ => FlowId::Joint,
    }
}

fn eval_member_returns(
    net: &OmniNet,
    flow: FlowId,
    task: &NavTask,
    cfg: &RlEvalCfg,
    task_index: usize,
) -> Result<Vec<f64>> {
    let mask = net.path_mask(flow);
    let mut params = net.params_vec();
    let mut returns = Vec::with_capacity(cfg.grad_steps + 1);
    for step in 0..=cfg.grad_steps {
        let mut qrng = stream(
            cfg.seed,
            domain::EVAL_ROLLOUT,
            (task_index as u64) * 64 + (step as u64) * 2,
        );
        let query = collect_task_batch(
            net,
            &params,
            flow,
            task,
            cfg.n_traj,
            cfg.gamma,
            cfg.normalize_advantages,
            &mut qrng,
        );
        returns.push(query.mean_return());
        if step < cfg.grad_steps {
            let mut srng = stream(
                cfg.seed,
                domain::EVAL_ROLLOUT,
                (task_index as u64) * 64 + (step as u64) * 2 + 1,
            );
            let support = collect_task_batch(
                net,
                &params,
                flow,
                task,
                cfg.n_traj,
                cfg.gamma,
                cfg.normalize_advantages,
                &mut srng,
            );
            params = maml_adapt(
                &params,
                &mask,
                |p: &[Tensor]| crate::loss::rl_surrogate(net, p, flow, &support),
                &sgd_cfg(cfg.inner_lr),
                false,
            )?;
        }
    }
    Ok(returns)
}

/// Average query return after 0..=grad_steps policy-gradient adaptation
/// steps, over held-out navigation tasks. A randomly initialized model can be
/// passed in to serve as the random baseline.
pub fn eval_rl_adaptation(model: &TrainedModel, cfg: &RlEvalCfg) -> Result<EvalReport> {
    let results: Vec<Result<Vec<f64>>> = par_tasks(cfg.n_tasks, |ti| {
        let mut trng = stream(cfg.seed, domain::EVAL_TASKS, ti as u64);
        let task = sample_nav_task(&mut trng);
        match model.mode {
            Mode::Ensemble => {
                let a = eval_member_returns(&model.primary, FlowId::Joint, &task, cfg, ti)?;
                let b = eval_member_returns(
                    model
                        .secondary
                        .as_ref()
                        .expect("ensemble models carry a second member"),
                    FlowId::Joint,
                    &task,
                    cfg,
                    ti,
                )?;
                Ok(a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect())
            }
            _ => eval_member_returns(&model.primary, rl_flow(model.mode), &task, cfg, ti),
        }
    });
    let oks: Vec<Vec<f64>> = results.into_iter().collect::<Result<_>>()?;

    let mut report = EvalReport::new("rl", cfg.n_tasks);
    report
        .curves
        .insert("return".to_string(), curve_from_per_task(&oks, cfg.grad_steps));
    // monotonicity diagnostic: count of mean-curve inversions
    let (inversions, after2) = {
        let points = report.curve("return").expect("return curve present");
        let inv = points
            .windows(2)
            .filter(|w| w[1].mean + 1e-12 < w[0].mean)
            .count();
        (inv, points.get(2).copied().unwrap_or(points[points.len() - 1]))
    };
    report.scalars.insert(
        "return_inversions".to_string(),
        ScalarStat {
            mean: inversions as f64,
            ci95: 0.0,
        },
    );
    report.scalars.insert(
        "return_at_2".to_string(),
        ScalarStat {
            mean: after2.mean,
            ci95: 1.96 * after2.stderr,
        },
    );
    Ok(report)
}

// ---------------------------------------------------------------------------
// Classification protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassEvalCfg {
    pub n_tasks: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub head_fit_steps: usize,
    pub head_fit_lr: f64,
    pub seed: u64,
}

impl Default for ClassEvalCfg {
    fn default() -> Self {
        ClassEvalCfg {
            n_tasks: 600,
            n_way: 5,
            k_shot: 5,
            n_query: 16,
            head_fit_steps: 100,
            head_fit_lr: 0.01,
            seed: 0,
        }
    }
}

/// Fit a fresh linear head on detached support embeddings by full-batch
/// gradient descent on the cross-entropy, then return query probabilities.
fn logistic_probs(
    support_emb: &Tensor,
    labels: &[usize],
    query_emb: &Tensor,
    n_way: usize,
    steps: usize,
    lr: f64,
) -> Result<Tensor> {
    let d = support_emb.shape()[1];
    let mut w = Tensor::leaf(vec![0.0; d * n_way], vec![d, n_way])?;
    let mut b = Tensor::leaf(vec![0.0; n_way], vec![1, n_way])?;
    let s = support_emb.detach();
    for _ in 0..steps {
        let logits = ops::add(
            &ops::matmul(&s, &w)?,
            &ops::broadcast_rows(&b, s.shape()[0])?,
        )?;
        let loss = ce_pre_loss(&logits, labels)?;
        let grads = backward(&loss, &[w.clone(), b.clone()], false)?;
        w = ops::sub(&w, &ops::scale_const(&grads[0], lr)?)?.to_leaf();
        b = ops::sub(&b, &ops::scale_const(&grads[1], lr)?)?.to_leaf();
    }
    let logits = ops::add(
        &ops::matmul(&query_emb.detach(), &w)?,
        &ops::broadcast_rows(&b, query_emb.shape()[0])?,
    )?;
    Ok(ops::exp(&ops::log_softmax(&logits)?)?)
}

fn proto_probs(
    support_emb: &Tensor,
    labels: &[usize],
    query_emb: &Tensor,
    n_way: usize,
) -> Result<Tensor> {
    let protos = proto_prototypes(support_emb, labels, n_way)?;
    let logits = proto_logits(query_emb, &protos, ProtoDistance::SquaredEuclidean)?;
    Ok(ops::exp(&ops::log_softmax(&logits)?)?)
}

fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let n = labels.len();
    let k = probs.shape()[1];
    let mut hits = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let row = &probs.data()[i * k..(i + 1) * k];
        let mut best = 0usize;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == y {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

fn mean_probs(parts: &[Tensor]) -> Result<Tensor> {
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        acc = ops::add(&acc, p)?;
    }
    Ok(ops::scale_const(&acc, 1.0 / parts.len() as f64)?)
}

fn labels_of(y: &Targets) -> Result<&[usize]> {
    match y {
        Targets::Classes(c) => Ok(c),
        _ => Err(CoreError::Data("classification episode expected".into())),
    }
}

/// Head probabilities for one episode under one network: a logistic refit on
/// the pre flow, prototypes on the meta flow, and their average on the joint
/// flow (which is trained with both losses).
fn episode_head_probs(
    net: &OmniNet,
    ep: &Episode,
    cfg: &ClassEvalCfg,
    tri: bool,
) -> Result<BTreeMap<&'static str, Tensor>> {
    let slab = labels_of(&ep.support_y)?;
    let mut out = BTreeMap::new();
    let p = net.params();
    if tri {
        let es = net.features(p, &ep.support_x, FlowId::Pre)?;
        let eq = net.features(p, &ep.query_x, FlowId::Pre)?;
        out.insert(
            "pre_head",
            logistic_probs(&es, slab, &eq, ep.n_way, cfg.head_fit_steps, cfg.head_fit_lr)?,
        );
        let es = net.features(p, &ep.support_x, FlowId::Meta)?;
        let eq = net.features(p, &ep.query_x, FlowId::Meta)?;
        out.insert("meta_head", proto_probs(&es, slab, &eq, ep.n_way)?);
        let es = net.features(p, &ep.support_x, FlowId::Joint)?;
        let eq = net.features(p, &ep.query_x, FlowId::Joint)?;
        let lp = logistic_probs(&es, slab, &eq, ep.n_way, cfg.head_fit_steps, cfg.head_fit_lr)?;
        let pp = proto_probs(&es, slab, &eq, ep.n_way)?;
        out.insert("joint_head", mean_probs(&[lp, pp])?);
    }
    Ok(out)
}

/// Episodic accuracy of every head plus the mean-probability ensemble on a
/// held-out class pool.
pub fn eval_classification(
    model: &TrainedModel,
    pool: &ClassPool,
    cfg: &ClassEvalCfg,
) -> Result<EvalReport> {
    let results: Vec<Result<BTreeMap<String, f64>>> = par_tasks(cfg.n_tasks, |ti| {
        let mut rng = stream(cfg.seed, domain::EVAL_TASKS, ti as u64);
        let ep = pool.sample_episode(&mut rng, cfg.n_way, cfg.k_shot, cfg.n_query)?;
        let qlab = labels_of(&ep.query_y)?;
        let slab = labels_of(&ep.support_y)?;
        let mut accs = BTreeMap::new();

        match model.mode {
            Mode::Omni => {
                let probs = episode_head_probs(&model.primary, &ep, cfg, true)?;
                let parts: Vec<Tensor> = probs.values().cloned().collect();
                for (name, p) in &probs {
                    accs.insert((*name).to_string(), accuracy(p, qlab));
                }
                accs.insert("ensemble".to_string(), accuracy(&mean_probs(&parts)?, qlab));
            }
            Mode::PreOnly => {
                let net = &model.primary;
                let es = net.features(net.params(), &ep.support_x, FlowId::Joint)?;
                let eq = net.features(net.params(), &ep.query_x, FlowId::Joint)?;
                let p = logistic_probs(
                    &es,
                    slab,
                    &eq,
                    ep.n_way,
                    cfg.head_fit_steps,
                    cfg.head_fit_lr,
                )?;
                accs.insert("pre_head".to_string(), accuracy(&p, qlab));
            }
            Mode::MetaOnly => {
                let net = &model.primary;
                let es = net.features(net.params(), &ep.support_x, FlowId::Joint)?;
                let eq = net.features(net.params(), &ep.query_x, FlowId::Joint)?;
                let p = proto_probs(&es, slab, &eq, ep.n_way)?;
                accs.insert("meta_head".to_string(), accuracy(&p, qlab));
            }
            Mode::JointTraining => {
                let net = &model.primary;
                let es = net.features(net.params(), &ep.support_x, FlowId::Joint)?;
                let eq = net.features(net.params(), &ep.query_x, FlowId::Joint)?;
                let lp = logistic_probs(
                    &es,
                    slab,
                    &eq,
                    ep.n_way,
                    cfg.head_fit_steps,
                    cfg.head_fit_lr,
                )?;
                let pp = proto_probs(&es, slab, &eq, ep.n_way)?;
                accs.insert(
                    "joint_head".to_string(),
                    accuracy(&mean_probs(&[lp, pp])?, qlab),
                );
            }
            Mode::Ensemble => {
                let pre = &model.primary;
                let meta = model
                    .secondary
                    .as_ref()
                    .expect("ensemble models carry a second member");
                let es = pre.features(pre.params(), &ep.support_x, FlowId::Joint)?;
                let eq = pre.features(pre.params(), &ep.query_x, FlowId::Joint)?;
                let lp = logistic_probs(
                    &es,
                    slab,
                    &eq,
                    ep.n_way,
                    cfg.head_fit_steps,
                    cfg.head_fit_lr,
                )?;
                let es = meta.features(meta.params(), &ep.support_x, FlowId::Joint)?;
                let eq = meta.features(meta.params(), &ep.query_x, FlowId::Joint)?;
                let pp = proto_probs(&es, slab, &eq, ep.n_way)?;
                accs.insert("pre_head".to_string(), accuracy(&lp, qlab));
                accs.insert("meta_head".to_string(), accuracy(&pp, qlab));
                accs.insert(
                    "ensemble".to_string(),
                    accuracy(&mean_probs(&[lp, pp])?, qlab),
                );
            }
        }
        Ok(accs)
    });
    let oks: Vec<BTreeMap<String, f64>> = results.into_iter().collect::<Result<_>>()?;

    let mut report = EvalReport::new("classification", cfg.n_tasks);
    if let Some(first) = oks.first() {
        for name in first.keys() {
            let vals: Vec<f64> = oks.iter().map(|m| m[name]).collect();
            let (mean, stderr) = mean_stderr(&vals);
            report.scalars.insert(
                format!("acc_{name}"),
                ScalarStat {
                    mean,
                    ci95: 1.96 * stderr,
                },
            );
        }
        // measured (not asserted): episodes where the ensemble fell below the
        // weakest individual head
        if first.contains_key("ensemble") {
            let head_names: Vec<&String> =
                first.keys().filter(|k| k.as_str() != "ensemble").collect();
            let mut below = 0usize;
            for m in &oks {
                let min_head = head_names
                    .iter()
                    .map(|k| m[k.as_str()])
                    .fold(f64::INFINITY, f64::min);
                if m["ensemble"] < min_head {
                    below += 1;
                }
            }
            report.notes.push(format!(
                "ensemble below weakest head on {below} of {} episodes",
                oks.len()
            ));
        }
    }
    Ok(report)
}

/// The scalar used when classification modes are compared.
pub fn classification_headline(mode: Mode) -> &'static str {
    match mode {
        Mode::Omni | Mode::Ensemble => "acc_ensemble",
        Mode::PreOnly => "acc_pre_head",
        Mode::MetaOnly => "acc_meta_head",
        Mode::JointTraining => "acc_joint_head",
    }
}

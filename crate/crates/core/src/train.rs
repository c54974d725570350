//! Training loops: the combined tri-flow objective with its EMA teacher, and
//! the four baseline modes (pre-only, meta-only, ensemble, joint-training),
//! over the three task families.

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use omni_autodiff::{backward, ops, AdError, Tensor};

use crate::data::{Episode, MiniBatch, TrajBatch};
use crate::error::{CoreError, Result};
use crate::loss::{
    distill_reg, joint_loss, maml_adapt, meta_flow_outputs, omni_objective, rl_surrogate,
    supervised_pre_loss, BundleValues, LossBundle, MamlCfg, MetaAlg, ObjectiveCfg, ProtoDistance,
};
use crate::metrics::MetricsRow;
use crate::net::{Activation, EmaShadow, FlowId, HeadKind, NetConfig, OmniNet};
use crate::optim::{OptimKind, Optimizer};
use crate::rng::{domain, stream};
use crate::tasks::classification::{gen_class_pool, ClassPool};
use crate::tasks::navigation::{
    collect_trajectories, compute_advantages, fit_linear_baseline, sample_nav_task,
    GaussianPolicy, NavTask,
};
use crate::tasks::sinusoid::SinusoidBank;

const MAX_CONSECUTIVE_SKIPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Omni,
    PreOnly,
    MetaOnly,
    Ensemble,
    JointTraining,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Omni,
        Mode::PreOnly,
        Mode::MetaOnly,
        Mode::Ensemble,
        Mode::JointTraining,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Omni => "omni",
            Mode::PreOnly => "pre_only",
            Mode::MetaOnly => "meta_only",
            Mode::Ensemble => "ensemble",
            Mode::JointTraining => "joint_training",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                CoreError::Config(format!(
                    "unknown mode '{s}'; valid modes: omni, pre_only, meta_only, ensemble, joint_training"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    Sinusoid,
    Navigation,
    Classification,
}

impl TaskFamily {
    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::Sinusoid => "sinusoid",
            TaskFamily::Navigation => "navigation",
            TaskFamily::Classification => "classification",
        }
    }

    pub fn parse(s: &str) -> Result<TaskFamily> {
        [
            TaskFamily::Sinusoid,
            TaskFamily::Navigation,
            TaskFamily::Classification,
        ]
        .into_iter()
        .find(|f| f.name() == s)
        .ok_or_else(|| {
            CoreError::Config(format!(
                "unknown task family '{s}'; valid: sinusoid, navigation, classification"
            ))
        })
    }

    pub fn meta_alg(self) -> MetaAlg {
        match self {
            TaskFamily::Classification => MetaAlg::Proto,
            _ => MetaAlg::Maml,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SinusoidCfg {
    pub bank_tasks: usize,
    pub bank_points: usize,
    /// Optional cache file for the task bank.
    pub cache: Option<PathBuf>,
}

impl Default for SinusoidCfg {
    fn default() -> Self {
        SinusoidCfg {
            bank_tasks: crate::tasks::sinusoid::BANK_TASKS,
            bank_points: crate::tasks::sinusoid::BANK_POINTS,
            cache: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NavigationCfg {
    pub tasks_per_iter: usize,
    pub traj_per_task: usize,
    pub gamma: f64,
    pub normalize_advantages: bool,
}

impl Default for NavigationCfg {
    fn default() -> Self {
        NavigationCfg {
            tasks_per_iter: 20,
            traj_per_task: 20,
            gamma: 0.99,
            normalize_advantages: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationCfg {
    pub dim: usize,
    pub sigma_c: f64,
    pub sigma_w: f64,
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
}

impl Default for ClassificationCfg {
    fn default() -> Self {
        ClassificationCfg {
            dim: 16,
            sigma_c: 3.0,
            sigma_w: 1.0,
            train_classes: 64,
            val_classes: 16,
            test_classes: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub family: TaskFamily,
    pub seed: u64,
    pub iterations: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub outer: OptimKind,
    pub outer_lr: f64,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub first_order: bool,
    pub batch_size: usize,
    pub k_support: usize,
    pub n_query: usize,
    pub n_way: usize,
    pub hidden: Vec<usize>,
    pub branch_rank: Option<usize>,
    pub head_bias: bool,
    pub policy_logstd_init: f64,
    /// 0 disables validation snapshots.
    pub validation_cadence: usize,
    pub validation_tasks: usize,
    pub sinusoid: SinusoidCfg,
    pub navigation: NavigationCfg,
    pub classification: ClassificationCfg,
}

impl TrainConfig {
    /// Hyperparameter defaults per task family.
    pub fn defaults(family: TaskFamily) -> TrainConfig {
        let base = TrainConfig {
            mode: Mode::Omni,
            family,
            seed: 0,
            iterations: 1000,
            lambda: 3.0,
            alpha: 0.99,
            outer: OptimKind::Adam,
            outer_lr: 0.001,
            inner_lr: 0.02,
            inner_steps: 1,
            first_order: false,
            batch_size: 64,
            k_support: 5,
            n_query: 10,
            n_way: 5,
            hidden: vec![64, 64],
            branch_rank: None,
            head_bias: true,
            policy_logstd_init: 0.0,
            validation_cadence: 0,
            validation_tasks: 20,
            sinusoid: SinusoidCfg::default(),
            navigation: NavigationCfg::default(),
            classification: ClassificationCfg::default(),
        };
        match family {
            TaskFamily::Sinusoid => TrainConfig {
                iterations: 20_000,
                ..base
            },
            TaskFamily::Navigation => TrainConfig {
                iterations: 300,
                outer: OptimKind::Sgd,
                outer_lr: 0.03,
                inner_lr: 0.1,
                ..base
            },
            TaskFamily::Classification => TrainConfig {
                iterations: 3000,
                n_query: 16,
                head_bias: false,
                ..base
            },
        }
    }

    pub fn objective_cfg(&self) -> ObjectiveCfg {
        ObjectiveCfg {
            lambda: self.lambda,
            meta_alg: self.family.meta_alg(),
            maml: MamlCfg {
                inner_lr: self.inner_lr,
                inner_steps: self.inner_steps,
                first_order: self.first_order,
            },
            proto_dist: ProtoDistance::SquaredEuclidean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(CoreError::Config("lambda must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CoreError::Config("alpha must lie in [0, 1]".into()));
        }
        if self.iterations == 0 {
            return Err(CoreError::Config("iterations must be > 0".into()));
        }
        if self.k_support == 0 || self.batch_size == 0 {
            return Err(CoreError::Config(
                "k_support and batch_size must be > 0".into(),
            ));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        match self.family {
            TaskFamily::Sinusoid => 1,
            TaskFamily::Navigation => 2,
            TaskFamily::Classification => self.classification.dim,
        }
    }

    fn head_for(&self, flow: FlowId) -> HeadKind {
        match self.family {
            TaskFamily::Sinusoid => HeadKind::Linear {
                out_dim: 1,
                bias: true,
            },
            TaskFamily::Navigation => HeadKind::Policy { action_dim: 2 },
            TaskFamily::Classification => match flow {
                FlowId::Meta => HeadKind::Prototype,
                _ => HeadKind::Linear {
                    out_dim: self.classification.train_classes,
                    bias: self.head_bias,
                },
            },
        }
    }

    /// Network layout for a training role: the tri-flow model or a plain
    /// single-flow baseline acting as pre-, meta- or joint-model.
    pub fn net_config(&self, role: NetRole) -> NetConfig {
        let single_head = match role {
            NetRole::TriFlow | NetRole::PlainJoint | NetRole::PlainPre => {
                self.head_for(FlowId::Joint)
            }
            NetRole::PlainMeta => self.head_for(FlowId::Meta),
        };
        NetConfig {
            input_dim: self.input_dim(),
            hidden: self.hidden.clone(),
            activation: Activation::Tanh,
            branch_rank: self.branch_rank,
            tri_flow: role == NetRole::TriFlow,
            head_joint: if role == NetRole::TriFlow {
                self.head_for(FlowId::Joint)
            } else {
                single_head
            },
            head_pre: self.head_for(FlowId::Pre),
            head_meta: self.head_for(FlowId::Meta),
            policy_logstd_init: self.policy_logstd_init,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetRole {
    TriFlow,
    PlainPre,
    PlainMeta,
    PlainJoint,
}

/// The artifact of a training run: the trained network, plus a second member
/// for the ensemble mode (`primary` = pre-trained, `secondary` = meta-trained).
pub struct TrainedModel {
    pub mode: Mode,
    pub family: TaskFamily,
    pub primary: OmniNet,
    pub secondary: Option<OmniNet>,
}

pub struct RunResult {
    pub model: TrainedModel,
    pub rows: Vec<MetricsRow>,
}

/// Training data held for one run.
pub enum FamilyData {
    Sinusoid(SinusoidBank),
    Navigation,
    Classification { train: ClassPool },
}

pub fn load_family_data(cfg: &TrainConfig) -> Result<FamilyData> {
    match cfg.family {
        TaskFamily::Sinusoid => {
            let bank = match &cfg.sinusoid.cache {
                Some(path) if path.exists() => {
                    SinusoidBank::read_cache(path, cfg.sinusoid.bank_points)?
                }
                other => {
                    let mut rng = stream(cfg.seed, domain::BANK, 0);
                    let bank = SinusoidBank::generate(
                        &mut rng,
                        cfg.sinusoid.bank_tasks,
                        cfg.sinusoid.bank_points,
                    );
                    if let Some(path) = other {
                        bank.write_cache(path)?;
                    }
                    bank
                }
            };
            Ok(FamilyData::Sinusoid(bank))
        }
        TaskFamily::Navigation => Ok(FamilyData::Navigation),
        TaskFamily::Classification => {
            let c = &cfg.classification;
            let mut rng = stream(cfg.seed, domain::POOL, 0);
            Ok(FamilyData::Classification {
                train: gen_class_pool(&mut rng, c.train_classes, c.dim, c.sigma_c, c.sigma_w),
            })
        }
    }
}

/// The held-out class pool used by the classification evaluation protocols.
/// Test classes are a disjoint stream from the training pool.
pub fn classification_test_pool(cfg: &TrainConfig) -> ClassPool {
    let c = &cfg.classification;
    let mut rng = stream(cfg.seed, domain::POOL, 1);
    gen_class_pool(&mut rng, c.test_classes, c.dim, c.sigma_c, c.sigma_w)
}

pub fn classification_val_pool(cfg: &TrainConfig) -> ClassPool {
    let c = &cfg.classification;
    let mut rng = stream(cfg.seed, domain::POOL, 2);
    gen_class_pool(&mut rng, c.val_classes, c.dim, c.sigma_c, c.sigma_w)
}

impl FamilyData {
    fn sample_minibatch(&self, cfg: &TrainConfig, iter: usize) -> Result<MiniBatch> {
        let mut rng = stream(cfg.seed, domain::BATCH, iter as u64);
        match self {
            FamilyData::Sinusoid(bank) => Ok(bank.sample_minibatch(&mut rng, cfg.batch_size)),
            FamilyData::Classification { train } => {
                Ok(train.sample_minibatch(&mut rng, cfg.batch_size))
            }
            FamilyData::Navigation => Err(CoreError::Config(
                "navigation uses trajectory batches".into(),
            )),
        }
    }

    fn sample_episode(&self, cfg: &TrainConfig, iter: usize) -> Result<Episode> {
        let mut rng = stream(cfg.seed, domain::EPISODE, iter as u64);
        match self {
            FamilyData::Sinusoid(bank) => {
                Ok(bank.sample_episode(&mut rng, cfg.k_support, cfg.n_query))
            }
            FamilyData::Classification { train } => {
                train.sample_episode(&mut rng, cfg.n_way, cfg.k_support, cfg.n_query)
            }
            FamilyData::Navigation => Err(CoreError::Config(
                "navigation episodes are collected, not sampled".into(),
            )),
        }
    }
}

fn is_numeric_failure(err: &CoreError) -> bool {
    matches!(
        err,
        CoreError::Numeric(_)
            | CoreError::Autodiff(AdError::NonFinite { .. })
            | CoreError::Autodiff(AdError::Domain { .. })
    )
}

/// Train a model under `cfg`. Ensemble mode trains its two members under the
/// same seed; every other mode trains a single network.
pub fn train(cfg: &TrainConfig) -> Result<RunResult> {
    cfg.validate()?;
    match cfg.mode {
        Mode::Ensemble => {
            let pre_cfg = TrainConfig {
                mode: Mode::PreOnly,
                ..cfg.clone()
            };
            let meta_cfg = TrainConfig {
                mode: Mode::MetaOnly,
                ..cfg.clone()
            };
            let pre = train(&pre_cfg)?;
            let meta = train(&meta_cfg)?;
            let mut rows = pre.rows;
            rows.extend(meta.rows);
            Ok(RunResult {
                model: TrainedModel {
                    mode: Mode::Ensemble,
                    family: cfg.family,
                    primary: pre.model.primary,
                    secondary: Some(meta.model.primary),
                },
                rows,
            })
        }
        _ => {
            let role = match cfg.mode {
                Mode::Omni => NetRole::TriFlow,
                Mode::PreOnly => NetRole::PlainPre,
                Mode::MetaOnly => NetRole::PlainMeta,
                Mode::JointTraining => NetRole::PlainJoint,
                Mode::Ensemble => unreachable!(),
            };
            let mut rng = stream(cfg.seed, domain::INIT, 0);
            let net = OmniNet::new(cfg.net_config(role), &mut rng)?;
            let (net, rows) = train_single(cfg, net)?;
            Ok(RunResult {
                model: TrainedModel {
                    mode: cfg.mode,
                    family: cfg.family,
                    primary: net,
                    secondary: None,
                },
                rows,
            })
        }
    }
}

/// One optimizer step on a composed loss; returns the logged values.
fn apply_step(
    net: &mut OmniNet,
    opt: &mut Optimizer,
    loss: &Tensor,
) -> Result<()> {
    let grads = backward(loss, net.params(), false)?;
    let next = opt.step(net.params(), &grads)?;
    net.set_params(next)
}

fn train_single(cfg: &TrainConfig, mut net: OmniNet) -> Result<(OmniNet, Vec<MetricsRow>)> {
    let data = load_family_data(cfg)?;
    let obj = cfg.objective_cfg();
    let mut opt = Optimizer::new(cfg.outer, cfg.outer_lr, net.params());
    let mut shadow = if cfg.mode == Mode::Omni {
        Some(EmaShadow::from_params(net.params(), cfg.alpha)?)
    } else {
        None
    };

    let mut rows = Vec::with_capacity(cfg.iterations);
    let started = Instant::now();
    let mut consecutive_skips = 0usize;
    let mut best: Option<(f64, Vec<Tensor>)> = None;

    for iter in 0..cfg.iterations {
        let outcome = run_iteration(cfg, &data, &obj, &mut net, &mut opt, shadow.as_mut(), iter);
        match outcome {
            Ok(values) => {
                consecutive_skips = 0;
                rows.push(MetricsRow {
                    iteration: iter,
                    values,
                    wall_time_s: started.elapsed().as_secs_f64(),
                });
            }
            Err(err) if is_numeric_failure(&err) => {
                consecutive_skips += 1;
                eprintln!(
                    "iteration {iter} skipped after numeric failure: {err} ({consecutive_skips} consecutive)"
                );
                if consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
                    return Err(CoreError::Numeric(format!(
                        "aborting after {MAX_CONSECUTIVE_SKIPS} consecutive numeric failures at iteration {iter}"
                    )));
                }
            }
            Err(err) => return Err(err),
        }

        if cfg.validation_cadence > 0 && (iter + 1) % cfg.validation_cadence == 0 {
            let score = validation_score(cfg, &data, &obj, &net, iter)?;
            if best.as_ref().map_or(true, |(b, _)| score < *b) {
                best = Some((score, net.params_vec()));
            }
        }
    }

    if let Some((_, params)) = best {
        net.set_params(params)?;
    }
    Ok((net, rows))
}

fn run_iteration(
    cfg: &TrainConfig,
    data: &FamilyData,
    obj: &ObjectiveCfg,
    net: &mut OmniNet,
    opt: &mut Optimizer,
    shadow: Option<&mut EmaShadow>,
    iter: usize,
) -> Result<BundleValues> {
    match cfg.family {
        TaskFamily::Navigation => run_rl_iteration(cfg, obj, net, opt, shadow, iter),
        _ => run_supervised_iteration(cfg, data, obj, net, opt, shadow, iter),
    }
}

fn run_supervised_iteration(
    cfg: &TrainConfig,
    data: &FamilyData,
    obj: &ObjectiveCfg,
    net: &mut OmniNet,
    opt: &mut Optimizer,
    shadow: Option<&mut EmaShadow>,
    iter: usize,
) -> Result<BundleValues> {
    match cfg.mode {
        Mode::Omni => {
            let batch = data.sample_minibatch(cfg, iter)?;
            let episode = data.sample_episode(cfg, iter)?;
            let shadow = shadow.expect("omni mode keeps a shadow");
            let bundle = omni_objective(net, shadow, &batch, &episode, obj)?;
            let values = bundle.values();
            apply_step(net, opt, &bundle.o_total)?;
            shadow.update(net.params())?;
            Ok(values)
        }
        Mode::PreOnly => {
            let batch = data.sample_minibatch(cfg, iter)?;
            let out = net.head_output(net.params(), &batch.x, FlowId::Joint)?;
            let loss = supervised_pre_loss(&out, &batch.y)?;
            let v = loss.item();
            apply_step(net, opt, &loss)?;
            Ok(BundleValues {
                l_pre: v,
                o_total: v,
                ..zero_values()
            })
        }
        Mode::MetaOnly => {
            let episode = data.sample_episode(cfg, iter)?;
            let (loss, _) = meta_flow_outputs(net, net.params(), &episode, FlowId::Joint, obj, true)?;
            let v = loss.item();
            apply_step(net, opt, &loss)?;
            Ok(BundleValues {
                l_meta: v,
                o_total: v,
                ..zero_values()
            })
        }
        Mode::JointTraining => {
            let batch = data.sample_minibatch(cfg, iter)?;
            let episode = data.sample_episode(cfg, iter)?;
            let loss = joint_loss(net, net.params(), &batch, &episode, obj)?;
            let v = loss.item();
            apply_step(net, opt, &loss)?;
            Ok(BundleValues {
                l_joint: v,
                o_total: v,
                ..zero_values()
            })
        }
        Mode::Ensemble => unreachable!("ensemble trains through its members"),
    }
}

fn zero_values() -> BundleValues {
    BundleValues {
        l_joint: 0.0,
        l_pre: 0.0,
        r_pre: 0.0,
        j_pre: 0.0,
        l_meta: 0.0,
        r_meta: 0.0,
        j_meta: 0.0,
        o_total: 0.0,
    }
}

// ---------------------------------------------------------------------------
// Reinforcement learning iterations
// ---------------------------------------------------------------------------

// Rollout stream indices: one sub-stream per (iteration, collection group,
// task, phase).
fn rollout_stream(
    cfg: &TrainConfig,
    iter: usize,
    group: u64,
    task: u64,
    phase: u64,
) -> rand_chacha::ChaCha8Rng {
    let idx = (iter as u64) * 4096 + group * 512 + task * 4 + phase;
    stream(cfg.seed, domain::ROLLOUT, idx)
}

/// Collect one task's trajectory set under a flow's policy, with fitted
/// baseline and centered advantages.
pub fn collect_task_batch(
    net: &OmniNet,
    params: &[Tensor],
    flow: FlowId,
    task: &NavTask,
    n_traj: usize,
    gamma: f64,
    normalize: bool,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> TrajBatch {
    let logstd = net
        .logstd_plain(params, flow)
        .expect("navigation nets carry policy heads");
    let policy = GaussianPolicy {
        mean: Box::new(|s: &[f64; 2]| net.head_output_plain(params, &s[..], flow)),
        logstd: [logstd[0], logstd[1]],
    };
    let mut trajs = collect_trajectories(&policy, task, n_traj, gamma, rng);
    let coef = fit_linear_baseline(&trajs);
    compute_advantages(&mut trajs, &coef, normalize);
    TrajBatch::new(trajs)
}

fn sample_iter_tasks(cfg: &TrainConfig, iter: usize, group: u64) -> Vec<NavTask> {
    let mut rng = stream(cfg.seed, domain::EPISODE, (iter as u64) * 64 + group);
    (0..cfg.navigation.tasks_per_iter)
        .map(|_| sample_nav_task(&mut rng))
        .collect()
}

// Per-task objective values and the gradient of the task objective with
// respect to the live parameters, as plain data.
struct TaskGrad {
    loss: f64,
    distill: f64,
    grads: Vec<Vec<f64>>,
}

fn grads_to_data(grads: &[Tensor]) -> Vec<Vec<f64>> {
    grads.iter().map(|g| g.data().to_vec()).collect()
}

struct GradAccum {
    data: Vec<Vec<f64>>,
}

impl GradAccum {
    fn zeros(params: &[Tensor]) -> GradAccum {
        GradAccum {
            data: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    fn add(&mut self, grads: &[Vec<f64>], weight: f64) {
        for (acc, g) in self.data.iter_mut().zip(grads) {
            for (a, &v) in acc.iter_mut().zip(g) {
                *a += weight * v;
            }
        }
    }

    fn into_tensors(self, params: &[Tensor]) -> Vec<Tensor> {
        self.data
            .into_iter()
            .zip(params)
            .map(|(d, p)| Tensor::constant(d, p.shape().to_vec()).expect("gradient shapes"))
            .collect()
    }
}

/// REINFORCE surrogate of one task under `flow`, plus the policy-mean
/// distillation residual against the teacher when one is given. The returned
/// gradient is of `surrogate + lambda * distill`.
fn rl_pre_task(
    cfg: &TrainConfig,
    net: &OmniNet,
    params: &[Tensor],
    teacher: Option<&[Tensor]>,
    flow: FlowId,
    lambda: f64,
    task: &NavTask,
    iter: usize,
    group: u64,
    ti: usize,
) -> Result<TaskGrad> {
    let nav = &cfg.navigation;
    let mut rng = rollout_stream(cfg, iter, group, ti as u64, 0);
    let batch = collect_task_batch(
        net,
        params,
        flow,
        task,
        nav.traj_per_task,
        nav.gamma,
        nav.normalize_advantages,
        &mut rng,
    );
    let (states, actions, adv) = batch.to_matrices();
    let means = net.head_output(params, &states, flow)?;
    let logstd = net
        .head_logstd(params, flow)
        .ok_or_else(|| CoreError::Config("navigation nets carry policy heads".into()))?;
    let logp = crate::loss::gaussian_log_prob(&means, &logstd, &actions)?;
    let surr = crate::loss::reinforce_objective(&logp, &adv)?;
    let (objective, distill) = match teacher {
        Some(teacher) => {
            let teacher_out = net.head_output(teacher, &states, flow)?;
            let r = distill_reg(&means, &teacher_out)?;
            let obj = ops::add(&surr, &ops::scale_const(&r, lambda)?)?;
            (obj, r.item())
        }
        None => (surr.clone(), 0.0),
    };
    let grads = backward(&objective, params, false)?;
    Ok(TaskGrad {
        loss: surr.item(),
        distill,
        grads: grads_to_data(&grads),
    })
}

/// One task of inner-loop meta-training under `flow`: adapt on support
/// rollouts, collect query rollouts under the adapted policy, evaluate the
/// outer surrogate (plus teacher distillation of the adapted policy means).
fn rl_meta_task(
    cfg: &TrainConfig,
    net: &OmniNet,
    params: &[Tensor],
    teacher: Option<&[Tensor]>,
    flow: FlowId,
    lambda: f64,
    task: &NavTask,
    iter: usize,
    group: u64,
    ti: usize,
) -> Result<TaskGrad> {
    let nav = &cfg.navigation;
    let maml = MamlCfg {
        inner_lr: cfg.inner_lr,
        inner_steps: cfg.inner_steps,
        first_order: cfg.first_order,
    };
    let mask = net.path_mask(flow);
    let mut srng = rollout_stream(cfg, iter, group, ti as u64, 0);
    let support = collect_task_batch(
        net,
        params,
        flow,
        task,
        nav.traj_per_task,
        nav.gamma,
        nav.normalize_advantages,
        &mut srng,
    );
    let adapted = maml_adapt(
        params,
        &mask,
        |p: &[Tensor]| rl_surrogate(net, p, flow, &support),
        &maml,
        true,
    )?;
    let mut qrng = rollout_stream(cfg, iter, group, ti as u64, 1);
    let query = collect_task_batch(
        net,
        &adapted,
        flow,
        task,
        nav.traj_per_task,
        nav.gamma,
        nav.normalize_advantages,
        &mut qrng,
    );
    let (q_states, q_actions, q_adv) = query.to_matrices();
    let q_means = net.head_output(&adapted, &q_states, flow)?;
    let q_logstd = net
        .head_logstd(&adapted, flow)
        .ok_or_else(|| CoreError::Config("navigation nets carry policy heads".into()))?;
    let q_logp = crate::loss::gaussian_log_prob(&q_means, &q_logstd, &q_actions)?;
    let outer = crate::loss::reinforce_objective(&q_logp, &q_adv)?;
    let (objective, distill) = match teacher {
        Some(teacher) => {
            let leaves: Vec<Tensor> = teacher.iter().map(Tensor::to_leaf).collect();
            let teacher_adapted = maml_adapt(
                &leaves,
                &mask,
                |p: &[Tensor]| rl_surrogate(net, p, flow, &support),
                &MamlCfg {
                    first_order: false,
                    ..maml
                },
                false,
            )?;
            let teacher_mean = net.head_output(&teacher_adapted, &q_states, flow)?.detach();
            let r = distill_reg(&q_means, &teacher_mean)?;
            let obj = ops::add(&outer, &ops::scale_const(&r, lambda)?)?;
            (obj, r.item())
        }
        None => (outer.clone(), 0.0),
    };
    let grads = backward(&objective, params, false)?;
    Ok(TaskGrad {
        loss: outer.item(),
        distill,
        grads: grads_to_data(&grads),
    })
}

#[derive(Clone, Copy)]
enum RlTermKind {
    Pre,
    Meta,
}

struct RlTermSpec {
    kind: RlTermKind,
    flow: FlowId,
    with_teacher: bool,
    group: u64,
}

// Mean loss, mean distill residual and accumulated gradients of one term
// estimated over the iteration's task batch.
struct RlTerm {
    loss: f64,
    distill: f64,
}

/// Evaluate several RL objective terms, each averaged over a fresh task
/// batch, in parallel over (term, task) units with an ordered reduction.
fn rl_terms(
    cfg: &TrainConfig,
    net: &OmniNet,
    teacher: Option<&[Tensor]>,
    specs: &[RlTermSpec],
    iter: usize,
    accum: &mut GradAccum,
) -> Result<Vec<RlTerm>> {
    let params = net.params();
    let n_tasks = cfg.navigation.tasks_per_iter;
    let task_sets: Vec<Vec<NavTask>> = specs
        .iter()
        .map(|spec| sample_iter_tasks(cfg, iter, spec.group))
        .collect();

    let units: Vec<(usize, usize)> = (0..specs.len())
        .flat_map(|si| (0..n_tasks).map(move |ti| (si, ti)))
        .collect();
    let results: Vec<Result<TaskGrad>> = crate::par::run_tasks(units.len(), |u| {
        let (si, ti) = units[u];
        let spec = &specs[si];
        let task = &task_sets[si][ti];
        let teacher = if spec.with_teacher { teacher } else { None };
        match spec.kind {
            RlTermKind::Pre => rl_pre_task(
                cfg, net, params, teacher, spec.flow, cfg.lambda, task, iter, spec.group, ti,
            ),
            RlTermKind::Meta => rl_meta_task(
                cfg, net, params, teacher, spec.flow, cfg.lambda, task, iter, spec.group, ti,
            ),
        }
    });

    let weight = 1.0 / n_tasks as f64;
    let mut terms: Vec<RlTerm> = specs
        .iter()
        .map(|_| RlTerm {
            loss: 0.0,
            distill: 0.0,
        })
        .collect();
    for ((si, _ti), result) in units.into_iter().zip(results) {
        let tg = result?;
        terms[si].loss += weight * tg.loss;
        terms[si].distill += weight * tg.distill;
        accum.add(&tg.grads, weight);
    }
    Ok(terms)
}

fn rl_step(
    net: &mut OmniNet,
    opt: &mut Optimizer,
    accum: GradAccum,
) -> Result<()> {
    let grads = accum.into_tensors(net.params());
    let next = opt.step(net.params(), &grads)?;
    net.set_params(next)
}

fn run_rl_iteration(
    cfg: &TrainConfig,
    obj: &ObjectiveCfg,
    net: &mut OmniNet,
    opt: &mut Optimizer,
    shadow: Option<&mut EmaShadow>,
    iter: usize,
) -> Result<BundleValues> {
    match cfg.mode {
        Mode::Omni => {
            let shadow = shadow.expect("omni mode keeps a shadow");
            let teacher = shadow.values().to_vec();
            let specs = [
                RlTermSpec {
                    kind: RlTermKind::Pre,
                    flow: FlowId::Pre,
                    with_teacher: true,
                    group: 0,
                },
                RlTermSpec {
                    kind: RlTermKind::Pre,
                    flow: FlowId::Joint,
                    with_teacher: false,
                    group: 1,
                },
                RlTermSpec {
                    kind: RlTermKind::Meta,
                    flow: FlowId::Meta,
                    with_teacher: true,
                    group: 2,
                },
                RlTermSpec {
                    kind: RlTermKind::Meta,
                    flow: FlowId::Joint,
                    with_teacher: false,
                    group: 3,
                },
            ];
            let mut accum = GradAccum::zeros(net.params());
            let terms = rl_terms(cfg, net, Some(&teacher), &specs, iter, &mut accum)?;
            let bundle = LossBundle::compose(
                Tensor::scalar(terms[1].loss + terms[3].loss),
                Tensor::scalar(terms[0].loss),
                Tensor::scalar(terms[0].distill),
                Tensor::scalar(terms[2].loss),
                Tensor::scalar(terms[2].distill),
                obj.lambda,
            )?;
            let values = bundle.values();
            rl_step(net, opt, accum)?;
            shadow.update(net.params())?;
            Ok(values)
        }
        Mode::PreOnly | Mode::MetaOnly | Mode::JointTraining => {
            let mut specs = Vec::new();
            if cfg.mode != Mode::MetaOnly {
                specs.push(RlTermSpec {
                    kind: RlTermKind::Pre,
                    flow: FlowId::Joint,
                    with_teacher: false,
                    group: 0,
                });
            }
            if cfg.mode != Mode::PreOnly {
                specs.push(RlTermSpec {
                    kind: RlTermKind::Meta,
                    flow: FlowId::Joint,
                    with_teacher: false,
                    group: 2,
                });
            }
            let mut accum = GradAccum::zeros(net.params());
            let terms = rl_terms(cfg, net, None, &specs, iter, &mut accum)?;
            let total: f64 = terms.iter().map(|t| t.loss).sum();
            let values = match cfg.mode {
                Mode::PreOnly => BundleValues {
                    l_pre: terms[0].loss,
                    o_total: total,
                    ..zero_values()
                },
                Mode::MetaOnly => BundleValues {
                    l_meta: terms[0].loss,
                    o_total: total,
                    ..zero_values()
                },
                _ => BundleValues {
                    l_joint: total,
                    o_total: total,
                    ..zero_values()
                },
            };
            rl_step(net, opt, accum)?;
            Ok(values)
        }
        Mode::Ensemble => unreachable!("ensemble trains through its members"),
    }
}

// ---------------------------------------------------------------------------
// Validation snapshots
// ---------------------------------------------------------------------------

/// Held-out score (lower is better) for best-so-far retention. Supervised
/// families only; navigation runs keep their final parameters.
fn validation_score(
    cfg: &TrainConfig,
    data: &FamilyData,
    obj: &ObjectiveCfg,
    net: &OmniNet,
    iter: usize,
) -> Result<f64> {
    match cfg.family {
        TaskFamily::Navigation => Ok(f64::INFINITY),
        TaskFamily::Sinusoid => {
            let _ = data;
            let mut total = 0.0;
            for v in 0..cfg.validation_tasks {
                let mut rng = stream(
                    cfg.seed,
                    domain::EVAL_TASKS,
                    0xF000_0000 + (iter as u64) * 1024 + v as u64,
                );
                let ep = crate::tasks::sinusoid::sample_sinusoid_episode(
                    &mut rng,
                    cfg.k_support,
                    cfg.n_query,
                );
                let flow = validation_flow(cfg.mode);
                let (loss, _) = meta_flow_outputs(net, net.params(), &ep, flow, obj, false)?;
                total += loss.item();
            }
            Ok(total / cfg.validation_tasks as f64)
        }
        TaskFamily::Classification => {
            let pool = classification_val_pool(cfg);
            let mut total = 0.0;
            for v in 0..cfg.validation_tasks {
                let mut rng = stream(
                    cfg.seed,
                    domain::EVAL_TASKS,
                    0xF000_0000 + (iter as u64) * 1024 + v as u64,
                );
                let ep = pool.sample_episode(&mut rng, cfg.n_way, cfg.k_support, cfg.n_query)?;
                let flow = validation_flow(cfg.mode);
                let (loss, _) = meta_flow_outputs(net, net.params(), &ep, flow, obj, false)?;
                total += loss.item();
            }
            Ok(total / cfg.validation_tasks as f64)
        }
    }
}

fn validation_flow(mode: Mode) -> FlowId {
    match mode {
        Mode::Omni => FlowId::Meta,
        _ => FlowId::Joint,
    }
}

//! Loss functions: the three-part combined objective with EMA
//! self-distillation, and the per-paradigm losses it is built from
//! (cross-entropy, squared error, REINFORCE surrogate, inner-loop adaptation,
//! prototype classification).

use serde::{Deserialize, Serialize};

use omni_autodiff::ops::{self, broadcast_rows, pick_per_row, row_sums};
use omni_autodiff::{backward, Tensor};

use crate::data::{Episode, MiniBatch, Targets, TrajBatch};
use crate::error::{CoreError, Result};
use crate::net::{EmaShadow, FlowId, OmniNet};

/// All scalar terms of one training iteration. The composition identities
/// `j_pre = l_pre + lambda * r_pre`, `j_meta = l_meta + lambda * r_meta` and
/// `o_total = j_pre + j_meta + l_joint` hold by construction.
pub struct LossBundle {
    pub l_joint: Tensor,
    pub l_pre: Tensor,
    pub r_pre: Tensor,
    pub j_pre: Tensor,
    pub l_meta: Tensor,
    pub r_meta: Tensor,
    pub j_meta: Tensor,
    pub o_total: Tensor,
    pub lambda: f64,
}

/// Plain values of a bundle for logging.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BundleValues {
    pub l_joint: f64,
    pub l_pre: f64,
    pub r_pre: f64,
    pub j_pre: f64,
    pub l_meta: f64,
    pub r_meta: f64,
    pub j_meta: f64,
    pub o_total: f64,
}

impl LossBundle {
    pub fn compose(
        l_joint: Tensor,
        l_pre: Tensor,
        r_pre: Tensor,
        l_meta: Tensor,
        r_meta: Tensor,
        lambda: f64,
    ) -> Result<LossBundle> {
        if lambda < 0.0 {
            return Err(CoreError::Config(format!("lambda {lambda} must be >= 0")));
        }
        let j_pre = ops::add(&l_pre, &ops::scale_const(&r_pre, lambda)?)?;
        let j_meta = ops::add(&l_meta, &ops::scale_const(&r_meta, lambda)?)?;
        let o_total = ops::add(&ops::add(&j_pre, &j_meta)?, &l_joint)?;
        Ok(LossBundle {
            l_joint,
            l_pre,
            r_pre,
            j_pre,
            l_meta,
            r_meta,
            j_meta,
            o_total,
            lambda,
        })
    }

    pub fn values(&self) -> BundleValues {
        BundleValues {
            l_joint: self.l_joint.item(),
            l_pre: self.l_pre.item(),
            r_pre: self.r_pre.item(),
            j_pre: self.j_pre.item(),
            l_meta: self.l_meta.item(),
            r_meta: self.r_meta.item(),
            j_meta: self.j_meta.item(),
            o_total: self.o_total.item(),
        }
    }

    /// Largest deviation from the three composition identities, recomputed in
    /// scalar arithmetic.
    pub fn identities_max_deviation(&self) -> f64 {
        let v = self.values();
        let d1 = (v.j_pre - (v.l_pre + self.lambda * v.r_pre)).abs();
        let d2 = (v.j_meta - (v.l_meta + self.lambda * v.r_meta)).abs();
        let d3 = (v.o_total - (v.j_pre + v.j_meta + v.l_joint)).abs();
        d1.max(d2).max(d3)
    }
}

// ---------------------------------------------------------------------------
// Per-paradigm losses
// ---------------------------------------------------------------------------

/// Mean cross-entropy of `[batch, K]` logits against class indices.
pub fn ce_pre_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let lsm = ops::log_softmax(logits)?;
    let picked = pick_per_row(&lsm, labels)?;
    Ok(ops::negate(&ops::mean(&picked)?)?)
}

/// Mean squared error between predictions and targets of equal shape.
pub fn l2_pre_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok(ops::mean(&ops::square(&ops::sub(pred, target)?)?)?)
}

/// Dispatch on the target kind: cross-entropy for classes, squared error for
/// real targets.
pub fn supervised_pre_loss(output: &Tensor, y: &Targets) -> Result<Tensor> {
    match y {
        Targets::Classes(labels) => ce_pre_loss(output, labels),
        Targets::Values(values) => l2_pre_loss(output, values),
    }
}

/// Log-densities of a diagonal Gaussian policy: `means` is `[T, d]`, `logstd`
/// is `[1, d]`, `actions` is a `[T, d]` constant. Returns `[T, 1]`.
pub fn gaussian_log_prob(means: &Tensor, logstd: &Tensor, actions: &Tensor) -> Result<Tensor> {
    let t = means.shape()[0];
    let bl = broadcast_rows(logstd, t)?;
    let diff2 = ops::square(&ops::sub(actions, means)?)?;
    let inv_two_var = ops::scale_const(&ops::exp(&ops::scale_const(&bl, -2.0)?)?, 0.5)?;
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let nll = ops::add(
        &ops::add(&bl, &Tensor::scalar(half_ln_2pi))?,
        &ops::mul(&diff2, &inv_two_var)?,
    )?;
    Ok(ops::negate(&row_sums(&nll)?)?)
}

/// REINFORCE surrogate: minus the mean over timesteps of `logp * advantage`.
/// Its gradient is the Monte Carlo policy-gradient estimate; advantages must
/// be detached.
pub fn reinforce_objective(log_probs: &Tensor, advantages: &Tensor) -> Result<Tensor> {
    if log_probs.numel() == 0 {
        return Err(CoreError::Data("empty trajectory set".into()));
    }
    if advantages.requires_grad() {
        return Err(CoreError::Data(
            "advantages must be detached from the graph".into(),
        ));
    }
    if log_probs.shape() != advantages.shape() {
        return Err(CoreError::Data(format!(
            "log-probs shape {:?} vs advantages shape {:?}",
            log_probs.shape(),
            advantages.shape()
        )));
    }
    Ok(ops::negate(&ops::mean(&ops::mul(log_probs, advantages)?)?)?)
}

/// The REINFORCE surrogate of one flow's policy on a trajectory set.
pub fn rl_surrogate(
    net: &OmniNet,
    params: &[Tensor],
    flow: FlowId,
    batch: &TrajBatch,
) -> Result<Tensor> {
    if batch.total_steps() == 0 {
        return Err(CoreError::Data("empty trajectory set".into()));
    }
    let (states, actions, adv) = batch.to_matrices();
    let means = net.head_output(params, &states, flow)?;
    let logstd = net
        .head_logstd(params, flow)
        .ok_or_else(|| CoreError::Config("flow head is not a policy".into()))?;
    let logp = gaussian_log_prob(&means, &logstd, &actions)?;
    reinforce_objective(&logp, &adv)
}

/// Mean squared difference between student and teacher head outputs. The
/// teacher side is detached, so gradient reaches only the student.
pub fn distill_reg(student: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    if student.shape() != teacher.shape() {
        return Err(CoreError::Data(format!(
            "student shape {:?} vs teacher shape {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    l2_pre_loss(student, &teacher.detach())
}

// ---------------------------------------------------------------------------
// Inner-loop adaptation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MamlCfg {
    pub inner_lr: f64,
    pub inner_steps: usize,
    /// Drop second-order terms: inner gradients are detached before the
    /// update, leaving only the identity path from the initial parameters.
    pub first_order: bool,
}

impl Default for MamlCfg {
    fn default() -> Self {
        MamlCfg {
            inner_lr: 0.02,
            inner_steps: 1,
            first_order: false,
        }
    }
}

/// Gradient-descent adaptation of the masked parameters on a support loss:
/// `theta' = theta - inner_lr * grad`, repeated `inner_steps` times.
///
/// With `create_graph` the adapted parameters stay differentiable with
/// respect to the originals (including second-order terms unless
/// `first_order` is set). Without it each step is promoted to fresh leaves,
/// which is the plain fine-tuning path used at test time.
pub fn maml_adapt<F>(
    params: &[Tensor],
    mask: &[bool],
    support_loss: F,
    cfg: &MamlCfg,
    create_graph: bool,
) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let mut current: Vec<Tensor> = params.to_vec();
    for _ in 0..cfg.inner_steps {
        let loss = support_loss(&current)?;
        let wrt: Vec<Tensor> = current
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(t, _)| t.clone())
            .collect();
        let second_order = create_graph && !cfg.first_order;
        let grads = backward(&loss, &wrt, second_order)?;
        let mut gi = 0;
        for (i, &m) in mask.iter().enumerate() {
            if !m {
                continue;
            }
            let step = ops::scale_const(&grads[gi], cfg.inner_lr)?;
            let updated = ops::sub(&current[i], &step)?;
            current[i] = if create_graph {
                updated
            } else {
                updated.to_leaf()
            };
            gi += 1;
        }
    }
    Ok(current)
}

/// Query loss evaluated under adapted parameters, differentiable back to the
/// original parameters.
pub fn maml_meta_loss<FS, FQ>(
    params: &[Tensor],
    mask: &[bool],
    support_loss: FS,
    query_loss: FQ,
    cfg: &MamlCfg,
) -> Result<Tensor>
where
    FS: Fn(&[Tensor]) -> Result<Tensor>,
    FQ: Fn(&[Tensor]) -> Result<Tensor>,
{
    let adapted = maml_adapt(params, mask, support_loss, cfg, true)?;
    query_loss(&adapted)
}

// ---------------------------------------------------------------------------
// Prototype classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtoDistance {
    SquaredEuclidean,
    Euclidean,
}

impl Default for ProtoDistance {
    fn default() -> Self {
        ProtoDistance::SquaredEuclidean
    }
}

/// Per-class means of support embeddings, as an `[n_way, d]` matrix.
pub fn proto_prototypes(
    support_emb: &Tensor,
    labels: &[usize],
    n_way: usize,
) -> Result<Tensor> {
    if support_emb.shape().len() != 2 || support_emb.shape()[0] != labels.len() {
        return Err(CoreError::Data(format!(
            "support embeddings {:?} misaligned with {} labels",
            support_emb.shape(),
            labels.len()
        )));
    }
    let mut rows = Vec::with_capacity(n_way);
    for k in 0..n_way {
        let members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == k)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            return Err(CoreError::Data(format!("class {k} has no support points")));
        }
        let sel = ops::index_select(support_emb, &members)?;
        rows.push(ops::col_means(&sel)?);
    }
    Ok(ops::concat_rows(&rows)?)
}

/// Classification logits `-d(query, prototype_k)` for every query row.
pub fn proto_logits(
    query_emb: &Tensor,
    prototypes: &Tensor,
    dist: ProtoDistance,
) -> Result<Tensor> {
    let m = query_emb.shape()[0];
    let n_way = prototypes.shape()[0];
    if query_emb.shape()[1] != prototypes.shape()[1] {
        return Err(CoreError::Data(format!(
            "query dim {:?} vs prototype dim {:?}",
            query_emb.shape(),
            prototypes.shape()
        )));
    }
    let mut cols = Vec::with_capacity(n_way);
    for k in 0..n_way {
        let ck = ops::index_select(prototypes, &[k])?;
        let diff = ops::sub(query_emb, &broadcast_rows(&ck, m)?)?;
        let mut d = row_sums(&ops::square(&diff)?)?;
        if dist == ProtoDistance::Euclidean {
            // keep the gradient defined when a query sits on its prototype
            d = ops::sqrt(&ops::add(&d, &Tensor::scalar(1e-12))?)?;
        }
        cols.push(ops::transpose(&d)?);
    }
    let stacked = ops::concat_rows(&cols)?; // [n_way, m]
    Ok(ops::negate(&ops::transpose(&stacked)?)?)
}

/// Cross-entropy over distances to prototypes, averaged over the queries.
pub fn proto_loss(
    query_emb: &Tensor,
    prototypes: &Tensor,
    labels: &[usize],
    dist: ProtoDistance,
) -> Result<Tensor> {
    let logits = proto_logits(query_emb, prototypes, dist)?;
    ce_pre_loss(&logits, labels)
}

// ---------------------------------------------------------------------------
// Flow-level objectives for the supervised families
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetaAlg {
    Maml,
    Proto,
}

#[derive(Debug, Clone)]
pub struct ObjectiveCfg {
    pub lambda: f64,
    pub meta_alg: MetaAlg,
    pub maml: MamlCfg,
    pub proto_dist: ProtoDistance,
}

fn classes(y: &Targets) -> Result<&[usize]> {
    match y {
        Targets::Classes(c) => Ok(c),
        Targets::Values(_) => Err(CoreError::Data(
            "expected class labels for this loss".into(),
        )),
    }
}

/// Meta loss of one flow on an episode, together with the raw conditioned
/// head outputs on the query set (the distillation surface).
pub fn meta_flow_outputs(
    net: &OmniNet,
    params: &[Tensor],
    episode: &Episode,
    flow: FlowId,
    cfg: &ObjectiveCfg,
    create_graph: bool,
) -> Result<(Tensor, Tensor)> {
    match cfg.meta_alg {
        MetaAlg::Proto => {
            let emb_s = net.features(params, &episode.support_x, flow)?;
            let protos = proto_prototypes(&emb_s, classes(&episode.support_y)?, episode.n_way)?;
            let emb_q = net.features(params, &episode.query_x, flow)?;
            let logits = proto_logits(&emb_q, &protos, cfg.proto_dist)?;
            let loss = ce_pre_loss(&logits, classes(&episode.query_y)?)?;
            Ok((loss, logits))
        }
        MetaAlg::Maml => {
            let mask = net.path_mask(flow);
            let support_loss = |p: &[Tensor]| -> Result<Tensor> {
                let out = net.head_output(p, &episode.support_x, flow)?;
                supervised_pre_loss(&out, &episode.support_y)
            };
            let adapted = maml_adapt(params, &mask, support_loss, &cfg.maml, create_graph)?;
            let q_out = net.head_output(&adapted, &episode.query_x, flow)?;
            let loss = supervised_pre_loss(&q_out, &episode.query_y)?;
            Ok((loss, q_out))
        }
    }
}

/// The joint-flow loss: the pre-training term on the mini-batch plus the
/// meta-training term on the episode, both through the joint flow and head.
pub fn joint_loss(
    net: &OmniNet,
    params: &[Tensor],
    batch: &MiniBatch,
    episode: &Episode,
    cfg: &ObjectiveCfg,
) -> Result<Tensor> {
    let out = net.head_output(params, &batch.x, FlowId::Joint)?;
    let pre_term = supervised_pre_loss(&out, &batch.y)?;
    let (meta_term, _) = meta_flow_outputs(net, params, episode, FlowId::Joint, cfg, true)?;
    Ok(ops::add(&pre_term, &meta_term)?)
}

/// The full combined objective for the supervised task families. One backward
/// of `o_total` reaches the chunk from all three terms, each branch from its
/// own term only, and the heads.
pub fn omni_objective(
    net: &OmniNet,
    shadow: &EmaShadow,
    batch: &MiniBatch,
    episode: &Episode,
    cfg: &ObjectiveCfg,
) -> Result<LossBundle> {
    let params = net.params();
    let teacher = shadow.values();

    let pre_out = net.head_output(params, &batch.x, FlowId::Pre)?;
    let l_pre = supervised_pre_loss(&pre_out, &batch.y)?;
    let teacher_pre_out = net.head_output(teacher, &batch.x, FlowId::Pre)?;
    let r_pre = distill_reg(&pre_out, &teacher_pre_out)?;

    let (l_meta, student_meta_out) =
        meta_flow_outputs(net, params, episode, FlowId::Meta, cfg, true)?;
    let teacher_meta_out = teacher_meta_outputs(net, teacher, episode, FlowId::Meta, cfg)?;
    let r_meta = distill_reg(&student_meta_out, &teacher_meta_out)?;

    let l_joint = joint_loss(net, params, batch, episode, cfg)?;

    LossBundle::compose(l_joint, l_pre, r_pre, l_meta, r_meta, cfg.lambda)
}

/// Teacher-side conditioned outputs for meta distillation. For the inner-loop
/// algorithm the teacher runs its own adaptation on the support set using its
/// own parameters; gradients never flow into the teacher.
pub fn teacher_meta_outputs(
    net: &OmniNet,
    teacher: &[Tensor],
    episode: &Episode,
    flow: FlowId,
    cfg: &ObjectiveCfg,
) -> Result<Tensor> {
    match cfg.meta_alg {
        MetaAlg::Proto => {
            let (_, logits) = meta_flow_outputs(net, teacher, episode, flow, cfg, false)?;
            Ok(logits.detach())
        }
        MetaAlg::Maml => {
            let leaves: Vec<Tensor> = teacher.iter().map(Tensor::to_leaf).collect();
            let (_, out) = meta_flow_outputs(net, &leaves, episode, flow, cfg, false)?;
            Ok(out.detach())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, HeadKind, NetConfig};
    use crate::rng::{domain, stream};
    use crate::tasks::navigation::{collect_trajectories, GaussianPolicy, NavTask};
    use omni_autodiff::grad_check_multi;
    use rand::Rng;

    #[test]
    fn ce_uniform_logits_is_log_k() {
        let logits = Tensor::constant(vec![0.3; 10], vec![2, 5]).unwrap();
        let l = ce_pre_loss(&logits, &[1, 4]).unwrap();
        assert!((l.item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_saturated_logit_is_near_zero() {
        let logits = Tensor::constant(vec![20.0, 0.0, 0.0], vec![1, 3]).unwrap();
        let l = ce_pre_loss(&logits, &[0]).unwrap();
        assert!(l.item() < 1e-8);
    }

    #[test]
    fn ce_matches_direct_formula() {
        let mut rng = stream(0, domain::BATCH, 0);
        for _ in 0..50 {
            let b = rng.gen_range(1..4);
            let k = rng.gen_range(2..6);
            let data: Vec<f64> = (0..b * k).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
            let logits = Tensor::constant(data.clone(), vec![b, k]).unwrap();
            let l = ce_pre_loss(&logits, &labels).unwrap().item();
            let mut brute = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                let row = &data[i * k..(i + 1) * k];
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                brute += -(row[y].exp() / z).ln();
            }
            brute /= b as f64;
            assert!((l - brute).abs() < 1e-10, "{l} vs {brute}");
        }
    }

    #[test]
    fn l2_basics() {
        let p = Tensor::constant(vec![2.0], vec![1, 1]).unwrap();
        let y = Tensor::constant(vec![0.0], vec![1, 1]).unwrap();
        assert_eq!(l2_pre_loss(&p, &y).unwrap().item(), 4.0);
        assert_eq!(l2_pre_loss(&p, &p).unwrap().item(), 0.0);
    }

    #[test]
    fn distill_arithmetic_and_detached_teacher() {
        let s = Tensor::leaf(vec![1.0, 2.0], vec![1, 2]).unwrap();
        let t = Tensor::leaf(vec![0.0, 0.0], vec![1, 2]).unwrap();
        let d = distill_reg(&s, &t).unwrap();
        assert_eq!(d.item(), 2.5);
        let grads = backward(&d, &[s.clone(), t.clone()], false).unwrap();
        assert!(grads[0].data().iter().any(|&g| g != 0.0));
        assert!(grads[1].data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn reinforce_zero_advantages_zero_gradient() {
        let theta = Tensor::leaf(vec![0.3, -0.2], vec![2, 1]).unwrap();
        let states = Tensor::constant(vec![1.0, 2.0, -1.0, 0.5], vec![2, 2]).unwrap();
        let logp = ops::matmul(&states, &theta).unwrap();
        let adv = Tensor::constant(vec![0.0, 0.0], vec![2, 1]).unwrap();
        let loss = reinforce_objective(&logp, &adv).unwrap();
        let g = backward(&loss, &[theta], false).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reinforce_is_linear_in_advantages() {
        let theta = Tensor::leaf(vec![0.3, -0.2], vec![2, 1]).unwrap();
        let states = Tensor::constant(vec![1.0, 2.0, -1.0, 0.5], vec![2, 2]).unwrap();
        let adv1 = Tensor::constant(vec![1.0, -0.5], vec![2, 1]).unwrap();
        let adv2 = Tensor::constant(vec![2.0, -1.0], vec![2, 1]).unwrap();
        let g1 = backward(
            &reinforce_objective(&ops::matmul(&states, &theta).unwrap(), &adv1).unwrap(),
            &[theta.clone()],
            false,
        )
        .unwrap();
        let g2 = backward(
            &reinforce_objective(&ops::matmul(&states, &theta).unwrap(), &adv2).unwrap(),
            &[theta],
            false,
        )
        .unwrap();
        for (a, b) in g1[0].data().iter().zip(g2[0].data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reinforce_rejects_graph_advantages_and_empty_sets() {
        let logp = Tensor::leaf(vec![0.1], vec![1, 1]).unwrap();
        let adv = Tensor::leaf(vec![1.0], vec![1, 1]).unwrap();
        assert!(reinforce_objective(&logp, &adv).is_err());
        let empty = Tensor::constant(vec![], vec![0, 1]).unwrap();
        assert!(reinforce_objective(&empty, &empty.detach()).is_err());
    }

    #[test]
    fn single_step_gradient_matches_gaussian_log_density() {
        // With one step and unit advantage the surrogate is -log pi(a|s), so
        // its gradient must match finite differences of the log-density.
        let state = Tensor::constant(vec![0.4, -0.3], vec![1, 2]).unwrap();
        let action = Tensor::constant(vec![0.05, -0.02], vec![1, 2]).unwrap();
        let adv = Tensor::constant(vec![1.0], vec![1, 1]).unwrap();
        // mean = state * W with W in R^{2x2}; logstd fixed
        let w0 = Tensor::constant(vec![0.3, -0.1, 0.2, 0.05], vec![2, 2]).unwrap();
        let logstd0 = Tensor::constant(vec![-1.0, -1.2], vec![1, 2]).unwrap();
        let to_ad = |e: crate::error::CoreError| omni_autodiff::AdError::Domain {
            op: "test",
            msg: e.to_string(),
        };
        let err = grad_check_multi(
            |ps| {
                let mean = ops::matmul(&state, &ps[0])?;
                let logp = gaussian_log_prob(&mean, &ps[1], &action).map_err(to_ad)?;
                reinforce_objective(&logp, &adv).map_err(to_ad)
            },
            &[w0, logstd0],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn advantage_recentering_invariance() {
        // adding a constant and re-centering identically leaves the gradient
        // bit-for-bit unchanged
        let mut rng = stream(0, domain::ROLLOUT, 42);
        let task = NavTask { goal: [0.4, 0.7] };
        let policy = GaussianPolicy {
            mean: Box::new(|_s| vec![0.02, 0.02]),
            logstd: [-2.3, -2.3],
        };
        let mut trajs = collect_trajectories(&policy, &task, 3, 0.99, &mut rng);
        let coef = crate::tasks::navigation::fit_linear_baseline(&trajs);
        crate::tasks::navigation::compute_advantages(&mut trajs, &coef, true);

        let theta = Tensor::leaf(vec![0.1, -0.3], vec![2, 1]).unwrap();
        let grad_for = |advs: &[f64], states: &Tensor| {
            let logp = ops::matmul(states, &theta).unwrap();
            let a = Tensor::constant(advs.to_vec(), vec![advs.len(), 1]).unwrap();
            let loss = reinforce_objective(&logp, &a).unwrap();
            backward(&loss, &[theta.clone()], false).unwrap()[0]
                .data()
                .to_vec()
        };

        let flat: Vec<f64> = trajs.iter().flat_map(|t| t.advantages.clone()).collect();
        let n = flat.len();
        let states =
            Tensor::constant((0..n * 2).map(|i| (i as f64) * 0.01 - 0.3).collect(), vec![n, 2])
                .unwrap();

        let shifted: Vec<f64> = flat.iter().map(|a| a + 5.0).collect();
        let mean_shift: f64 = shifted.iter().sum::<f64>() / n as f64;
        let recentred: Vec<f64> = shifted.iter().map(|a| a - mean_shift).collect();

        let g1 = grad_for(&flat, &states);
        let g2 = grad_for(&recentred, &states);
        let diff: f64 = g1
            .iter()
            .zip(&g2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(diff < 1e-10, "gradient moved by {diff}");
    }

    #[test]
    fn maml_scalar_toy_closed_form() {
        // L_S(theta) = (theta - a)^2 with a = 1, eta = 0.25:
        // theta' = theta - 2 eta (theta - a); from 0 -> 0.5
        let theta = Tensor::leaf(vec![0.0], vec![1]).unwrap();
        let a = Tensor::constant(vec![1.0], vec![1]).unwrap();
        let cfg = MamlCfg {
            inner_lr: 0.25,
            inner_steps: 1,
            first_order: false,
        };
        let support = |p: &[Tensor]| -> Result<Tensor> {
            Ok(ops::sum(&ops::square(&ops::sub(&p[0], &a)?)?)?)
        };
        let adapted = maml_adapt(&[theta.clone()], &[true], support, &cfg, true).unwrap();
        assert!((adapted[0].data()[0] - 0.5).abs() < 1e-15);

        // zero inner lr leaves parameters untouched
        let cfg0 = MamlCfg {
            inner_lr: 0.0,
            ..cfg
        };
        let same = maml_adapt(&[theta.clone()], &[true], support, &cfg0, true).unwrap();
        assert_eq!(same[0].data(), theta.data());

        // query loss (theta' - b)^2 with b = 1: value 0.25, meta-gradient
        // 2 (theta' - b)(1 - 2 eta) = 2 * (-0.5) * 0.5 = -0.5
        let b = Tensor::constant(vec![1.0], vec![1]).unwrap();
        let meta = maml_meta_loss(
            &[theta.clone()],
            &[true],
            support,
            |p: &[Tensor]| Ok(ops::sum(&ops::square(&ops::sub(&p[0], &b)?)?)?),
            &cfg,
        )
        .unwrap();
        assert!((meta.item() - 0.25).abs() < 1e-15);
        let g = backward(&meta, &[theta.clone()], false).unwrap();
        assert!((g[0].data()[0] + 0.5).abs() < 1e-12);

        // finite-difference confirmation of the meta-gradient
        let point = Tensor::constant(vec![0.0], vec![1]).unwrap();
        let err = omni_autodiff::grad_check(
            |th| {
                let adapted = maml_adapt(
                    std::slice::from_ref(th),
                    &[true],
                    |p: &[Tensor]| Ok(ops::sum(&ops::square(&ops::sub(&p[0], &a)?)?)?),
                    &cfg,
                    true,
                )
                .map_err(|_| omni_autodiff::AdError::NonFinite { op: "maml" })?;
                Ok(ops::sum(&ops::square(&ops::sub(&adapted[0], &b)?)?)?)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn first_order_changes_gradient_not_value() {
        let theta = Tensor::leaf(vec![0.3], vec![1]).unwrap();
        let a = Tensor::constant(vec![1.0], vec![1]).unwrap();
        let b = Tensor::constant(vec![-0.5], vec![1]).unwrap();
        let support =
            |p: &[Tensor]| -> Result<Tensor> { Ok(ops::sum(&ops::square(&ops::sub(&p[0], &a)?)?)?) };
        let query =
            |p: &[Tensor]| -> Result<Tensor> { Ok(ops::sum(&ops::square(&ops::sub(&p[0], &b)?)?)?) };
        let full = MamlCfg {
            inner_lr: 0.25,
            inner_steps: 1,
            first_order: false,
        };
        let fo = MamlCfg {
            first_order: true,
            ..full
        };
        let lf = maml_meta_loss(&[theta.clone()], &[true], support, query, &full).unwrap();
        let lo = maml_meta_loss(&[theta.clone()], &[true], support, query, &fo).unwrap();
        assert_eq!(lf.item(), lo.item());
        let gf = backward(&lf, &[theta.clone()], false).unwrap()[0].data()[0];
        let go = backward(&lo, &[theta], false).unwrap()[0].data()[0];
        assert!((gf - go).abs() > 1e-6, "first-order should differ: {gf} vs {go}");
    }

    #[test]
    fn prototypes_are_class_means() {
        let emb = Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 2.0], vec![5.0, 5.0]]).unwrap();
        let protos = proto_prototypes(&emb, &[0, 0, 1], 2).unwrap();
        assert_eq!(protos.data(), &[2.0, 1.0, 5.0, 5.0]);
        assert!(proto_prototypes(&emb, &[0, 0, 0], 2).is_err());
    }

    #[test]
    fn proto_loss_limits() {
        // query at its own prototype, others far away -> loss near zero
        let protos = Tensor::from_rows(&[vec![0.0, 0.0], vec![50.0, 0.0]]).unwrap();
        let q = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let l = proto_loss(&q, &protos, &[0], ProtoDistance::SquaredEuclidean).unwrap();
        assert!(l.item() < 1e-9);

        // equidistant prototypes -> ln N per query
        let protos = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let q = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        let l = proto_loss(&q, &protos, &[2], ProtoDistance::SquaredEuclidean).unwrap();
        assert!((l.item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn proto_loss_matches_brute_force_enumeration() {
        let mut rng = stream(0, domain::EPISODE, 5);
        for _ in 0..40 {
            let n: usize = rng.gen_range(2..=5);
            let k: usize = rng.gen_range(1..=5);
            let d: usize = rng.gen_range(1..=8);
            let m: usize = rng.gen_range(1..=6);
            let semb: Vec<f64> = (0..n * k * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let slab: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat(c).take(k)).collect();
            let qemb: Vec<f64> = (0..m * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let qlab: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();

            let s = Tensor::constant(semb.clone(), vec![n * k, d]).unwrap();
            let q = Tensor::constant(qemb.clone(), vec![m, d]).unwrap();
            let protos = proto_prototypes(&s, &slab, n).unwrap();
            let loss = proto_loss(&q, &protos, &qlab, ProtoDistance::SquaredEuclidean)
                .unwrap()
                .item();

            // brute force
            let mut centers = vec![vec![0.0; d]; n];
            for (i, &c) in slab.iter().enumerate() {
                for j in 0..d {
                    centers[c][j] += semb[i * d + j] / k as f64;
                }
            }
            let mut brute = 0.0;
            for (i, &y) in qlab.iter().enumerate() {
                let dists: Vec<f64> = (0..n)
                    .map(|c| {
                        (0..d)
                            .map(|j| {
                                let diff = qemb[i * d + j] - centers[c][j];
                                diff * diff
                            })
                            .sum::<f64>()
                    })
                    .collect();
                let z: f64 = dists.iter().map(|&v| (-v).exp()).sum();
                brute += -((-dists[y]).exp() / z).ln();
            }
            brute /= m as f64;
            assert!((loss - brute).abs() < 1e-12, "{loss} vs {brute}");
        }
    }

    fn sin_net(tri: bool) -> OmniNet {
        let cfg = NetConfig {
            input_dim: 1,
            hidden: vec![6, 6],
            activation: Activation::Tanh,
            branch_rank: None,
            tri_flow: tri,
            head_joint: HeadKind::Linear {
                out_dim: 1,
                bias: true,
            },
            head_pre: HeadKind::Linear {
                out_dim: 1,
                bias: true,
            },
            head_meta: HeadKind::Linear {
                out_dim: 1,
                bias: true,
            },
            policy_logstd_init: 0.0,
        };
        let mut rng = stream(0, domain::INIT, 99);
        OmniNet::new(cfg, &mut rng).unwrap()
    }

    fn sin_episode(seed: u64) -> (MiniBatch, Episode) {
        let mut rng = stream(seed, domain::EPISODE, 0);
        let bank = crate::tasks::sinusoid::SinusoidBank::generate(&mut rng, 5, 20);
        let batch = bank.sample_minibatch(&mut rng, 8);
        let ep = bank.sample_episode(&mut rng, 4, 6);
        (batch, ep)
    }

    fn sin_cfg(lambda: f64) -> ObjectiveCfg {
        ObjectiveCfg {
            lambda,
            meta_alg: MetaAlg::Maml,
            maml: MamlCfg {
                inner_lr: 0.02,
                inner_steps: 1,
                first_order: false,
            },
            proto_dist: ProtoDistance::SquaredEuclidean,
        }
    }

    #[test]
    fn joint_loss_is_sum_of_its_terms() {
        let net = sin_net(true);
        let (batch, ep) = sin_episode(3);
        let cfg = sin_cfg(3.0);
        let total = joint_loss(&net, net.params(), &batch, &ep, &cfg)
            .unwrap()
            .item();
        let out = net
            .head_output(net.params(), &batch.x, FlowId::Joint)
            .unwrap();
        let pre = supervised_pre_loss(&out, &batch.y).unwrap().item();
        let (meta, _) =
            meta_flow_outputs(&net, net.params(), &ep, FlowId::Joint, &cfg, true).unwrap();
        assert!((total - (pre + meta.item())).abs() < 1e-15);
    }

    #[test]
    fn bundle_identities_and_gradient_routing() {
        let net = sin_net(true);
        let shadow = EmaShadow::from_params(net.params(), 0.99).unwrap();
        let (batch, ep) = sin_episode(4);
        let cfg = sin_cfg(3.0);
        let bundle = omni_objective(&net, &shadow, &batch, &ep, &cfg).unwrap();
        assert!(bundle.identities_max_deviation() < 1e-12);

        let grads = backward(&bundle.o_total, net.params(), false).unwrap();
        let mut by_group = std::collections::HashMap::new();
        for (spec, g) in net.specs().iter().zip(&grads) {
            let n: f64 = g.data().iter().map(|v| v * v).sum();
            *by_group
                .entry(format!("{:?}", spec.group))
                .or_insert(0.0f64) += n;
        }
        assert!(by_group["Chunk"] > 0.0);
        assert!(by_group["PreBranch"] > 0.0);
        assert!(by_group["MetaBranch"] > 0.0);
    }

    #[test]
    fn lambda_zero_collapses_to_plain_losses() {
        let net = sin_net(true);
        let shadow = EmaShadow::from_params(net.params(), 0.99).unwrap();
        let (batch, ep) = sin_episode(5);
        let bundle = omni_objective(&net, &shadow, &batch, &ep, &sin_cfg(0.0)).unwrap();
        let v = bundle.values();
        assert!((v.o_total - (v.l_pre + v.l_meta + v.l_joint)).abs() < 1e-15);
        // shadow equals the student at init, so distillation residuals vanish
        assert!(v.r_pre < 1e-20);
        assert!(v.r_meta < 1e-20);
    }
}

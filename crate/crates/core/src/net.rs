//! The tri-flow backbone and heads.
//!
//! Each layer owns a main chunk transform shared by every flow plus two
//! branch transforms. The joint flow routes through the chunk alone; the pre
//! and meta flows add their branch output to the chunk output before the
//! flow's own activation copy. Stacking layers extends the per-layer routing
//! to whole-network flow functions, and a per-flow head maps the final
//! features to predictions.
//!
//! Parameters live in one flat, deterministically ordered list so the
//! optimizer, the EMA shadow, checkpoints and inner-loop adaptation all agree
//! on indexing. Forward functions take the parameter slice explicitly, which
//! lets adapted parameter sets be swapped in without touching the model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use omni_autodiff::ops::{self, broadcast_rows};
use omni_autodiff::Tensor;

use crate::error::{CoreError, Result};

/// The three data flows through an omni-layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FlowId {
    Joint,
    Pre,
    Meta,
}

impl FlowId {
    pub const ALL: [FlowId; 3] = [FlowId::Joint, FlowId::Pre, FlowId::Meta];

    pub fn name(self) -> &'static str {
        match self {
            FlowId::Joint => "joint",
            FlowId::Pre => "pre",
            FlowId::Meta => "meta",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, t: &Tensor) -> omni_autodiff::Result<Tensor> {
        match self {
            Activation::Tanh => ops::tanh(t),
            Activation::Identity => Ok(t.clone()),
        }
    }

    fn apply_plain(self, v: &mut [f64]) {
        if let Activation::Tanh = self {
            for x in v.iter_mut() {
                *x = x.tanh();
            }
        }
    }
}

/// Output head attached to one flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// Single linear map to `out_dim` values (logits or regression outputs).
    Linear { out_dim: usize, bias: bool },
    /// Linear map to an action mean plus a learnable per-dimension log-std.
    Policy { action_dim: usize },
    /// Parameter-free metric head: the backbone features are the output.
    Prototype,
}

impl NetConfig {
    fn logstd_init_or_default(&self) -> f64 {
        self.policy_logstd_init
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// `None` keeps branches at full rank; `Some(r)` factorizes each branch
    /// weight into `in×r · r×out`.
    pub branch_rank: Option<usize>,
    /// `false` builds a plain single-flow network (no branches, one head)
    /// used by the baseline training modes.
    pub tri_flow: bool,
    pub head_joint: HeadKind,
    pub head_pre: HeadKind,
    pub head_meta: HeadKind,
    /// Initial per-dimension log standard deviation of policy heads.
    #[serde(default)]
    pub policy_logstd_init: f64,
}

impl NetConfig {
    pub fn feature_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    pub fn head(&self, flow: FlowId) -> HeadKind {
        match flow {
            FlowId::Joint => self.head_joint,
            FlowId::Pre => self.head_pre,
            FlowId::Meta => self.head_meta,
        }
    }
}

/// Which partition a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Chunk,
    PreBranch,
    MetaBranch,
    Head(FlowId),
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Copy)]
enum BranchPos {
    Absent,
    Full { w: usize, b: usize },
    LowRank { u: usize, v: usize, b: usize },
}

#[derive(Debug, Clone)]
struct LayerPos {
    out_dim: usize,
    w_joint: usize,
    b_joint: usize,
    pre: BranchPos,
    meta: BranchPos,
    acts: [Activation; 3],
}

#[derive(Debug, Clone, Copy)]
enum HeadPos {
    Linear { w: usize, b: Option<usize> },
    Policy { w: usize, b: usize, logstd: usize },
    Prototype,
}

/// Counts reported by [`OmniNet::param_groups`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupCounts {
    pub chunk: usize,
    pub pre_branch: usize,
    pub meta_branch: usize,
    pub heads: usize,
    pub total: usize,
}

pub struct OmniNet {
    cfg: NetConfig,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor>,
    layers: Vec<LayerPos>,
    heads: Vec<(FlowId, HeadPos)>,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect()
}

impl OmniNet {
    pub fn new(cfg: NetConfig, rng: &mut ChaCha8Rng) -> Result<OmniNet> {
        if let Some(r) = cfg.branch_rank {
            if r == 0 {
                return Err(CoreError::Config("branch_rank must be at least 1".into()));
            }
        }
        let mut specs = Vec::new();
        let mut params = Vec::new();
        let mut layers = Vec::new();

        let push = |specs: &mut Vec<ParamSpec>,
                        params: &mut Vec<Tensor>,
                        name: String,
                        shape: Vec<usize>,
                        group: ParamGroup,
                        data: Vec<f64>|
         -> Result<usize> {
            let idx = params.len();
            params.push(Tensor::leaf(data, shape.clone())?);
            specs.push(ParamSpec { name, shape, group });
            Ok(idx)
        };

        let mut in_dim = cfg.input_dim;
        for (l, &out_dim) in cfg.hidden.iter().enumerate() {
            let w_joint = push(
                &mut specs,
                &mut params,
                format!("layer{l}.joint.w"),
                vec![in_dim, out_dim],
                ParamGroup::Chunk,
                glorot(rng, in_dim, out_dim),
            )?;
            let b_joint = push(
                &mut specs,
                &mut params,
                format!("layer{l}.joint.b"),
                vec![1, out_dim],
                ParamGroup::Chunk,
                vec![0.0; out_dim],
            )?;

            // Branches start at zero so every flow initially coincides with
            // the joint flow.
            let mut branch = |specs: &mut Vec<ParamSpec>,
                              params: &mut Vec<Tensor>,
                              tag: &str,
                              group: ParamGroup|
             -> Result<BranchPos> {
                if !cfg.tri_flow {
                    return Ok(BranchPos::Absent);
                }
                match cfg.branch_rank {
                    None => {
                        let w = push(
                            specs,
                            params,
                            format!("layer{l}.{tag}.w"),
                            vec![in_dim, out_dim],
                            group,
                            vec![0.0; in_dim * out_dim],
                        )?;
                        let b = push(
                            specs,
                            params,
                            format!("layer{l}.{tag}.b"),
                            vec![1, out_dim],
                            group,
                            vec![0.0; out_dim],
                        )?;
                        Ok(BranchPos::Full { w, b })
                    }
                    Some(r) => {
                        if r > in_dim.min(out_dim) {
                            return Err(CoreError::Config(format!(
                                "branch rank {r} exceeds min({in_dim}, {out_dim})"
                            )));
                        }
                        let u = push(
                            specs,
                            params,
                            format!("layer{l}.{tag}.u"),
                            vec![in_dim, r],
                            group,
                            vec![0.0; in_dim * r],
                        )?;
                        let v = push(
                            specs,
                            params,
                            format!("layer{l}.{tag}.v"),
                            vec![r, out_dim],
                            group,
                            glorot(rng, r, out_dim),
                        )?;
                        let b = push(
                            specs,
                            params,
                            format!("layer{l}.{tag}.b"),
                            vec![1, out_dim],
                            group,
                            vec![0.0; out_dim],
                        )?;
                        Ok(BranchPos::LowRank { u, v, b })
                    }
                }
            };
            let pre = branch(&mut specs, &mut params, "pre", ParamGroup::PreBranch)?;
            let meta = branch(&mut specs, &mut params, "meta", ParamGroup::MetaBranch)?;

            layers.push(LayerPos {
                out_dim,
                w_joint,
                b_joint,
                pre,
                meta,
                acts: [cfg.activation; 3],
            });
            in_dim = out_dim;
        }

        let feature_dim = in_dim;
        let flows: &[FlowId] = if cfg.tri_flow {
            &FlowId::ALL
        } else {
            &[FlowId::Joint]
        };
        let mut heads = Vec::new();
        for &flow in flows {
            let pos = match cfg.head(flow) {
                HeadKind::Linear { out_dim, bias } => {
                    let w = push(
                        &mut specs,
                        &mut params,
                        format!("head.{}.w", flow.name()),
                        vec![feature_dim, out_dim],
                        ParamGroup::Head(flow),
                        glorot(rng, feature_dim, out_dim),
                    )?;
                    let b = if bias {
                        Some(push(
                            &mut specs,
                            &mut params,
                            format!("head.{}.b", flow.name()),
                            vec![1, out_dim],
                            ParamGroup::Head(flow),
                            vec![0.0; out_dim],
                        )?)
                    } else {
                        None
                    };
                    HeadPos::Linear { w, b }
                }
                HeadKind::Policy { action_dim } => {
                    let w = push(
                        &mut specs,
                        &mut params,
                        format!("head.{}.w", flow.name()),
                        vec![feature_dim, action_dim],
                        ParamGroup::Head(flow),
                        glorot(rng, feature_dim, action_dim),
                    )?;
                    let b = push(
                        &mut specs,
                        &mut params,
                        format!("head.{}.b", flow.name()),
                        vec![1, action_dim],
                        ParamGroup::Head(flow),
                        vec![0.0; action_dim],
                    )?;
                    let logstd = push(
                        &mut specs,
                        &mut params,
                        format!("head.{}.logstd", flow.name()),
                        vec![1, action_dim],
                        ParamGroup::Head(flow),
                        vec![cfg.logstd_init_or_default(); action_dim],
                    )?;
                    HeadPos::Policy { w, b, logstd }
                }
                HeadKind::Prototype => HeadPos::Prototype,
            };
            heads.push((flow, pos));
        }

        Ok(OmniNet {
            cfg,
            specs,
            params,
            layers,
            heads,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_vec(&self) -> Vec<Tensor> {
        self.params.clone()
    }

    /// A structural copy of this network holding a different parameter set.
    pub fn with_params(&self, params: Vec<Tensor>) -> Result<OmniNet> {
        let mut net = OmniNet {
            cfg: self.cfg.clone(),
            specs: self.specs.clone(),
            params: Vec::new(),
            layers: self.layers.clone(),
            heads: self.heads.clone(),
        };
        net.set_params(params)?;
        Ok(net)
    }

    /// Replace the live parameter set (after an optimizer step or when
    /// loading a checkpoint). Shapes must match the layout.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.specs.len() {
            return Err(CoreError::Config(format!(
                "expected {} parameters, got {}",
                self.specs.len(),
                params.len()
            )));
        }
        for (spec, p) in self.specs.iter().zip(&params) {
            if spec.shape != p.shape() {
                return Err(CoreError::Config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    p.shape(),
                    spec.shape
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.specs
            .iter()
            .zip(&self.params)
            .map(|(s, p)| (s.name.as_str(), p))
    }

    /// Deterministic partition counts: chunk, branches, heads, total.
    pub fn param_groups(&self) -> GroupCounts {
        let mut counts = GroupCounts {
            chunk: 0,
            pre_branch: 0,
            meta_branch: 0,
            heads: 0,
            total: 0,
        };
        for (spec, p) in self.specs.iter().zip(&self.params) {
            let n = p.numel();
            counts.total += n;
            match spec.group {
                ParamGroup::Chunk => counts.chunk += n,
                ParamGroup::PreBranch => counts.pre_branch += n,
                ParamGroup::MetaBranch => counts.meta_branch += n,
                ParamGroup::Head(_) => counts.heads += n,
            }
        }
        counts
    }

    /// Parameters that participate in the forward pass of `flow`: the chunk,
    /// the flow's branch and the flow's head.
    pub fn path_mask(&self, flow: FlowId) -> Vec<bool> {
        self.specs
            .iter()
            .map(|s| match s.group {
                ParamGroup::Chunk => true,
                ParamGroup::PreBranch => flow == FlowId::Pre && self.cfg.tri_flow,
                ParamGroup::MetaBranch => flow == FlowId::Meta && self.cfg.tri_flow,
                ParamGroup::Head(h) => {
                    if self.cfg.tri_flow {
                        h == flow
                    } else {
                        true
                    }
                }
            })
            .collect()
    }

    fn head_pos(&self, flow: FlowId) -> HeadPos {
        if self.cfg.tri_flow {
            self.heads
                .iter()
                .find(|(f, _)| *f == flow)
                .map(|(_, p)| *p)
                .expect("all flows have heads in tri-flow nets")
        } else {
            self.heads[0].1
        }
    }

    fn branch_output(
        params: &[Tensor],
        pos: BranchPos,
        x: &Tensor,
    ) -> omni_autodiff::Result<Option<Tensor>> {
        match pos {
            BranchPos::Absent => Ok(None),
            BranchPos::Full { w, b } => {
                let z = ops::matmul(x, &params[w])?;
                let bias = broadcast_rows(&params[b], z.shape()[0])?;
                Ok(Some(ops::add(&z, &bias)?))
            }
            BranchPos::LowRank { u, v, b } => {
                let z = ops::matmul(&ops::matmul(x, &params[u])?, &params[v])?;
                let bias = broadcast_rows(&params[b], z.shape()[0])?;
                Ok(Some(ops::add(&z, &bias)?))
            }
        }
    }

    /// Backbone features of a `[batch, input_dim]` matrix along one flow.
    pub fn features(&self, params: &[Tensor], x: &Tensor, flow: FlowId) -> Result<Tensor> {
        if x.shape().len() != 2 || x.shape()[1] != self.cfg.input_dim {
            return Err(CoreError::Config(format!(
                "input shape {:?} does not match input_dim {}",
                x.shape(),
                self.cfg.input_dim
            )));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = self.layer_forward(params, layer, &h, flow)?;
        }
        Ok(h)
    }

    fn layer_forward(
        &self,
        params: &[Tensor],
        layer: &LayerPos,
        x: &Tensor,
        flow: FlowId,
    ) -> Result<Tensor> {
        let rows = x.shape()[0];
        let chunk = {
            let z = ops::matmul(x, &params[layer.w_joint])?;
            let bias = broadcast_rows(&params[layer.b_joint], rows)?;
            ops::add(&z, &bias)?
        };
        let (branch, act) = match flow {
            FlowId::Joint => (None, layer.acts[0]),
            FlowId::Pre => (Self::branch_output(params, layer.pre, x)?, layer.acts[1]),
            FlowId::Meta => (Self::branch_output(params, layer.meta, x)?, layer.acts[2]),
        };
        let z = match branch {
            Some(b) => ops::add(&chunk, &b)?,
            None => chunk,
        };
        Ok(act.apply(&z)?)
    }

    /// Raw head output for one flow: logits, regression values or the policy
    /// mean. A `Prototype` head returns the features unchanged.
    pub fn head_output(&self, params: &[Tensor], x: &Tensor, flow: FlowId) -> Result<Tensor> {
        let feats = self.features(params, x, flow)?;
        self.apply_head(params, &feats, flow)
    }

    pub fn apply_head(&self, params: &[Tensor], feats: &Tensor, flow: FlowId) -> Result<Tensor> {
        match self.head_pos(flow) {
            HeadPos::Linear { w, b } => {
                let z = ops::matmul(feats, &params[w])?;
                Ok(match b {
                    Some(b) => ops::add(&z, &broadcast_rows(&params[b], z.shape()[0])?)?,
                    None => z,
                })
            }
            HeadPos::Policy { w, b, .. } => {
                let z = ops::matmul(feats, &params[w])?;
                Ok(ops::add(&z, &broadcast_rows(&params[b], z.shape()[0])?)?)
            }
            HeadPos::Prototype => Ok(feats.clone()),
        }
    }

    /// The `[1, action_dim]` log-std parameter of a policy head.
    pub fn head_logstd(&self, params: &[Tensor], flow: FlowId) -> Option<Tensor> {
        match self.head_pos(flow) {
            HeadPos::Policy { logstd, .. } => Some(params[logstd].clone()),
            _ => None,
        }
    }

    // ------------------------------------------------------------------
    // Plain (graph-free) forward path used by environment rollouts.
    // ------------------------------------------------------------------

    /// Same computation as [`Self::features`] on raw slices. Used where no
    /// gradients are needed (trajectory collection); agreement with the graph
    /// path is covered by tests.
    pub fn features_plain(&self, params: &[Tensor], x: &[f64], flow: FlowId) -> Vec<f64> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            let w = params[layer.w_joint].data();
            let b = params[layer.b_joint].data();
            let mut z = b.to_vec();
            for (i, &xi) in h.iter().enumerate() {
                let row = &w[i * layer.out_dim..(i + 1) * layer.out_dim];
                for (zj, &wij) in z.iter_mut().zip(row) {
                    *zj += xi * wij;
                }
            }
            let (branch, act) = match flow {
                FlowId::Joint => (BranchPos::Absent, layer.acts[0]),
                FlowId::Pre => (layer.pre, layer.acts[1]),
                FlowId::Meta => (layer.meta, layer.acts[2]),
            };
            match branch {
                BranchPos::Absent => {}
                BranchPos::Full { w, b } => {
                    let bw = params[w].data();
                    let bb = params[b].data();
                    for (zj, &bj) in z.iter_mut().zip(bb) {
                        *zj += bj;
                    }
                    for (i, &xi) in h.iter().enumerate() {
                        let row = &bw[i * layer.out_dim..(i + 1) * layer.out_dim];
                        for (zj, &wij) in z.iter_mut().zip(row) {
                            *zj += xi * wij;
                        }
                    }
                }
                BranchPos::LowRank { u, v, b } => {
                    let uw = params[u].data();
                    let vw = params[v].data();
                    let bb = params[b].data();
                    let r = params[u].shape()[1];
                    let mut mid = vec![0.0; r];
                    for (i, &xi) in h.iter().enumerate() {
                        let row = &uw[i * r..(i + 1) * r];
                        for (mj, &uij) in mid.iter_mut().zip(row) {
                            *mj += xi * uij;
                        }
                    }
                    for (zj, &bj) in z.iter_mut().zip(bb) {
                        *zj += bj;
                    }
                    for (i, &mi) in mid.iter().enumerate() {
                        let row = &vw[i * layer.out_dim..(i + 1) * layer.out_dim];
                        for (zj, &vij) in z.iter_mut().zip(row) {
                            *zj += mi * vij;
                        }
                    }
                }
            }
            act.apply_plain(&mut z);
            h = z;
        }
        h
    }

    /// Head output on a single raw input vector.
    pub fn head_output_plain(&self, params: &[Tensor], x: &[f64], flow: FlowId) -> Vec<f64> {
        let feats = self.features_plain(params, x, flow);
        match self.head_pos(flow) {
            HeadPos::Linear { w, b } => {
                let wd = params[w].data();
                let out_dim = params[w].shape()[1];
                let mut z = match b {
                    Some(b) => params[b].data().to_vec(),
                    None => vec![0.0; out_dim],
                };
                for (i, &fi) in feats.iter().enumerate() {
                    let row = &wd[i * out_dim..(i + 1) * out_dim];
                    for (zj, &wij) in z.iter_mut().zip(row) {
                        *zj += fi * wij;
                    }
                }
                z
            }
            HeadPos::Policy { w, b, .. } => {
                let wd = params[w].data();
                let out_dim = params[w].shape()[1];
                let mut z = params[b].data().to_vec();
                for (i, &fi) in feats.iter().enumerate() {
                    let row = &wd[i * out_dim..(i + 1) * out_dim];
                    for (zj, &wij) in z.iter_mut().zip(row) {
                        *zj += fi * wij;
                    }
                }
                z
            }
            HeadPos::Prototype => feats,
        }
    }

    pub fn logstd_plain(&self, params: &[Tensor], flow: FlowId) -> Option<Vec<f64>> {
        match self.head_pos(flow) {
            HeadPos::Policy { logstd, .. } => Some(params[logstd].data().to_vec()),
            _ => None,
        }
    }
}

/// Temporal-ensemble copy of all parameters, updated as
/// `shadow = alpha * shadow + (1 - alpha) * current` after each optimizer
/// step. The shadow never carries gradients.
pub struct EmaShadow {
    alpha: f64,
    values: Vec<Tensor>,
}

impl EmaShadow {
    /// Shadow initialized to the current parameters.
    pub fn from_params(params: &[Tensor], alpha: f64) -> Result<EmaShadow> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(CoreError::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(EmaShadow {
            alpha,
            values: params.iter().map(Tensor::detach).collect(),
        })
    }

    /// Shadow initialized to zeros (used by closed-form tests).
    pub fn zeroed(params: &[Tensor], alpha: f64) -> Result<EmaShadow> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(CoreError::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(EmaShadow {
            alpha,
            values: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn update(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.values.len() {
            return Err(CoreError::Config(format!(
                "shadow holds {} tensors, update got {}",
                self.values.len(),
                params.len()
            )));
        }
        let a = self.alpha;
        for (shadow, current) in self.values.iter_mut().zip(params) {
            if shadow.shape() != current.shape() {
                return Err(CoreError::Config(format!(
                    "shadow shape {:?} vs parameter shape {:?}",
                    shadow.shape(),
                    current.shape()
                )));
            }
            let data: Vec<f64> = shadow
                .data()
                .iter()
                .zip(current.data())
                .map(|(&s, &c)| a * s + (1.0 - a) * c)
                .collect();
            *shadow = Tensor::constant(data, shadow.shape().to_vec())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, stream};
    use omni_autodiff::{backward, ops};

    fn tiny_cfg(tri_flow: bool) -> NetConfig {
        NetConfig {
            input_dim: 1,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            branch_rank: None,
            tri_flow,
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
        }
    }

    #[test]
    fn param_accounting_matches_hand_arithmetic() {
        let mut rng = stream(0, domain::INIT, 0);
        let net = OmniNet::new(tiny_cfg(true), &mut rng).unwrap();
        let groups = net.param_groups();
        assert_eq!(groups.chunk, (1 * 64 + 64) + (64 * 64 + 64)); // 4288
        assert_eq!(groups.pre_branch + groups.meta_branch, 2 * 4288);
        assert_eq!(groups.heads, 3 * (64 + 1));
        assert_eq!(
            groups.total,
            groups.chunk + groups.pre_branch + groups.meta_branch + groups.heads
        );
    }

    #[test]
    fn low_rank_branch_param_count() {
        let mut cfg = tiny_cfg(true);
        cfg.input_dim = 64;
        cfg.hidden = vec![64];
        cfg.branch_rank = Some(4);
        let mut rng = stream(0, domain::INIT, 1);
        let net = OmniNet::new(cfg, &mut rng).unwrap();
        let groups = net.param_groups();
        assert_eq!(groups.pre_branch, 64 * 4 + 4 * 64 + 64); // 576
        assert_eq!(groups.meta_branch, 576);
    }

    #[test]
    fn empty_backbone_with_prototype_heads_has_no_params() {
        let cfg = NetConfig {
            input_dim: 3,
            hidden: vec![],
            activation: Activation::Tanh,
            branch_rank: None,
            tri_flow: true,
            head_joint: HeadKind::Prototype,
            head_pre: HeadKind::Prototype,
            head_meta: HeadKind::Prototype,
            policy_logstd_init: 0.0,
        };
        let mut rng = stream(0, domain::INIT, 2);
        let net = OmniNet::new(cfg, &mut rng).unwrap();
        assert_eq!(net.param_groups().total, 0);
    }

    #[test]
    fn zeroed_branches_make_all_flows_coincide() {
        let mut rng = stream(0, domain::INIT, 3);
        let net = OmniNet::new(tiny_cfg(true), &mut rng).unwrap();
        // Branches are zero-initialized but heads differ, so compare features.
        let x = Tensor::constant(vec![0.37, -1.2, 0.0], vec![3, 1]).unwrap();
        let j = net.features(net.params(), &x, FlowId::Joint).unwrap();
        let p = net.features(net.params(), &x, FlowId::Pre).unwrap();
        let m = net.features(net.params(), &x, FlowId::Meta).unwrap();
        assert_eq!(j.data(), p.data());
        assert_eq!(j.data(), m.data());
    }

    #[test]
    fn pre_flow_matches_direct_recomputation() {
        let mut rng = stream(0, domain::INIT, 4);
        let mut cfg = tiny_cfg(true);
        cfg.hidden = vec![5];
        let mut net = OmniNet::new(cfg, &mut rng).unwrap();
        // random branch values instead of zeros
        let mut params = net.params_vec();
        for (i, spec) in net.specs().to_vec().iter().enumerate() {
            if matches!(spec.group, ParamGroup::PreBranch) {
                let n: usize = spec.shape.iter().product();
                let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
                params[i] = Tensor::leaf(data, spec.shape.clone()).unwrap();
            }
        }
        net.set_params(params).unwrap();

        let x = 0.8;
        let out = net
            .features(
                net.params(),
                &Tensor::constant(vec![x], vec![1, 1]).unwrap(),
                FlowId::Pre,
            )
            .unwrap();

        let by_name: std::collections::HashMap<&str, &Tensor> = net.named_params().collect();
        let wj = by_name["layer0.joint.w"].data();
        let bj = by_name["layer0.joint.b"].data();
        let wp = by_name["layer0.pre.w"].data();
        let bp = by_name["layer0.pre.b"].data();
        for k in 0..5 {
            let z = wj[k] * x + bj[k] + wp[k] * x + bp[k];
            assert!((out.data()[k] - z.tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_isolation_between_branches() {
        let mut rng = stream(0, domain::INIT, 5);
        let net = OmniNet::new(tiny_cfg(true), &mut rng).unwrap();
        let x = Tensor::constant(vec![0.5, -0.25], vec![2, 1]).unwrap();
        let out = net.head_output(net.params(), &x, FlowId::Pre).unwrap();
        let loss = ops::mean(&ops::square(&out).unwrap()).unwrap();
        let grads = backward(&loss, net.params(), false).unwrap();
        let mut chunk_norm = 0.0;
        let mut pre_norm = 0.0;
        let mut meta_norm = 0.0;
        for (spec, g) in net.specs().iter().zip(&grads) {
            let n: f64 = g.data().iter().map(|v| v * v).sum();
            match spec.group {
                ParamGroup::Chunk => chunk_norm += n,
                ParamGroup::PreBranch => pre_norm += n,
                ParamGroup::MetaBranch => meta_norm += n,
                ParamGroup::Head(_) => {}
            }
        }
        assert!(chunk_norm > 0.0);
        assert!(pre_norm > 0.0);
        assert_eq!(meta_norm, 0.0);
    }

    #[test]
    fn plain_forward_agrees_with_graph_forward() {
        let mut rng = stream(0, domain::INIT, 6);
        let mut cfg = tiny_cfg(true);
        cfg.input_dim = 2;
        cfg.branch_rank = Some(2);
        cfg.hidden = vec![8, 8];
        let mut net = OmniNet::new(cfg, &mut rng).unwrap();
        let mut params = net.params_vec();
        for (i, spec) in net.specs().to_vec().iter().enumerate() {
            let n: usize = spec.shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
            params[i] = Tensor::leaf(data, spec.shape.clone()).unwrap();
        }
        net.set_params(params).unwrap();

        for flow in FlowId::ALL {
            let x = vec![0.3, -0.7];
            let graph = net
                .head_output(
                    net.params(),
                    &Tensor::constant(x.clone(), vec![1, 2]).unwrap(),
                    flow,
                )
                .unwrap();
            let plain = net.head_output_plain(net.params(), &x, flow);
            for (a, b) in graph.data().iter().zip(&plain) {
                assert!((a - b).abs() < 1e-12, "{flow:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn ema_degenerate_alphas() {
        let mut rng = stream(0, domain::INIT, 7);
        let net = OmniNet::new(tiny_cfg(true), &mut rng).unwrap();

        let mut s0 = EmaShadow::from_params(net.params(), 0.0).unwrap();
        s0.update(net.params()).unwrap();
        for (s, p) in s0.values().iter().zip(net.params()) {
            assert_eq!(s.data(), p.data());
        }

        let mut s1 = EmaShadow::zeroed(net.params(), 1.0).unwrap();
        s1.update(net.params()).unwrap();
        for s in s1.values() {
            assert!(s.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ema_geometric_closed_form() {
        let c = 0.73;
        let params = vec![Tensor::leaf(vec![c; 4], vec![4]).unwrap()];
        let mut shadow = EmaShadow::zeroed(&params, 0.99).unwrap();
        let steps = 200;
        for _ in 0..steps {
            shadow.update(&params).unwrap();
        }
        let expect = c * (1.0 - 0.99f64.powi(steps));
        for &v in shadow.values()[0].data() {
            assert!((v - expect).abs() < 1e-12);
        }
    }
}

//! Registered finite-difference checks: every primitive and every loss is
//! verified against central differences at random points. Backs the
//! `gradcheck` command and the gradient acceptance gate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use omni_autodiff::ops;
use omni_autodiff::{grad_check, grad_check_multi, Tensor};

use crate::data::{Episode, MiniBatch, Targets};
use crate::error::{CoreError, Result};
use crate::loss::{
    ce_pre_loss, distill_reg, gaussian_log_prob, joint_loss, l2_pre_loss, maml_adapt,
    maml_meta_loss, omni_objective, proto_loss, proto_prototypes, reinforce_objective, MamlCfg,
    MetaAlg, ObjectiveCfg, ProtoDistance,
};
use crate::net::{Activation, EmaShadow, HeadKind, NetConfig, OmniNet};
use crate::rng::{domain, stream};

const FD_STEP: f64 = 1e-5;
pub const FIRST_ORDER_TOL: f64 = 1e-4;
pub const SECOND_ORDER_TOL: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub scope: &'static str,
    pub points: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub const SCOPES: [&str; 4] = ["all", "primitives", "losses", "maml"];

/// Run the registered checks for a scope. Unknown scopes are an error.
pub fn run_checks(scope: &str, points: usize) -> Result<Vec<CheckOutcome>> {
    if !SCOPES.contains(&scope) {
        return Err(CoreError::Config(format!(
            "unknown gradcheck scope '{scope}'; valid: all, primitives, losses, maml"
        )));
    }
    let mut out = Vec::new();
    if scope == "all" || scope == "primitives" {
        out.extend(primitive_checks(points)?);
    }
    if scope == "all" || scope == "losses" {
        out.extend(loss_checks(points)?);
    }
    if scope == "all" || scope == "maml" {
        out.extend(maml_checks(points)?);
    }
    Ok(out)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

// grad_check closures speak the autodiff error type; unwrap ours back down.
fn to_ad(err: CoreError) -> omni_autodiff::AdError {
    match err {
        CoreError::Autodiff(e) => e,
        other => omni_autodiff::AdError::Domain {
            op: "gradcheck",
            msg: other.to_string(),
        },
    }
}

fn outcome(name: &str, scope: &'static str, points: usize, err: f64, tol: f64) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        scope,
        points,
        max_rel_err: err,
        tolerance: tol,
    }
}

fn primitive_checks(points: usize) -> Result<Vec<CheckOutcome>> {
    let mut rng = stream(0xC0FFEE, domain::INIT, 1);
    let mut results = Vec::new();

    type UnaryCase = (
        &'static str,
        f64,
        f64,
        fn(&Tensor) -> omni_autodiff::Result<Tensor>,
    );
    let unary_cases: Vec<UnaryCase> = vec![
        ("tanh", -2.0, 2.0, |x| ops::tanh(x)),
        ("exp", -2.0, 2.0, |x| ops::exp(x)),
        ("log", 0.2, 3.0, |x| ops::log(x)),
        ("sqrt", 0.2, 3.0, |x| ops::sqrt(x)),
        ("square", -2.0, 2.0, |x| ops::square(x)),
        ("negate", -2.0, 2.0, |x| ops::negate(x)),
        ("power", 0.2, 2.0, |x| ops::power(x, 1.7)),
        ("clamp", -0.8, 0.8, |x| ops::clamp(x, -1.0, 1.0)),
        ("reshape", -2.0, 2.0, |x| ops::reshape(x, &[x.numel(), 1])),
    ];
    for (name, lo, hi, f) in unary_cases {
        let mut worst = 0.0f64;
        for _ in 0..points {
            let n = rng.gen_range(1..5);
            let weights = Tensor::constant(rand_vec(&mut rng, n, -1.0, 1.0), vec![n])?;
            let p = Tensor::constant(rand_vec(&mut rng, n, lo, hi), vec![n])?;
            let err = grad_check(
                |x| {
                    let y = f(x)?;
                    let y = ops::reshape(&y, &[weights.numel()])?;
                    ops::sum(&ops::mul(&y, &weights)?)
                },
                &p,
                FD_STEP,
            )?;
            worst = worst.max(err);
        }
        results.push(outcome(name, "primitives", points, worst, FIRST_ORDER_TOL));
    }

    // binary elementwise including the scalar-broadcast form
    for name in ["add", "sub", "mul", "scale"] {
        let mut worst = 0.0f64;
        for _ in 0..points {
            let n = rng.gen_range(1..5);
            let a = Tensor::constant(rand_vec(&mut rng, n, -2.0, 2.0), vec![n])?;
            let b = if name == "scale" {
                Tensor::constant(rand_vec(&mut rng, 1, -2.0, 2.0), vec![])?
            } else {
                Tensor::constant(rand_vec(&mut rng, n, -2.0, 2.0), vec![n])?
            };
            let err = grad_check_multi(
                |xs| {
                    let y = match name {
                        "add" => ops::add(&xs[0], &xs[1])?,
                        "sub" => ops::sub(&xs[0], &xs[1])?,
                        "mul" => ops::mul(&xs[0], &xs[1])?,
                        _ => ops::scale(&xs[0], &xs[1])?,
                    };
                    ops::sum(&ops::square(&y)?)
                },
                &[a, b],
                FD_STEP,
            )?;
            worst = worst.max(err);
        }
        results.push(outcome(name, "primitives", points, worst, FIRST_ORDER_TOL));
    }

    // matrix ops
    let mut worst_mm = 0.0f64;
    let mut worst_tr = 0.0f64;
    let mut worst_is = 0.0f64;
    let mut worst_cc = 0.0f64;
    let mut worst_ls = 0.0f64;
    let mut worst_sum = 0.0f64;
    let mut worst_mean = 0.0f64;
    for _ in 0..points {
        let (m, k, n) = (
            rng.gen_range(1..4),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
        );
        let a = Tensor::constant(rand_vec(&mut rng, m * k, -1.5, 1.5), vec![m, k])?;
        let b = Tensor::constant(rand_vec(&mut rng, k * n, -1.5, 1.5), vec![k, n])?;
        worst_mm = worst_mm.max(grad_check_multi(
            |xs| ops::sum(&ops::square(&ops::matmul(&xs[0], &xs[1])?)?),
            &[a.clone(), b],
            FD_STEP,
        )?);
        worst_tr = worst_tr.max(grad_check(
            |x| ops::sum(&ops::square(&ops::transpose(x)?)?),
            &a,
            FD_STEP,
        )?);

        let rows = rng.gen_range(2..5);
        let mtx = Tensor::constant(rand_vec(&mut rng, rows * 2, -1.5, 1.5), vec![rows, 2])?;
        let idx: Vec<usize> = (0..rng.gen_range(1..5))
            .map(|_| rng.gen_range(0..rows))
            .collect();
        worst_is = worst_is.max(grad_check(
            |x| ops::sum(&ops::square(&ops::index_select(x, &idx)?)?),
            &mtx,
            FD_STEP,
        )?);

        let top = Tensor::constant(rand_vec(&mut rng, 4, -1.5, 1.5), vec![2, 2])?;
        let bot = Tensor::constant(rand_vec(&mut rng, 2, -1.5, 1.5), vec![1, 2])?;
        worst_cc = worst_cc.max(grad_check_multi(
            |xs| ops::sum(&ops::square(&ops::concat_rows(xs)?)?),
            &[top, bot],
            FD_STEP,
        )?);

        let wide = Tensor::constant(rand_vec(&mut rng, 6, -2.0, 2.0), vec![2, 3])?;
        let weights = Tensor::constant(rand_vec(&mut rng, 6, -1.0, 1.0), vec![2, 3])?;
        worst_ls = worst_ls.max(grad_check(
            |x| ops::sum(&ops::mul(&ops::log_softmax(x)?, &weights)?),
            &wide,
            FD_STEP,
        )?);

        let v = Tensor::constant(rand_vec(&mut rng, 5, -2.0, 2.0), vec![5])?;
        worst_sum = worst_sum.max(grad_check(|x| ops::square(&ops::sum(x)?), &v, FD_STEP)?);
        worst_mean = worst_mean.max(grad_check(|x| ops::square(&ops::mean(x)?), &v, FD_STEP)?);
    }
    results.push(outcome("matmul", "primitives", points, worst_mm, FIRST_ORDER_TOL));
    results.push(outcome("transpose", "primitives", points, worst_tr, FIRST_ORDER_TOL));
    results.push(outcome("index_select", "primitives", points, worst_is, FIRST_ORDER_TOL));
    results.push(outcome("concat_rows", "primitives", points, worst_cc, FIRST_ORDER_TOL));
    results.push(outcome("log_softmax", "primitives", points, worst_ls, FIRST_ORDER_TOL));
    results.push(outcome("sum", "primitives", points, worst_sum, FIRST_ORDER_TOL));
    results.push(outcome("mean", "primitives", points, worst_mean, FIRST_ORDER_TOL));
    Ok(results)
}

fn tri_flow_net(rng: &mut ChaCha8Rng, meta_alg: MetaAlg) -> Result<OmniNet> {
    let head = HeadKind::Linear {
        out_dim: if meta_alg == MetaAlg::Proto { 4 } else { 1 },
        bias: true,
    };
    let cfg = NetConfig {
        input_dim: 2,
        hidden: vec![3],
        activation: Activation::Tanh,
        branch_rank: None,
        tri_flow: true,
        head_joint: head,
        head_pre: head,
        head_meta: if meta_alg == MetaAlg::Proto {
            HeadKind::Prototype
        } else {
            head
        },
        policy_logstd_init: 0.0,
    };
    OmniNet::new(cfg, rng)
}

fn regression_batch(rng: &mut ChaCha8Rng, n: usize) -> MiniBatch {
    MiniBatch {
        x: Tensor::constant(rand_vec(rng, n * 2, -1.0, 1.0), vec![n, 2]).expect("batch"),
        y: Targets::Values(
            Tensor::constant(rand_vec(rng, n, -1.0, 1.0), vec![n, 1]).expect("batch"),
        ),
    }
}

fn regression_episode(rng: &mut ChaCha8Rng, k: usize, q: usize) -> Episode {
    Episode {
        support_x: Tensor::constant(rand_vec(rng, k * 2, -1.0, 1.0), vec![k, 2]).expect("ep"),
        support_y: Targets::Values(
            Tensor::constant(rand_vec(rng, k, -1.0, 1.0), vec![k, 1]).expect("ep"),
        ),
        query_x: Tensor::constant(rand_vec(rng, q * 2, -1.0, 1.0), vec![q, 2]).expect("ep"),
        query_y: Targets::Values(
            Tensor::constant(rand_vec(rng, q, -1.0, 1.0), vec![q, 1]).expect("ep"),
        ),
        n_way: 0,
    }
}

fn class_episode(rng: &mut ChaCha8Rng, n_way: usize, k: usize, q: usize) -> Episode {
    let slab: Vec<usize> = (0..n_way).flat_map(|c| std::iter::repeat(c).take(k)).collect();
    let qlab: Vec<usize> = (0..q).map(|_| rng.gen_range(0..n_way)).collect();
    Episode {
        support_x: Tensor::constant(rand_vec(rng, n_way * k * 2, -1.0, 1.0), vec![n_way * k, 2])
            .expect("ep"),
        support_y: Targets::Classes(slab),
        query_x: Tensor::constant(rand_vec(rng, q * 2, -1.0, 1.0), vec![q, 2]).expect("ep"),
        query_y: Targets::Classes(qlab),
        n_way,
    }
}

fn objective_cfg(meta_alg: MetaAlg, lambda: f64) -> ObjectiveCfg {
    ObjectiveCfg {
        lambda,
        meta_alg,
        maml: MamlCfg {
            inner_lr: 0.05,
            inner_steps: 1,
            first_order: false,
        },
        proto_dist: ProtoDistance::SquaredEuclidean,
    }
}

fn loss_checks(points: usize) -> Result<Vec<CheckOutcome>> {
    let mut rng = stream(0xC0FFEE, domain::INIT, 2);
    let mut results = Vec::new();

    // cross-entropy on logits
    let mut worst = 0.0f64;
    for _ in 0..points {
        let b = rng.gen_range(1..4);
        let k = rng.gen_range(2..6);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        let p = Tensor::constant(rand_vec(&mut rng, b * k, -2.0, 2.0), vec![b, k])?;
        worst = worst.max(grad_check(|x| ce_pre_loss(x, &labels).map_err(to_ad), &p, FD_STEP)?);
    }
    results.push(outcome("ce_pre_loss", "losses", points, worst, FIRST_ORDER_TOL));

    // squared error
    let mut worst = 0.0f64;
    for _ in 0..points {
        let n = rng.gen_range(1..5);
        let y = Tensor::constant(rand_vec(&mut rng, n, -2.0, 2.0), vec![n, 1])?;
        let p = Tensor::constant(rand_vec(&mut rng, n, -2.0, 2.0), vec![n, 1])?;
        worst = worst.max(grad_check(|x| l2_pre_loss(x, &y).map_err(to_ad), &p, FD_STEP)?);
    }
    results.push(outcome("l2_pre_loss", "losses", points, worst, FIRST_ORDER_TOL));

    // policy-gradient surrogate through the Gaussian log-density
    let mut worst = 0.0f64;
    for _ in 0..points {
        let t = rng.gen_range(1..5);
        let states = Tensor::constant(rand_vec(&mut rng, t * 2, -1.0, 1.0), vec![t, 2])?;
        let actions = Tensor::constant(rand_vec(&mut rng, t * 2, -0.1, 0.1), vec![t, 2])?;
        let adv = Tensor::constant(rand_vec(&mut rng, t, -1.0, 1.0), vec![t, 1])?;
        let w = Tensor::constant(rand_vec(&mut rng, 4, -0.5, 0.5), vec![2, 2])?;
        let ls = Tensor::constant(rand_vec(&mut rng, 2, -1.5, -0.5), vec![1, 2])?;
        worst = worst.max(grad_check_multi(
            |ps| {
                let means = ops::matmul(&states, &ps[0])?;
                let logp = gaussian_log_prob(&means, &ps[1], &actions).map_err(to_ad)?;
                reinforce_objective(&logp, &adv).map_err(to_ad)
            },
            &[w, ls],
            FD_STEP,
        )?);
    }
    results.push(outcome(
        "reinforce_objective",
        "losses",
        points,
        worst,
        FIRST_ORDER_TOL,
    ));

    // prototype loss with respect to the embeddings
    let mut worst = 0.0f64;
    for _ in 0..points {
        let n_way = rng.gen_range(2..5);
        let k = rng.gen_range(1..4);
        let d = rng.gen_range(1..5);
        let q = rng.gen_range(1..4);
        let slab: Vec<usize> = (0..n_way).flat_map(|c| std::iter::repeat(c).take(k)).collect();
        let qlab: Vec<usize> = (0..q).map(|_| rng.gen_range(0..n_way)).collect();
        let semb = Tensor::constant(rand_vec(&mut rng, n_way * k * d, -2.0, 2.0), vec![n_way * k, d])?;
        let qemb = Tensor::constant(rand_vec(&mut rng, q * d, -2.0, 2.0), vec![q, d])?;
        worst = worst.max(grad_check_multi(
            |xs| {
                let protos = proto_prototypes(&xs[0], &slab, n_way).map_err(to_ad)?;
                proto_loss(&xs[1], &protos, &qlab, ProtoDistance::SquaredEuclidean)
                    .map_err(to_ad)
            },
            &[semb, qemb],
            FD_STEP,
        )?);
    }
    results.push(outcome("proto_loss", "losses", points, worst, FIRST_ORDER_TOL));

    // self-distillation residual with respect to the student side
    let mut worst = 0.0f64;
    for _ in 0..points {
        let n = rng.gen_range(1..5);
        let teacher = Tensor::constant(rand_vec(&mut rng, n, -2.0, 2.0), vec![n, 1])?;
        let p = Tensor::constant(rand_vec(&mut rng, n, -2.0, 2.0), vec![n, 1])?;
        worst = worst.max(grad_check(
            |x| {
                distill_reg(x, &teacher).map_err(to_ad)
            },
            &p,
            FD_STEP,
        )?);
    }
    results.push(outcome("distill_reg", "losses", points, worst, FIRST_ORDER_TOL));

    // joint loss and the full combined objective with respect to every
    // parameter, for both meta algorithms
    for (tag, meta_alg) in [("maml", MetaAlg::Maml), ("proto", MetaAlg::Proto)] {
        let mut worst_joint = 0.0f64;
        let mut worst_total = 0.0f64;
        for _ in 0..points.min(40) {
            let net = tri_flow_net(&mut rng, meta_alg)?;
            let cfg = objective_cfg(meta_alg, 3.0);
            let (batch, episode) = match meta_alg {
                MetaAlg::Maml => (
                    regression_batch(&mut rng, 2),
                    regression_episode(&mut rng, 2, 2),
                ),
                MetaAlg::Proto => {
                    let b = {
                        let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
                        MiniBatch {
                            x: Tensor::constant(rand_vec(&mut rng, 6, -1.0, 1.0), vec![3, 2])?,
                            y: Targets::Classes(labels),
                        }
                    };
                    (b, class_episode(&mut rng, 2, 2, 3))
                }
            };
            // an EMA teacher distinct from the student
            let shifted: Vec<Tensor> = net
                .params()
                .iter()
                .map(|p| {
                    let d: Vec<f64> = p.data().iter().map(|v| v + 0.05).collect();
                    Tensor::leaf(d, p.shape().to_vec()).expect("teacher")
                })
                .collect();
            let teacher_net = net.with_params(shifted)?;
            let shadow = EmaShadow::from_params(teacher_net.params(), 0.99)?;

            let points_vec: Vec<Tensor> =
                net.params().iter().map(|p| p.detach()).collect();
            worst_joint = worst_joint.max(grad_check_multi(
                |ps| {
                    let n2 = net.with_params(ps.to_vec()).map_err(to_ad)?;
                    joint_loss(&n2, n2.params(), &batch, &episode, &cfg).map_err(to_ad)
                },
                &points_vec,
                FD_STEP,
            )?);
            worst_total = worst_total.max(grad_check_multi(
                |ps| {
                    let n2 = net.with_params(ps.to_vec()).map_err(to_ad)?;
                    let bundle =
                        omni_objective(&n2, &shadow, &batch, &episode, &cfg).map_err(to_ad)?;
                    Ok(bundle.o_total)
                },
                &points_vec,
                FD_STEP,
            )?);
        }
        let tol = if meta_alg == MetaAlg::Maml {
            SECOND_ORDER_TOL
        } else {
            FIRST_ORDER_TOL
        };
        results.push(outcome(
            &format!("joint_loss_{tag}"),
            "losses",
            points.min(40),
            worst_joint,
            tol,
        ));
        results.push(outcome(
            &format!("omni_objective_{tag}"),
            "losses",
            points.min(40),
            worst_total,
            tol,
        ));
    }

    Ok(results)
}

fn maml_checks(points: usize) -> Result<Vec<CheckOutcome>> {
    let mut rng = stream(0xC0FFEE, domain::INIT, 3);
    let mut results = Vec::new();

    // second-order meta-gradient through one inner step on a small network
    let mut worst = 0.0f64;
    for _ in 0..points.min(40) {
        let net = tri_flow_net(&mut rng, MetaAlg::Maml)?;
        let episode = regression_episode(&mut rng, 2, 2);
        let cfg = MamlCfg {
            inner_lr: 0.05,
            inner_steps: 1,
            first_order: false,
        };
        let mask = vec![true; net.params().len()];
        let points_vec: Vec<Tensor> = net.params().iter().map(|p| p.detach()).collect();
        worst = worst.max(grad_check_multi(
            |ps| {
                let n2 = net.with_params(ps.to_vec()).map_err(to_ad)?;
                maml_meta_loss(
                    n2.params(),
                    &mask,
                    |p| {
                        let out = n2.head_output(p, &episode.support_x, crate::net::FlowId::Meta)?;
                        crate::loss::supervised_pre_loss(&out, &episode.support_y)
                    },
                    |p| {
                        let out = n2.head_output(p, &episode.query_x, crate::net::FlowId::Meta)?;
                        crate::loss::supervised_pre_loss(&out, &episode.query_y)
                    },
                    &cfg,
                )
                .map_err(to_ad)
            },
            &points_vec,
            FD_STEP,
        )?);
    }
    results.push(outcome(
        "maml_meta_gradient",
        "maml",
        points.min(40),
        worst,
        SECOND_ORDER_TOL,
    ));

    // two inner steps keep the meta-gradient exact
    let mut worst = 0.0f64;
    for _ in 0..points.min(20) {
        let a = Tensor::constant(rand_vec(&mut rng, 3, -1.0, 1.0), vec![3])?;
        let b = Tensor::constant(rand_vec(&mut rng, 3, -1.0, 1.0), vec![3])?;
        let p = Tensor::constant(rand_vec(&mut rng, 3, -1.0, 1.0), vec![3])?;
        let cfg = MamlCfg {
            inner_lr: 0.1,
            inner_steps: 2,
            first_order: false,
        };
        worst = worst.max(grad_check(
            |th| {
                let adapted = maml_adapt(
                    std::slice::from_ref(th),
                    &[true],
                    |q: &[Tensor]| Ok(ops::mean(&ops::square(&ops::sub(&ops::tanh(&q[0])?, &a)?)?)?),
                    &cfg,
                    true,
                )
                .map_err(to_ad)?;
                ops::mean(&ops::square(&ops::sub(&adapted[0], &b)?)?)
            },
            &p,
            FD_STEP,
        )?);
    }
    results.push(outcome(
        "maml_two_inner_steps",
        "maml",
        points.min(20),
        worst,
        SECOND_ORDER_TOL,
    ));

    Ok(results)
}

use std::time::Instant;
use omni_core::net::{FlowId, OmniNet};
use omni_core::rng::{domain, stream};
use omni_core::tasks::navigation::sample_nav_task;
use omni_core::train::{collect_task_batch, NetRole, TaskFamily, TrainConfig};
use omni_core::loss::rl_surrogate;
use omni_autodiff::backward;

#[test]
#[ignore]
fn rl_phase_timing() {
    let cfg = TrainConfig::defaults(TaskFamily::Navigation);
    let mut rng = stream(0, domain::INIT, 0);
    let net = OmniNet::new(cfg.net_config(NetRole::TriFlow), &mut rng).unwrap();
    let params = net.params_vec();

    let mut trng = stream(0, domain::EPISODE, 0);
    let tasks: Vec<_> = (0..20).map(|_| sample_nav_task(&mut trng)).collect();

    let t0 = Instant::now();
    let batches: Vec<_> = tasks.iter().enumerate().map(|(i, task)| {
        let mut r = stream(0, domain::ROLLOUT, i as u64);
        collect_task_batch(&net, &params, FlowId::Pre, task, 20, 0.99, true, &mut r)
    }).collect();
    let steps: usize = batches.iter().map(|b| b.total_steps()).sum();
    println!("collect 20x20: {:.3}s ({} steps)", t0.elapsed().as_secs_f64(), steps);

    let t0 = Instant::now();
    let losses: Vec<_> = batches.iter().map(|b| rl_surrogate(&net, &params, FlowId::Pre, b).unwrap()).collect();
    println!("surrogate fwd x20: {:.3}s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let mut acc = losses[0].clone();
    for l in &losses[1..] { acc = omni_autodiff::ops::add(&acc, l).unwrap(); }
    let loss = omni_autodiff::ops::scale_const(&acc, 1.0 / 20.0).unwrap();
    let grads = backward(&loss, &params, false).unwrap();
    println!("backward: {:.3}s ({} grads)", t0.elapsed().as_secs_f64(), grads.len());

    let t0 = Instant::now();
    for b in &batches {
        let l = rl_surrogate(&net, &params, FlowId::Meta, b).unwrap();
        let mask = net.path_mask(FlowId::Meta);
        let wrt: Vec<_> = params.iter().zip(&mask).filter(|(_, &m)| m).map(|(t, _)| t.clone()).collect();
        let _g = backward(&l, &wrt, true).unwrap();
    }
    println!("per-task fwd+bwd(create_graph) x20: {:.3}s", t0.elapsed().as_secs_f64());
}

#[test]
#[ignore]
fn feature_forward_micro() {
    use omni_autodiff::Tensor;
    let cfg = TrainConfig::defaults(TaskFamily::Navigation);
    let mut rng = stream(0, domain::INIT, 0);
    let net = OmniNet::new(cfg.net_config(NetRole::TriFlow), &mut rng).unwrap();
    let params = net.params_vec();
    let t = 2000usize;
    let x = Tensor::constant(vec![0.1; t * 2], vec![t, 2]).unwrap();

    let t0 = Instant::now();
    let reps = 100;
    for _ in 0..reps {
        let f = net.features(&params, &x, FlowId::Pre).unwrap();
        std::hint::black_box(f.data()[0]);
    }
    let el = t0.elapsed().as_secs_f64();
    println!("features [2000x2] pre-flow: {:.3}ms/call", 1000.0 * el / reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps {
        let out = net.head_output(&params, &x, FlowId::Pre).unwrap();
        let ls = net.head_logstd(&params, FlowId::Pre).unwrap();
        let logp = omni_core::loss::gaussian_log_prob(&out, &ls, &x).unwrap();
        std::hint::black_box(logp.data()[0]);
    }
    let el = t0.elapsed().as_secs_f64();
    println!("full policy logp: {:.3}ms/call", 1000.0 * el / reps as f64);
}

#[test]
#[ignore]
fn op_micro() {
    use omni_autodiff::{ops, Tensor};
    let t = 2000usize;
    let a = Tensor::new(vec![0.1; t * 64], vec![t, 64], true).unwrap();
    let b = Tensor::new(vec![0.2; 64 * 64], vec![64, 64], true).unwrap();
    let bias = Tensor::new(vec![0.3; 64], vec![1, 64], true).unwrap();
    let reps = 200;

    let t0 = Instant::now();
    for _ in 0..reps { std::hint::black_box(ops::matmul(&a, &b).unwrap().data()[0]); }
    println!("matmul 2000x64.64x64: {:.3}ms", 1000.0 * t0.elapsed().as_secs_f64() / reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps { std::hint::black_box(ops::add(&a, &a).unwrap().data()[0]); }
    println!("add 2000x64: {:.3}ms", 1000.0 * t0.elapsed().as_secs_f64() / reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps { std::hint::black_box(ops::tanh(&a).unwrap().data()[0]); }
    println!("tanh 2000x64: {:.3}ms", 1000.0 * t0.elapsed().as_secs_f64() / reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps { std::hint::black_box(ops::broadcast_rows(&bias, t).unwrap().data()[0]); }
    println!("broadcast_rows 1x64 -> 2000x64: {:.3}ms", 1000.0 * t0.elapsed().as_secs_f64() / reps as f64);
}

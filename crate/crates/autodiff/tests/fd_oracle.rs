//! Finite-difference oracle for every primitive: analytic gradients must
//! match central differences at random points.

use omni_autodiff::ops;
use omni_autodiff::{backward, grad_check, grad_check_multi, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const POINTS: usize = 100;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn check_unary<F>(name: &str, rng: &mut ChaCha8Rng, lo: f64, hi: f64, f: F)
where
    F: Fn(&Tensor) -> omni_autodiff::Result<Tensor>,
{
    for trial in 0..POINTS {
        let n = rng.gen_range(1..6);
        let p = Tensor::constant(rand_vec(rng, n, lo, hi), vec![n]).unwrap();
        let err = grad_check(|x| ops::sum(&f(x)?), &p, H).unwrap();
        assert!(err < TOL, "{name} trial {trial}: rel err {err}");
    }
}

#[test]
fn unary_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    check_unary("tanh", &mut rng, -2.0, 2.0, ops::tanh);
    check_unary("exp", &mut rng, -2.0, 2.0, ops::exp);
    check_unary("log", &mut rng, 0.2, 3.0, ops::log);
    check_unary("sqrt", &mut rng, 0.2, 3.0, ops::sqrt);
    check_unary("square", &mut rng, -2.0, 2.0, ops::square);
    check_unary("negate", &mut rng, -2.0, 2.0, ops::negate);
    check_unary("power(3)", &mut rng, -2.0, 2.0, |x| ops::power(x, 3.0));
    check_unary("power(1.5)", &mut rng, 0.2, 3.0, |x| ops::power(x, 1.5));
    // keep samples away from the clamp kinks where the subgradient jumps
    check_unary("clamp inside", &mut rng, -0.9, 0.9, |x| {
        ops::clamp(x, -1.0, 1.0)
    });
    check_unary("clamp outside", &mut rng, 1.1, 3.0, |x| {
        ops::clamp(x, -1.0, 1.0)
    });
    check_unary("log_softmax", &mut rng, -2.0, 2.0, |x| {
        ops::pick_per_row(&ops::reshape(&ops::log_softmax(x)?, &[1, x.numel()])?, &[0])
    });
    check_unary("sum", &mut rng, -2.0, 2.0, |x| {
        ops::square(&ops::sum(x)?)
    });
    check_unary("mean", &mut rng, -2.0, 2.0, |x| {
        ops::square(&ops::mean(x)?)
    });
    check_unary("reshape", &mut rng, -2.0, 2.0, |x| {
        ops::square(&ops::reshape(x, &[x.numel(), 1])?)
    });
}

#[test]
fn binary_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..POINTS {
        let n = rng.gen_range(1..5);
        let a = Tensor::constant(rand_vec(&mut rng, n, -2.0, 2.0), vec![n]).unwrap();
        let b = Tensor::constant(rand_vec(&mut rng, n, -2.0, 2.0), vec![n]).unwrap();
        let s = Tensor::constant(rand_vec(&mut rng, 1, -2.0, 2.0), vec![]).unwrap();

        for (name, f) in [
            ("add", &(|x: &[Tensor]| ops::sum(&ops::square(&ops::add(&x[0], &x[1])?)?))
                as &dyn Fn(&[Tensor]) -> omni_autodiff::Result<Tensor>),
            ("sub", &|x: &[Tensor]| {
                ops::sum(&ops::square(&ops::sub(&x[0], &x[1])?)?)
            }),
            ("mul", &|x: &[Tensor]| ops::sum(&ops::mul(&x[0], &x[1])?)),
        ] {
            let err = grad_check_multi(f, &[a.clone(), b.clone()], H).unwrap();
            assert!(err < TOL, "{name} trial {trial}: rel err {err}");
        }

        let err = grad_check_multi(
            |x| ops::sum(&ops::square(&ops::scale(&x[0], &x[1])?)?),
            &[a.clone(), s.clone()],
            H,
        )
        .unwrap();
        assert!(err < TOL, "scale trial {trial}: rel err {err}");
        // scalar broadcast through add
        let err = grad_check_multi(
            |x| ops::sum(&ops::square(&ops::add(&x[0], &x[1])?)?),
            &[a, s],
            H,
        )
        .unwrap();
        assert!(err < TOL, "broadcast add trial {trial}: rel err {err}");
    }
}

#[test]
fn matrix_primitives_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..POINTS {
        let (m, k, n) = (
            rng.gen_range(1..4),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
        );
        let a = Tensor::constant(rand_vec(&mut rng, m * k, -1.5, 1.5), vec![m, k]).unwrap();
        let b = Tensor::constant(rand_vec(&mut rng, k * n, -1.5, 1.5), vec![k, n]).unwrap();
        let err = grad_check_multi(
            |x| ops::sum(&ops::square(&ops::matmul(&x[0], &x[1])?)?),
            &[a.clone(), b.clone()],
            H,
        )
        .unwrap();
        assert!(err < TOL, "matmul trial {trial}: rel err {err}");

        let err = grad_check(|x| ops::sum(&ops::square(&ops::transpose(x)?)?), &a, H).unwrap();
        assert!(err < TOL, "transpose trial {trial}: rel err {err}");

        let rows = rng.gen_range(2..5);
        let mtx = Tensor::constant(rand_vec(&mut rng, rows * 2, -1.5, 1.5), vec![rows, 2]).unwrap();
        let idx: Vec<usize> = (0..rng.gen_range(1..6))
            .map(|_| rng.gen_range(0..rows))
            .collect();
        let err = grad_check(
            |x| ops::sum(&ops::square(&ops::index_select(x, &idx)?)?),
            &mtx,
            H,
        )
        .unwrap();
        assert!(err < TOL, "index_select trial {trial}: rel err {err}");

        let top = Tensor::constant(rand_vec(&mut rng, 2 * 2, -1.5, 1.5), vec![2, 2]).unwrap();
        let bot = Tensor::constant(rand_vec(&mut rng, 2, -1.5, 1.5), vec![1, 2]).unwrap();
        let err = grad_check_multi(
            |x| ops::sum(&ops::square(&ops::concat_rows(x)?)?),
            &[top, bot],
            H,
        )
        .unwrap();
        assert!(err < TOL, "concat_rows trial {trial}: rel err {err}");

        let wide = Tensor::constant(rand_vec(&mut rng, 2 * 3, -1.5, 1.5), vec![2, 3]).unwrap();
        let weights = Tensor::constant(rand_vec(&mut rng, 2 * 3, -1.0, 1.0), vec![2, 3]).unwrap();
        let err = grad_check(
            |x| ops::sum(&ops::mul(&ops::log_softmax(x)?, &weights)?),
            &wide,
            H,
        )
        .unwrap();
        assert!(err < TOL, "log_softmax matrix trial {trial}: rel err {err}");
    }
}

#[test]
fn random_compositions_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for trial in 0..POINTS {
        let n = rng.gen_range(2..5);
        let p = Tensor::constant(rand_vec(&mut rng, n * n, -1.0, 1.0), vec![n, n]).unwrap();
        let err = grad_check(
            |x| {
                let h = ops::tanh(&ops::matmul(x, &ops::transpose(x)?)?)?;
                let e = ops::exp(&ops::scale_const(&h, 0.5)?)?;
                ops::mean(&ops::square(&ops::sub(&e, &Tensor::ones(e.shape()))?)?)
            },
            &p,
            H,
        )
        .unwrap();
        assert!(err < TOL, "composition trial {trial}: rel err {err}");
    }
}

#[test]
fn second_order_closed_form_and_fd() {
    // outer = sum((d/dx sum(x^2))^2) = sum(4 x^2); d outer / dx = 8x
    let x = Tensor::new(vec![1.0, 2.0], vec![2], true).unwrap();
    let inner = ops::sum(&ops::square(&x).unwrap()).unwrap();
    let g = backward(&inner, &[x.clone()], true).unwrap().remove(0);
    let outer = ops::sum(&ops::square(&g).unwrap()).unwrap();
    let gg = backward(&outer, &[x], false).unwrap().remove(0);
    assert_eq!(gg.data(), &[8.0, 16.0]);

    let p = Tensor::constant(vec![1.0, 2.0], vec![2]).unwrap();
    let err = grad_check(
        |x| {
            let inner = ops::sum(&ops::square(x)?)?;
            let g = backward(&inner, &[x.clone()], true)?.remove(0);
            ops::sum(&ops::square(&g)?)
        },
        &p,
        H,
    )
    .unwrap();
    assert!(err < 1e-4, "second-order FD err {err}");
}

#[test]
fn double_backward_consistency_on_random_instances() {
    // For g(x) = grad of L(x), the derivative of sum(g . v) must match the
    // finite-difference directional derivative (g(x+hv) - g(x-hv)) / 2h.
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for trial in 0..20 {
        let n = rng.gen_range(2..5);
        let point = rand_vec(&mut rng, n, -1.0, 1.0);
        let v = rand_vec(&mut rng, n, -1.0, 1.0);

        let loss_of = |x: &Tensor| -> omni_autodiff::Result<Tensor> {
            ops::sum(&ops::mul(&ops::tanh(x)?, &ops::square(x)?)?)
        };
        let grad_of = |data: &[f64]| -> Vec<f64> {
            let x = Tensor::new(data.to_vec(), vec![n], true).unwrap();
            let l = loss_of(&x).unwrap();
            backward(&l, &[x], false).unwrap().remove(0).data().to_vec()
        };

        // analytic: d/dx sum(g(x) . v)
        let x = Tensor::new(point.clone(), vec![n], true).unwrap();
        let l = loss_of(&x).unwrap();
        let g = backward(&l, &[x.clone()], true).unwrap().remove(0);
        let vt = Tensor::constant(v.clone(), vec![n]).unwrap();
        let gv = ops::sum(&ops::mul(&g, &vt).unwrap()).unwrap();
        let hvp = backward(&gv, &[x], false).unwrap().remove(0);

        let h = 1e-5;
        let plus: Vec<f64> = point.iter().zip(&v).map(|(p, d)| p + h * d).collect();
        let minus: Vec<f64> = point.iter().zip(&v).map(|(p, d)| p - h * d).collect();
        let gp = grad_of(&plus);
        let gm = grad_of(&minus);
        for i in 0..n {
            let fd = (gp[i] - gm[i]) / (2.0 * h);
            let a = hvp.data()[i];
            let rel = (a - fd).abs() / a.abs().max(1.0);
            assert!(rel < 1e-3, "trial {trial} coord {i}: rel err {rel}");
        }
    }
}

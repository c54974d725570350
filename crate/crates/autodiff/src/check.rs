//! Finite-difference gradient verification.

use crate::backward::backward;
use crate::error::{AdError, Result};
use crate::tensor::Tensor;

fn eval_scalar<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let out = f(point)?;
    if !out.is_scalar() {
        return Err(AdError::NonScalarLoss {
            shape: out.shape().to_vec(),
        });
    }
    let v = out.item();
    if !v.is_finite() {
        return Err(AdError::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Compare the analytic gradient of a scalar function against central
/// differences with step `h`. Returns the max over coordinates of
/// `|analytic - fd| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let x = Tensor::new(point.data().to_vec(), point.shape().to_vec(), true)?;
    let loss = f(&x)?;
    if !loss.is_scalar() {
        return Err(AdError::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    let analytic = backward(&loss, &[x], false)?.remove(0);

    // Perturbed evaluations run on fresh leaves so that functions which
    // differentiate internally (e.g. an inner adaptation step) stay valid.
    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += h;
        minus[i] -= h;
        let fp = eval_scalar(&f, &Tensor::new(plus, point.shape().to_vec(), true)?)?;
        let fm = eval_scalar(&f, &Tensor::new(minus, point.shape().to_vec(), true)?)?;
        let fd = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / a.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Finite-difference check of a scalar function of several tensors, probing
/// every coordinate of every input. Returns the worst relative error.
pub fn grad_check_multi<F>(f: F, points: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let leaves: Vec<Tensor> = points
        .iter()
        .map(|p| Tensor::new(p.data().to_vec(), p.shape().to_vec(), true))
        .collect::<Result<_>>()?;
    let loss = f(&leaves)?;
    if !loss.is_scalar() {
        return Err(AdError::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    let analytic = backward(&loss, &leaves, false)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let out = f(inputs)?;
        let v = out.item();
        if !v.is_finite() {
            return Err(AdError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    for (pi, p) in points.iter().enumerate() {
        for i in 0..p.numel() {
            let perturbed = |delta: f64| -> Result<Vec<Tensor>> {
                points
                    .iter()
                    .enumerate()
                    .map(|(qi, q)| {
                        let mut d = q.data().to_vec();
                        if qi == pi {
                            d[i] += delta;
                        }
                        Tensor::new(d, q.shape().to_vec(), true)
                    })
                    .collect()
            };
            let fp = eval(&perturbed(h)?)?;
            let fm = eval(&perturbed(-h)?)?;
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[pi].data()[i];
            let rel = (a - fd).abs() / a.abs().max(1.0);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

//! Reverse-mode differentiation over the recorded graph.

use std::collections::HashMap;

use crate::error::{AdError, Result};
use crate::ops::{add, vjp};
use crate::tensor::Tensor;

/// Gradients of a scalar `loss` with respect to each tensor in `wrt`.
///
/// With `create_graph` the returned gradients carry graph nodes of their own,
/// so they can be differentiated again (needed for meta-gradients through an
/// inner update). Without it the whole pass runs on detached values and the
/// results are plain tensors.
///
/// A `wrt` entry that the loss does not depend on gets a zero tensor of the
/// same shape. A `wrt` entry that does not require gradients at all is an
/// error.
pub fn backward(loss: &Tensor, wrt: &[Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if !loss.is_scalar() {
        return Err(AdError::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    for (i, w) in wrt.iter().enumerate() {
        if !w.requires_grad() {
            return Err(AdError::NonDifferentiable { index: i });
        }
    }

    // Collect the differentiable subgraph reachable from the loss. Ids are
    // allocated in creation order, so descending id is a reverse topological
    // order for a graph built on one thread.
    let mut reachable: HashMap<u64, Tensor> = HashMap::new();
    let mut stack = vec![loss.clone()];
    while let Some(t) = stack.pop() {
        if reachable.contains_key(&t.id()) {
            continue;
        }
        if let Some(node) = t.node() {
            for p in &node.parents {
                if p.requires_grad() {
                    stack.push(p.clone());
                }
            }
        }
        reachable.insert(t.id(), t);
    }

    let mut order: Vec<u64> = reachable.keys().copied().collect();
    order.sort_unstable_by(|a, b| b.cmp(a));

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    grads.insert(loss.id(), Tensor::ones(loss.shape()));

    for id in order {
        let t = &reachable[&id];
        let Some(node) = t.node() else { continue };
        let Some(g) = grads.get(&id) else { continue };

        let needs: Vec<bool> = node.parents.iter().map(Tensor::requires_grad).collect();
        let contributions = if create_graph {
            vjp(&node.op, &node.parents, t, g, &needs)?
        } else {
            // Detached copies keep the backward pass itself off the graph.
            let parents: Vec<Tensor> = node.parents.iter().map(Tensor::detach).collect();
            vjp(&node.op, &parents, &t.detach(), &g.detach(), &needs)?
        };

        for (parent, contribution) in node.parents.iter().zip(contributions) {
            let Some(c) = contribution else { continue };
            match grads.remove(&parent.id()) {
                Some(existing) => {
                    grads.insert(parent.id(), add(&existing, &c)?);
                }
                None => {
                    grads.insert(parent.id(), c);
                }
            }
        }
        if !t.same_id(loss) {
            grads.remove(&id);
        }
    }

    Ok(wrt
        .iter()
        .map(|w| grads.get(&w.id()).cloned().unwrap_or_else(|| Tensor::zeros_like(w)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{square, sum};

    #[test]
    fn grad_of_sum_of_squares() {
        let x = Tensor::leaf(vec![1.0, 2.0, 3.0], vec![3]).unwrap();
        let loss = sum(&square(&x).unwrap()).unwrap();
        let g = backward(&loss, &[x], false).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0, 6.0]);
        assert!(!g[0].requires_grad());
    }

    #[test]
    fn disconnected_target_gets_zeros() {
        let x = Tensor::leaf(vec![1.0, 2.0], vec![2]).unwrap();
        let y = Tensor::leaf(vec![5.0], vec![1]).unwrap();
        let loss = sum(&square(&x).unwrap()).unwrap();
        let g = backward(&loss, &[y], false).unwrap();
        assert_eq!(g[0].data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::leaf(vec![1.0, 2.0], vec![2]).unwrap();
        let loss = square(&x).unwrap();
        assert!(matches!(
            backward(&loss, &[x], false),
            Err(AdError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn non_differentiable_target_rejected() {
        let x = Tensor::leaf(vec![1.0], vec![1]).unwrap();
        let c = Tensor::constant(vec![1.0], vec![1]).unwrap();
        let loss = sum(&square(&x).unwrap()).unwrap();
        assert!(matches!(
            backward(&loss, &[c], false),
            Err(AdError::NonDifferentiable { .. })
        ));
    }

    #[test]
    fn second_order_through_create_graph() {
        // outer = sum((2x)^2) so d outer / dx = 8x
        let x = Tensor::leaf(vec![1.0, 2.0], vec![2]).unwrap();
        let inner = sum(&square(&x).unwrap()).unwrap();
        let g = backward(&inner, &[x.clone()], true).unwrap().remove(0);
        assert!(g.requires_grad());
        let outer = sum(&square(&g).unwrap()).unwrap();
        let gg = backward(&outer, &[x], false).unwrap();
        assert_eq!(gg[0].data(), &[8.0, 16.0]);
    }

    #[test]
    fn fanout_accumulates() {
        // loss = sum(x*x) + sum(x) -> grad 2x + 1
        let x = Tensor::leaf(vec![3.0, -1.0], vec![2]).unwrap();
        let a = sum(&square(&x).unwrap()).unwrap();
        let b = sum(&x).unwrap();
        let loss = add(&a, &b).unwrap();
        let g = backward(&loss, &[x], false).unwrap();
        assert_eq!(g[0].data(), &[7.0, -1.0]);
    }
}

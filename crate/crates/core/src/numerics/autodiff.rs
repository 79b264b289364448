use std::collections::{HashMap, HashSet};

use super::{NumericsError, Tensor};

/// Gradients of one root with respect to the tracked leaves beneath it.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.map.get(&t.id()).map(Vec::as_slice)
    }

    /// Gradient for `t`, zeros when the root does not depend on it.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()])
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Tracked nodes reachable from `root`, parents before children.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // (node, children-pushed?)
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !t.requires_grad() || !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = &t.inner.node {
            for p in node.parents.iter().rev() {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

fn check_root(root: &Tensor) -> Result<(), NumericsError> {
    if root.numel() != 1 {
        return Err(NumericsError::NonScalarRoot(root.shape().to_vec()));
    }
    Ok(())
}

/// Core reverse sweep. `relevant` prunes nodes whose gradient nobody needs.
fn sweep(root: &Tensor, order: &[Tensor], relevant: Option<&HashSet<u64>>) -> HashMap<u64, Vec<f64>> {
    let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
    let mut leaves = HashMap::new();
    pending.insert(root.id(), vec![1.0]);
    for t in order.iter().rev() {
        let Some(grad_out) = pending.remove(&t.id()) else {
            continue;
        };
        let Some(node) = &t.inner.node else {
            leaves.insert(t.id(), grad_out);
            continue;
        };
        let needs: Vec<bool> = node
            .parents
            .iter()
            .map(|p| p.requires_grad() && relevant.is_none_or(|r| r.contains(&p.id())))
            .collect();
        if !needs.iter().any(|&n| n) {
            continue;
        }
        let ctx = super::BackwardCtx {
            grad_out: &grad_out,
            output: t.data(),
            parents: &node.parents,
            needs: &needs,
        };
        let grads = (node.backward)(&ctx);
        debug_assert_eq!(grads.len(), node.parents.len());
        for ((p, g), need) in node.parents.iter().zip(grads).zip(&needs) {
            let (Some(g), true) = (g, *need) else { continue };
            debug_assert_eq!(g.len(), p.numel());
            match pending.get_mut(&p.id()) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    pending.insert(p.id(), g);
                }
            }
        }
    }
    leaves
}

/// Gradients of a scalar `root` with respect to every tracked leaf, without
/// touching the leaves' accumulators.
pub fn gradients(root: &Tensor) -> Result<Gradients, NumericsError> {
    check_root(root)?;
    let order = topo_order(root);
    Ok(Gradients {
        map: sweep(root, &order, None),
    })
}

/// Gradients of `root` with respect to `targets` only; the sweep skips every
/// branch that cannot reach a target.
pub fn gradients_wrt(root: &Tensor, targets: &[&Tensor]) -> Result<Vec<Vec<f64>>, NumericsError> {
    check_root(root)?;
    let order = topo_order(root);
    let mut relevant: HashSet<u64> = targets.iter().map(|t| t.id()).collect();
    for t in &order {
        if let Some(node) = &t.inner.node {
            if node.parents.iter().any(|p| relevant.contains(&p.id())) {
                relevant.insert(t.id());
            }
        }
    }
    let map = sweep(root, &order, Some(&relevant));
    Ok(targets
        .iter()
        .map(|t| map.get(&t.id()).cloned().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect())
}

impl Tensor {
    /// Accumulates `d self / d leaf` into every tracked leaf's gradient.
    pub fn backward(&self) -> Result<(), NumericsError> {
        check_root(self)?;
        let order = topo_order(self);
        let leaves = sweep(self, &order, None);
        for t in &order {
            if let Some(g) = leaves.get(&t.id()) {
                t.accumulate_grad(g);
            }
        }
        Ok(())
    }
}

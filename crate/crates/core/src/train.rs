//! Minibatch plumbing shared by every trainer: one graph per example,
//! gradients summed in example order.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::numerics::{sum_grads, Graph, ParamStore, TrainableSet, Var};

/// Runs `f` on each item, backpropagates its scalar loss and sums the
/// resulting parameter gradients. `f` also returns per-item statistics,
/// which are summed elementwise.
pub fn batch_gradients<T, F>(
    store: &ParamStore,
    trainable: &TrainableSet,
    items: &[T],
    f: F,
) -> Result<(BTreeMap<String, Vec<f64>>, Vec<f64>)>
where
    F: Fn(&mut Graph, &T) -> Result<(Var, Vec<f64>)>,
{
    let mut parts = Vec::with_capacity(items.len());
    let mut stats: Vec<f64> = Vec::new();
    for item in items {
        let mut g = Graph::with_params(store, Some(trainable));
        let (loss, s) = f(&mut g, item)?;
        if g.requires_grad(loss) {
            g.backward(loss)?;
        }
        parts.push(g.param_grads());
        if stats.is_empty() {
            stats = s;
        } else {
            stats.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        }
    }
    Ok((sum_grads(parts), stats))
}

/// Contiguous minibatches over a (pre-shuffled) index list.
pub fn chunks_of(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size.max(1))
}

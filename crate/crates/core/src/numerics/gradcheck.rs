use super::graph::{Graph, Var};
use super::params::{ParamStore, TrainableSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::invalid(format!(
            "grad_check: function must return a scalar, got {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Maximum relative error between reverse-mode gradients and central
/// differences, over every entry of every input:
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check: eps must be positive"));
    }
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            worst = worst.max(rel_error(analytic[j], (plus - minus) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

/// Same as [`grad_check`] but perturbs named entries of a parameter store;
/// `f` reads its parameters through [`Graph::param`].
pub fn grad_check_params<F>(store: &ParamStore, names: &TrainableSet, f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check: eps must be positive"));
    }
    let mut g = Graph::with_params(store, Some(names));
    let out = f(&mut g)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let grads: std::collections::BTreeMap<String, Vec<f64>> = g.param_grads().into_iter().collect();
    drop(g);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_params(s, None);
        let out = f(&mut g)?;
        scalar_of(&g, out)
    };

    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    for name in names.iter() {
        let n = store.get(name)?.numel();
        let zeros = vec![0.0; n];
        let analytic = grads.get(name).unwrap_or(&zeros);
        for j in 0..n {
            let orig = store.get(name)?.data()[j];
            work.get_mut(name)?.data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(name)?.data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(name)?.data_mut()[j] = orig;
            worst = worst.max(rel_error(analytic[j], (plus - minus) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

/// Outcome of checking one primitive.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Tolerance for primitives that are smooth but nonlinear.
pub const NONLINEAR_TOL: f64 = 1e-5;
/// Tolerance for primitives that are linear in their inputs.
pub const LINEAR_TOL: f64 = 1e-9;

/// Grad-checks every primitive op on seeded random inputs. Each op's output
/// is reduced with a random weighted sum so no gradient entry is trivially
/// zero. Central differences are exact for (multi)linear ops, so those use a
/// wide step that keeps rounding noise far below their tolerance.
pub fn primitive_suite(seed: u64) -> Result<Vec<OpCheck>> {
    use super::rng::Rng;
    use std::rc::Rc;

    let mut rng = Rng::new(seed);
    let mut out = Vec::new();

    // Weighted readout Σ w⊙y with a fixed random w of y's shape.
    fn readout(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let shape = g.shape(y).to_vec();
        let w = Rng::new(seed).uniform_tensor(&shape, -1.0, 1.0);
        let w = g.input(w);
        let p = g.mul(y, w)?;
        g.sum(p)
    }

    type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;
    let mut cases: Vec<(&'static str, f64, Vec<Tensor>, OpFn)> = Vec::new();
    let mut r = |shape: &[usize]| rng.uniform_tensor(shape, -1.5, 1.5);

    cases.push(("matmul", LINEAR_TOL, vec![r(&[3, 4]), r(&[4, 2])], Box::new(|g, v| g.matmul(v[0], v[1]))));
    cases.push(("matmul_nt", LINEAR_TOL, vec![r(&[3, 4]), r(&[5, 4])], Box::new(|g, v| g.matmul_nt(v[0], v[1]))));
    cases.push(("add", LINEAR_TOL, vec![r(&[3, 4]), r(&[3, 4])], Box::new(|g, v| g.add(v[0], v[1]))));
    cases.push(("add_row", LINEAR_TOL, vec![r(&[3, 4]), r(&[4])], Box::new(|g, v| g.add(v[0], v[1]))));
    cases.push(("sub", LINEAR_TOL, vec![r(&[3, 4]), r(&[3, 4])], Box::new(|g, v| g.sub(v[0], v[1]))));
    cases.push(("mul", NONLINEAR_TOL, vec![r(&[3, 4]), r(&[3, 4])], Box::new(|g, v| g.mul(v[0], v[1]))));
    cases.push(("mul_row", NONLINEAR_TOL, vec![r(&[3, 4]), r(&[1, 4])], Box::new(|g, v| g.mul(v[0], v[1]))));
    cases.push(("scale", LINEAR_TOL, vec![r(&[3, 4])], Box::new(|g, v| g.scale(v[0], -0.7))));
    cases.push(("silu", NONLINEAR_TOL, vec![r(&[3, 4])], Box::new(|g, v| g.silu(v[0]))));
    cases.push(("tanh", NONLINEAR_TOL, vec![r(&[3, 4])], Box::new(|g, v| g.tanh(v[0]))));
    cases.push(("transpose", LINEAR_TOL, vec![r(&[3, 4])], Box::new(|g, v| g.transpose(v[0]))));
    cases.push((
        "layer_norm",
        NONLINEAR_TOL,
        vec![r(&[3, 5]), r(&[5]), r(&[5])],
        Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
    ));
    cases.push(("softmax", NONLINEAR_TOL, vec![r(&[3, 5])], Box::new(|g, v| g.softmax(v[0]))));
    cases.push((
        "embedding",
        LINEAR_TOL,
        vec![r(&[6, 3])],
        Box::new(|g, v| g.embedding(v[0], &[4, 1, 4, 0, 5], Some(5))),
    ));
    cases.push((
        "concat_rows",
        LINEAR_TOL,
        vec![r(&[2, 3]), r(&[4, 3])],
        Box::new(|g, v| g.concat_rows(&[v[0], v[1]])),
    ));
    cases.push((
        "concat_cols",
        LINEAR_TOL,
        vec![r(&[3, 2]), r(&[3, 4])],
        Box::new(|g, v| g.concat_cols(&[v[0], v[1]])),
    ));
    cases.push(("slice_rows", LINEAR_TOL, vec![r(&[5, 3])], Box::new(|g, v| g.slice_rows(v[0], 1, 3))));
    cases.push(("slice_cols", LINEAR_TOL, vec![r(&[3, 5])], Box::new(|g, v| g.slice_cols(v[0], 2, 2))));
    cases.push(("repeat_rows", LINEAR_TOL, vec![r(&[1, 4])], Box::new(|g, v| g.repeat_rows(v[0], 3))));
    cases.push(("mean_all", LINEAR_TOL, vec![r(&[3, 4])], Box::new(|g, v| g.mean(v[0], None))));
    cases.push(("mean_axis0", LINEAR_TOL, vec![r(&[3, 4])], Box::new(|g, v| g.mean(v[0], Some(0)))));
    cases.push(("mean_axis1", LINEAR_TOL, vec![r(&[3, 4])], Box::new(|g, v| g.mean(v[0], Some(1)))));
    cases.push(("sum", LINEAR_TOL, vec![r(&[3, 4])], Box::new(|g, v| g.sum(v[0]))));
    cases.push((
        "masked_fill",
        LINEAR_TOL,
        vec![r(&[3, 3])],
        Box::new(|g, v| {
            let mask = Rc::new((0..9).map(|i| i % 3 > i / 3).collect());
            g.masked_fill(v[0], mask, 2.0)
        }),
    ));
    cases.push((
        "masked_softmax",
        NONLINEAR_TOL,
        vec![r(&[3, 3])],
        Box::new(|g, v| {
            let mask = Rc::new((0..9).map(|i| i % 3 > i / 3).collect());
            let m = g.masked_fill(v[0], mask, -1e30)?;
            g.softmax(m)
        }),
    ));
    cases.push((
        "cross_entropy",
        NONLINEAR_TOL,
        vec![r(&[4, 6])],
        Box::new(|g, v| g.cross_entropy(v[0], &[Some(1), None, Some(5), Some(0)], 1.0 / 3.0)),
    ));
    cases.push(("unfold", LINEAR_TOL, vec![r(&[9, 2])], Box::new(|g, v| g.unfold(v[0], 3, 2, 1))));
    cases.push((
        "depthwise_conv",
        NONLINEAR_TOL,
        vec![r(&[6, 3]), r(&[3, 3])],
        Box::new(|g, v| g.depthwise_conv(v[0], v[1])),
    ));

    for (i, (name, tol, inputs, f)) in cases.into_iter().enumerate() {
        let readout_seed = seed.wrapping_add(1000 + i as u64);
        let eps = if tol == LINEAR_TOL { 1e-3 } else { 1e-5 };
        let err = grad_check(
            |g, v| {
                let y = f(g, v)?;
                if g.value(y).numel() == 1 {
                    Ok(y)
                } else {
                    readout(g, y, readout_seed)
                }
            },
            &inputs,
            eps,
        )?;
        out.push(OpCheck {
            op: name,
            max_rel_error: err,
            tolerance: tol,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        for check in primitive_suite(11).unwrap() {
            assert!(check.passed(), "{check:?}");
        }
    }

    #[test]
    fn linear_map_is_exact() {
        let mut rng = crate::numerics::Rng::new(3);
        let w = rng.normal_tensor(&[4, 3], 1.0);
        let x = rng.normal_tensor(&[2, 4], 1.0);
        let err = grad_check(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                g.sum(y)
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_random_logits() {
        let mut rng = crate::numerics::Rng::new(5);
        let logits = rng.normal_tensor(&[5, 7], 2.0);
        let targets: Vec<Option<usize>> = (0..5).map(|i| Some((i * 3) % 7)).collect();
        let err = grad_check(|g, v| g.cross_entropy(v[0], &targets, 0.2), &[logits], 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn rejects_bad_eps() {
        assert!(grad_check(|g, v| g.sum(v[0]), &[Tensor::scalar(1.0)], 0.0).is_err());
    }
}

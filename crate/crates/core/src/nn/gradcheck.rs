//! Central finite-difference checks of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Shape(format!("gradcheck needs a scalar, got {:?}", t.shape)));
    }
    Ok(t.item())
}

/// Check `d f / d x` for a scalar function of one input tensor.
///
/// Returns `None` when the function records an active dropout: masks are
/// redrawn per evaluation, so the comparison would be meaningless.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<Option<f64>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<(Graph, Var, Var)> {
        let mut g = Graph::new(true, 0);
        let xv = g.input(t.clone());
        let y = f(&mut g, xv)?;
        Ok((g, xv, y))
    };
    let (g, xv, y) = eval(x)?;
    if g.is_stochastic() {
        return Ok(None);
    }
    scalar_of(&g, y)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(&x.shape));
    let mut worst = 0.0f64;
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data[i];
        xp.data[i] = orig + eps;
        let (gp, _, yp) = eval(&xp)?;
        xp.data[i] = orig - eps;
        let (gm, _, ym) = eval(&xp)?;
        xp.data[i] = orig;
        let numeric = (scalar_of(&gp, yp)? - scalar_of(&gm, ym)?) / (2.0 * eps);
        worst = worst.max(rel_err(analytic.data[i], numeric));
    }
    Ok(Some(worst))
}

/// Check gradients of a scalar loss with respect to every trainable
/// parameter in `store`. `stride` > 1 checks every `stride`-th coordinate of
/// each parameter (always including the first).
pub fn gradcheck_params<F>(
    store: &mut ParamStore,
    f: F,
    eps: f64,
    stride: usize,
) -> Result<Option<f64>>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<(Graph, Var)> {
        let mut g = Graph::new(true, 0);
        let y = f(&mut g, s)?;
        Ok((g, y))
    };
    let (g, y) = eval(store)?;
    if g.is_stochastic() {
        return Ok(None);
    }
    scalar_of(&g, y)?;
    let grads = g.backward(y)?;
    let mut worst = 0.0f64;
    for id in store.ids().collect::<Vec<_>>() {
        if !store.param(id).trainable {
            continue;
        }
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&store.get(id).shape));
        for i in (0..analytic.len()).step_by(stride.max(1)) {
            let orig = store.get(id).data[i];
            store.get_mut(id).data[i] = orig + eps;
            let (gp, yp) = eval(store)?;
            store.get_mut(id).data[i] = orig - eps;
            let (gm, ym) = eval(store)?;
            store.get_mut(id).data[i] = orig;
            let numeric = (scalar_of(&gp, yp)? - scalar_of(&gm, ym)?) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data[i], numeric));
        }
    }
    Ok(Some(worst))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_is_exact() {
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let err = gradcheck(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum_all(sq))
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap()
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn dropout_is_flagged() {
        let x = Tensor::full(&[4], 1.0);
        let r = gradcheck(
            |g, x| {
                let d = g.dropout(x, 0.5)?;
                Ok(g.sum_all(d))
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(r.is_none());
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // Sanity check of the checker itself: a deliberately broken op.
        let x = Tensor::new(vec![2], vec![0.3, -1.2]).unwrap();
        let err = gradcheck(
            |g, x| {
                let v = g.value(x).map(|v| v * v);
                let y = g.push(v, &[x], Box::new(|gy, _, _| vec![gy.clone()]));
                Ok(g.sum_all(y))
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap()
        .unwrap();
        assert!(err > 0.1);
    }
}

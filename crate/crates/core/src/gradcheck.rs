//! Central finite-difference gradient checking.

use crate::autograd::{Graph, Mode, Var};
use crate::error::Result;
use crate::params::ParamStore;

/// Denominator floor for the relative error. Central differences with a
/// step of 1e-5 on an O(1) loss carry roundoff near 1e-10, so gradients
/// below this floor are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR)
}

/// Compare the analytic gradient of `loss` with central differences of
/// step `h` for every entry of every trainable parameter the loss touches.
/// The loss is built in train mode and must be deterministic.
pub fn check_gradients<F>(store: &ParamStore, h: f64, loss: F) -> Result<GradCheck>
where
    F: for<'s> Fn(&mut Graph<'s>) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s, Mode::Train);
        let l = loss(&mut g)?;
        Ok(g.scalar(l))
    };
    let mut g = Graph::new(store, Mode::Train);
    let l = loss(&mut g)?;
    let grads = g.backward(l);
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    let mut work = store.clone();
    for (id, var) in g.bound_params() {
        let Some(analytic) = grads.wrt(var) else { continue };
        let analytic = analytic.as_standard_layout();
        let n = store.get(id).len();
        for k in 0..n {
            let orig = store.get(id).as_slice().expect("standard layout")[k];
            work.get_mut(id).as_slice_mut().expect("standard layout")[k] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).as_slice_mut().expect("standard layout")[k] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).as_slice_mut().expect("standard layout")[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.as_slice().expect("standard layout")[k];
            let e = rel_error(a, numeric);
            out.entries += 1;
            if e > out.max_rel_error || out.worst.is_none() {
                out.max_rel_error = e;
                out.worst = Some((store.name(id).to_string(), k));
                out.analytic = a;
                out.numeric = numeric;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use ndarray::array;

    #[test]
    fn quadratic_matches() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[0.5, -1.25]], ParamKind::Trainable);
        let r = check_gradients(&store, 1e-5, |g| {
            let w = g.param(id);
            let sq = g.mul(w, w);
            Ok(g.sum(sq))
        })
        .unwrap();
        assert_eq!(r.entries, 2);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }
}

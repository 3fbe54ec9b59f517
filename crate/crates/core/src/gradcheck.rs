//! Central finite-difference checks for [`Graph::backward`].

use alloc::string::String;
use alloc::vec::Vec;

use crate::{Graph, ParamId, ParamStore, Result, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index where `max_rel_err` occurred.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = libm::fabs(analytic).max(libm::fabs(numeric)).max(1e-12);
    libm::fabs(analytic - numeric) / denom
}

fn eval<F>(store: &ParamStore, build: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let root = build(&mut g)?;
    Ok(g.value(root).item())
}

/// Compares the analytic gradient of the scalar built by `build` against
/// `(f(p + h) − f(p − h)) / 2h` for every element of the selected
/// parameters (all parameters when `only` is `None`).
pub fn grad_check<F>(
    store: &mut ParamStore,
    only: Option<&[ParamId]>,
    h: f64,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<'_>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let root = build(&mut g)?;
        g.backward(root)?
    };
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.iter().map(|(id, _)| id).collect(),
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for id in ids {
        let n = store.get(id).value.len();
        let grad = analytic.param(id).cloned();
        for i in 0..n {
            let a = grad.as_ref().map_or(0.0, |g| g.data()[i]);
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(store, &mut build);
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(store, &mut build);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn identity_scalar() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(0.7)).unwrap();
        let r = grad_check(&mut store, None, 1e-5, |g| Ok(g.param(id))).unwrap();
        assert!(r.max_rel_err < 1e-10, "{r:?}");
        assert_eq!(r.checked, 1);
    }

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(3.0)).unwrap();
        let build = |g: &mut Graph<'_>| {
            let x = g.param(id);
            g.mul(x, x)
        };
        let grads = {
            let mut g = Graph::new(&store);
            let root = build(&mut g).unwrap();
            g.backward(root).unwrap()
        };
        assert_eq!(grads.param(id).unwrap().item(), 6.0);
        let r = grad_check(&mut store, None, 1e-5, build).unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
        // values restored
        assert_eq!(store.get(id).value.item(), 3.0);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu's subgradient at exactly 0 is 0, the central difference is 1/2
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(0.0)).unwrap();
        let r = grad_check(&mut store, None, 1e-5, |g| {
            let x = g.param(id);
            Ok(g.relu(x))
        })
        .unwrap();
        assert!(r.max_rel_err > 0.5);
        assert_eq!(r.worst, Some(("x".into(), 0)));
    }
}

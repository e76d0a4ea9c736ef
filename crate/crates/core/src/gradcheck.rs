//! Central finite-difference check of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    /// Smallest gradient magnitude compared in relative terms; see
    /// [`GradCheckOptions::tolerance`].
    pub floor: f64,
    /// Coordinates whose gradients were both below `floor`.
    pub below_floor: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per parameter; `None` checks all of them.
    pub per_param: Option<usize>,
    pub seed: u64,
    /// Target relative error. A central difference of a loss `L` carries
    /// roundoff near `2^-52 |L| / eps`, so gradients smaller than that
    /// resolution divided by the tolerance cannot be resolved to it; their
    /// errors are measured against that floor instead of their own size.
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            per_param: None,
            seed: 0,
            tolerance: 1e-4,
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient of `loss` (rebuilt from scratch on every call) with
/// central differences over the parameters in `subset`.
///
/// `tamper` lets callers corrupt the analytic gradient before comparison; it
/// exists so verification failures can be exercised end to end.
pub fn grad_check<F>(
    params: &ParamStore,
    subset: &[ParamId],
    options: &GradCheckOptions,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    grad_check_with(params, subset, options, loss, |_| {})
}

pub fn grad_check_with<F, T>(
    params: &ParamStore,
    subset: &[ParamId],
    options: &GradCheckOptions,
    loss: F,
    tamper: T,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
    T: FnOnce(&mut crate::tensor::Gradients),
{
    if !(options.eps > 0.0 && options.eps <= 1e-3) {
        return Err(Error::InvalidArgument(format!(
            "eps must lie in (0, 1e-3], got {}",
            options.eps
        )));
    }
    let mut analytic = {
        let mut g = Graph::new(params);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    tamper(&mut analytic);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        Ok(g.value(l).item())
    };

    if !(options.tolerance > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    let base = eval(params)?;
    if !base.is_finite() {
        return Err(Error::InvalidArgument(format!("loss is {base} before perturbation")));
    }
    let resolution = f64::EPSILON * base.abs().max(1.0) / options.eps;
    let floor = (resolution / options.tolerance).max(1e-8);

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
        floor,
        below_floor: 0,
    };
    for &id in subset {
        let n = params.get(id).len();
        let coords: Vec<usize> = match options.per_param {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + options.eps;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - options.eps;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteLoss {
                    param: params.name(id).to_string(),
                    index: i,
                });
            }
            let numeric = (plus - minus) / (2.0 * options.eps);
            let a = analytic.get(id).data()[i];
            let err = relative_error(a, numeric, floor);
            report.coordinates += 1;
            if a.abs().max(numeric.abs()) < floor {
                report.below_floor += 1;
            }
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::vector(vec![0.5, -1.5, 2.0])).unwrap();
        let ids = [a];
        let r = grad_check(&s, &ids, &GradCheckOptions::default(), |g| {
            let x = g.param(a);
            let sq = g.mul(x, x)?;
            let c = g.scale(sq, 3.0);
            Ok(g.sum(c))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.coordinates, 3);
    }

    #[test]
    fn tiny_gradients_are_judged_against_the_roundoff_floor() {
        // A large constant offset makes the central difference noisy; the
        // 1e-9 slope of `b` is below what it can resolve.
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::vector(vec![0.3])).unwrap();
        let b = s.add("b", Tensor::vector(vec![0.7])).unwrap();
        let r = grad_check(&s, &[a, b], &GradCheckOptions::default(), |g| {
            let x = g.param(a);
            let y = g.param(b);
            let big = g.constant(Tensor::vector(vec![1e3]));
            let x2 = g.mul(x, x)?;
            let yb = g.scale(y, 1e-9);
            let t = g.add(x2, yb)?;
            let t = g.add(t, big)?;
            Ok(g.sum(t))
        })
        .unwrap();
        assert!(r.floor > 1e-6);
        assert_eq!(r.below_floor, 1);
        assert!(r.passed(1e-4), "{r:?}");
    }

    #[test]
    fn empty_subset_reports_zero() {
        let s = ParamStore::new();
        let r = grad_check(&s, &[], &GradCheckOptions::default(), |g| {
            Ok(g.constant(Tensor::scalar(1.0)))
        })
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.worst.is_none());
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let s = ParamStore::new();
        let opts = GradCheckOptions {
            eps: 1e-2,
            ..Default::default()
        };
        let r = grad_check(&s, &[], &opts, |g| Ok(g.constant(Tensor::scalar(1.0))));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn non_finite_loss_reports_coordinate() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::vector(vec![1.0, 1e-6])).unwrap();
        let r = grad_check(&s, &[a], &GradCheckOptions::default(), |g| {
            let x = g.param(a);
            let lx = g.log(x);
            Ok(g.sum(lx))
        });
        // log(-1e-5) is NaN at index 1
        match r {
            Err(Error::NonFiniteLoss { param, index }) => {
                assert_eq!(param, "a");
                assert_eq!(index, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tampered_gradient_is_detected() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::vector(vec![0.5, 1.0])).unwrap();
        let r = grad_check_with(
            &s,
            &[a],
            &GradCheckOptions::default(),
            |g| {
                let x = g.param(a);
                let t = g.tanh(x);
                Ok(g.sum(t))
            },
            |grads| grads.get_mut(a).data_mut()[1] += 0.5,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.1);
        assert_eq!(r.worst, Some(("a".to_string(), 1)));
    }
}

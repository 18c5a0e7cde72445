use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Denominator floor for the relative error, so coordinates with a
/// vanishing gradient are judged by absolute error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare reverse-mode gradients of the scalar built by `build` against
/// central differences, for every coordinate of `store` or, when
/// `max_coords` is smaller than the total, a seeded random sample.
pub fn grad_check<F>(store: &ParamStore<f64>, eps: f64, max_coords: Option<usize>, seed: u64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = build(&mut g, s)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::Graph("grad_check needs a scalar output".into()));
        }
        Ok(v.item())
    };
    let mut g = Graph::new();
    let out = build(&mut g, store)?;
    let grads = g.backward(out, None)?.param_grads(&g);

    let coords: Vec<(String, usize)> = store.iter().flat_map(|(k, t)| (0..t.len()).map(move |i| (k.clone(), i))).collect();
    let chosen: Vec<usize> = match max_coords {
        Some(m) if m < coords.len() => {
            let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), coords.len(), m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..coords.len()).collect(),
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for ci in chosen {
        let (name, i) = &coords[ci];
        let orig = store.get(name).expect("coordinate from store").data()[*i];
        work.get_mut(name).expect("present").data_mut()[*i] = orig + eps;
        let fp = eval(&work)?;
        work.get_mut(name).expect("present").data_mut()[*i] = orig - eps;
        let fm = eval(&work)?;
        work.get_mut(name).expect("present").data_mut()[*i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let analytic = grads.get(name).map_or(0.0, |t| t.data()[*i]);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((name.clone(), *i));
        }
    }
    Ok(report)
}

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates checked per parameter tensor; `None` checks every element.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Negative control: corrupts the analytic gradient before comparing.
    pub inject_fault: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords: None,
            seed: 0,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub value: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.params.iter().all(|p| p.max_rel_error < tolerance)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences `(f(p + eps) - f(p - eps)) / (2 eps)`, one coordinate at a time.
pub fn grad_check<F>(store: &ParamStore<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&opts.eps) {
        return Err(Error::Config(format!("gradient-check step {} outside [1e-6, 1e-3]", opts.eps)));
    }
    let mut g = Graph::new();
    let root = f(&mut g, store)?;
    let value = g.value(root).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("checked function evaluates to {value}")));
    }
    let mut analytic = g.backward(root)?.params();
    drop(g);
    if opts.inject_fault {
        if let Some(first) = analytic.values_mut().next() {
            for v in first.data_mut() {
                *v = -*v + 1e-3;
            }
        }
    }

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let r = f(&mut g, s)?;
        let v = g.value(r).data()[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("perturbed evaluation gave {v}")))
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut params = Vec::new();
    for (name, grad) in &analytic {
        let numel = grad.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < numel => {
                let mut c = sample(&mut rng, numel, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..numel).collect(),
        };
        let mut check = ParamCheck {
            name: name.clone(),
            checked: coords.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &i in &coords {
            let orig = store.value(name)?.data()[i];
            work.value_mut(name).unwrap().data_mut()[i] = orig + opts.eps;
            let plus = eval(&work)?;
            work.value_mut(name).unwrap().data_mut()[i] = orig - opts.eps;
            let minus = eval(&work)?;
            work.value_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = grad.data()[i];
            let err = relative_error(a, numeric);
            if err >= check.max_rel_error {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport { value, params })
}

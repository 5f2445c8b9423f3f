//! Central finite-difference gradient checking.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Parameters with more scalars than this are checked on a random
    /// subset of this many coordinates.
    pub max_coords_per_param: usize,
    /// Relative errors use `max(|analytic|, |numeric|, abs_floor)` as the
    /// denominator so vanishing gradients compare absolutely.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-4,
            tol: 1e-4,
            max_coords_per_param: 100,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter holding the worst coordinate.
    pub worst_param: Option<String>,
    pub per_param: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn evaluate<F>(store: &ParamStore, loss_fn: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = loss_fn(&mut tape)?;
    let v = tape.value(loss);
    if v.shape() != [1, 1] {
        return Err(Error::Shape {
            op: "grad_check loss",
            lhs: v.shape().to_vec(),
            rhs: vec![1, 1],
        });
    }
    Ok(v[[0, 0]])
}

/// Compares the tape's analytic gradients with `(f(x+ε) - f(x-ε)) / 2ε`
/// coordinate by coordinate.
///
/// `loss_fn` must be deterministic: any randomness (e.g. Gumbel noise) has
/// to be drawn once outside and captured. Two evaluations at the same point
/// that disagree are reported as an error. Parameter values are restored
/// before returning.
pub fn grad_check<F>(
    store: &mut ParamStore,
    loss_fn: F,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let base = evaluate(store, &loss_fn)?;
    let again = evaluate(store, &loss_fn)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Numerical(format!(
            "loss is not deterministic: {base} vs {again}"
        )));
    }

    let analytic = {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut per_param = Vec::new();
    for pi in 0..store.len() {
        let id = store.iter().nth(pi).map(|(id, _)| id).expect("in range");
        let n = store.get(id).len();
        let coords: Vec<usize> = if n <= cfg.max_coords_per_param {
            (0..n).collect()
        } else {
            let mut c = index::sample(&mut rng, n, cfg.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        let grad = analytic.param(id);
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            checked: coords.len(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for &k in &coords {
            let cols = store.get(id).value.ncols();
            let (r, c) = (k / cols, k % cols);
            let orig = store.get(id).value[[r, c]];
            store.get_mut(id).value[[r, c]] = orig + cfg.eps;
            let plus = evaluate(store, &loss_fn);
            store.get_mut(id).value[[r, c]] = orig - cfg.eps;
            let minus = evaluate(store, &loss_fn);
            store.get_mut(id).value[[r, c]] = orig;
            let numeric = (plus? - minus?) / (2.0 * cfg.eps);
            let a = grad.map_or(0.0, |g| g[[r, c]]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
            if rel > check.max_rel_err || k == coords[0] {
                check.max_rel_err = rel;
                check.worst_index = k;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        per_param.push(check);
    }

    let worst = per_param
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err));
    Ok(GradCheckReport {
        max_rel_err: worst.map_or(0.0, |w| w.max_rel_err),
        worst_param: worst.map(|w| w.name.clone()),
        per_param,
        tol: cfg.tol,
    })
}

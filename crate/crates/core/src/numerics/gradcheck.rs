//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::param::{ParamId, ParamStore};
use super::tape::{RoutingLog, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub h: f64,
    /// Fraction of scalar parameters to check, in (0, 1].
    pub subset: f64,
    pub seed: u64,
    /// Negative control: corrupt the backward pass before comparing.
    pub inject_fault: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            subset: 1.0,
            seed: 0,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if !t.is_scalar() {
        return Err(Error::Contract(format!("objective must be scalar, got {:?}", t.shape())));
    }
    let x = t.data()[0];
    if !x.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {x}")));
    }
    Ok(x)
}

/// Compares analytic gradients of `f` against central differences
/// `(f(θ+h) - f(θ-h)) / 2h` for every (or a sampled subset of) scalar
/// parameter. Index tables chosen by the unperturbed pass are replayed in
/// the perturbed passes.
pub fn finite_difference_gradcheck<F>(
    f: F,
    store: &ParamStore,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var> + Sync,
{
    if !(opts.h > 0.0) {
        return Err(Error::Argument(format!("gradcheck step must be > 0, got {}", opts.h)));
    }
    if !(opts.subset > 0.0 && opts.subset <= 1.0) {
        return Err(Error::Argument(format!("subset fraction {} not in (0, 1]", opts.subset)));
    }

    let mut tape = Tape::recording();
    if opts.inject_fault {
        tape.inject_backward_fault();
    }
    let loss = f(&mut tape, store)?;
    scalar_of(&tape, loss)?;
    let grads = tape.backward(loss)?;
    let routing = tape.take_routing();

    let mut coords: Vec<(ParamId, usize)> = store
        .iter()
        .flat_map(|(id, p)| (0..p.value.numel()).map(move |i| (id, i)))
        .collect();
    if opts.subset < 1.0 {
        let keep = ((coords.len() as f64 * opts.subset).ceil() as usize).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut picked = sample(&mut rng, coords.len(), keep).into_vec();
        picked.sort_unstable();
        coords = picked.into_iter().map(|i| coords[i]).collect();
    }

    let eval = |s: &ParamStore, log: &RoutingLog| -> Result<f64> {
        let mut t = Tape::replaying(log.clone()).without_grad();
        let v = f(&mut t, s)?;
        scalar_of(&t, v)
    };

    let results: Vec<Result<(f64, f64)>> = coords
        .par_iter()
        .map_init(
            || store.clone(),
            |s, &(id, i)| {
                let orig = s.get(id).value.data()[i];
                s.get_mut(id).value.data_mut()[i] = orig + opts.h;
                let plus = eval(s, &routing);
                s.get_mut(id).value.data_mut()[i] = orig - opts.h;
                let minus = eval(s, &routing);
                s.get_mut(id).value.data_mut()[i] = orig;
                let numeric = (plus? - minus?) / (2.0 * opts.h);
                let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
                Ok((analytic, numeric))
            },
        )
        .collect();

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: coords.len(),
    };
    for (&(id, i), r) in coords.iter().zip(results) {
        let (a, n) = r?;
        let e = rel_error(a, n);
        if e > report.max_rel_error || report.worst_param.is_empty() {
            report.max_rel_error = e;
            report.worst_param = store.get(id).name.clone();
            report.worst_index = i;
            report.analytic = a;
            report.numeric = n;
        }
    }
    Ok(report)
}

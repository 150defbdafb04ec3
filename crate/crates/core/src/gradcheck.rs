//! Central-difference verification of tape adjoints.

use serde::Serialize;

use crate::error::{contract, Result};
use crate::param::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over checked elements.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements skipped because a perturbation crossed a ReLU kink.
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
        self.max_rel_error = self.max_rel_error.max(err);
        self.checked += 1;
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }
}

fn check_eps(eps: f64) -> Result<()> {
    contract!(
        (1e-7..=1e-4).contains(&eps),
        "grad_check step {eps} outside [1e-7, 1e-4]"
    );
    Ok(())
}

/// Checks the gradient of a scalar-valued `f` with respect to every element
/// of every input tensor.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    contract!(inputs.iter().all(Tensor::is_finite), "grad_check inputs must be finite");
    let eval = |xs: &[Tensor]| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.scalar(out), tape.relu_pattern()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base_pattern = tape.relu_pattern();
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + eps;
            let (plus, pp) = eval(&work)?;
            work[i].data_mut()[e] = orig - eps;
            let (minus, pm) = eval(&work)?;
            work[i].data_mut()[e] = orig;
            if pp != base_pattern || pm != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            report.record(analytic[i].data()[e], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}

/// Checks the gradient of a model loss with respect to stored parameters.
///
/// When `max_per_param` is set, at most that many elements of each parameter
/// are checked, chosen with `rng`.
pub fn grad_check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    eps: f64,
    max_per_param: Option<(usize, &mut RngStream)>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    check_eps(eps)?;
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let base_pattern = tape.relu_pattern();
    let grads = tape.backward(out)?;
    let pg = tape.param_grads(&grads, store.len());

    let mut sampler = max_per_param;
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for &id in ids {
        let n = store.value(id).numel();
        let elements: Vec<usize> = match sampler.as_mut() {
            Some((limit, rng)) if n > *limit => {
                let mut perm = rng.permutation(n);
                perm.truncate(*limit);
                perm
            }
            _ => (0..n).collect(),
        };
        for e in elements {
            let analytic = pg.get(id).map_or(0.0, |g| g.data()[e]);
            let orig = store.value(id).data()[e];
            let run = |x: f64, work: &mut ParamStore| -> Result<(f64, Vec<bool>)> {
                work.get_mut(id).value.data_mut()[e] = x;
                let mut t = Tape::new();
                let o = f(&mut t, work)?;
                Ok((t.scalar(o), t.relu_pattern()))
            };
            let (plus, pp) = run(orig + eps, &mut work)?;
            let (minus, pm) = run(orig - eps, &mut work)?;
            work.get_mut(id).value.data_mut()[e] = orig;
            if pp != base_pattern || pm != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            report.record(analytic, (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}

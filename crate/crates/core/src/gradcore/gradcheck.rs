//! Central finite-difference check of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Array, GradError, Graph, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference half step.
    pub step: f64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// Check at most this many elements per input, chosen by `seed`.
    pub max_elements: Option<usize>,
    pub seed: u64,
    /// Build graphs in training mode (dropout active, same mask every pass).
    pub training: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_elements: None,
            seed: 0,
            training: false,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element)` where the maximum was found.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    fn record(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64, floor: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let rel = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = rel;
            self.worst = Some((input, elem));
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

fn chosen(len: usize, opts: &GradCheckOptions, salt: usize) -> Vec<usize> {
    match opts.max_elements {
        Some(m) if m < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (salt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut idx = sample(&mut rng, len, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Compares the gradient of the scalar built by `f` with respect to each of
/// `inputs` against central differences.
pub fn grad_check<F>(f: F, inputs: &[Array<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport, GradError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, GradError>,
{
    let fresh = || if opts.training { Graph::training() } else { Graph::new() };
    let eval = |values: &[Array<f64>]| -> Result<f64, GradError> {
        let mut g = fresh();
        let vars: Vec<Var> = values.iter().map(|a| g.input(a.clone())).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(GradError::NonScalarLoss(g.shape(out).to_vec()));
        }
        Ok(g.value(out).item())
    };

    let mut g = fresh();
    let vars: Vec<Var> = inputs.iter().map(|a| g.input(a.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Array<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).cloned().expect("inputs require grad"))
        .collect();

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        for e in chosen(input.len(), opts, ii) {
            let x0 = input.data()[e];
            work[ii].data_mut()[e] = x0 + opts.step;
            let fp = eval(&work)?;
            work[ii].data_mut()[e] = x0 - opts.step;
            let fm = eval(&work)?;
            work[ii].data_mut()[e] = x0;
            let numeric = (fp - fm) / (2.0 * opts.step);
            report.record(ii, e, analytic[ii].data()[e], numeric, opts.floor);
        }
    }
    Ok(report)
}

/// Like [`grad_check`], but differentiates with respect to the named
/// parameters of `store`. Inputs in the report are indexed by position in
/// `names`.
pub fn grad_check_params<F>(
    f: F,
    store: &ParamStore<f64>,
    names: &[&str],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, GradError>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, GradError>,
{
    let fresh = || if opts.training { Graph::training() } else { Graph::new() };
    let mut g = fresh();
    let out = f(&mut g, store)?;
    g.backward(out)?;
    let mut scratch = store.clone();
    scratch.zero_grads();
    scratch.accumulate_grads(&g)?;

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for (ii, name) in names.iter().enumerate() {
        let analytic = scratch
            .grad(name)
            .ok_or_else(|| GradError::UnknownParam(name.to_string()))?
            .clone();
        for e in chosen(analytic.len(), opts, ii) {
            let x0 = store.value(name).expect("checked above").data()[e];
            let mut at = |x: f64| -> Result<f64, GradError> {
                work.value_mut(name).expect("checked above").data_mut()[e] = x;
                let mut g = fresh();
                let out = f(&mut g, &work)?;
                Ok(g.value(out).item())
            };
            let fp = at(x0 + opts.step)?;
            let fm = at(x0 - opts.step)?;
            at(x0)?;
            let numeric = (fp - fm) / (2.0 * opts.step);
            report.record(ii, e, analytic.data()[e], numeric, opts.floor);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Array::from_f64(&[5], &[0.3, -1.2, 2.0, 0.01, -0.7]).unwrap();
        let r = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 5);
    }

    #[test]
    fn wrong_backward_is_caught() {
        let x = Array::from_f64(&[3], &[0.5, 1.0, -2.0]).unwrap();
        let r = grad_check(
            |g, v| {
                // value x^3, claimed derivative 2x
                let y = g.map_elementwise(v[0], |a| a * a * a, |a| 2.0 * a)?;
                g.sum(y)
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passes(1e-4), "{r:?}");
    }
}

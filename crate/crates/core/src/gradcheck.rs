//! Central finite-difference gradient checking (64-bit only).

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateMismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
    pub failures: Vec<CoordinateMismatch>,
}

/// `|a − b| / max(1, |a|, |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Compares `analytic` against central differences of `f` around `theta`.
pub fn grad_check<F>(
    theta: &Tensor<f64>,
    analytic: &Tensor<f64>,
    mut f: F,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut probe = theta.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        pass: true,
        checked: 0,
        failures: Vec::new(),
    };
    for i in 0..theta.numel() {
        let orig = theta.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        record(
            &mut report,
            i,
            analytic.data()[i],
            (up - down) / (2.0 * step),
            tol,
        );
    }
    Ok(report)
}

fn record(report: &mut GradCheckReport, index: usize, analytic: f64, numeric: f64, tol: f64) {
    let rel_err = relative_error(analytic, numeric);
    report.checked += 1;
    report.max_rel_err = report.max_rel_err.max(rel_err);
    if !(rel_err <= tol) {
        report.pass = false;
        report.failures.push(CoordinateMismatch {
            index,
            analytic,
            numeric,
            rel_err,
        });
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Negative-control hook: perturbs the analytic gradient of the first
    /// parameter so the check must fail.
    pub corrupt_first: bool,
    /// Checks at most this many evenly strided coordinates per parameter.
    pub max_coords: Option<usize>,
}

impl Default for ParamCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tol: DEFAULT_TOL,
            corrupt_first: false,
            max_coords: None,
        }
    }
}

/// Checks the gradient of every stored parameter. `build` records the scalar
/// loss on a fresh graph from the current parameter values.
pub fn check_parameters<F>(
    store: &mut ParamStore<f64>,
    mut build: F,
    opts: &ParamCheckOptions,
) -> Result<Vec<(String, GradCheckReport)>>
where
    F: FnMut(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
{
    let (mut graph, loss) = build(store)?;
    let mut analytic = graph.backward(loss)?.for_store(store);
    if opts.corrupt_first {
        if let Some(g) = analytic.first_mut() {
            for v in g.data_mut() {
                *v = *v * 1.5 + 0.1;
            }
        }
    }
    let ids: Vec<_> = store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for (id, grad) in ids.into_iter().zip(analytic) {
        let mut report = GradCheckReport {
            max_rel_err: 0.0,
            pass: true,
            checked: 0,
            failures: Vec::new(),
        };
        let n = grad.numel();
        let k = opts.max_coords.map_or(n, |k| k.clamp(1, n));
        for i in (0..k).map(|j| j * n / k) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + opts.step;
            let up = eval(&mut build, store)?;
            store.get_mut(id).data_mut()[i] = orig - opts.step;
            let down = eval(&mut build, store)?;
            store.get_mut(id).data_mut()[i] = orig;
            record(
                &mut report,
                i,
                grad.data()[i],
                (up - down) / (2.0 * opts.step),
                opts.tol,
            );
        }
        out.push((store.name(id).to_string(), report));
    }
    Ok(out)
}

fn eval<F>(build: &mut F, store: &ParamStore<f64>) -> Result<f64>
where
    F: FnMut(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
{
    let (g, loss) = build(store)?;
    Ok(g.value(loss).item())
}

//! Central finite-difference gradient checking.

use std::fmt;

use crate::error::Result;
use crate::numerics::{Graph, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor so that gradients near zero are compared absolutely.
    pub floor: f64,
    /// Negative-control hook: adds `delta` to element `index` of the named
    /// parameter's analytic gradient before comparison.
    pub corrupt: Option<(String, usize, f64)>,
    /// An element whose central difference fails is counted as sitting on a
    /// kink, and excluded, when its two one-sided differences disagree by more
    /// than this and the analytic value matches one of them within it.
    pub kink_tol: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            corrupt: None,
            kink_tol: 1e-2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamError {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamError>,
    pub tol: f64,
    /// `(parameter, element)` pairs excluded as non-differentiable points.
    pub kinks: Vec<(String, usize)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamError> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.worst().map_or(0.0, |p| p.max_rel_err)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.per_param {
            writeln!(
                f,
                "{:<40} max_rel_err={:.3e} at [{}] analytic={:.6e} numeric={:.6e}",
                p.name, p.max_rel_err, p.worst_index, p.analytic, p.numeric
            )?;
        }
        match self.worst() {
            Some(w) => write!(
                f,
                "{} worst={} max_rel_err={:.3e} tol={:.1e}",
                if self.passed() { "PASS" } else { "FAIL" },
                w.name,
                w.max_rel_err,
                self.tol
            ),
            None => write!(f, "PASS (no parameters)"),
        }?;
        if !self.kinks.is_empty() {
            let list: Vec<String> = self.kinks.iter().map(|(n, i)| format!("{n}[{i}]")).collect();
            write!(f, "\nskipped {} element(s) at kinks: {}", self.kinks.len(), list.join(" "))?;
        }
        Ok(())
    }
}

/// Relative error with a denominator floor.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences for every element of every named parameter.
pub fn grad_check<F>(f: F, params: &[(String, Tensor)], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let center = g.value(loss).item();
    let mut kinks = Vec::new();

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let mut analytic = g
            .grad(vars[pi])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
        if let Some((target, idx, delta)) = &opts.corrupt {
            if target == name {
                analytic.data_mut()[*idx] += delta;
            }
        }
        let mut worst = ParamError {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..tensor.len() {
            let orig = values[pi].data()[i];
            values[pi].data_mut()[i] = orig + opts.h;
            let plus = eval(&values)?;
            values[pi].data_mut()[i] = orig - opts.h;
            let minus = eval(&values)?;
            values[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic.data()[i];
            let mut err = rel_err(a, numeric, opts.floor);
            if err >= opts.tol {
                let forward = (plus - center) / opts.h;
                let backward = (center - minus) / opts.h;
                let one_sided = rel_err(a, forward, opts.floor).min(rel_err(a, backward, opts.floor));
                if rel_err(forward, backward, opts.floor) > opts.kink_tol && one_sided < opts.kink_tol {
                    kinks.push((name.clone(), i));
                    err = 0.0;
                }
            }
            if err > worst.max_rel_err || i == 0 {
                worst = ParamError {
                    name: name.clone(),
                    max_rel_err: err,
                    worst_index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
        per_param.push(worst);
    }
    Ok(GradCheckReport {
        per_param,
        tol: opts.tol,
        kinks,
    })
}

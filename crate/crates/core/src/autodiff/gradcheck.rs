//! Central finite-difference verification for graph-built scalars.

use super::graph::{Arr, Graph, Var};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, element index)` of the worst disagreement.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Relative error with an absolute floor: `|a - n| / max(1, |a|, |n|)`.
pub fn max_rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Compare analytic gradients of `build` against central differences.
///
/// `build` must construct a scalar from leaves created for `inputs`, in
/// order. Every element of every input is perturbed by `±eps`.
pub fn finite_diff_check(
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
    inputs: &[Arr],
    eps: f64,
) -> GradCheckReport {
    let eval = |values: &[Arr]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|v| g.leaf(v.clone())).collect();
        let out = build(&mut g, &vars);
        g.scalar_value(out)
    };

    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
    let out = build(&mut g, &vars);
    assert_eq!(g.value(out).len(), 1, "gradcheck target must be scalar");
    let grads = g.backward(out);
    let analytic: Vec<Arr> = vars
        .iter()
        .zip(inputs)
        .map(|(v, inp)| {
            grads
                .wrt(*v)
                .cloned()
                .unwrap_or_else(|| Arr::zeros(inp.raw_dim()))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Arr> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.as_slice().unwrap()[j];
            work[i].as_slice_mut().unwrap()[j] = orig + eps;
            let plus = eval(&work);
            work[i].as_slice_mut().unwrap()[j] = orig - eps;
            let minus = eval(&work);
            work[i].as_slice_mut().unwrap()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].as_slice().unwrap()[j];
            let err = max_rel_err(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, j);
            }
        }
    }
    report
}

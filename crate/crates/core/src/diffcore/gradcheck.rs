use super::grid::Grid4;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Central-difference step used by the acceptance checks.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative error, so gradients that are zero up to
/// round-off do not produce spurious huge ratios.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per leaf, in the order the leaves were given.
    pub per_leaf: Vec<f64>,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.per_leaf.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare tape gradients of a scalar function against central finite
/// differences for every element of every leaf.
///
/// `f` receives a fresh tape and the leaf handles (in `leaves` order) and
/// must return a scalar. It is evaluated `1 + 2·Σ|leaf|` times.
pub fn grad_check<F>(f: F, leaves: &[Grid4], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves
        .iter()
        .map(|g| tape.leaf(g.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
        })
        .collect();

    let eval = |vals: &[Grid4]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = vals.iter().map(|g| t.leaf(g.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.scalar_value(o))
    };

    let mut work: Vec<Grid4> = leaves.to_vec();
    let mut per_leaf = Vec::with_capacity(leaves.len());
    for li in 0..leaves.len() {
        let mut worst: f64 = 0.0;
        for j in 0..leaves[li].len() {
            let orig = leaves[li].values()[j];
            work[li].values_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[li].values_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[li].values_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic[li][j], numeric));
        }
        per_leaf.push(worst);
    }
    Ok(GradCheckReport { per_leaf })
}

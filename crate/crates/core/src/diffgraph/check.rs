use super::{GraphError, Tape, Tensor, Var};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Relative error per leaf: `‖fd − ad‖₂ / max(‖fd‖₂, ‖ad‖₂)`.
    pub leaf_errors: Vec<f64>,
    pub max_rel_error: f64,
    /// Smallest |input| at any relu of the analytic pass; a kink closer than
    /// `eps` invalidates the finite differences.
    pub relu_margin: f64,
    pub passed: bool,
}

/// Relative error between two gradient vectors; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Checks `backward` against central finite differences
/// `(f(x+eps) − f(x−eps)) / 2eps`, coordinate by coordinate over every leaf.
pub fn gradient_check<F>(
    f: F,
    leaves: &[Tensor],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, GraphError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, GraphError>,
{
    assert!(eps > 0.0, "eps must be positive");
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let relu_margin = tape.relu_margin();

    let eval = |inputs: &[Tensor]| -> Result<f64, GraphError> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&tape, &vars)?;
        let value = root.value().item();
        Ok(value)
    };

    let mut work: Vec<Tensor> = leaves.to_vec();
    let mut leaf_errors = Vec::with_capacity(leaves.len());
    for (li, leaf) in leaves.iter().enumerate() {
        let mut numeric = vec![0.0; leaf.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x = leaf.data()[i];
            work[li].data_mut()[i] = x + eps;
            let plus = eval(&work)?;
            work[li].data_mut()[i] = x - eps;
            let minus = eval(&work)?;
            work[li].data_mut()[i] = x;
            *slot = (plus - minus) / (2.0 * eps);
        }
        leaf_errors.push(relative_error(&numeric, analytic[li].data()));
    }
    let max_rel_error = leaf_errors.iter().fold(0.0_f64, |m, &e| m.max(e));
    Ok(GradCheckReport {
        leaf_errors,
        max_rel_error,
        relu_margin,
        passed: max_rel_error < tol,
    })
}

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing tape gradients against central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over coordinates of `|a - n| / (|a| + |n| + 1e-12)`.
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn eval<F>(f: &F, points: &[Tensor]) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.constant(p.clone())).collect();
    let y = f(&tape, &vars)?;
    let v = tape.value(y);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Checks a scalar function of one tensor. See [`grad_check_many`].
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(point), eps)
}

/// Compares analytic gradients of `f` with respect to every input against
/// `(f(x + eps e) - f(x - eps e)) / 2 eps`.
///
/// `f` must be deterministic; a function whose value differs between two
/// evaluations at the same point is reported as a failed check.
pub fn grad_check_many<F>(f: F, points: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let y = f(&tape, &vars)?;
    let y0 = {
        let v = tape.value(y);
        if v.len() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        v.item()
    };
    let grads = tape.backward(y)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| {
            grads
                .get(v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; p.len()])
        })
        .collect();

    let y1 = eval(&f, points)?;
    if y1.to_bits() != y0.to_bits() {
        return Err(Error::GradCheck(format!(
            "function is not deterministic: {y0} then {y1} at the same point"
        )));
    }

    let mut numeric = Vec::with_capacity(points.len());
    let mut work: Vec<Tensor> = points.to_vec();
    for (pi, p) in points.iter().enumerate() {
        let mut num = vec![0.0; p.len()];
        for (k, slot) in num.iter_mut().enumerate() {
            let orig = p.data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let fp = eval(&f, &work)?;
            work[pi].data_mut()[k] = orig - eps;
            let fm = eval(&f, &work)?;
            work[pi].data_mut()[k] = orig;
            *slot = (fp - fm) / (2.0 * eps);
        }
        numeric.push(num);
    }

    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    for (pi, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (k, (x, y)) in a.iter().zip(n).enumerate() {
            let e = (x - y).abs() / (x.abs() + y.abs() + 1e-12);
            if e > max_rel_error {
                max_rel_error = e;
                worst = (pi, k);
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}

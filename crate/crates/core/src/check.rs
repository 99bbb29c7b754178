//! Finite-difference oracles: first-order gradient checking and dense
//! second-order matrices built from central differences of analytic
//! gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default cap on the parameter count for dense Hessians.
pub const HESSIAN_CAP_DEFAULT: usize = 4000;

/// A scalar loss built from taped operations over a list of parameter vars.
pub trait LossFn {
    fn eval(&self, tape: &mut Tape, params: &[Var]) -> Result<Var>;
}

impl<F> LossFn for F
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    fn eval(&self, tape: &mut Tape, params: &[Var]) -> Result<Var> {
        self(tape, params)
    }
}

fn eval_value(f: &dyn LossFn, params: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(false)))
        .collect();
    f.eval(&mut tape, &vars)?.value().item()
}

/// Analytic gradients of `f` at `params`, one tensor per parameter.
pub fn analytic_gradients(f: &dyn LossFn, params: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f.eval(&mut tape, &vars)?;
    let grads = tape.backward(&loss)?;
    vars.iter()
        .map(|v| {
            grads
                .get(v)
                .cloned()
                .ok_or_else(|| Error::Contract("missing gradient for leaf".into()))
        })
        .collect()
}

/// Compare analytic gradients against central finite differences.
///
/// Returns the maximum over checked coordinates of
/// |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
/// When the total coordinate count exceeds `max_coords`, a seeded subset of
/// coordinates is checked.
pub fn grad_check(
    f: &dyn LossFn,
    params: &[Tensor],
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::Contract("grad_check: eps must be > 0".into()));
    }
    let base_a = eval_value(f, params)?;
    let base_b = eval_value(f, params)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::Determinism(
            "loss function returned different values for identical inputs".into(),
        ));
    }

    let analytic = analytic_gradients(f, params)?;

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.numel() {
            coords.push((pi, ci));
        }
    }
    if coords.len() > max_coords {
        let mut rng = crate::rng::stream(seed, "grad-check", 0, 0);
        let picks = crate::rng::sample_without_replacement(&mut rng, coords.len(), max_coords);
        coords = picks.into_iter().map(|i| coords[i]).collect();
    }

    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, ci) in coords {
        let orig = work[pi].data()[ci];
        work[pi].data_mut()[ci] = orig + eps;
        let plus = eval_value(f, &work)?;
        work[pi].data_mut()[ci] = orig - eps;
        let minus = eval_value(f, &work)?;
        work[pi].data_mut()[ci] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[pi].data()[ci];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

/// A symmetrized dense Hessian plus its pre-symmetrization defect.
#[derive(Debug, Clone)]
pub struct DenseHessian {
    pub n: usize,
    /// Row-major symmetrized matrix (H + H^T)/2.
    pub matrix: Vec<f64>,
    /// max|H - H^T| / max|H| before symmetrization (0 when H is all zero).
    pub asymmetry: f64,
}

impl DenseHessian {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.n + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.at(i, i)).sum()
    }
}

/// Dense Hessian via central finite differences of an analytic gradient
/// function. `grad_fn` must return the gradient at the given flat point,
/// with the same element count.
pub fn hessian_dense<G>(mut grad_fn: G, at: &Tensor, eps: f64, cap: usize) -> Result<DenseHessian>
where
    G: FnMut(&Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("hessian_dense: eps must be > 0".into()));
    }
    let n = at.numel();
    if n > cap {
        return Err(Error::Capacity { count: n, cap });
    }
    let mut raw = vec![0.0; n * n];
    let mut point = at.clone();
    for i in 0..n {
        let orig = point.data()[i];
        point.data_mut()[i] = orig + eps;
        let plus = grad_fn(&point)?;
        point.data_mut()[i] = orig - eps;
        let minus = grad_fn(&point)?;
        point.data_mut()[i] = orig;
        if plus.numel() != n || minus.numel() != n {
            return Err(Error::Contract(
                "hessian_dense: gradient size does not match parameter size".into(),
            ));
        }
        for j in 0..n {
            raw[i * n + j] = (plus.data()[j] - minus.data()[j]) / (2.0 * eps);
        }
    }

    let mut max_abs = 0.0f64;
    let mut max_defect = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            max_abs = max_abs.max(raw[i * n + j].abs());
            max_defect = max_defect.max((raw[i * n + j] - raw[j * n + i]).abs());
        }
    }
    let asymmetry = if max_abs > 0.0 { max_defect / max_abs } else { 0.0 };

    let mut matrix = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            matrix[i * n + j] = 0.5 * (raw[i * n + j] + raw[j * n + i]);
        }
    }
    Ok(DenseHessian { n, matrix, asymmetry })
}

/// Dense Hessian of a taped scalar loss over one flat parameter tensor.
pub fn hessian_of_loss<F>(f: F, at: &Tensor, eps: f64, cap: usize) -> Result<DenseHessian>
where
    F: Fn(&mut Tape, &Var) -> Result<Var>,
{
    hessian_dense(
        |point: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.leaf(point.clone().with_requires_grad(true));
            let loss = f(&mut tape, &v)?;
            let grads = tape.backward(&loss)?;
            grads
                .get(&v)
                .cloned()
                .ok_or_else(|| Error::Contract("missing gradient for flat parameter".into()))
        },
        at,
        eps,
        cap,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    /// loss = sum(c * p * p) / 2 for a fixed coefficient vector c.
    fn weighted_quadratic(c: Vec<f64>) -> impl Fn(&mut Tape, &[Var]) -> Result<Var> {
        move |tape: &mut Tape, params: &[Var]| {
            let coef = tape.leaf(Tensor::new(vec![c.len()], c.clone())?);
            let sq = tape.mul_elem(&params[0], &params[0])?;
            let w = tape.mul_elem(&coef, &sq)?;
            let s = tape.sum_all(&w)?;
            tape.scalar_mul(&s, 0.5)
        }
    }

    #[test]
    fn grad_check_exact_for_quadratics() {
        let params = [Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap()];
        for eps in [1e-6, 1e-5, 1e-4] {
            let f = weighted_quadratic(vec![1.0, 1.0, 1.0]);
            let err = grad_check(&f, &params, eps, 64, 0).unwrap();
            assert!(err <= 1e-8, "eps={eps}: err={err}");
        }
    }

    #[test]
    fn grad_check_two_layer_relu_network() {
        // 64 sampled coordinates of a 2-layer relu network stay within 1e-5
        let mut rng = crate::rng::stream(11, "gc-relu", 0, 0);
        let w1 = Tensor::uniform(&[6, 10], -0.4, 0.4, &mut rng);
        let w2 = Tensor::uniform(&[10, 3], -0.4, 0.4, &mut rng);
        let x = Tensor::uniform(&[8, 6], -1.0, 1.0, &mut rng);
        let f = move |tape: &mut Tape, params: &[Var]| {
            let xv = tape.leaf(x.clone());
            let h = tape.matmul(&xv, &params[0])?;
            let h = tape.relu(&h)?;
            let logits = tape.matmul(&h, &params[1])?;
            crate::nn::smoothed_cross_entropy(tape, &logits, &[0, 1, 2, 0, 1, 2, 0, 1], 0.1)
        };
        let err = grad_check(&f, &[w1, w2], 1e-5, 64, 11).unwrap();
        assert!(err <= 1e-5, "max relative error {err}");
    }

    #[test]
    fn grad_check_rejects_zero_eps() {
        let params = [Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()];
        let f = weighted_quadratic(vec![1.0, 1.0]);
        assert!(matches!(
            grad_check(&f, &params, 0.0, 8, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn hessian_of_diagonal_quadratic() {
        // loss = (3x^2 + y^2)/2 -> H = diag(3, 1)
        let f = |tape: &mut Tape, p: &Var| {
            let coef = tape.leaf(Tensor::new(vec![2], vec![3.0, 1.0])?);
            let sq = tape.mul_elem(p, p)?;
            let w = tape.mul_elem(&coef, &sq)?;
            let s = tape.sum_all(&w)?;
            tape.scalar_mul(&s, 0.5)
        };
        let at = Tensor::new(vec![2], vec![0.7, -0.2]).unwrap();
        let h = hessian_of_loss(f, &at, 1e-4, HESSIAN_CAP_DEFAULT).unwrap();
        assert!((h.at(0, 0) - 3.0).abs() < 1e-6);
        assert!((h.at(1, 1) - 1.0).abs() < 1e-6);
        assert!(h.at(0, 1).abs() < 1e-6);
        assert!(h.asymmetry < 1e-9);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            /// The dense finite-difference Hessian of a quadratic form
            /// recovers its coefficient matrix within 1e-6 absolute.
            #[test]
            fn quadratic_form_recovers_coefficients(
                raw in proptest::collection::vec(-2.0f64..2.0, 9),
                at in proptest::collection::vec(-1.0f64..1.0, 3),
            ) {
                let n = 3usize;
                // symmetrize the drawn matrix
                let mut coef = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        coef[i * n + j] = 0.5 * (raw[i * n + j] + raw[j * n + i]);
                    }
                }
                let coef_t = Tensor::new(vec![n, n], coef.clone()).unwrap();
                let f = move |tape: &mut Tape, p: &Var| {
                    // 0.5 * row(p) A col(p) via matmul + elementwise ops
                    let a = tape.leaf(coef_t.clone());
                    let row = tape.reshape(p, vec![1, n])?;
                    let ap = tape.matmul(&row, &a)?;
                    let prod = tape.mul_elem(&ap, &row)?;
                    let s = tape.sum_all(&prod)?;
                    tape.scalar_mul(&s, 0.5)
                };
                let h = hessian_of_loss(f, &Tensor::new(vec![n], at).unwrap(), 1e-4, 100).unwrap();
                for i in 0..n {
                    for j in 0..n {
                        prop_assert!((h.at(i, j) - coef[i * n + j]).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn hessian_cap_enforced() {
        let at = Tensor::zeros(&[10]);
        let err = hessian_dense(|p| Ok(p.clone()), &at, 1e-4, 4).unwrap_err();
        assert!(matches!(err, Error::Capacity { count: 10, cap: 4 }));
        assert!(err.to_string().contains("subsample"));
    }
}

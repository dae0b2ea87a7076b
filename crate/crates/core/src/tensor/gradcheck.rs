use super::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Largest disagreement between analytic and central-difference gradients
/// of a scalar function, over every element of every input.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Input index and flat element index of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error, falling back to absolute error when both values are
/// below `1e-7`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Compares the gradient of `f` at `inputs` (values only; fresh leaves are
/// built from them) with central differences of step `h`.
pub fn check_gradients(inputs: &[Tensor], h: f64, f: impl Fn(&[Tensor]) -> Result<Tensor>) -> Result<GradCheck> {
    let leaves = inputs
        .iter()
        .map(|t| Tensor::leaf(t.shape(), t.data().to_vec(), true))
        .collect::<Result<Vec<_>>>()?;
    let y = f(&leaves)?;
    if y.numel() != 1 {
        return Err(Error::NonScalarBackward(y.shape().to_vec()));
    }
    y.backward()?;
    let eval = |i: usize, k: usize, delta: f64| -> Result<f64> {
        no_grad(|| {
            let moved = inputs
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    let mut d = t.data().to_vec();
                    if j == i {
                        d[k] += delta;
                    }
                    Tensor::constant(t.shape(), d)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(f(&moved)?.item())
        })
    };
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    for (i, leaf) in leaves.iter().enumerate() {
        let g = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        for (k, &a) in g.iter().enumerate() {
            let n = (eval(i, k, h)? - eval(i, k, -h)?) / (2.0 * h);
            let e = rel_err(a, n);
            if e >= out.max_rel_err {
                out = GradCheck {
                    max_rel_err: e,
                    worst: (i, k),
                    analytic: a,
                    numeric: n,
                };
            }
        }
    }
    Ok(out)
}

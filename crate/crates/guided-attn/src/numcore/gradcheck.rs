//! Central finite-difference validation of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::tape::{backward, Tape};
use crate::numcore::tensor::{Precision, Tensor};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates sampled per parameter tensor (all if fewer).
    pub max_coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_tensor: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Compare reverse-mode gradients of a deterministic scalar function against
/// central finite differences in float64.
///
/// `params` are (shape, values) pairs; `f` receives one tensor per entry
/// (tracked for the analytic pass, plain constants for the difference
/// evaluations). Relative error per coordinate is
/// `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)`; the report carries the max
/// over all sampled coordinates. Parameters that the loss never touches get
/// an exact zero on both routes and therefore pass.
pub fn grad_check<F>(
    f: F,
    params: &[(Vec<usize>, Vec<f64>)],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let tensors: Vec<Tensor> = params
            .iter()
            .zip(values)
            .map(|((shape, _), v)| Tensor::constant(shape.clone(), v.clone(), Precision::F64))
            .collect();
        let out = f(&tensors)?;
        if out.numel() != 1 {
            return Err(Error::Usage(format!(
                "grad_check: function output must be scalar, got {:?}",
                out.shape()
            )));
        }
        Ok(out.item())
    };

    let base_values: Vec<Vec<f64>> = params.iter().map(|(_, v)| v.clone()).collect();
    let first = eval(&base_values)?;
    let second = eval(&base_values)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Numerical(format!(
            "grad_check: function is not deterministic ({} vs {})",
            first, second
        )));
    }

    // analytic pass
    let tape = Tape::new();
    let leaves: Vec<Tensor> = params
        .iter()
        .map(|(shape, v)| tape.leaf(shape.clone(), v.clone(), Precision::F64))
        .collect();
    let loss = f(&leaves)?;
    backward(&loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (pi, (_, base)) in params.iter().enumerate() {
        let n = base.len();
        let coords: Vec<usize> = if n <= opts.max_coords_per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.max_coords_per_tensor).into_vec()
        };
        for ci in coords {
            let mut plus = base_values.clone();
            plus[pi][ci] += opts.eps;
            let lp = eval(&plus)?;
            let mut minus = base_values.clone();
            minus[pi][ci] -= opts.eps;
            let lm = eval(&minus)?;
            let g_fd = (lp - lm) / (2.0 * opts.eps);
            let g_ad = analytic[pi][ci];
            let denom = g_ad.abs().max(g_fd.abs()).max(1e-8);
            max_rel = max_rel.max((g_ad - g_fd).abs() / denom);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        coords_checked: checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{add, gelu, layer_norm, matmul, mean_all, mul, softmax, sum_all};

    #[test]
    fn quadratic_loss_is_nearly_exact() {
        // f(x) = sum(x^2): central differences are exact up to roundoff
        let f = |xs: &[Tensor]| Ok(sum_all(&mul(&xs[0], &xs[0])));
        let params = vec![(vec![5], vec![0.3, -1.2, 2.5, 0.0, 0.7])];
        let report = grad_check(f, &params, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_err <= 1e-9, "err {}", report.max_rel_err);
    }

    #[test]
    fn composed_nonlinear_graph_passes() {
        let f = |xs: &[Tensor]| {
            let h = gelu(&matmul(&xs[0], &xs[1]));
            let ln = layer_norm(&h, &xs[2], &xs[3], 1e-5);
            let s = softmax(&ln, 1)?;
            Ok(mean_all(&mul(&s, &add(&h, &h))))
        };
        let params = vec![
            (vec![2, 3], vec![0.5, -0.3, 0.8, 0.1, -0.6, 0.4]),
            (vec![3, 4], (0..12).map(|i| (i as f64) * 0.13 - 0.7).collect()),
            (vec![4], vec![1.1, 0.9, 1.0, 1.2]),
            (vec![4], vec![0.0, 0.1, -0.1, 0.05]),
        ];
        let report = grad_check(f, &params, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_err <= 1e-6, "err {}", report.max_rel_err);
    }

    #[test]
    fn unused_parameter_is_skipped_cleanly() {
        let f = |xs: &[Tensor]| Ok(sum_all(&xs[0]));
        let params = vec![(vec![2], vec![1.0, 2.0]), (vec![3], vec![4.0, 5.0, 6.0])];
        let report = grad_check(f, &params, &GradCheckOptions::default()).unwrap();
        // second tensor has an exact zero on both routes; the first is a
        // linear map so only FD roundoff remains
        assert!(report.max_rel_err <= 1e-9, "err {}", report.max_rel_err);
    }

    #[test]
    fn non_deterministic_function_rejected() {
        use std::cell::Cell;
        let counter = Cell::new(0.0f64);
        let f = |xs: &[Tensor]| {
            counter.set(counter.get() + 1.0);
            Ok(crate::numcore::scale(&sum_all(&xs[0]), counter.get()))
        };
        let params = vec![(vec![1], vec![1.0])];
        assert!(grad_check(f, &params, &GradCheckOptions::default()).is_err());
    }
}

use crate::compute::tensor::Tensor;
use crate::error::Result;
use crate::rng::SplitMix64;

/// Compare analytic gradients against central finite differences on
/// randomly probed coordinates and return the worst relative error.
///
/// `loss_fn` must be a pure function of the parameter vector, evaluated at
/// 64-bit precision. `analytic` is aligned with `params`; `None` slots are
/// read as zero gradients. The relative error at one coordinate is
/// `|analytic - numeric| / max(|numeric|, 1e-8)`, so a gradient that is
/// wrong by a factor of two reports an error near 1.
pub fn grad_check<F>(
    loss_fn: F,
    params: &[Tensor],
    analytic: &[Option<Tensor>],
    probes: usize,
    delta: f64,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    let total: usize = params.iter().map(|p| p.numel()).sum();
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let flat = rng.below(total);
        let (pi, j) = locate(params, flat);
        let mut plus = params.to_vec();
        plus[pi].data[j] += delta;
        let mut minus = params.to_vec();
        minus[pi].data[j] -= delta;
        let numeric = (loss_fn(&plus)? - loss_fn(&minus)?) / (2.0 * delta);
        let ana = analytic[pi].as_ref().map_or(0.0, |g| g.data[j]);
        let rel = (ana - numeric).abs() / numeric.abs().max(1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

fn locate(params: &[Tensor], mut flat: usize) -> (usize, usize) {
    for (pi, p) in params.iter().enumerate() {
        if flat < p.numel() {
            return (pi, flat);
        }
        flat -= p.numel();
    }
    unreachable!("flat index out of range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let params = vec![Tensor::scalar(3.0)];
        let analytic = vec![Some(Tensor::scalar(6.0))];
        let err = grad_check(
            |p| Ok(p[0].data[0] * p[0].data[0]),
            &params,
            &analytic,
            10,
            1e-5,
            1,
        )
        .unwrap();
        assert!(err < 1e-9, "err={err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let params = vec![Tensor::scalar(3.0)];
        let analytic = vec![Some(Tensor::scalar(12.0))]; // x2 corruption
        let err = grad_check(
            |p| Ok(p[0].data[0] * p[0].data[0]),
            &params,
            &analytic,
            5,
            1e-5,
            1,
        )
        .unwrap();
        assert!((err - 1.0).abs() < 1e-6, "err={err}");
    }

    #[test]
    fn probes_cover_multiple_tensors() {
        // gradient of sum of squares over two tensors
        let params = vec![
            Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(),
            Tensor::new(vec![2], vec![4.0, 0.25]).unwrap(),
        ];
        let analytic: Vec<Option<Tensor>> = params
            .iter()
            .map(|p| {
                Some(Tensor {
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| 2.0 * v).collect(),
                })
            })
            .collect();
        let err = grad_check(
            |p| {
                Ok(p.iter()
                    .flat_map(|t| t.data.iter())
                    .map(|v| v * v)
                    .sum())
            },
            &params,
            &analytic,
            64,
            1e-5,
            99,
        )
        .unwrap();
        assert!(err < 1e-8, "err={err}");
    }
}

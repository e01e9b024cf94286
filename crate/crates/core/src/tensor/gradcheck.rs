use super::{Scalar, Tensor};

/// Central-difference gradient of a scalar function, one coordinate at a
/// time: `(f(x + h·e) − f(x − h·e)) / 2h`.
pub fn finite_difference_gradient<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    h: T,
) -> Tensor<T> {
    let mut probe = x.clone();
    let two_h = h + h;
    let grad = (0..x.numel())
        .map(|i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / two_h
        })
        .collect();
    Tensor::from_vec(x.shape().to_vec(), grad).expect("same shape as input")
}

/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps gradients that are
/// zero up to round-off from reporting huge relative errors.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn max_relative_error<T: Scalar>(analytic: &[T], numeric: &[T], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(a.to_f64().unwrap(), n.to_f64().unwrap(), floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::from_vec(vec![4], vec![0.3, -2.0, 7.0, 1e3]).unwrap();
        let g = finite_difference_gradient(|t: &Tensor<f64>| t.data().iter().sum(), &x, 1e-5);
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::from_vec(vec![1], vec![3.0]).unwrap();
        let g = finite_difference_gradient(|t: &Tensor<f64>| t.item() * t.item(), &x, 1e-5);
        assert!((g.item() - 6.0).abs() < 1e-8);
    }
}

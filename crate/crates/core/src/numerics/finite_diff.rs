use super::{Scalar, Tensor};

/// Central-difference gradient estimate of a scalar function.
///
/// Coordinate `i` of the result is `(f(x + h e_i) - f(x - h e_i)) / 2h`.
/// This is the reference every autodiff gradient is checked against.
pub fn finite_diff_grad<S: Scalar>(mut f: impl FnMut(&Tensor<S>) -> S, x: &Tensor<S>, h: S) -> Tensor<S> {
    assert!(h > S::zero(), "finite difference step must be positive");
    let mut probe = x.clone();
    let two_h = h + h;
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / two_h;
    }
    out
}

/// Largest element-wise relative error `|a - b| / max(|a|, |b|, floor)`.
///
/// `floor` keeps near-zero coordinates from inflating the ratio.
pub fn max_rel_err<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, floor: S) -> S {
    assert_eq!(a.shape(), b.shape(), "max_rel_err shapes");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(S::zero(), S::max)
}

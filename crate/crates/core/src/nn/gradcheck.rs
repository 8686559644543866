use crate::scalar::Scalar;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport<T> {
    pub max_relative_error: T,
    /// Parameter index where the maximum was attained.
    pub worst_index: usize,
    pub worst_analytic: T,
    pub worst_numeric: T,
    pub checked: usize,
}

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error<T: Scalar>(analytic: T, numeric: T) -> T {
    let denom = analytic.abs().max(numeric.abs()).max(T::of(1e-8));
    (analytic - numeric).abs() / denom
}

/// Compares `analytic[i]` with `(loss(θ + h e_i) - loss(θ - h e_i)) / 2h` for
/// every parameter.
pub fn gradient_check<T, F>(mut loss: F, params: &[T], analytic: &[T], step: T) -> GradCheckReport<T>
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    assert_eq!(params.len(), analytic.len(), "one analytic gradient per parameter");
    let mut theta = params.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: T::zero(),
        worst_index: 0,
        worst_analytic: T::zero(),
        worst_numeric: T::zero(),
        checked: params.len(),
    };
    for i in 0..params.len() {
        let original = theta[i];
        theta[i] = original + step;
        let plus = loss(&theta);
        theta[i] = original - step;
        let minus = loss(&theta);
        theta[i] = original;
        let numeric = (plus - minus) / (step + step);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_relative_error {
            report = GradCheckReport {
                max_relative_error: err,
                worst_index: i,
                worst_analytic: analytic[i],
                worst_numeric: numeric,
                checked: params.len(),
            };
        }
    }
    report
}

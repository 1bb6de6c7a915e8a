//! Finite-difference verification of reverse-mode gradients.

use super::Tensor;

/// Result of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest scale-relative error over all checked inputs.
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub probes: usize,
}

/// Compares analytic gradients against fourth-order central differences
/// (`(8 (f(x+h/2) - f(x-h/2)) - (f(x+h) - f(x-h))) / 6h`).
///
/// `f` returns the scalar loss (accumulated in `f64`) together with the
/// gradient of every input. Each input tensor is probed at up to `max_probes`
/// evenly spaced elements (all of them when `None`). The error of an input is
/// `max_i |analytic_i - numeric_i| / max_i max(|analytic_i|, |numeric_i|)` over
/// its probed elements, i.e. relative to that input's gradient magnitude; an
/// input whose probed gradients are all below `1e-12` contributes its absolute
/// error instead.
pub fn grad_check<F>(inputs: &[Tensor], step: f32, max_probes: Option<usize>, mut f: F) -> GradCheckReport
where
    F: FnMut(&[Tensor]) -> (f64, Vec<Tensor>),
{
    let (_, analytic) = f(inputs);
    assert_eq!(analytic.len(), inputs.len(), "one gradient per input");
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, probes: 0 };
    for (ti, input) in inputs.iter().enumerate() {
        assert_eq!(analytic[ti].shape(), input.shape(), "gradient {ti} has the wrong shape");
        let n = input.len();
        if n == 0 {
            continue;
        }
        let probes = max_probes.unwrap_or(n).min(n).max(1);
        let stride = n / probes;
        let mut pairs = Vec::with_capacity(probes);
        for p in 0..probes {
            let i = p * stride;
            let x = input.data()[i];
            let mut eval = |delta: f32| {
                work[ti].data_mut()[i] = x + delta;
                f(&work).0
            };
            let (a1, b1) = (eval(step), eval(-step));
            let (a2, b2) = (eval(step / 2.0), eval(-step / 2.0));
            work[ti].data_mut()[i] = x;
            let numeric = (8.0 * (a2 - b2) - (a1 - b1)) / (6.0 * step as f64);
            pairs.push((i, analytic[ti].data()[i] as f64, numeric));
        }
        report.probes += pairs.len();
        let scale = pairs.iter().map(|&(_, a, n)| a.abs().max(n.abs())).fold(0.0, f64::max);
        for &(i, a, num) in &pairs {
            let err = if scale < 1e-12 { (a - num).abs() } else { (a - num).abs() / scale };
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((ti, i));
            }
        }
    }
    report
}

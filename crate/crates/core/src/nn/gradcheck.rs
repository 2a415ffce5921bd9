//! Central-difference gradient checking in 64-bit precision.

use rand::seq::index::sample;

use crate::error::{ensure, KtError, Result};
use crate::rng::stream_rng;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares the analytic gradient of `f` at `point` against central differences.
///
/// `f` returns the scalar value and its full gradient; the gradient is only read at
/// `point`. Coordinates are sampled without replacement (all of them when
/// `samples >= point.len()`). Step `h = 1e-5 · max(1, |x_i|)`; relative error is
/// `|a - c| / max(|a|, |c|, 1e-8)`.
pub fn finite_diff_check<F>(mut f: F, point: &[f64], samples: usize, seed: u64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    ensure!(samples >= 1, KtError::Invalid("gradient check needs >= 1 sample".into()));
    ensure!(!point.is_empty(), KtError::Invalid("gradient check on empty point".into()));
    let (v0, analytic) = f(point);
    ensure!(
        analytic.len() == point.len(),
        KtError::shape("finite_diff_check", &[point.len()], &[analytic.len()])
    );
    if !v0.is_finite() || analytic.iter().any(|g| !g.is_finite()) {
        return Err(KtError::NonFinite("gradient check at the base point".into()));
    }
    let indices: Vec<usize> = if samples >= point.len() {
        (0..point.len()).collect()
    } else {
        let mut rng = stream_rng(seed, &[0x6772_6164]);
        let mut v = sample(&mut rng, point.len(), samples).into_vec();
        v.sort_unstable();
        v
    };
    let mut x = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: indices[0],
        checked: indices.len(),
    };
    for &i in &indices {
        let h = 1e-5 * point[i].abs().max(1.0);
        x[i] = point[i] + h;
        let fp = f(&x).0;
        x[i] = point[i] - h;
        let fm = f(&x).0;
        x[i] = point[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(KtError::NonFinite(format!("gradient check at coordinate {i}")));
        }
        let central = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-8);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let point = vec![1.0; 20];
        let r = finite_diff_check(
            |x| (x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.0 * v).collect()),
            &point,
            20,
            0,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 20);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let point = vec![0.5, -2.0, 3.0];
        let r = finite_diff_check(|x| (4.2, vec![0.0; x.len()]), &point, 3, 9).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let point = vec![1.0, 2.0];
        let r = finite_diff_check(|x| (x[0] * x[1], vec![x[1], 0.0]), &point, 2, 0).unwrap();
        assert!(r.max_rel_error > 0.5);
        assert_eq!(r.worst_index, 1);
    }

    #[test]
    fn non_finite_values_fail_the_check() {
        let point = vec![0.0];
        assert!(finite_diff_check(|_| (f64::NAN, vec![0.0]), &point, 1, 0).is_err());
    }

    #[test]
    fn sampling_picks_distinct_coordinates() {
        let point: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let mut seen = Vec::new();
        finite_diff_check(
            |x| {
                seen.push(x.to_vec());
                (x.iter().sum(), vec![1.0; x.len()])
            },
            &point,
            10,
            3,
        )
        .unwrap();
        // base point + two evaluations per sampled coordinate
        assert_eq!(seen.len(), 21);
    }
}

use super::schedule::Ema;
use crate::{Error, Result};

/// Loss curve of a learning-rate sweep and the rate picked from it.
#[derive(Clone, Debug, PartialEq)]
pub struct LrFinderResult {
    pub lrs: Vec<f64>,
    pub losses: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub suggestion: f64,
    pub suggestion_index: usize,
}

/// `steps` learning rates spaced geometrically from `lr_min` to `lr_max`.
pub fn geometric_rates(lr_min: f64, lr_max: f64, steps: usize) -> Vec<f64> {
    let ratio = (lr_max / lr_min).ln();
    (0..steps)
        .map(|i| lr_min * (ratio * i as f64 / (steps - 1) as f64).exp())
        .collect()
}

/// Runs `step(lr)` for each rate of the sweep; `step` performs one training
/// update at that rate and returns the loss it observed.
///
/// The loss is smoothed with a bias-corrected EMA (0.9). The sweep is cut
/// where the smoothed loss first exceeds four times its running minimum (or
/// stops being finite), and the suggestion is the rate at which the
/// smoothed loss falls fastest per unit of `ln(lr)` inside that region.
pub fn lr_range_test<F>(mut step: F, lr_min: f64, lr_max: f64, steps: usize) -> Result<LrFinderResult>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(lr_min > 0.0 && lr_min < lr_max) {
        return Err(Error::invalid(format!(
            "need 0 < lr_min < lr_max, got {lr_min} and {lr_max}"
        )));
    }
    if steps < 10 {
        return Err(Error::invalid("an LR range test needs at least 10 steps"));
    }
    let lrs = geometric_rates(lr_min, lr_max, steps);
    let mut losses = Vec::with_capacity(steps);
    let mut smoothed = Vec::with_capacity(steps);
    let mut ema = Ema::new(0.9);
    let mut best = f64::INFINITY;
    for &lr in &lrs {
        let loss = match step(lr) {
            Ok(l) if l.is_finite() => l,
            Ok(_) | Err(Error::Numerical(_)) if losses.is_empty() => {
                return Err(Error::Numerical(format!(
                    "loss diverges already at lr_min = {lr_min}; try a lower lr_min"
                )))
            }
            Ok(_) | Err(Error::Numerical(_)) => break,
            Err(e) => return Err(e),
        };
        let s = ema.update(loss);
        losses.push(loss);
        if s > 4.0 * best {
            break;
        }
        best = best.min(s);
        smoothed.push(s);
    }

    let scale = smoothed.iter().fold(0.0f64, |m, s| m.max(s.abs())).max(1e-300);
    let steepest = smoothed
        .windows(2)
        .enumerate()
        .map(|(i, w)| (i, (w[1] - w[0]) / (lrs[i + 1] / lrs[i]).ln()))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    match steepest {
        Some((i, slope)) if slope < -1e-12 * scale => Ok(LrFinderResult {
            suggestion: lrs[i],
            suggestion_index: i,
            lrs: lrs[..losses.len()].to_vec(),
            losses,
            smoothed,
        }),
        _ => Err(Error::Numerical(
            "loss never decreased during the LR sweep; no steepest slope to pick".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_are_geometric() {
        let r = geometric_rates(1e-4, 1e-1, 4);
        for (got, want) in r.iter().zip([1e-4, 1e-3, 1e-2, 1e-1]) {
            assert!((got / want - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_loss_has_no_suggestion() {
        let err = lr_range_test(|_| Ok(2.5), 1e-5, 1.0, 50);
        assert!(matches!(err, Err(Error::Numerical(_))));
    }

    #[test]
    fn divergence_at_start_is_reported() {
        let err = lr_range_test(|_| Ok(f64::NAN), 1e-5, 1.0, 50);
        assert!(matches!(err, Err(Error::Numerical(msg)) if msg.contains("lr_min")));
    }

    #[test]
    fn bad_ranges() {
        assert!(lr_range_test(|_| Ok(1.0), 1.0, 0.1, 50).is_err());
        assert!(lr_range_test(|_| Ok(1.0), 1e-3, 0.1, 5).is_err());
    }

    #[test]
    fn curve_is_cut_after_blow_up() {
        let mut i = 0;
        let r = lr_range_test(
            |_| {
                i += 1;
                Ok(if i < 30 { 10.0 - i as f64 * 0.3 } else { 1e6 })
            },
            1e-5,
            1.0,
            60,
        )
        .unwrap();
        assert_eq!(r.smoothed.len(), 29);
        assert!(r.suggestion_index < 29);
    }
}

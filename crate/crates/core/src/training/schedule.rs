/// Bias-corrected exponential moving average.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    beta: f64,
    avg: f64,
    count: i32,
}

impl Ema {
    pub fn new(beta: f64) -> Self {
        Ema {
            beta,
            avg: 0.0,
            count: 0,
        }
    }

    pub fn update(&mut self, value: f64) -> f64 {
        self.count += 1;
        self.avg = self.beta * self.avg + (1.0 - self.beta) * value;
        self.value()
    }

    pub fn value(&self) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        self.avg / (1.0 - self.beta.powi(self.count))
    }
}

/// Multiplies the learning rate by `decay` whenever the watched loss fails to
/// improve on its best value by at least `min_rel_improvement` for
/// `patience` consecutive observations.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauDecay {
    pub patience: usize,
    pub decay: f64,
    pub min_rel_improvement: f64,
    best: f64,
    stale: usize,
}

impl PlateauDecay {
    pub fn new(patience: usize, decay: f64) -> Self {
        PlateauDecay {
            patience,
            decay,
            min_rel_improvement: 1e-3,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Returns the factor to apply to the learning rate (1 or `decay`).
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best * (1.0 - self.min_rel_improvement) || self.best.is_infinite() {
            self.best = loss;
            self.stale = 0;
            return 1.0;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            self.best = loss.min(self.best);
            return self.decay;
        }
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EarlyStop {
    /// New best; keep this checkpoint.
    Improved,
    Continue,
    Stop,
}

/// Stops after `patience` evaluations without a strictly lower loss.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_index: Option<usize>,
    seen: usize,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            best_index: None,
            seen: 0,
            stale: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> EarlyStop {
        let index = self.seen;
        self.seen += 1;
        if loss < self.best {
            self.best = loss;
            self.best_index = Some(index);
            self.stale = 0;
            return EarlyStop::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            EarlyStop::Stop
        } else {
            EarlyStop::Continue
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_index.map(|i| (i, self.best))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_of_constant_is_constant() {
        let mut e = Ema::new(0.9);
        for _ in 0..50 {
            assert!((e.update(3.0) - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn early_stop_sequence() {
        let mut s = EarlyStopper::new(2);
        assert_eq!(s.observe(1.0), EarlyStop::Improved);
        assert_eq!(s.observe(0.9), EarlyStop::Improved);
        assert_eq!(s.observe(0.91), EarlyStop::Continue);
        assert_eq!(s.observe(0.92), EarlyStop::Stop);
        assert_eq!(s.best(), Some((1, 0.9)));
    }

    #[test]
    fn plateau_decays_after_patience() {
        let mut p = PlateauDecay::new(3, 0.9);
        assert_eq!(p.observe(1.0), 1.0);
        assert_eq!(p.observe(0.9), 1.0);
        // 0.1% of 0.9 is 0.0009; these do not count as improvements.
        assert_eq!(p.observe(0.8995), 1.0);
        assert_eq!(p.observe(0.8996), 1.0);
        assert_eq!(p.observe(0.8999), 0.9);
        assert_eq!(p.observe(0.7), 1.0);
    }
}

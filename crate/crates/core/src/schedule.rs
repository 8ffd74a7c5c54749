//! Learning-rate and teacher-momentum schedules, evaluated per optimizer step.

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine decay to
/// `final_lr` at `total_steps`. Steps past the end stay at `final_lr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return self.final_lr;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.final_lr + 0.5 * (self.base_lr - self.final_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Teacher EMA momentum: either constant, or cosine from `base` to 1.
pub fn momentum_at(base: f64, cosine: bool, step: u64, total_steps: u64) -> f64 {
    if !cosine || total_steps == 0 {
        return base;
    }
    let progress = (step.min(total_steps)) as f64 / total_steps as f64;
    1.0 - (1.0 - base) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> LrSchedule {
        LrSchedule {
            base_lr: 5e-4,
            final_lr: 0.0,
            warmup_steps: 10,
            total_steps: 100,
        }
    }

    #[test]
    fn endpoints() {
        let s = sched();
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(10), 5e-4);
        assert!(s.lr_at(100).abs() < 1e-18);
        assert_eq!(s.lr_at(500), 0.0);
        assert!((s.lr_at(5) - 2.5e-4).abs() < 1e-18);
        assert!((s.lr_at(55) - 2.5e-4).abs() < 1e-12);
    }

    #[test]
    fn monotone_after_warmup() {
        let s = sched();
        for t in 10..100 {
            assert!(s.lr_at(t + 1) <= s.lr_at(t));
        }
    }

    #[test]
    fn momentum_schedules() {
        assert_eq!(momentum_at(0.996, false, 50, 100), 0.996);
        assert!((momentum_at(0.996, true, 0, 100) - 0.996).abs() < 1e-15);
        assert!((momentum_at(0.996, true, 100, 100) - 1.0).abs() < 1e-15);
    }
}

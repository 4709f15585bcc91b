//! Linear warmup followed by cosine decay to zero.

use std::f64::consts::PI;

/// Learning rate for update `step` (0-based) out of `total_steps`.
///
/// Ramps linearly from 0 to `base_lr` over `warmup_steps`, then follows
/// `base_lr · ½(1 + cos(π · progress))` down to 0 at `total_steps`. Steps past
/// the end get 0.
pub fn lr_at(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    if step > total_steps {
        return 0.0;
    }
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let decay = total_steps.saturating_sub(warmup_steps);
    if decay == 0 {
        return base_lr;
    }
    if step == total_steps {
        return 0.0;
    }
    let progress = (step - warmup_steps) as f64 / decay as f64;
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(lr_at(0, 100, 10, 1e-3), 0.0);
        assert_eq!(lr_at(10, 100, 10, 1e-3), 1e-3);
        assert!((lr_at(55, 100, 10, 1e-3) - 5e-4).abs() < 1e-18);
        assert_eq!(lr_at(100, 100, 10, 1e-3), 0.0);
        assert_eq!(lr_at(101, 100, 10, 1e-3), 0.0);
        assert!((lr_at(5, 100, 10, 1e-3) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn no_warmup_starts_at_base() {
        assert_eq!(lr_at(0, 10, 0, 0.1), 0.1);
    }

    #[test]
    fn continuous_at_boundary() {
        let (base, w, total) = (1e-3, 50, 1000);
        let left = lr_at(w - 1, total, w, base);
        let at = lr_at(w, total, w, base);
        let right = lr_at(w + 1, total, w, base);
        assert!((at - left) <= base / w as f64 + 1e-18);
        assert!((at - right) < 1e-7);
    }

    #[test]
    fn monotone_phases() {
        let (base, w, total) = (1.0, 20, 200);
        for s in 0..w {
            assert!(lr_at(s + 1, total, w, base) > lr_at(s, total, w, base));
        }
        for s in w..total {
            assert!(lr_at(s + 1, total, w, base) <= lr_at(s, total, w, base));
        }
    }
}

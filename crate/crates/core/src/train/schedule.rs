/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay
/// to 0 at `total`.
pub fn learning_rate(step: u64, peak: f64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let span = (total - warmup).max(1) as f64;
    peak * (total - step) as f64 / span
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_decay() {
        assert_eq!(learning_rate(0, 1e-3, 100, 1000), 0.0);
        assert_eq!(learning_rate(50, 1e-3, 100, 1000), 5e-4);
        assert_eq!(learning_rate(100, 1e-3, 100, 1000), 1e-3);
        assert!((learning_rate(550, 1e-3, 100, 1000) - 5e-4).abs() < 1e-18);
        assert_eq!(learning_rate(1000, 1e-3, 100, 1000), 0.0);
    }

    #[test]
    fn no_warmup_starts_at_peak() {
        assert_eq!(learning_rate(0, 2.0, 0, 10), 2.0);
        assert_eq!(learning_rate(5, 2.0, 0, 10), 1.0);
    }
}

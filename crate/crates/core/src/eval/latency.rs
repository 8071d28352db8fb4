use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedLatency {
    /// Backbones run one after another.
    pub serial_ms: f64,
    /// Backbones run concurrently; the slowest one dominates.
    pub parallel_ms: f64,
}

/// Expected per-sample latency of a four-backbone ensemble of equal cost.
pub fn expected_latency(t_cnn: f64, t_llm: f64, trigger_rate: f64) -> Result<ExpectedLatency> {
    ensemble_latency(&[t_cnn; 4], t_llm, trigger_rate)
}

/// Expected latency for backbones with individual costs `t_cnn`.
pub fn ensemble_latency(t_cnn: &[f64], t_llm: f64, trigger_rate: f64) -> Result<ExpectedLatency> {
    if t_cnn.is_empty() {
        return Err(Error::InvalidInput("no backbone latencies".into()));
    }
    if t_cnn.iter().chain([&t_llm]).any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::InvalidInput("latencies must be finite and non-negative".into()));
    }
    if !(0.0..=1.0).contains(&trigger_rate) {
        return Err(Error::InvalidInput(format!("trigger rate {trigger_rate} outside [0, 1]")));
    }
    let arb = trigger_rate * t_llm;
    Ok(ExpectedLatency {
        serial_ms: t_cnn.iter().sum::<f64>() + arb,
        parallel_ms: t_cnn.iter().copied().fold(0.0, f64::max) + arb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_value() {
        let e = expected_latency(12.5, 1250.0, 0.15).unwrap();
        assert_eq!(e.serial_ms, 237.5);
        assert_eq!(e.parallel_ms, 200.0);
    }

    #[test]
    fn degenerate_cases() {
        assert_eq!(expected_latency(12.5, 1250.0, 0.0).unwrap().serial_ms, 50.0);
        for g in [0.0, 0.3, 1.0] {
            assert_eq!(expected_latency(7.0, 0.0, g).unwrap().serial_ms, 28.0);
        }
        assert!(expected_latency(1.0, 1.0, 1.5).is_err());
        assert!(expected_latency(-1.0, 1.0, 0.5).is_err());
    }
}

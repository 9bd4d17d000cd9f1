//! Per-request predict latency with an LM-invocation audit.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{LarrError, Result};
use crate::lm::lm_forward_count;
use crate::serving::Predictor;
use crate::synthworld::InteractionRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub requests: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
    /// Language-model forwards observed during the bench; must be zero.
    pub lm_forwards: u64,
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Times one `predict` per request, cycling through `requests` until `n`
/// predictions have been made. Fails if the language model ran.
pub fn latency_bench(predictor: &Predictor, requests: &[InteractionRecord], n: usize) -> Result<LatencyReport> {
    if requests.is_empty() || n == 0 {
        return Err(LarrError::Empty("latency requests"));
    }
    let before = lm_forward_count();
    let mut times = Vec::with_capacity(n);
    for r in requests.iter().cycle().take(n) {
        let t = Instant::now();
        let p = predictor.predict(r)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(p);
    }
    let lm_forwards = lm_forward_count() - before;
    times.sort_by(f64::total_cmp);
    let report = LatencyReport {
        requests: n,
        p50_ms: percentile(&times, 0.50),
        p95_ms: percentile(&times, 0.95),
        p99_ms: percentile(&times, 0.99),
        max_ms: *times.last().unwrap(),
        lm_forwards,
    };
    if lm_forwards > 0 {
        return Err(LarrError::Invalid {
            op: "latency_bench",
            msg: format!("language model ran {lm_forwards} times while serving"),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::percentile;

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), 50.0);
        assert_eq!(percentile(&v, 0.99), 99.0);
        assert_eq!(percentile(&[3.0], 0.95), 3.0);
    }
}

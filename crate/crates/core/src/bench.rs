//! Per-sample inference latency on the host.

use std::hint::black_box;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::net::Network;
use crate::tensor::{Scalar, Tensor};

/// Untimed iterations run before measurement starts.
pub const DEFAULT_WARMUP: usize = 100;
pub const DEFAULT_REPETITIONS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyStats {
    pub repetitions: usize,
    pub warmup: usize,
    pub mean_us: f64,
    pub p50_us: f64,
    pub p95_us: f64,
    /// Parameter bytes plus the two largest live activations of one sample.
    pub resident_bytes: usize,
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn resident_bytes<T: Scalar>(net: &Network<T>) -> usize {
    let width = T::DTYPE.size_of();
    let mut acts: Vec<usize> = (0..net.arch().layers.len())
        .map(|i| net.output_shape(i).iter().product())
        .collect();
    acts.push(net.input_shape().iter().product());
    acts.sort_unstable_by(|a, b| b.cmp(a));
    let live: usize = acts.iter().take(2).sum();
    (net.total_param_count() + live) * width
}

/// Times `repetitions` single-sample forward passes of `x` (shape
/// `[1, input...]`) after `warmup` untimed ones.
pub fn latency<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    repetitions: usize,
    warmup: usize,
) -> Result<LatencyStats> {
    if repetitions == 0 || x.shape().first() != Some(&1) {
        return Err(Error::Contract(
            "latency needs at least one repetition and a single-sample input".into(),
        ));
    }
    for _ in 0..warmup {
        black_box(net.forward(black_box(x))?);
    }
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t0 = Instant::now();
        black_box(net.forward(black_box(x))?);
        times.push(t0.elapsed().as_secs_f64() * 1e6);
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        repetitions,
        warmup,
        mean_us: mean,
        p50_us: percentile(&times, 50.0),
        p95_us: percentile(&times, 95.0),
        resident_bytes: resident_bytes(net),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::presets;

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 50.0), 10.0);
        assert_eq!(percentile(&v, 95.0), 19.0);
        assert_eq!(percentile(&v, 100.0), 20.0);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
    }

    #[test]
    fn latency_reports_ordered_stats() {
        let arch = presets::architecture("mlp-small", &[1, 8, 8], 10).unwrap();
        let net = Network::<f32>::build(arch, 0).unwrap();
        let x = Tensor::zeros(&[1, 1, 8, 8]);
        let s = latency(&net, &x, 50, 5).unwrap();
        assert!(s.p50_us <= s.p95_us && s.mean_us > 0.0);
        assert_eq!(s.resident_bytes, (net.total_param_count() + 256 + 256) * 4);
        assert!(latency(&net, &Tensor::zeros(&[2, 1, 8, 8]), 5, 0).is_err());
    }
}

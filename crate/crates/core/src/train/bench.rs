use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{EdgeState, PivotMask};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{EncoderModel, ModelConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub median_seconds: f64,
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of `ln(time)` against `ln(n)`.
    pub slope: f64,
}

pub fn median(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

/// Slope of the least-squares line through `(ln x, ln y)`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Times single-instance `f32` forward passes of the layer stack over an
/// `(n, n, d)` state for each `n`: one warm-up, then `repeats` timed runs.
pub fn bench_scaling(config: &ModelConfig, sizes: &[usize], repeats: usize, seed: u64) -> Result<BenchReport> {
    if sizes.is_empty() || repeats == 0 {
        return Err(Error::Config("bench needs at least one size and one repeat".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = EncoderModel::<f32>::new(config.clone(), &mut rng)?;
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let x = Tensor::from_fn(&[1, n, n, config.d], |_| rng.gen_range(-1.0f32..1.0));
        let mask = PivotMask::full(n);
        let run = || -> Result<f64> {
            let start = Instant::now();
            let mut g = Graph::new();
            let v = g.input(x.clone());
            let s = EdgeState::new(&g, v)?;
            let out = model.encode(&mut g, s, &mask, None)?;
            std::hint::black_box(g.value(out.x));
            Ok(start.elapsed().as_secs_f64())
        };
        run()?;
        let samples = (0..repeats).map(|_| run()).collect::<Result<Vec<_>>>()?;
        rows.push(BenchRow { n, median_seconds: median(&samples), samples });
    }
    let slope = if rows.len() > 1 {
        log_log_slope(&rows.iter().map(|r| (r.n as f64, r.median_seconds)).collect::<Vec<_>>())
    } else {
        f64::NAN
    };
    Ok(BenchReport { rows, slope })
}

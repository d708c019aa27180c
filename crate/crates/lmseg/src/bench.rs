//! Timing harness for the sampling complexity comparison: random node
//! sub-sampling (linear) against farthest point sampling (quadratic).

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::pooling::{fps_subsample, random_subsample};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMethod {
    Random,
    Fps,
}

impl std::str::FromStr for BenchMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(BenchMethod::Random),
            "fps" => Ok(BenchMethod::Fps),
            other => Err(Error::InvalidConfig(format!("unknown method '{other}'"))),
        }
    }
}

impl std::fmt::Display for BenchMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BenchMethod::Random => write!(f, "random"),
            BenchMethod::Fps => write!(f, "fps"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub method: String,
    pub n: usize,
    pub k: usize,
    pub seconds: f64,
}

fn random_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect()
}

/// Sparse synthetic edges (about 3 per node) so edge collapse is timed too.
fn synthetic_edges(n: usize) -> Vec<(u32, u32)> {
    let mut edges = Vec::with_capacity(3 * n);
    for stride in [1usize, 7, 31] {
        for i in 0..n.saturating_sub(stride) {
            edges.push((i as u32, (i + stride) as u32));
        }
    }
    edges
}

/// Median wall time of one subsample call at each size.
pub fn run_bench(
    method: BenchMethod,
    sizes: &[usize],
    ratio: f64,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &n in sizes {
        if n == 0 {
            return Err(Error::InvalidConfig("bench size 0".into()));
        }
        let positions = random_points(n, seed);
        let edges = synthetic_edges(n);
        let count = (((n as f64) * ratio + 1e-9).floor() as usize).max(1);
        let mut times = Vec::new();
        let mut total = 0.0f64;
        let mut iter = 0u64;
        // one warmup, then repeat until the sample is trustworthy
        let _ = match method {
            BenchMethod::Random => random_subsample(&positions, &edges, ratio, seed, 1).node_count(),
            BenchMethod::Fps => fps_subsample(&positions, count, seed).len(),
        };
        while (total < 0.25 && iter < 200) || times.is_empty() {
            let start = Instant::now();
            match method {
                BenchMethod::Random => {
                    std::hint::black_box(random_subsample(
                        &positions,
                        &edges,
                        ratio,
                        seed + iter,
                        1,
                    ));
                }
                BenchMethod::Fps => {
                    std::hint::black_box(fps_subsample(&positions, count, seed + iter));
                }
            }
            let dt = start.elapsed().as_secs_f64();
            times.push(dt);
            total += dt;
            iter += 1;
            if matches!(method, BenchMethod::Fps) && total > 20.0 {
                break;
            }
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = times[times.len() / 2];
        rows.push(BenchRow {
            method: method.to_string(),
            n,
            k: count,
            seconds: median,
        });
    }
    Ok(rows)
}

/// Least-squares slope of log(seconds) against log(n).
pub fn loglog_slope(rows: &[BenchRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.n as f64).ln(), r.seconds.max(1e-12).ln()))
        .collect();
    let n = pts.len() as f64;
    let mean_x: f64 = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y: f64 = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = pts.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let var: f64 = pts.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    cov / var
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("method,N,k,seconds\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:.9}\n", r.method, r.n, r.k, r.seconds));
    }
    out
}

//! Hash throughput benchmark over zero-filled fixtures.

use std::collections::BTreeMap;
use std::fs::File;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use raft_core::digest::HashAlgorithm;
use raft_core::timing::{max_relative_deviation, normalize_per_gib};
use serde::Serialize;

use crate::hashing::{digest_stream, make_zero_file, SourceReadError};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("cannot create fixture {path}: {source}")]
    Fixture { path: String, source: io::Error },
    #[error(transparent)]
    Read(#[from] SourceReadError),
    #[error("benchmark needs at least one size, one algorithm and one repetition")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchSample {
    pub algorithm: &'static str,
    pub size_bytes: u64,
    /// Fastest of the repetitions, in seconds.
    pub seconds: f64,
    pub runs: Vec<f64>,
    pub normalized_per_gib: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlgorithmSummary {
    pub algorithm: &'static str,
    pub mean_normalized_per_gib: f64,
    /// Largest relative distance of a normalized time from their mean.
    pub max_relative_deviation: f64,
    /// Wall-time ratio between successive sizes, paired with the size ratio.
    pub scaling: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub samples: Vec<BenchSample>,
    pub summaries: Vec<AlgorithmSummary>,
}

impl BenchReport {
    pub fn samples_for(&self, algorithm: HashAlgorithm) -> Vec<&BenchSample> {
        self.samples.iter().filter(|s| s.algorithm == algorithm.name()).collect()
    }

    pub fn summary(&self, algorithm: HashAlgorithm) -> Option<&AlgorithmSummary> {
        self.summaries.iter().find(|s| s.algorithm == algorithm.name())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("algorithm\tsize_bytes\tseconds\tnormalized_s_per_gib\n");
        for s in &self.samples {
            out.push_str(&format!("{}\t{}\t{:.6}\t{:.6}\n", s.algorithm, s.size_bytes, s.seconds, s.normalized_per_gib));
        }
        out.push('\n');
        out.push_str("algorithm\tmean_normalized_s_per_gib\tmax_relative_deviation\n");
        for s in &self.summaries {
            out.push_str(&format!("{}\t{:.6}\t{:.4}\n", s.algorithm, s.mean_normalized_per_gib, s.max_relative_deviation));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Times `digest_stream` over zero files of each size for each algorithm,
/// keeping the best of `repetitions` runs. Repetitions are interleaved across
/// sizes and algorithms so a slow spell does not land on a single sample.
/// Fixtures live in `dir` and are removed afterwards.
pub fn bench_hash(
    sizes: &[u64],
    algorithms: &[HashAlgorithm],
    repetitions: usize,
    dir: &Path,
) -> Result<BenchReport, BenchError> {
    if sizes.is_empty() || algorithms.is_empty() || repetitions == 0 {
        return Err(BenchError::Empty);
    }
    let fixtures: Vec<PathBuf> = sizes.iter().map(|size| dir.join(format!("raft-bench-{size}.zero"))).collect();
    let result = (|| {
        for (path, &size) in fixtures.iter().zip(sizes) {
            make_zero_file(path, size).map_err(|source| BenchError::Fixture { path: path.display().to_string(), source })?;
        }
        let mut runs = vec![vec![Vec::with_capacity(repetitions); algorithms.len()]; sizes.len()];
        for _ in 0..repetitions {
            for (i, path) in fixtures.iter().enumerate() {
                for (j, &alg) in algorithms.iter().enumerate() {
                    let file = File::open(path)
                        .map_err(|source| BenchError::Fixture { path: path.display().to_string(), source })?;
                    let start = Instant::now();
                    digest_stream(file, alg)?;
                    runs[i][j].push(start.elapsed().as_secs_f64());
                }
            }
        }
        Ok::<_, BenchError>(runs)
    })();
    for path in &fixtures {
        let _ = std::fs::remove_file(path);
    }
    let mut samples = Vec::new();
    for (runs, &size) in result?.into_iter().zip(sizes) {
        for (runs, &alg) in runs.into_iter().zip(algorithms) {
            let seconds = runs.iter().copied().fold(f64::INFINITY, f64::min);
            log::info!("{alg} over {size} bytes: {seconds:.4} s");
            samples.push(BenchSample {
                algorithm: alg.name(),
                size_bytes: size,
                seconds,
                runs,
                normalized_per_gib: normalize_per_gib(seconds, size),
            });
        }
    }
    let summaries = summarize(&samples, algorithms);
    Ok(BenchReport { samples, summaries })
}

fn summarize(samples: &[BenchSample], algorithms: &[HashAlgorithm]) -> Vec<AlgorithmSummary> {
    algorithms
        .iter()
        .map(|alg| {
            let mut mine: Vec<&BenchSample> = samples.iter().filter(|s| s.algorithm == alg.name()).collect();
            mine.sort_by_key(|s| s.size_bytes);
            let normalized: Vec<f64> = mine.iter().map(|s| s.normalized_per_gib).collect();
            let scaling = mine
                .windows(2)
                .map(|w| (w[1].seconds / w[0].seconds, w[1].size_bytes as f64 / w[0].size_bytes as f64))
                .collect();
            AlgorithmSummary {
                algorithm: alg.name(),
                mean_normalized_per_gib: normalized.iter().sum::<f64>() / normalized.len() as f64,
                max_relative_deviation: max_relative_deviation(&normalized),
                scaling,
            }
        })
        .collect()
}

/// Parses sizes such as `64MiB`, `1GiB`, `4096` or `2M`.
pub fn parse_size(text: &str) -> Option<u64> {
    let t = text.trim();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let n: u64 = num.parse().ok()?;
    let mult: u64 = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "k" | "kib" => 1 << 10,
        "m" | "mib" => 1 << 20,
        "g" | "gib" => 1 << 30,
        "kb" => 1_000,
        "mb" => 1_000_000,
        "gb" => 1_000_000_000,
        _ => return None,
    };
    n.checked_mul(mult)
}

/// Normalized time per algorithm, for quick comparisons.
pub fn normalized_by_algorithm(report: &BenchReport) -> BTreeMap<&'static str, f64> {
    report.summaries.iter().map(|s| (s.algorithm, s.mean_normalized_per_gib)).collect()
}

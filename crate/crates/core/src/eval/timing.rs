//! Single-threaded timing of BoW transform, insertion and query as a
//! database grows.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use super::ablation::SystemConfig;
use crate::bow::{transform_with, BowVector};
use crate::error::{Error, Result};
use crate::features::ImageFeatures;
use crate::index::InverseIndex;
use crate::vocab::Vocabulary;

/// Iterations discarded before each timed series.
pub const WARMUP: usize = 5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Stat {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(samples_ms: &[f64]) -> Self {
        let n = samples_ms.len();
        if n == 0 {
            return Self::default();
        }
        let mean = samples_ms.iter().sum::<f64>() / n as f64;
        let var = samples_ms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            mean_ms: mean,
            std_ms: var.sqrt(),
            n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub size: usize,
    pub insert: Stat,
    pub query: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingReport {
    pub label: String,
    pub transform: Stat,
    pub rows: Vec<ScalingRow>,
    /// Per-insert times from the first size onward, in insertion order.
    pub insert_ms: Vec<f64>,
}

impl ScalingReport {
    /// Mean insert time of the last tenth over that of the first tenth.
    pub fn insert_decile_ratio(&self) -> f64 {
        let n = self.insert_ms.len();
        let d = (n / 10).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        mean(&self.insert_ms[n - d..]) / mean(&self.insert_ms[..d])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "label,size,transform_mean_ms,transform_std_ms,insert_mean_ms,insert_std_ms,query_mean_ms,query_std_ms\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                self.label,
                r.size,
                self.transform.mean_ms,
                self.transform.std_ms,
                r.insert.mean_ms,
                r.insert.std_ms,
                r.query.mean_ms,
                r.query.std_ms
            );
        }
        s
    }
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Transforms every image, then inserts them one by one. The first
/// `sizes[0]` inserts fill the index untimed; after reaching each size the
/// probe queries run (top `top_n`, with matches) and are timed.
pub fn bench_scaling(
    label: &str,
    vocab: &Vocabulary,
    config: &SystemConfig,
    images: &[ImageFeatures],
    sizes: &[usize],
    probes: &[ImageFeatures],
    top_n: usize,
) -> Result<ScalingReport> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) || *sizes.last().unwrap() > images.len() {
        return Err(Error::invalid(format!(
            "sizes {sizes:?} must be ascending and at most {} images",
            images.len()
        )));
    }
    if probes.is_empty() {
        return Err(Error::invalid("scaling needs at least one probe query"));
    }
    let mut transform_ms = Vec::with_capacity(images.len());
    let mut bows = Vec::with_capacity(images.len());
    for f in images.iter().take(*sizes.last().unwrap()) {
        let t = Instant::now();
        bows.push(transform_with(vocab, f, config.assign)?);
        transform_ms.push(ms(t));
    }
    let probe_bows: Vec<BowVector> = probes
        .iter()
        .map(|p| transform_with(vocab, p, config.assign))
        .collect::<Result<_>>()?;

    let mut index = InverseIndex::new(vocab, config.index_params())?;
    for b in &bows[..sizes[0]] {
        index.insert(b)?;
    }
    let mut rows = Vec::with_capacity(sizes.len());
    let mut insert_ms = Vec::new();
    let mut prev = sizes[0];
    for &size in sizes {
        let mut window = Vec::with_capacity(size - prev);
        for b in &bows[prev..size] {
            let t = Instant::now();
            index.insert(b)?;
            window.push(ms(t));
        }
        insert_ms.extend_from_slice(&window);
        prev = size;
        for q in probe_bows.iter().cycle().take(WARMUP) {
            std::hint::black_box(index.query(q, top_n)?);
        }
        let mut query_ms = Vec::with_capacity(probe_bows.len());
        for q in &probe_bows {
            let t = Instant::now();
            std::hint::black_box(index.query(q, top_n)?);
            query_ms.push(ms(t));
        }
        rows.push(ScalingRow {
            size,
            insert: Stat::of(&window),
            query: Stat::of(&query_ms),
        });
    }
    Ok(ScalingReport {
        label: label.to_string(),
        transform: Stat::of(transform_ms.get(WARMUP..).unwrap_or(&[])),
        rows,
        insert_ms,
    })
}

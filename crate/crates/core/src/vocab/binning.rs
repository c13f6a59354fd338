//! Keypoint size bins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinningMode {
    /// `S - 1` boundaries at the `i / S` quantiles of training sizes.
    Percentile,
    /// One bin per canonical (pyramid level) size; sizes snap to the nearest.
    DiscreteLevels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeBinning {
    mode: BinningMode,
    thresholds: Vec<f64>,
    bins: usize,
}

impl SizeBinning {
    /// Everything maps to bin 0.
    pub fn single() -> Self {
        Self {
            mode: BinningMode::Percentile,
            thresholds: Vec::new(),
            bins: 1,
        }
    }

    pub fn from_parts(mode: BinningMode, thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.iter().any(|t| !t.is_finite()) || thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "size bin thresholds must be finite and strictly ascending",
            ));
        }
        let bins = match mode {
            BinningMode::Percentile => thresholds.len() + 1,
            BinningMode::DiscreteLevels => {
                if thresholds.is_empty() {
                    return Err(Error::invalid("discrete binning needs at least one level"));
                }
                thresholds.len()
            }
        };
        Ok(Self { mode, thresholds, bins })
    }

    pub fn mode(&self) -> BinningMode {
        self.mode
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn bin_of(&self, size: f64) -> usize {
        match self.mode {
            BinningMode::Percentile => self.thresholds.partition_point(|&t| t < size),
            BinningMode::DiscreteLevels => {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (i, &level) in self.thresholds.iter().enumerate() {
                    let d = (size - level).abs();
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                best
            }
        }
    }
}

pub fn size_bin_of(binning: &SizeBinning, size: f64) -> usize {
    binning.bin_of(size)
}

/// Linear-interpolated empirical quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn fit_size_bins(sizes: &[f64], bins: usize, mode: BinningMode) -> Result<SizeBinning> {
    if bins == 0 {
        return Err(Error::invalid("at least one size bin is required"));
    }
    if sizes.is_empty() {
        return Err(Error::InsufficientData("no keypoint sizes to fit bins".into()));
    }
    if sizes.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid("keypoint sizes must be positive and finite"));
    }
    let mut sorted = sizes.to_vec();
    sorted.sort_by(f64::total_cmp);
    match mode {
        BinningMode::Percentile => {
            let thresholds: Vec<f64> = (1..bins).map(|i| quantile(&sorted, i as f64 / bins as f64)).collect();
            if thresholds.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InsufficientData(format!(
                    "size distribution too concentrated for {bins} percentile bins"
                )));
            }
            SizeBinning::from_parts(mode, thresholds)
        }
        BinningMode::DiscreteLevels => {
            // group sizes that differ only by f32 storage rounding
            let mut levels: Vec<(f64, usize)> = Vec::new();
            for &s in &sorted {
                match levels.last_mut() {
                    Some((v, n)) if (s - *v).abs() <= 1e-5 * v.abs() => *n += 1,
                    _ => levels.push((s, 1)),
                }
            }
            if levels.len() < bins {
                return Err(Error::InsufficientData(format!(
                    "{bins} discrete bins requested but training sizes have {} distinct levels",
                    levels.len()
                )));
            }
            // keep the most populated levels, ascending
            let mut by_count: Vec<usize> = (0..levels.len()).collect();
            by_count.sort_by(|&a, &b| levels[b].1.cmp(&levels[a].1).then(a.cmp(&b)));
            let mut keep: Vec<usize> = by_count[..bins].to_vec();
            keep.sort_unstable();
            SizeBinning::from_parts(mode, keep.into_iter().map(|i| levels[i].0).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_bin() {
        let b = fit_size_bins(&[3.0, 9.0, 1.0], 1, BinningMode::Percentile).unwrap();
        assert_eq!(b.bins(), 1);
        assert!([0.1, 3.0, 1e9].iter().all(|&s| b.bin_of(s) == 0));
    }

    #[test]
    fn discrete_levels_identify_pyramid_level() {
        let sizes: Vec<f64> = (0..8)
            .flat_map(|l| std::iter::repeat_n(31.0 * 1.2f64.powi(l), 5))
            .collect();
        let b = fit_size_bins(&sizes, 8, BinningMode::DiscreteLevels).unwrap();
        assert_eq!(b.bin_of(31.0 * 1.2f64.powi(3)), 3);
        assert_eq!(b.bin_of(0.001), 0);
        assert_eq!(b.bin_of(1e6), 7);
        // between levels 2 (44.64) and 3 (53.57), nearer 3
        assert_eq!(b.bin_of(51.0), 3);
        assert_eq!(b.bin_of(46.0), 2);
        assert!(fit_size_bins(&sizes, 9, BinningMode::DiscreteLevels).is_err());
    }

    #[test]
    fn percentile_thresholds_on_uniform_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let sizes: Vec<f64> = (0..20_000).map(|_| rng.random_range(1.0..2.0)).collect();
        let b = fit_size_bins(&sizes, 4, BinningMode::Percentile).unwrap();
        for (t, want) in b.thresholds().iter().zip([1.25, 1.5, 1.75]) {
            assert!((t - want).abs() < 0.01, "{t} vs {want}");
        }
        assert_eq!(b.bin_of(1.0), 0);
        assert_eq!(b.bin_of(5.0), 3);
        let mut counts = [0usize; 4];
        sizes.iter().for_each(|&s| counts[b.bin_of(s)] += 1);
        assert_eq!(counts.iter().sum::<usize>(), sizes.len());
        assert!(counts.iter().all(|&c| (c as f64 - 5000.0).abs() < 50.0));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(fit_size_bins(&[], 2, BinningMode::Percentile).is_err());
        assert!(fit_size_bins(&[1.0], 0, BinningMode::Percentile).is_err());
        assert!(fit_size_bins(&[1.0, 1.0, 1.0], 3, BinningMode::Percentile).is_err());
        assert!(SizeBinning::from_parts(BinningMode::Percentile, vec![2.0, 1.0]).is_err());
    }
}

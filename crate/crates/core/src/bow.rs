//! Size-binned, soft-assigned, tf-idf weighted BoW vectors with per-row
//! keypoint postings.
//!
//! Row mass `m(row)` is the sum of soft weights landing on the row,
//! `tf = m / sum(m)`, the row weight is `tf * idf` L2-normalized over rows,
//! and each posting's contributing weight is its soft weight over `m(row)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ImageFeatures;
use crate::vocab::{Assignment, Vocabulary};

/// Soft-assignment settings: `r` nearest words, Gaussian width `sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignParams {
    pub r: usize,
    pub sigma: f64,
}

impl Default for AssignParams {
    fn default() -> Self {
        Self { r: 3, sigma: 580.0 }
    }
}

impl AssignParams {
    pub fn hard() -> Self {
        Self {
            r: 1,
            ..Self::default()
        }
    }
}

/// `(word, size_bin)` encoded as `word + V * size_bin`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct RowId(u32);

impl RowId {
    pub fn new(word: u32, size_bin: u32, words: u32) -> Self {
        debug_assert!(word < words);
        RowId(word + words * size_bin)
    }

    pub fn from_index(index: u32) -> Self {
        RowId(index)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn word(self, words: u32) -> u32 {
        self.0 % words
    }

    pub fn size_bin(self, words: u32) -> u32 {
        self.0 / words
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Posting {
    pub keypoint_id: u32,
    pub orientation_deg: f32,
    pub contributing_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BowRow {
    pub weight: f64,
    pub postings: Vec<Posting>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BowVector {
    pub image_id: u64,
    rows: Vec<(RowId, BowRow)>,
}

impl BowVector {
    pub fn empty(image_id: u64) -> Self {
        Self {
            image_id,
            rows: Vec::new(),
        }
    }

    /// Builds a vector from rows; they are sorted by row id.
    pub fn from_rows(image_id: u64, mut rows: Vec<(RowId, BowRow)>) -> Self {
        rows.sort_by_key(|(r, _)| *r);
        Self { image_id, rows }
    }

    pub fn rows(&self) -> &[(RowId, BowRow)] {
        &self.rows
    }

    pub fn get(&self, row: RowId) -> Option<&BowRow> {
        self.rows
            .binary_search_by_key(&row, |(r, _)| *r)
            .ok()
            .map(|i| &self.rows[i].1)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.rows.iter().map(|(_, r)| r.weight * r.weight).sum::<f64>().sqrt()
    }

    /// Sparse dot product of row weights.
    pub fn dot(&self, other: &BowVector) -> f64 {
        let (mut i, mut j, mut acc) = (0, 0, 0.0);
        while i < self.rows.len() && j < other.rows.len() {
            match self.rows[i].0.cmp(&other.rows[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.rows[i].1.weight * other.rows[j].1.weight;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }
}

/// Assigns every keypoint (`r` nearest words, Gaussian weights with `sigma`)
/// and builds the vector.
pub fn transform(vocab: &Vocabulary, features: &ImageFeatures, r: usize, sigma: f64) -> Result<BowVector> {
    let assignments = features
        .keypoints
        .iter()
        .map(|k| vocab.assign_soft(&k.descriptor, r, sigma))
        .collect::<Result<Vec<_>>>()?;
    transform_assigned(vocab, features, &assignments)
}

pub fn transform_with(vocab: &Vocabulary, features: &ImageFeatures, params: AssignParams) -> Result<BowVector> {
    transform(vocab, features, params.r, params.sigma)
}

/// Builds the vector from precomputed per-keypoint assignments (one per
/// keypoint, in keypoint order).
pub fn transform_assigned(
    vocab: &Vocabulary,
    features: &ImageFeatures,
    assignments: &[Assignment],
) -> Result<BowVector> {
    if assignments.len() != features.keypoints.len() {
        return Err(Error::invalid(format!(
            "{} assignments for {} keypoints",
            assignments.len(),
            features.keypoints.len()
        )));
    }
    let words = vocab.len() as u32;
    let mut mass: BTreeMap<RowId, (f64, Vec<Posting>)> = BTreeMap::new();
    let mut total = 0.0;
    for (k, a) in features.keypoints.iter().zip(assignments) {
        let bin = vocab.binning().bin_of(k.size as f64) as u32;
        for &(word, w) in &a.pairs {
            if word >= words {
                return Err(Error::invalid(format!("word {word} outside vocabulary of {words}")));
            }
            let e = mass.entry(RowId::new(word, bin, words)).or_default();
            e.0 += w;
            e.1.push(Posting {
                keypoint_id: k.id,
                orientation_deg: k.orientation_deg,
                contributing_weight: w,
            });
            total += w;
        }
    }
    let mut rows: Vec<(RowId, BowRow)> = mass
        .into_iter()
        .filter_map(|(row, (m, mut postings))| {
            let weight = (m / total) * vocab.idf_of(row);
            if !(weight > 0.0) {
                return None;
            }
            for p in &mut postings {
                p.contributing_weight /= m;
            }
            Some((row, BowRow { weight, postings }))
        })
        .collect();
    let norm = rows.iter().map(|(_, r)| r.weight * r.weight).sum::<f64>().sqrt();
    for (_, r) in &mut rows {
        r.weight /= norm;
    }
    Ok(BowVector::from_rows(features.image_id, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::Descriptor;
    use crate::features::Keypoint;
    use crate::vocab::{fit_size_bins, train_akm, BinningMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vocab(seed: u64) -> Vocabulary {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<_> = (0..400).map(|_| Descriptor::random(256, &mut rng).unwrap()).collect();
        let mut v = train_akm(&data, 32, 10, seed).unwrap();
        v.set_binning(fit_size_bins(&[10.0, 12.0, 14.4], 3, BinningMode::DiscreteLevels).unwrap());
        let idf: Vec<f64> = (0..v.rows()).map(|_| rng.random_range(0.0..3.0)).collect();
        v.set_idf(idf).unwrap();
        v
    }

    fn image(seed: u64, n: usize) -> ImageFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kps = (0..n)
            .map(|i| {
                let size = [10.0, 12.0, 14.4][rng.random_range(0..3)];
                Keypoint::new(
                    i as u32,
                    0.0,
                    0.0,
                    size,
                    rng.random_range(0.0..360.0),
                    Descriptor::random(256, &mut rng).unwrap(),
                )
            })
            .collect();
        ImageFeatures::new(seed, kps)
    }

    /// Dense recomputation over all V x S rows.
    fn dense(v: &Vocabulary, img: &ImageFeatures, r: usize, sigma: f64) -> Vec<f64> {
        let mut m = vec![0.0; v.rows()];
        for k in &img.keypoints {
            let bin = v.binning().bin_of(k.size as f64);
            let mut dists: Vec<(u32, usize)> = (0..v.len())
                .map(|w| {
                    (
                        crate::descriptor::hamming_distance(&k.descriptor, &v.word(w)).unwrap(),
                        w,
                    )
                })
                .collect();
            dists.sort();
            let raw: Vec<f64> = dists[..r]
                .iter()
                .map(|&(d, _)| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
                .collect();
            let s: f64 = raw.iter().sum();
            for (&(_, w), x) in dists[..r].iter().zip(&raw) {
                m[w + v.len() * bin] += x / s;
            }
        }
        let total: f64 = m.iter().sum();
        let mut out: Vec<f64> = m.iter().enumerate().map(|(i, x)| x / total * v.idf()[i]).collect();
        let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.iter_mut().for_each(|x| *x /= norm);
        out
    }

    #[test]
    fn single_keypoint() {
        let v = vocab(1);
        let mut img = image(2, 1);
        img.keypoints[0].descriptor = v.word(0);
        let mut v = v;
        v.set_idf(vec![1.0; v.rows()]).unwrap();
        let b = transform(&v, &img, 1, 580.0).unwrap();
        assert_eq!(b.len(), 1);
        let row = &b.rows()[0].1;
        assert!((row.weight - 1.0).abs() < 1e-12);
        assert_eq!(row.postings.len(), 1);
        assert_eq!(row.postings[0].contributing_weight, 1.0);
    }

    #[test]
    fn duplicate_keypoints_share_row() {
        let mut v = vocab(3);
        v.set_idf(vec![1.0; v.rows()]).unwrap();
        let mut img = image(4, 2);
        img.keypoints[1].descriptor = img.keypoints[0].descriptor.clone();
        img.keypoints[1].size = img.keypoints[0].size;
        let b = transform(&v, &img, 1, 580.0).unwrap();
        assert_eq!(b.len(), 1);
        let p = &b.rows()[0].1.postings;
        assert_eq!(p.len(), 2);
        assert!(p.iter().all(|p| p.contributing_weight == 0.5));
    }

    #[test]
    fn matches_dense_recompute() {
        let v = vocab(5);
        let img = image(3, 50);
        let b = transform(&v, &img, 3, 580.0).unwrap();
        let d = dense(&v, &img, 3, 580.0);
        for (i, want) in d.iter().enumerate() {
            let got = b.get(RowId::from_index(i as u32)).map_or(0.0, |r| r.weight);
            assert!((got - want).abs() < 1e-9, "row {i}: {got} vs {want}");
        }
    }

    #[test]
    fn invariants_over_random_images() {
        let v = vocab(7);
        for seed in 0..20 {
            let img = image(100 + seed, 1 + seed as usize * 3);
            for r in [1, 3] {
                let b = transform(&v, &img, r, 40.0).unwrap();
                if b.is_empty() {
                    continue;
                }
                assert!((b.norm() - 1.0).abs() < 1e-6);
                for (_, row) in b.rows() {
                    assert!(row.weight > 0.0);
                    let s: f64 = row.postings.iter().map(|p| p.contributing_weight).sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
                if r == 1 {
                    assert!(b.len() <= img.keypoints.len());
                }
            }
            // constant rotation only touches postings
            let mut rotated = img.clone();
            for k in &mut rotated.keypoints {
                k.orientation_deg = crate::features::normalize_orientation(k.orientation_deg as f64 + 77.0);
            }
            let a = transform(&v, &img, 3, 40.0).unwrap();
            let c = transform(&v, &rotated, 3, 40.0).unwrap();
            let wa: Vec<_> = a.rows().iter().map(|(r, x)| (*r, x.weight)).collect();
            let wc: Vec<_> = c.rows().iter().map(|(r, x)| (*r, x.weight)).collect();
            assert_eq!(wa, wc);
        }
    }

    #[test]
    fn size_change_keeps_word() {
        let mut v = vocab(9);
        v.set_idf(vec![1.0; v.rows()]).unwrap();
        let img = image(11, 1);
        let mut moved = img.clone();
        moved.keypoints[0].size = if img.keypoints[0].size == 10.0 { 14.4 } else { 10.0 };
        let a = transform(&v, &img, 1, 580.0).unwrap();
        let b = transform(&v, &moved, 1, 580.0).unwrap();
        let words = v.len() as u32;
        assert_eq!(a.rows()[0].0.word(words), b.rows()[0].0.word(words));
        assert_ne!(a.rows()[0].0.size_bin(words), b.rows()[0].0.size_bin(words));
    }

    #[test]
    fn empty_image_gives_empty_vector() {
        let v = vocab(1);
        let b = transform(&v, &ImageFeatures::new(9, vec![]), 3, 580.0).unwrap();
        assert!(b.is_empty());
        assert_eq!(b.image_id, 9);
    }
}

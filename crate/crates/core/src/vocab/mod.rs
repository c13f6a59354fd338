//! Visual vocabularies: training, size bins, idf and word assignment.

mod akm;
pub mod ann;
mod binning;
mod file;
mod hkm;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

pub use akm::{train_akm, train_akm_with, AkmTrace};
pub use ann::{AnnParams, WordHit, WordIndex};
pub use binning::{fit_size_bins, size_bin_of, BinningMode, SizeBinning};
pub use file::{decode_vocab, encode_vocab, load_vocab, save_vocab, GTBV_MAGIC, GTBV_VERSION};
pub use hkm::{train_hkm, TreeNode, VocabularyTree};

use crate::bow::RowId;
use crate::descriptor::{Descriptor, DescriptorMatrix};
use crate::error::{Error, Result};
use crate::features::ImageFeatures;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabularyKind {
    Akm,
    Hkm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingParams {
    pub requested_words: u32,
    pub branching: u32,
    pub depth: u32,
    pub max_iters: u32,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    kind: VocabularyKind,
    words: DescriptorMatrix,
    ann: WordIndex,
    tree: Option<VocabularyTree>,
    binning: SizeBinning,
    idf: Vec<f64>,
    params: TrainingParams,
}

impl Vocabulary {
    pub(crate) fn from_words(
        kind: VocabularyKind,
        words: DescriptorMatrix,
        tree: Option<VocabularyTree>,
        ann: AnnParams,
        params: TrainingParams,
    ) -> Self {
        let ann = match kind {
            VocabularyKind::Akm => WordIndex::build(&words, ann),
            // HKM assigns by descent; the index is only an exhaustive scanner
            VocabularyKind::Hkm => WordIndex::build(
                &words,
                AnnParams {
                    exact_below: u32::MAX,
                    ..ann
                },
            ),
        };
        let n = words.len();
        Self {
            kind,
            words,
            ann,
            tree,
            binning: SizeBinning::single(),
            idf: vec![1.0; n],
            params,
        }
    }

    pub fn kind(&self) -> VocabularyKind {
        self.kind
    }

    /// Number of words `V`.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn width(&self) -> usize {
        self.words.width()
    }

    pub fn words(&self) -> &DescriptorMatrix {
        &self.words
    }

    pub fn word(&self, i: usize) -> Descriptor {
        self.words.get(i)
    }

    pub fn tree(&self) -> Option<&VocabularyTree> {
        self.tree.as_ref()
    }

    pub fn ann_params(&self) -> &AnnParams {
        self.ann.params()
    }

    pub fn params(&self) -> &TrainingParams {
        &self.params
    }

    pub fn binning(&self) -> &SizeBinning {
        &self.binning
    }

    pub fn size_bins(&self) -> usize {
        self.binning.bins()
    }

    pub fn rows(&self) -> usize {
        self.len() * self.size_bins()
    }

    pub fn idf(&self) -> &[f64] {
        &self.idf
    }

    pub fn idf_of(&self, row: RowId) -> f64 {
        self.idf[row.index()]
    }

    pub fn row_of(&self, word: u32, size: f64) -> RowId {
        RowId::new(word, self.binning.bin_of(size) as u32, self.len() as u32)
    }

    /// Replaces the size binning; idf resets to 1 for every new row.
    pub fn set_binning(&mut self, binning: SizeBinning) {
        self.idf = vec![1.0; self.len() * binning.bins()];
        self.binning = binning;
    }

    pub fn with_binning(mut self, binning: SizeBinning) -> Self {
        self.set_binning(binning);
        self
    }

    pub fn set_idf(&mut self, idf: Vec<f64>) -> Result<()> {
        if idf.len() != self.rows() {
            return Err(Error::invalid(format!(
                "idf has {} rows, vocabulary has {}",
                idf.len(),
                self.rows()
            )));
        }
        if idf.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid("idf values must be finite and non-negative"));
        }
        self.idf = idf;
        Ok(())
    }

    /// Same words and assignment structure with a different ANN setting.
    pub fn with_ann(mut self, ann: AnnParams) -> Self {
        if self.kind == VocabularyKind::Akm {
            self.ann = WordIndex::build(&self.words, ann);
        }
        self
    }

    /// SHA-256 of the canonical GTBV encoding.
    pub fn fingerprint(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        Sha256::digest(encode_vocab(self)).into()
    }

    fn check(&self, d: &Descriptor) -> Result<()> {
        if d.width() != self.width() {
            return Err(Error::WidthMismatch {
                left: self.width(),
                right: d.width(),
            });
        }
        Ok(())
    }

    /// `(word, distance)` of the assigned word.
    pub fn assign_hard(&self, d: &Descriptor) -> Result<(u32, u32)> {
        self.check(d)?;
        match (&self.kind, &self.tree) {
            (VocabularyKind::Hkm, Some(tree)) => Ok(tree.descend(d.lanes())),
            _ => {
                let h = self.ann.search(&self.words, d.lanes(), 1)[0];
                Ok((h.word, h.distance))
            }
        }
    }

    /// The `r` nearest words ascending by `(distance, word)`. HKM with `r = 1`
    /// uses tree descent; HKM with `r > 1` scans all leaves.
    pub fn nearest(&self, d: &Descriptor, r: usize) -> Result<ann::Hits> {
        self.check(d)?;
        if r == 0 || r > self.len() {
            return Err(Error::invalid(format!("r = {r} must lie in 1..={}", self.len())));
        }
        if r == 1 && self.kind == VocabularyKind::Hkm {
            let (word, distance) = self.assign_hard(d)?;
            return Ok(smallvec::smallvec![WordHit { distance, word }]);
        }
        Ok(self.ann.search(&self.words, d.lanes(), r))
    }

    pub fn assign_soft(&self, d: &Descriptor, r: usize, sigma: f64) -> Result<Assignment> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::invalid("sigma must be positive"));
        }
        let hits = self.nearest(d, r)?;
        Ok(Assignment::from_hits(&hits, sigma))
    }
}

pub fn assign_hard(vocab: &Vocabulary, d: &Descriptor) -> Result<(u32, u32)> {
    vocab.assign_hard(d)
}

pub fn assign_soft(vocab: &Vocabulary, d: &Descriptor, r: usize, sigma: f64) -> Result<Assignment> {
    vocab.assign_soft(d, r, sigma)
}

/// Soft assignment of one descriptor: distinct words with L1-normalized
/// Gaussian weights, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(u32, f64)>,
}

impl Assignment {
    /// Weight `exp(-d^2 / (2 sigma^2))` per hit, then L1 normalization.
    pub fn from_hits(hits: &[WordHit], sigma: f64) -> Self {
        if hits.len() == 1 {
            return Self {
                pairs: vec![(hits[0].word, 1.0)],
            };
        }
        let denom = 2.0 * sigma * sigma;
        let raw: Vec<f64> = hits
            .iter()
            .map(|h| {
                let d = h.distance as f64;
                (-(d * d) / denom).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        // fully underflowed weights: fall back to the nearest word
        if !(total > 0.0) {
            return Self {
                pairs: vec![(hits[0].word, 1.0)],
            };
        }
        Self {
            pairs: hits
                .iter()
                .zip(raw)
                .filter(|(_, w)| *w > 0.0)
                .map(|(h, w)| (h.word, w / total))
                .collect(),
        }
    }
}

/// Gathers every keypoint size of a corpus, for fitting bins.
pub fn keypoint_sizes(corpus: &[ImageFeatures]) -> Vec<f64> {
    corpus
        .iter()
        .flat_map(|img| img.keypoints.iter().map(|k| k.size as f64))
        .collect()
}

/// `idf(row) = ln(N / n_row)` over hard assignments; unseen rows get 0.
pub fn compute_idf(vocab: &Vocabulary, corpus: &[ImageFeatures]) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::InsufficientData("idf needs a non-empty corpus".into()));
    }
    use rayon::prelude::*;
    let per_image: Vec<Vec<usize>> = corpus
        .par_iter()
        .map(|img| -> Result<Vec<usize>> {
            let mut rows = HashSet::new();
            for k in &img.keypoints {
                let (w, _) = vocab.assign_hard(&k.descriptor)?;
                rows.insert(vocab.row_of(w, k.size as f64).index());
            }
            Ok(rows.into_iter().collect())
        })
        .collect::<Result<_>>()?;
    let mut df = vec![0u32; vocab.rows()];
    for rows in per_image {
        for r in rows {
            df[r] += 1;
        }
    }
    let n = corpus.len() as f64;
    Ok(df
        .into_iter()
        .map(|c| if c == 0 { 0.0 } else { (n / c as f64).ln() })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Keypoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_descriptors(n: usize, seed: u64) -> Vec<Descriptor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Descriptor::random(256, &mut rng).unwrap()).collect()
    }

    fn direct_weights(ds: &[u32], sigma: f64) -> Vec<f64> {
        let raw: Vec<f64> = ds
            .iter()
            .map(|&d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|w| w / s).collect()
    }

    #[test]
    fn exact_hit_returns_zero_distance() {
        let data = random_descriptors(200, 1);
        let v = train_akm(&data, 40, 10, 2).unwrap();
        let w17 = v.word(17);
        assert_eq!(v.assign_hard(&w17).unwrap(), (17, 0));
        let h = train_hkm(&data, 4, 3, 2).unwrap();
        let (w, d) = h.assign_hard(&h.word(5)).unwrap();
        assert_eq!(d, 0);
        assert_eq!(h.word(w as usize), h.word(5));
    }

    #[test]
    fn width_mismatch() {
        let v = train_akm(&random_descriptors(20, 1), 4, 3, 0).unwrap();
        let d = Descriptor::zeros(128).unwrap();
        assert!(matches!(v.assign_hard(&d), Err(Error::WidthMismatch { .. })));
    }

    #[test]
    fn worked_soft_weights() {
        let hits = [WordHit { distance: 10, word: 3 }, WordHit { distance: 50, word: 8 }];
        let a = Assignment::from_hits(&hits, 580.0);
        let want = direct_weights(&[10, 50], 580.0);
        assert!((a.pairs[0].1 - 0.50089).abs() < 5e-6 && (a.pairs[1].1 - 0.49911).abs() < 5e-6);
        assert!((a.pairs[0].1 - want[0]).abs() < 1e-12);
        let eq = Assignment::from_hits(
            &[WordHit { distance: 7, word: 0 }, WordHit { distance: 7, word: 1 }],
            3.0,
        );
        assert_eq!(eq.pairs, vec![(0, 0.5), (1, 0.5)]);
    }

    #[test]
    fn soft_assignment_contract() {
        let v = train_akm(&random_descriptors(400, 3), 60, 10, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let q = Descriptor::random(256, &mut rng).unwrap();
            let one = v.assign_soft(&q, 1, 580.0).unwrap();
            assert_eq!(one.pairs, vec![(v.assign_hard(&q).unwrap().0, 1.0)]);
            let sigma = rng.random_range(5.0..600.0);
            let a = v.assign_soft(&q, 3, sigma).unwrap();
            let sum: f64 = a.pairs.iter().map(|p| p.1).sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(a.pairs.windows(2).all(|w| w[0].1 >= w[1].1 && w[0].0 != w[1].0));
            assert!(a.pairs.iter().all(|p| p.1 > 0.0));
        }
        assert!(v.assign_soft(&rng_desc(), 61, 580.0).is_err());
        assert!(v.assign_soft(&rng_desc(), 0, 580.0).is_err());
        assert!(v.assign_soft(&rng_desc(), 2, 0.0).is_err());
    }

    fn rng_desc() -> Descriptor {
        Descriptor::zeros(256).unwrap()
    }

    #[test]
    fn akm_matches_exhaustive_scan_at_1024() {
        let v = train_akm(&random_descriptors(3000, 4), 1024, 3, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let q = Descriptor::random(256, &mut rng).unwrap();
            let want = ann::scan_nearest(v.words(), q.lanes(), 1)[0];
            assert_eq!(v.assign_hard(&q).unwrap(), (want.word, want.distance));
        }
    }

    #[test]
    fn idf_matches_recount() {
        let data = random_descriptors(300, 9);
        let mut v = train_akm(&data, 16, 10, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let corpus: Vec<ImageFeatures> = (0..12)
            .map(|i| {
                let kps = (0..rng.random_range(0..15))
                    .map(|k| {
                        let size = if rng.random_bool(0.5) { 10.0 } else { 20.0 };
                        Keypoint::new(k, 0.0, 0.0, size, 0.0, data[rng.random_range(0..data.len())].clone())
                    })
                    .collect();
                ImageFeatures::new(i, kps)
            })
            .collect();
        v.set_binning(fit_size_bins(&[10.0, 20.0], 2, BinningMode::DiscreteLevels).unwrap());
        let idf = compute_idf(&v, &corpus).unwrap();
        assert_eq!(idf.len(), v.rows());
        for (row, &got) in idf.iter().enumerate() {
            let (word, bin) = (row % 16, row / 16);
            let n = corpus
                .iter()
                .filter(|img| {
                    img.keypoints.iter().any(|k| {
                        let b = if k.size == 10.0 { 0 } else { 1 };
                        b == bin && v.assign_hard(&k.descriptor).unwrap().0 as usize == word
                    })
                })
                .count();
            let want = if n == 0 { 0.0 } else { (12.0 / n as f64).ln() };
            assert!((got - want).abs() < 1e-12);
        }
        assert!(compute_idf(&v, &[]).is_err());
    }

    #[test]
    fn idf_extremes() {
        let data = random_descriptors(10, 1);
        let v = train_akm(&data, 2, 5, 1).unwrap();
        let w0 = v.word(0);
        let w1 = v.word(1);
        let img = |id, ds: Vec<&Descriptor>| {
            ImageFeatures::new(
                id,
                ds.into_iter()
                    .enumerate()
                    .map(|(i, d)| Keypoint::new(i as u32, 0.0, 0.0, 1.0, 0.0, d.clone()))
                    .collect(),
            )
        };
        let corpus = vec![
            img(0, vec![&w0, &w1]),
            img(1, vec![&w0]),
            img(2, vec![&w0]),
            img(3, vec![&w0]),
        ];
        let idf = compute_idf(&v, &corpus).unwrap();
        assert_eq!(idf[0], 0.0);
        assert!((idf[1] - 4f64.ln()).abs() < 1e-12);
    }
}

//! Flat k-majority vocabulary trained with an ANN assignment step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::ann::{accumulate_bits, center_from_counts, kmeanspp_seeds, AnnParams, WordIndex};
use super::{TrainingParams, Vocabulary, VocabularyKind};
use crate::descriptor::{Descriptor, DescriptorMatrix};
use crate::error::{Error, Result};

/// Distortion (sum of Hamming distances to the assigned word) after each
/// assignment step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AkmTrace {
    pub distortion: Vec<u64>,
    pub changed: Vec<usize>,
}

pub fn train_akm(descriptors: &[Descriptor], words: usize, max_iters: usize, seed: u64) -> Result<Vocabulary> {
    train_akm_with(descriptors, words, max_iters, seed, AnnParams::default()).map(|(v, _)| v)
}

pub fn train_akm_with(
    descriptors: &[Descriptor],
    words: usize,
    max_iters: usize,
    seed: u64,
    ann: AnnParams,
) -> Result<(Vocabulary, AkmTrace)> {
    if words == 0 {
        return Err(Error::invalid("vocabulary size must be at least 1"));
    }
    if descriptors.len() < words {
        return Err(Error::InsufficientData(format!(
            "{} descriptors cannot train {words} words",
            descriptors.len()
        )));
    }
    let width = descriptors[0].width();
    let data = DescriptorMatrix::from_descriptors(width, descriptors)?;
    let n = data.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let members: Vec<u32> = (0..n as u32).collect();
    let seeds = kmeanspp_seeds(&data, &members, words, &mut rng);
    let mut centers = DescriptorMatrix::new(width)?;
    for s in seeds {
        centers.push(&data.get(s))?;
    }

    let mut assign = vec![u32::MAX; n];
    let mut trace = AkmTrace::default();
    for _ in 0..max_iters.max(1) {
        let ann_seeded = AnnParams {
            seed: ann.seed ^ seed,
            ..ann
        };
        let index = WordIndex::build(&centers, ann_seeded);
        let hits: Vec<(u32, u32)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let h = index.search(&centers, data.row(i), 1)[0];
                (h.word, h.distance)
            })
            .collect();
        let mut changed = 0usize;
        let mut distortion = 0u64;
        for (a, &(w, d)) in assign.iter_mut().zip(&hits) {
            if *a != w {
                changed += 1;
                *a = w;
            }
            distortion += d as u64;
        }
        trace.distortion.push(distortion);
        trace.changed.push(changed);

        let mut counts = vec![0u32; words * width];
        let mut sizes = vec![0u32; words];
        for (i, &w) in assign.iter().enumerate() {
            sizes[w as usize] += 1;
            accumulate_bits(data.row(i), &mut counts[w as usize * width..(w as usize + 1) * width]);
        }
        for w in 0..words {
            if sizes[w] == 0 {
                continue;
            }
            let prev = centers.row(w).to_vec();
            let next = center_from_counts(&counts[w * width..(w + 1) * width], sizes[w], Some(&prev), width);
            centers.row_mut(w).copy_from_slice(&next);
        }
        log::debug!("akm iteration: distortion {distortion}, {changed} reassigned");
        if (changed as f64) < 0.001 * n as f64 {
            break;
        }
    }

    let params = TrainingParams {
        requested_words: words as u32,
        branching: 0,
        depth: 0,
        max_iters: max_iters as u32,
        seed,
    };
    Ok((
        Vocabulary::from_words(VocabularyKind::Akm, centers, None, ann, params),
        trace,
    ))
}

//! Orientation-verifying inverse index.
//!
//! Each `(word, size_bin)` row holds one entry per database image that
//! populates it: the image's row weight plus its keypoint postings. A query
//! enumerates, for every shared row, all (query posting, db posting) pairs
//! and adds `q_weight * db_weight * q_contrib * db_contrib` to the image's
//! orientation-difference bin `floor(angle_diff(q, db) / (360 / R))`. An
//! image scores the maximum of its `R` bins, and only the pairs falling in
//! that bin are returned as matches.

mod file;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use file::{decode_index, encode_index, load_index, save_index, GTBI_MAGIC, GTBI_VERSION};

use crate::bow::{BowRow, BowVector, Posting, RowId};
use crate::error::{Error, Result};
use crate::geometry::angle_diff;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexParams {
    /// `R`; 1 disables orientation verification.
    pub orientation_bins: u32,
    /// Also credit each pair to the two neighbouring bins. Off by default;
    /// with it on, bin scores no longer partition the dot product.
    pub smear: bool,
}

impl Default for IndexParams {
    fn default() -> Self {
        Self {
            orientation_bins: 6,
            smear: false,
        }
    }
}

impl IndexParams {
    pub fn with_bins(orientation_bins: u32) -> Self {
        Self {
            orientation_bins,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.orientation_bins == 0 || self.orientation_bins > 360 {
            return Err(Error::invalid(format!(
                "orientation bin count must be in 1..=360, got {}",
                self.orientation_bins
            )));
        }
        Ok(())
    }

    /// Bin of an orientation difference in `[0, 360)`.
    pub fn bin_of(&self, delta_deg: f64) -> usize {
        let r = self.orientation_bins as usize;
        ((delta_deg / (360.0 / r as f64)) as usize).min(r - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    image_id: u64,
    slot: u32,
    weight: f64,
    start: u32,
    len: u32,
}

#[derive(Debug, Clone, Default)]
struct Row {
    /// Ascending by image id.
    entries: Vec<Entry>,
    postings: Vec<Posting>,
}

impl Row {
    fn position(&self, image_id: u64) -> std::result::Result<usize, usize> {
        self.entries.binary_search_by_key(&image_id, |e| e.image_id)
    }

    fn postings(&self, e: &Entry) -> &[Posting] {
        &self.postings[e.start as usize..(e.start + e.len) as usize]
    }

    fn remove(&mut self, image_id: u64) {
        if let Ok(i) = self.position(image_id) {
            self.entries.remove(i);
            let mut compact = Vec::with_capacity(self.postings.len());
            for e in &mut self.entries {
                let start = compact.len() as u32;
                compact.extend_from_slice(&self.postings[e.start as usize..(e.start + e.len) as usize]);
                e.start = start;
            }
            self.postings = compact;
        }
    }
}

#[derive(Debug, Clone)]
struct ImageRecord {
    slot: u32,
    rows: Vec<u32>,
}

/// A db keypoint matched to a query keypoint inside the winning bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Match {
    pub query_keypoint: u32,
    pub db_keypoint: u32,
    pub row: RowId,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub image_id: u64,
    pub score: f64,
    pub best_bin: u32,
    pub bin_scores: Vec<f64>,
    pub matches: Vec<Match>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct QueryResult {
    pub candidates: Vec<Candidate>,
}

impl QueryResult {
    pub fn ranked_ids(&self) -> Vec<u64> {
        self.candidates.iter().map(|c| c.image_id).collect()
    }
}

#[derive(Debug, Clone)]
pub struct InverseIndex {
    words: u32,
    size_bins: u32,
    params: IndexParams,
    vocab_fingerprint: [u8; 32],
    rows: Vec<Row>,
    images: BTreeMap<u64, ImageRecord>,
    slot_ids: Vec<u64>,
    free_slots: Vec<u32>,
}

impl InverseIndex {
    pub fn new(vocab: &Vocabulary, params: IndexParams) -> Result<Self> {
        Self::with_shape(
            vocab.len() as u32,
            vocab.size_bins() as u32,
            params,
            vocab.fingerprint(),
        )
    }

    pub(crate) fn with_shape(
        words: u32,
        size_bins: u32,
        params: IndexParams,
        vocab_fingerprint: [u8; 32],
    ) -> Result<Self> {
        params.validate()?;
        if words == 0 || size_bins == 0 {
            return Err(Error::invalid("index needs at least one word and one size bin"));
        }
        Ok(Self {
            words,
            size_bins,
            params,
            vocab_fingerprint,
            rows: vec![Row::default(); words as usize * size_bins as usize],
            images: BTreeMap::new(),
            slot_ids: Vec::new(),
            free_slots: Vec::new(),
        })
    }

    pub fn params(&self) -> &IndexParams {
        &self.params
    }

    pub fn words(&self) -> u32 {
        self.words
    }

    pub fn size_bins(&self) -> u32 {
        self.size_bins
    }

    pub fn vocab_fingerprint(&self) -> &[u8; 32] {
        &self.vocab_fingerprint
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn contains(&self, image_id: u64) -> bool {
        self.images.contains_key(&image_id)
    }

    /// Image ids in ascending order.
    pub fn image_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.images.keys().copied()
    }

    /// Number of images listed in a row.
    pub fn row_len(&self, row: RowId) -> usize {
        self.rows.get(row.index()).map_or(0, |r| r.entries.len())
    }

    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.fingerprint() != self.vocab_fingerprint {
            return Err(Error::VocabularyMismatch(format!(
                "index was built with vocabulary {}, got {}",
                hex::encode(self.vocab_fingerprint),
                hex::encode(vocab.fingerprint())
            )));
        }
        Ok(())
    }

    fn check_rows(&self, bow: &BowVector) -> Result<()> {
        if let Some((row, _)) = bow.rows().last() {
            if row.index() >= self.rows.len() {
                return Err(Error::VocabularyMismatch(format!(
                    "row {} outside an index of {} rows",
                    row.index(),
                    self.rows.len()
                )));
            }
        }
        Ok(())
    }

    pub fn insert(&mut self, bow: &BowVector) -> Result<()> {
        if self.images.contains_key(&bow.image_id) {
            return Err(Error::DuplicateImage(bow.image_id));
        }
        self.check_rows(bow)?;
        let slot = match self.free_slots.pop() {
            Some(s) => {
                self.slot_ids[s as usize] = bow.image_id;
                s
            }
            None => {
                self.slot_ids.push(bow.image_id);
                (self.slot_ids.len() - 1) as u32
            }
        };
        let mut touched = Vec::with_capacity(bow.len());
        for (row, r) in bow.rows() {
            let target = &mut self.rows[row.index()];
            let entry = Entry {
                image_id: bow.image_id,
                slot,
                weight: r.weight,
                start: target.postings.len() as u32,
                len: r.postings.len() as u32,
            };
            target.postings.extend_from_slice(&r.postings);
            // ascending inserts append; others fall back to an ordered insert
            match target.entries.last() {
                Some(last) if last.image_id > bow.image_id => {
                    let at = target.position(bow.image_id).unwrap_err();
                    target.entries.insert(at, entry);
                }
                _ => target.entries.push(entry),
            }
            touched.push(row.index() as u32);
        }
        self.images.insert(bow.image_id, ImageRecord { slot, rows: touched });
        Ok(())
    }

    pub fn remove(&mut self, image_id: u64) -> Result<()> {
        let rec = self.images.remove(&image_id).ok_or(Error::UnknownImage(image_id))?;
        for &row in &rec.rows {
            self.rows[row as usize].remove(image_id);
        }
        self.slot_ids[rec.slot as usize] = u64::MAX;
        self.free_slots.push(rec.slot);
        Ok(())
    }

    /// Reconstructs the stored vector of an image.
    pub fn bow_of(&self, image_id: u64) -> Result<BowVector> {
        let rec = self.images.get(&image_id).ok_or(Error::UnknownImage(image_id))?;
        let rows = rec
            .rows
            .iter()
            .map(|&r| {
                let row = &self.rows[r as usize];
                let e = &row.entries[row.position(image_id).expect("registry row lists the image")];
                (
                    RowId::from_index(r),
                    BowRow {
                        weight: e.weight,
                        postings: row.postings(e).to_vec(),
                    },
                )
            })
            .collect();
        Ok(BowVector::from_rows(image_id, rows))
    }

    /// Ranked candidates, best first. Ties on score go to the lower image id.
    pub fn query(&self, bow: &BowVector, top_n: usize) -> Result<QueryResult> {
        self.query_impl(bow, top_n, true)
    }

    /// As [`InverseIndex::query`] but without collecting matches.
    pub fn query_scores(&self, bow: &BowVector, top_n: usize) -> Result<QueryResult> {
        self.query_impl(bow, top_n, false)
    }

    fn query_impl(&self, bow: &BowVector, top_n: usize, with_matches: bool) -> Result<QueryResult> {
        self.check_rows(bow)?;
        if top_n == 0 || self.images.is_empty() {
            return Ok(QueryResult::default());
        }
        let r = self.params.orientation_bins as usize;
        let mut bins = vec![0.0f64; self.slot_ids.len() * r];
        let mut seen = vec![false; self.slot_ids.len()];
        let mut touched: Vec<u32> = Vec::new();
        for (row, qr) in bow.rows() {
            let row = &self.rows[row.index()];
            for e in &row.entries {
                if !seen[e.slot as usize] {
                    seen[e.slot as usize] = true;
                    touched.push(e.slot);
                }
                let acc = &mut bins[e.slot as usize * r..(e.slot as usize + 1) * r];
                if r == 1 {
                    // contributing weights sum to one on both sides
                    acc[0] += qr.weight * e.weight;
                    continue;
                }
                let w = qr.weight * e.weight;
                for qp in &qr.postings {
                    for dp in row.postings(e) {
                        let b = self.pair_bin(qp, dp);
                        let add = w * qp.contributing_weight * dp.contributing_weight;
                        acc[b] += add;
                        if self.params.smear {
                            for n in self.neighbours(b) {
                                acc[n] += add;
                            }
                        }
                    }
                }
            }
        }

        let mut ranked: Vec<(f64, u64, u32, u32)> = touched
            .iter()
            .map(|&slot| {
                let acc = &bins[slot as usize * r..(slot as usize + 1) * r];
                let mut best = 0;
                for (i, &v) in acc.iter().enumerate() {
                    if v > acc[best] {
                        best = i;
                    }
                }
                (acc[best], self.slot_ids[slot as usize], slot, best as u32)
            })
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        ranked.truncate(top_n);

        let mut rank_of = vec![u32::MAX; self.slot_ids.len()];
        let mut candidates: Vec<Candidate> = ranked
            .iter()
            .enumerate()
            .map(|(i, &(score, image_id, slot, best_bin))| {
                rank_of[slot as usize] = i as u32;
                Candidate {
                    image_id,
                    score,
                    best_bin,
                    bin_scores: bins[slot as usize * r..(slot as usize + 1) * r].to_vec(),
                    matches: Vec::new(),
                }
            })
            .collect();
        if !with_matches {
            return Ok(QueryResult { candidates });
        }
        for (row_id, qr) in bow.rows() {
            let row = &self.rows[row_id.index()];
            for e in &row.entries {
                let rank = rank_of[e.slot as usize];
                if rank == u32::MAX {
                    continue;
                }
                let c = &mut candidates[rank as usize];
                let w = qr.weight * e.weight;
                for qp in &qr.postings {
                    for dp in row.postings(e) {
                        if self.pair_bin(qp, dp) == c.best_bin as usize {
                            c.matches.push(Match {
                                query_keypoint: qp.keypoint_id,
                                db_keypoint: dp.keypoint_id,
                                row: *row_id,
                                weight: w * qp.contributing_weight * dp.contributing_weight,
                            });
                        }
                    }
                }
            }
        }
        Ok(QueryResult { candidates })
    }

    fn pair_bin(&self, q: &Posting, db: &Posting) -> usize {
        self.params
            .bin_of(angle_diff(q.orientation_deg as f64, db.orientation_deg as f64))
    }

    fn neighbours(&self, b: usize) -> impl Iterator<Item = usize> {
        let r = self.params.orientation_bins as usize;
        let lo = (b + r - 1) % r;
        let hi = (b + 1) % r;
        [lo, hi]
            .into_iter()
            .enumerate()
            .filter(move |&(i, n)| n != b && !(i == 1 && n == lo))
            .map(|(_, n)| n)
    }
}

//! GTBI index snapshot.
//!
//! ```text
//! "GTBI" u16 version u32 V u32 S u32 R u8 smear [u8; 32] vocabulary sha256
//! u32 image_count, per image in ascending id order:
//!   u64 image_id u32 row_count, per row in ascending order:
//!     u32 row f64 weight u32 posting_count,
//!     per posting: u32 keypoint_id f32 orientation_deg f64 contributing_weight
//! ```
//!
//! Loading replays the images through `insert`, so a reloaded index answers
//! queries bit-identically.

use std::fs;
use std::path::Path;

use super::{IndexParams, InverseIndex};
use crate::bow::{BowRow, BowVector, Posting, RowId};
use crate::codec::{Reader, Writer};
use crate::error::{Error, FormatError, Result};
use crate::vocab::Vocabulary;

pub const GTBI_MAGIC: &[u8; 4] = b"GTBI";
pub const GTBI_VERSION: u16 = 1;

pub fn encode_index(index: &InverseIndex) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(GTBI_MAGIC);
    w.u16(GTBI_VERSION);
    w.u32(index.words);
    w.u32(index.size_bins);
    w.u32(index.params.orientation_bins);
    w.u8(index.params.smear as u8);
    w.bytes(&index.vocab_fingerprint);
    w.len_u32(index.len());
    for id in index.image_ids() {
        let bow = index.bow_of(id).expect("listed image");
        w.u64(id);
        w.len_u32(bow.len());
        for (row, r) in bow.rows() {
            w.u32(row.index() as u32);
            w.f64(r.weight);
            w.len_u32(r.postings.len());
            for p in &r.postings {
                w.u32(p.keypoint_id);
                w.f32(p.orientation_deg);
                w.f64(p.contributing_weight);
            }
        }
    }
    w.buf
}

pub fn decode_index(buf: &[u8]) -> std::result::Result<InverseIndex, FormatError> {
    let mut r = Reader::new(buf);
    r.magic(GTBI_MAGIC)?;
    r.version("GTBI", GTBI_VERSION)?;
    let off = r.offset();
    let words = r.u32()?;
    let size_bins = r.u32()?;
    let params = IndexParams {
        orientation_bins: r.u32()?,
        smear: match r.u8()? {
            0 => false,
            1 => true,
            s => return Err(r.invalid(off + 12, format!("smear flag must be 0 or 1, got {s}"))),
        },
    };
    let mut fingerprint = [0u8; 32];
    fingerprint.copy_from_slice(r.take(32)?);
    let mut index =
        InverseIndex::with_shape(words, size_bins, params, fingerprint).map_err(|e| r.invalid(off, e.to_string()))?;
    let n = r.count(12)?;
    let mut last: Option<u64> = None;
    for _ in 0..n {
        let off = r.offset();
        let id = r.u64()?;
        if last.is_some_and(|l| l >= id) {
            return Err(r.invalid(off, format!("image ids not strictly ascending at {id}")));
        }
        last = Some(id);
        let nrows = r.count(16)?;
        let mut rows = Vec::with_capacity(nrows);
        let mut prev: Option<u32> = None;
        for _ in 0..nrows {
            let off = r.offset();
            let row = r.u32()?;
            if prev.is_some_and(|p| p >= row) || row as u64 >= words as u64 * size_bins as u64 {
                return Err(r.invalid(off, format!("row {row} out of order or out of range")));
            }
            prev = Some(row);
            let weight = r.f64()?;
            let np = r.count(16)?;
            let mut postings = Vec::with_capacity(np);
            for _ in 0..np {
                postings.push(Posting {
                    keypoint_id: r.u32()?,
                    orientation_deg: r.f32()?,
                    contributing_weight: r.f64()?,
                });
            }
            rows.push((RowId::from_index(row), BowRow { weight, postings }));
        }
        index
            .insert(&BowVector::from_rows(id, rows))
            .map_err(|e| r.invalid(off, e.to_string()))?;
    }
    r.finish()?;
    Ok(index)
}

pub fn save_index(path: impl AsRef<Path>, index: &InverseIndex) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_index(index)).map_err(|e| Error::Io(e).at_path(path))
}

/// Loads a snapshot and checks that it was built against `vocab`.
pub fn load_index(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<InverseIndex> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::Io(e).at_path(path))?;
    let index = decode_index(&buf).map_err(|e| Error::Parse(e).at_path(path))?;
    index.check_vocabulary(vocab)?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bow::transform;
    use crate::descriptor::Descriptor;
    use crate::features::{ImageFeatures, Keypoint};
    use crate::vocab::train_akm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Vocabulary, Vec<BowVector>) {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<_> = (0..400).map(|_| Descriptor::random(256, &mut rng).unwrap()).collect();
        let v = train_akm(&data, 40, 4, 8).unwrap();
        let bows = (0..100u64)
            .map(|id| {
                let kps = (0..30)
                    .map(|i| {
                        let d = data[rng.random_range(0..data.len())].clone();
                        Keypoint::new(i, 1.0, 2.0, 31.0, rng.random_range(0.0..360.0), d)
                    })
                    .collect();
                transform(&v, &ImageFeatures::new(id, kps), 3, 70.0).unwrap()
            })
            .collect();
        (v, bows)
    }

    #[test]
    fn round_trip_preserves_queries() {
        let (v, bows) = setup();
        let mut index = InverseIndex::new(&v, IndexParams::default()).unwrap();
        bows[..60].iter().for_each(|b| index.insert(b).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.gtbi");
        save_index(&path, &index).unwrap();
        let back = load_index(&path, &v).unwrap();
        assert_eq!(encode_index(&back), encode_index(&index));
        for b in &bows {
            assert_eq!(back.query(b, 20).unwrap(), index.query(b, 20).unwrap());
        }
    }

    #[test]
    fn empty_round_trip() {
        let (v, _) = setup();
        let index = InverseIndex::new(&v, IndexParams::with_bins(1)).unwrap();
        let back = decode_index(&encode_index(&index)).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.params().orientation_bins, 1);
    }

    #[test]
    fn structured_errors() {
        let (v, bows) = setup();
        let mut index = InverseIndex::new(&v, IndexParams::default()).unwrap();
        index.insert(&bows[0]).unwrap();
        let bytes = encode_index(&index);
        assert!(matches!(
            decode_index(&bytes[..bytes.len() - 5]),
            Err(FormatError::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_index(&bad), Err(FormatError::BadMagic { .. })));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let other: Vec<_> = (0..50).map(|_| Descriptor::random(256, &mut rng).unwrap()).collect();
        let other = train_akm(&other, 40, 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.gtbi");
        save_index(&path, &index).unwrap();
        assert!(matches!(load_index(&path, &other), Err(Error::VocabularyMismatch(_))));
    }
}

//! GTBV vocabulary file.
//!
//! ```text
//! "GTBV" u16 version u8 kind u32 V u32 S u16 width
//! u8 binning_mode u32 threshold_count f64[threshold_count]
//! V x (width/8) word bytes
//! u32 idf_count f64[idf_count]
//! u32 requested_words u32 k u32 L u32 max_iters u64 seed
//! u32 ann_branching u32 ann_leaf u32 ann_max_checks (0 = unbounded) u32 ann_exact_below u64 ann_seed
//! u32 tree_nodes, per node: u32 first_child u32 child_count u32 word, (width/8) center bytes
//! ```

use std::fs;
use std::path::Path;

use super::{
    AnnParams, BinningMode, SizeBinning, TrainingParams, TreeNode, Vocabulary, VocabularyKind, VocabularyTree,
};
use crate::codec::{Reader, Writer};
use crate::descriptor::{check_width, Descriptor, DescriptorMatrix};
use crate::error::{Error, FormatError, Result};

pub const GTBV_MAGIC: &[u8; 4] = b"GTBV";
pub const GTBV_VERSION: u16 = 1;

pub fn encode_vocab(v: &Vocabulary) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(GTBV_MAGIC);
    w.u16(GTBV_VERSION);
    w.u8(match v.kind {
        VocabularyKind::Akm => 0,
        VocabularyKind::Hkm => 1,
    });
    w.len_u32(v.len());
    w.len_u32(v.size_bins());
    w.u16(v.width() as u16);
    w.u8(match v.binning.mode() {
        BinningMode::Percentile => 0,
        BinningMode::DiscreteLevels => 1,
    });
    w.len_u32(v.binning.thresholds().len());
    v.binning.thresholds().iter().for_each(|&t| w.f64(t));
    for i in 0..v.len() {
        w.bytes(&v.word(i).to_bytes());
    }
    w.len_u32(v.idf.len());
    v.idf.iter().for_each(|&x| w.f64(x));
    let p = &v.params;
    w.u32(p.requested_words);
    w.u32(p.branching);
    w.u32(p.depth);
    w.u32(p.max_iters);
    w.u64(p.seed);
    let a = v.ann_params();
    w.u32(a.branching);
    w.u32(a.leaf_size);
    w.u32(a.max_checks.unwrap_or(0));
    w.u32(a.exact_below);
    w.u64(a.seed);
    match &v.tree {
        Some(t) => {
            w.len_u32(t.nodes.len());
            for (i, n) in t.nodes.iter().enumerate() {
                w.u32(n.first_child);
                w.u32(n.child_count);
                w.u32(n.word);
                w.bytes(&t.centers.get(i).to_bytes());
            }
        }
        None => w.u32(0),
    }
    w.buf
}

pub fn decode_vocab(buf: &[u8]) -> std::result::Result<Vocabulary, FormatError> {
    let mut r = Reader::new(buf);
    r.magic(GTBV_MAGIC)?;
    r.version("GTBV", GTBV_VERSION)?;
    let off = r.offset();
    let kind = match r.u8()? {
        0 => VocabularyKind::Akm,
        1 => VocabularyKind::Hkm,
        k => return Err(r.invalid(off, format!("unknown vocabulary kind {k}"))),
    };
    let nwords = r.u32()? as usize;
    let bins = r.u32()? as usize;
    let off = r.offset();
    let width = r.u16()? as usize;
    check_width(width).map_err(|e| r.invalid(off, e.to_string()))?;
    if nwords == 0 {
        return Err(r.invalid(off, "vocabulary has no words"));
    }
    let off = r.offset();
    let mode = match r.u8()? {
        0 => BinningMode::Percentile,
        1 => BinningMode::DiscreteLevels,
        m => return Err(r.invalid(off, format!("unknown binning mode {m}"))),
    };
    let nt = r.count(8)?;
    let thresholds = (0..nt).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
    let binning = SizeBinning::from_parts(mode, thresholds).map_err(|e| r.invalid(off, e.to_string()))?;
    if binning.bins() != bins {
        return Err(r.invalid(
            off,
            format!("header says {bins} bins, thresholds give {}", binning.bins()),
        ));
    }
    let wb = width / 8;
    if nwords.saturating_mul(wb) > r.remaining() {
        return Err(FormatError::Truncated {
            offset: r.offset(),
            needed: nwords * wb - r.remaining(),
        });
    }
    let mut words = DescriptorMatrix::new(width).unwrap();
    for _ in 0..nwords {
        words.push(&Descriptor::from_bytes(r.take(wb)?).unwrap()).unwrap();
    }
    let off = r.offset();
    let ni = r.count(8)?;
    if ni != nwords * bins {
        return Err(r.invalid(off, format!("idf has {ni} entries, expected {}", nwords * bins)));
    }
    let idf = (0..ni).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
    let params = TrainingParams {
        requested_words: r.u32()?,
        branching: r.u32()?,
        depth: r.u32()?,
        max_iters: r.u32()?,
        seed: r.u64()?,
    };
    let ann = AnnParams {
        branching: r.u32()?,
        leaf_size: r.u32()?,
        max_checks: match r.u32()? {
            0 => None,
            c => Some(c),
        },
        exact_below: r.u32()?,
        seed: r.u64()?,
    };
    let off = r.offset();
    let nn = r.count(12 + wb)?;
    let tree = if nn == 0 {
        None
    } else {
        let mut nodes = Vec::with_capacity(nn);
        let mut centers = DescriptorMatrix::new(width).unwrap();
        for _ in 0..nn {
            nodes.push(TreeNode {
                first_child: r.u32()?,
                child_count: r.u32()?,
                word: r.u32()?,
            });
            centers.push(&Descriptor::from_bytes(r.take(wb)?).unwrap()).unwrap();
        }
        let t = VocabularyTree { nodes, centers };
        t.validate(nwords).map_err(|e| r.invalid(off, e.to_string()))?;
        Some(t)
    };
    if (kind == VocabularyKind::Hkm) != tree.is_some() {
        return Err(r.invalid(off, "tree presence does not match vocabulary kind"));
    }
    r.finish()?;
    let mut v = Vocabulary::from_words(kind, words, tree, ann, params);
    v.set_binning(binning);
    v.set_idf(idf).map_err(|e| r.invalid(off, e.to_string()))?;
    Ok(v)
}

pub fn save_vocab(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_vocab(vocab)).map_err(|e| Error::Io(e).at_path(path))
}

pub fn load_vocab(path: impl AsRef<Path>) -> Result<Vocabulary> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::Io(e).at_path(path))?;
    decode_vocab(&buf).map_err(|e| Error::Parse(e).at_path(path))
}

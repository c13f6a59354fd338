//! Fixed-width binary descriptors and Hamming arithmetic.
//!
//! Bits are packed little-endian: bit `k` lives in byte `k / 8` at position
//! `k % 8`, and bytes are packed into `u64` lanes eight at a time. Padding
//! bits beyond the width are always zero, so lane-wise XOR/popcount gives the
//! exact Hamming distance.

use std::fmt;

use rand::Rng;
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Default descriptor width (ORB).
pub const DEFAULT_WIDTH_BITS: usize = 256;

type Lanes = SmallVec<[u64; 4]>;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Descriptor {
    lanes: Lanes,
    width: u16,
}

pub(crate) fn lanes_for(width: usize) -> usize {
    width.div_ceil(64)
}

pub(crate) fn check_width(width: usize) -> Result<()> {
    if width == 0 || !width.is_multiple_of(8) || width > u16::MAX as usize {
        return Err(Error::InvalidWidth(width));
    }
    Ok(())
}

impl Descriptor {
    pub fn zeros(width: usize) -> Result<Self> {
        check_width(width)?;
        Ok(Self {
            lanes: SmallVec::from_elem(0, lanes_for(width)),
            width: width as u16,
        })
    }

    pub fn ones(width: usize) -> Result<Self> {
        let mut d = Self::zeros(width)?;
        for bit in 0..width {
            d.set_bit(bit, true);
        }
        Ok(d)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let width = bytes.len() * 8;
        check_width(width)?;
        let mut lanes: Lanes = SmallVec::from_elem(0, lanes_for(width));
        for (i, chunk) in bytes.chunks(8).enumerate() {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            lanes[i] = u64::from_le_bytes(buf);
        }
        Ok(Self {
            lanes,
            width: width as u16,
        })
    }

    /// Builds a descriptor from packed lanes. Padding bits are cleared.
    pub fn from_lanes(lanes: &[u64], width: usize) -> Result<Self> {
        check_width(width)?;
        if lanes.len() != lanes_for(width) {
            return Err(Error::invalid(format!(
                "{} lanes cannot hold a {width}-bit descriptor",
                lanes.len()
            )));
        }
        let mut lanes: Lanes = lanes.iter().copied().collect();
        let tail = width % 64;
        if tail != 0 {
            let last = lanes.len() - 1;
            lanes[last] &= (1u64 << tail) - 1;
        }
        Ok(Self {
            lanes,
            width: width as u16,
        })
    }

    pub fn random<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Result<Self> {
        check_width(width)?;
        let lanes: Vec<u64> = (0..lanes_for(width)).map(|_| rng.random()).collect();
        Self::from_lanes(&lanes, width)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.width_bytes();
        let mut out = Vec::with_capacity(n);
        for lane in &self.lanes {
            out.extend_from_slice(&lane.to_le_bytes());
        }
        out.truncate(n);
        out
    }

    pub fn width(&self) -> usize {
        self.width as usize
    }

    pub fn width_bytes(&self) -> usize {
        self.width as usize / 8
    }

    pub fn lanes(&self) -> &[u64] {
        &self.lanes
    }

    pub fn bit(&self, index: usize) -> bool {
        debug_assert!(index < self.width());
        (self.lanes[index / 64] >> (index % 64)) & 1 == 1
    }

    pub fn set_bit(&mut self, index: usize, value: bool) {
        assert!(index < self.width(), "bit {index} out of range");
        let mask = 1u64 << (index % 64);
        if value {
            self.lanes[index / 64] |= mask;
        } else {
            self.lanes[index / 64] &= !mask;
        }
    }

    pub fn flip_bit(&mut self, index: usize) {
        let v = self.bit(index);
        self.set_bit(index, !v);
    }

    pub fn count_ones(&self) -> u32 {
        self.lanes.iter().map(|l| l.count_ones()).sum()
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::invalid(format!("bad descriptor hex: {e}")))?;
        Self::from_bytes(&bytes)
    }
}

impl fmt::Debug for Descriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Descriptor({}b:{})", self.width, self.to_hex())
    }
}

/// Hamming distance on raw lanes of equal length.
#[inline]
pub fn hamming_lanes(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Number of differing bits between two descriptors of equal width.
pub fn hamming_distance(a: &Descriptor, b: &Descriptor) -> Result<u32> {
    if a.width != b.width {
        return Err(Error::WidthMismatch {
            left: a.width(),
            right: b.width(),
        });
    }
    Ok(hamming_lanes(&a.lanes, &b.lanes))
}

/// Row-major packed set of descriptors sharing one width. Used for
/// vocabulary words so distance scans walk contiguous memory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DescriptorMatrix {
    lanes: Vec<u64>,
    stride: usize,
    width: usize,
}

impl DescriptorMatrix {
    pub fn new(width: usize) -> Result<Self> {
        check_width(width)?;
        Ok(Self {
            lanes: Vec::new(),
            stride: lanes_for(width),
            width,
        })
    }

    pub fn from_descriptors(width: usize, descriptors: &[Descriptor]) -> Result<Self> {
        let mut m = Self::new(width)?;
        for d in descriptors {
            m.push(d)?;
        }
        Ok(m)
    }

    pub fn push(&mut self, d: &Descriptor) -> Result<()> {
        if d.width() != self.width {
            return Err(Error::WidthMismatch {
                left: self.width,
                right: d.width(),
            });
        }
        self.lanes.extend_from_slice(d.lanes());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.lanes.len() / self.stride
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[u64] {
        &self.lanes[i * self.stride..(i + 1) * self.stride]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [u64] {
        &mut self.lanes[i * self.stride..(i + 1) * self.stride]
    }

    pub fn get(&self, i: usize) -> Descriptor {
        Descriptor::from_lanes(self.row(i), self.width).expect("matrix rows are well formed")
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u64]> + '_ {
        self.lanes.chunks_exact(self.stride)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_distance(a: &Descriptor, b: &Descriptor) -> u32 {
        (0..a.width()).filter(|&i| a.bit(i) != b.bit(i)).count() as u32
    }

    #[test]
    fn identity_and_complement() {
        let z = Descriptor::zeros(256).unwrap();
        let o = Descriptor::ones(256).unwrap();
        assert_eq!(hamming_distance(&z, &z).unwrap(), 0);
        assert_eq!(hamming_distance(&z, &o).unwrap(), 256);
    }

    #[test]
    fn random_pair_matches_bit_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = Descriptor::random(256, &mut rng).unwrap();
        let b = Descriptor::random(256, &mut rng).unwrap();
        assert_eq!(hamming_distance(&a, &b).unwrap(), naive_distance(&a, &b));
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let a = Descriptor::zeros(256).unwrap();
        let b = Descriptor::zeros(128).unwrap();
        assert!(matches!(hamming_distance(&a, &b), Err(Error::WidthMismatch { .. })));
    }

    #[test]
    fn odd_widths_round_trip_and_pad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Descriptor::random(72, &mut rng).unwrap();
        assert_eq!(d.to_bytes().len(), 9);
        assert_eq!(Descriptor::from_bytes(&d.to_bytes()).unwrap(), d);
        assert!(d.lanes()[1] < 256);
        assert!(Descriptor::zeros(0).is_err());
        assert!(Descriptor::zeros(12).is_err());
    }

    proptest! {
        #[test]
        fn metric_axioms(sa in any::<u64>(), sb in any::<u64>(), sc in any::<u64>()) {
            let mk = |s| Descriptor::random(256, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            let (a, b, c) = (mk(sa), mk(sb), mk(sc));
            let ab = hamming_distance(&a, &b).unwrap();
            let bc = hamming_distance(&b, &c).unwrap();
            let ac = hamming_distance(&a, &c).unwrap();
            prop_assert_eq!(ab, hamming_distance(&b, &a).unwrap());
            prop_assert!(ac <= ab + bc);
            prop_assert_eq!(ab == 0, a == b);
            prop_assert_eq!(ab, naive_distance(&a, &b));
        }
    }
}

//! Nearest-word search over a binary vocabulary.
//!
//! [`WordIndex`] is a k-majority clustering tree over the words, searched
//! best-first by the metric lower bound `max(0, d(q, center) - radius)`.
//! Candidates are always rescored exactly. Without a check budget the bound
//! makes the search exact; with one it stops early and becomes approximate.
//! Small vocabularies skip the tree and scan.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::descriptor::{hamming_lanes, DescriptorMatrix};

/// A word and its Hamming distance to the probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct WordHit {
    pub distance: u32,
    pub word: u32,
}

pub type Hits = SmallVec<[WordHit; 4]>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnParams {
    pub branching: u32,
    pub leaf_size: u32,
    /// Upper bound on rescored words per probe; `None` searches until the
    /// lower bound proves the result exact.
    pub max_checks: Option<u32>,
    /// Vocabularies up to this size are always scanned exhaustively.
    pub exact_below: u32,
    pub seed: u64,
}

impl Default for AnnParams {
    fn default() -> Self {
        Self {
            branching: 16,
            leaf_size: 32,
            max_checks: None,
            exact_below: 16384,
            seed: 0x5eed,
        }
    }
}

/// Keeps the `r` smallest `(distance, word)` pairs seen so far, sorted.
struct TopR {
    r: usize,
    hits: Hits,
}

impl TopR {
    fn new(r: usize) -> Self {
        Self {
            r,
            hits: SmallVec::new(),
        }
    }

    #[inline]
    fn worst(&self) -> Option<WordHit> {
        (self.hits.len() == self.r).then(|| *self.hits.last().unwrap())
    }

    #[inline]
    fn offer(&mut self, hit: WordHit) {
        if let Some(w) = self.worst() {
            if hit >= w {
                return;
            }
            self.hits.pop();
        }
        let pos = self.hits.partition_point(|h| *h < hit);
        self.hits.insert(pos, hit);
    }
}

/// Exhaustive top-`r` scan; ties resolve to the lower word id.
pub fn scan_nearest(words: &DescriptorMatrix, probe: &[u64], r: usize) -> Hits {
    let mut top = TopR::new(r);
    let mut bound = u32::MAX;
    for (i, w) in words.iter().enumerate() {
        let d = hamming_lanes(w, probe);
        // strict: an equal distance at a higher id never displaces
        if d < bound || top.hits.len() < r {
            top.offer(WordHit {
                distance: d,
                word: i as u32,
            });
            if let Some(worst) = top.worst() {
                bound = worst.distance;
            }
        }
    }
    top.hits
}

#[derive(Debug, Clone)]
struct Node {
    radius: u32,
    /// Internal: range into `children`. Leaf: range into `leaf_words`.
    start: u32,
    len: u32,
    leaf: bool,
}

#[derive(Debug, Clone)]
pub struct WordIndex {
    params: AnnParams,
    centers: DescriptorMatrix,
    nodes: Vec<Node>,
    children: Vec<u32>,
    leaf_words: Vec<u32>,
}

impl WordIndex {
    pub fn build(words: &DescriptorMatrix, params: AnnParams) -> Self {
        let mut idx = WordIndex {
            params,
            centers: DescriptorMatrix::new(words.width()).expect("word width is valid"),
            nodes: Vec::new(),
            children: Vec::new(),
            leaf_words: Vec::new(),
        };
        if words.len() as u64 <= params.exact_below as u64 || words.is_empty() {
            return idx;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let all: Vec<u32> = (0..words.len() as u32).collect();
        let center = majority_center(words, &all, None);
        idx.build_node(words, all, center, &mut rng);
        idx
    }

    pub fn params(&self) -> &AnnParams {
        &self.params
    }

    pub fn is_exhaustive(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_center(&mut self, lanes: &[u64]) -> u32 {
        let id = self.nodes.len() as u32;
        let d = crate::descriptor::Descriptor::from_lanes(lanes, self.centers.width()).unwrap();
        self.centers.push(&d).unwrap();
        id
    }

    fn build_node(
        &mut self,
        words: &DescriptorMatrix,
        members: Vec<u32>,
        center: Vec<u64>,
        rng: &mut ChaCha8Rng,
    ) -> u32 {
        let radius = members
            .iter()
            .map(|&w| hamming_lanes(words.row(w as usize), &center))
            .max()
            .unwrap_or(0);
        let id = self.push_center(&center);
        if members.len() <= self.params.leaf_size as usize {
            let start = self.leaf_words.len() as u32;
            self.leaf_words.extend(&members);
            self.nodes.push(Node {
                radius,
                start,
                len: members.len() as u32,
                leaf: true,
            });
            return id;
        }
        self.nodes.push(Node {
            radius,
            start: 0,
            len: 0,
            leaf: false,
        });
        let k = (self.params.branching as usize).max(2);
        let groups = kmajority_split(words, &members, k, 6, rng);
        let groups: Vec<_> = if groups.len() < 2 {
            // identical words cannot be split by distance: cut in half
            let (a, b) = members.split_at(members.len() / 2);
            [a.to_vec(), b.to_vec()]
                .into_iter()
                .map(|m| {
                    let c = majority_center(words, &m, None);
                    (c, m)
                })
                .collect()
        } else {
            groups
        };
        let child_ids: Vec<u32> = groups
            .into_iter()
            .map(|(c, m)| self.build_node(words, m, c, rng))
            .collect();
        let start = self.children.len() as u32;
        self.children.extend(&child_ids);
        let node = &mut self.nodes[id as usize];
        node.start = start;
        node.len = child_ids.len() as u32;
        id
    }

    /// The `r` nearest words, ascending by `(distance, word)`.
    pub fn search(&self, words: &DescriptorMatrix, probe: &[u64], r: usize) -> Hits {
        if self.nodes.is_empty() {
            return scan_nearest(words, probe, r);
        }
        let budget = self.params.max_checks.map(|c| c.max(r as u32) as usize);
        let mut top = TopR::new(r);
        let mut checks = 0usize;
        let mut heap = BinaryHeap::new();
        let root_d = hamming_lanes(self.centers.row(0), probe);
        heap.push(Reverse((root_d.saturating_sub(self.nodes[0].radius), root_d, 0u32)));
        while let Some(Reverse((lb, _, node_id))) = heap.pop() {
            if let Some(w) = top.worst() {
                // nodes whose bound equals the worst may still hold a lower id tie
                if lb > w.distance {
                    break;
                }
            }
            if let Some(b) = budget {
                if checks >= b && top.hits.len() == r {
                    break;
                }
            }
            let node = &self.nodes[node_id as usize];
            let range = node.start as usize..(node.start + node.len) as usize;
            if node.leaf {
                for &w in &self.leaf_words[range] {
                    let d = hamming_lanes(words.row(w as usize), probe);
                    top.offer(WordHit { distance: d, word: w });
                }
                checks += node.len as usize;
            } else {
                for &c in &self.children[range] {
                    let d = hamming_lanes(self.centers.row(c as usize), probe);
                    let cl = d.saturating_sub(self.nodes[c as usize].radius);
                    if top.worst().is_none_or(|w| cl <= w.distance) {
                        heap.push(Reverse((cl, d, c)));
                    }
                }
            }
        }
        top.hits
    }
}

/// Per-bit majority of `members`. Ties take the bit from `previous`, or 0.
pub(crate) fn majority_center(words: &DescriptorMatrix, members: &[u32], previous: Option<&[u64]>) -> Vec<u64> {
    let width = words.width();
    let mut counts = vec![0u32; width];
    for &m in members {
        accumulate_bits(words.row(m as usize), &mut counts);
    }
    center_from_counts(&counts, members.len() as u32, previous, width)
}

#[inline]
pub(crate) fn accumulate_bits(lanes: &[u64], counts: &mut [u32]) {
    for (li, &lane) in lanes.iter().enumerate() {
        let mut bits = lane;
        while bits != 0 {
            let b = bits.trailing_zeros() as usize;
            counts[li * 64 + b] += 1;
            bits &= bits - 1;
        }
    }
}

pub(crate) fn center_from_counts(counts: &[u32], n: u32, previous: Option<&[u64]>, width: usize) -> Vec<u64> {
    let mut lanes = vec![0u64; width.div_ceil(64)];
    for (bit, &c) in counts.iter().enumerate().take(width) {
        let twice = 2 * c;
        let set = if twice > n {
            true
        } else if twice == n {
            previous.is_some_and(|p| (p[bit / 64] >> (bit % 64)) & 1 == 1)
        } else {
            false
        };
        if set {
            lanes[bit / 64] |= 1u64 << (bit % 64);
        }
    }
    lanes
}

/// k-means++ seeding in Hamming space over `members` (indices into `data`).
/// Returns member positions of the chosen seeds.
pub(crate) fn kmeanspp_seeds<R: Rng>(data: &DescriptorMatrix, members: &[u32], k: usize, rng: &mut R) -> Vec<usize> {
    let n = members.len();
    let k = k.min(n);
    if k == 0 {
        return Vec::new();
    }
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let first = rng.random_range(0..n);
    chosen.push(first);
    taken[first] = true;
    let mut dist2: Vec<u64> = members
        .iter()
        .map(|&m| {
            let d = hamming_lanes(data.row(m as usize), data.row(members[first] as usize)) as u64;
            d * d
        })
        .collect();
    while chosen.len() < k {
        let total: u64 = dist2.iter().sum();
        let next = if total == 0 {
            // only duplicates remain: pick any unchosen member
            let free: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
            free[rng.random_range(0..free.len())]
        } else {
            let mut target = rng.random_range(0..total);
            let mut pick = n - 1;
            for (i, &d) in dist2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        };
        chosen.push(next);
        taken[next] = true;
        let c = data.row(members[next] as usize);
        for (i, &m) in members.iter().enumerate() {
            let d = hamming_lanes(data.row(m as usize), c) as u64;
            dist2[i] = dist2[i].min(d * d);
        }
    }
    chosen
}

/// Small k-majority clustering used to shape the search tree. Empty groups
/// are dropped.
fn kmajority_split<R: Rng>(
    data: &DescriptorMatrix,
    members: &[u32],
    k: usize,
    iters: usize,
    rng: &mut R,
) -> Vec<(Vec<u64>, Vec<u32>)> {
    let seeds = kmeanspp_seeds(data, members, k, rng);
    let mut centers: Vec<Vec<u64>> = seeds.iter().map(|&s| data.row(members[s] as usize).to_vec()).collect();
    let mut assign = vec![0usize; members.len()];
    for it in 0..iters {
        let mut changed = false;
        for (i, &m) in members.iter().enumerate() {
            let row = data.row(m as usize);
            let best = centers
                .iter()
                .enumerate()
                .min_by_key(|(ci, c)| (hamming_lanes(row, c), *ci))
                .map(|(ci, _)| ci)
                .unwrap();
            if it == 0 || assign[i] != best {
                changed = true;
                assign[i] = best;
            }
        }
        if !changed {
            break;
        }
        for (ci, center) in centers.iter_mut().enumerate() {
            let group: Vec<u32> = members
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == ci)
                .map(|(&m, _)| m)
                .collect();
            if !group.is_empty() {
                *center = majority_center(data, &group, Some(center));
            }
        }
    }
    let mut groups: Vec<Vec<u32>> = vec![Vec::new(); centers.len()];
    for (&m, &a) in members.iter().zip(&assign) {
        groups[a].push(m);
    }
    centers.into_iter().zip(groups).filter(|(_, g)| !g.is_empty()).collect()
}

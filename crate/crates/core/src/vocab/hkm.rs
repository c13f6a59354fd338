//! Hierarchical k-majority vocabulary tree (the DBoW-style baseline).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ann::{kmeanspp_seeds, majority_center, AnnParams};
use super::{TrainingParams, Vocabulary, VocabularyKind};
use crate::descriptor::{hamming_lanes, Descriptor, DescriptorMatrix};
use crate::error::{Error, Result};

const HKM_ITERS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeNode {
    /// Children occupy `first_child..first_child + child_count`.
    pub first_child: u32,
    pub child_count: u32,
    /// Word id for leaves, `u32::MAX` otherwise.
    pub word: u32,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.child_count == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabularyTree {
    pub(crate) nodes: Vec<TreeNode>,
    pub(crate) centers: DescriptorMatrix,
}

impl VocabularyTree {
    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn centers(&self) -> &DescriptorMatrix {
        &self.centers
    }

    /// Greedy root-to-leaf descent, returning the leaf word and the distance
    /// to it. Ties pick the lower child.
    pub fn descend(&self, probe: &[u64]) -> (u32, u32) {
        let mut node = 0usize;
        let mut dist = hamming_lanes(self.centers.row(0), probe);
        while !self.nodes[node].is_leaf() {
            let n = self.nodes[node];
            let (best, d) = (n.first_child..n.first_child + n.child_count)
                .map(|c| (c as usize, hamming_lanes(self.centers.row(c as usize), probe)))
                .min_by_key(|&(c, d)| (d, c))
                .unwrap();
            node = best;
            dist = d;
        }
        (self.nodes[node].word, dist)
    }

    pub(crate) fn validate(&self, words: usize) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 || self.centers.len() != n {
            return Err(Error::invalid("vocabulary tree is empty or misaligned"));
        }
        let mut leaf_words = 0usize;
        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_leaf() {
                if node.word as usize >= words {
                    return Err(Error::invalid(format!("tree leaf {i} names word {}", node.word)));
                }
                leaf_words += 1;
            } else if node.first_child as usize <= i || (node.first_child + node.child_count) as usize > n {
                return Err(Error::invalid(format!("tree node {i} has out-of-range children")));
            }
        }
        if leaf_words != words {
            return Err(Error::invalid("tree leaves do not cover the vocabulary"));
        }
        Ok(())
    }
}

struct Pending {
    node: usize,
    members: Vec<u32>,
    depth: usize,
}

/// Builds a `branching`-ary tree of depth at most `depth`. A node with fewer
/// than `branching` descriptors becomes a leaf; its center is the one its
/// parent's clustering produced.
pub fn train_hkm(descriptors: &[Descriptor], branching: usize, depth: usize, seed: u64) -> Result<Vocabulary> {
    if branching < 2 || depth < 1 {
        return Err(Error::invalid(format!(
            "hkm needs k >= 2 and L >= 1, got k={branching} L={depth}"
        )));
    }
    if descriptors.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    let width = descriptors[0].width();
    let data = DescriptorMatrix::from_descriptors(width, descriptors)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let all: Vec<u32> = (0..data.len() as u32).collect();
    let mut centers = DescriptorMatrix::new(width)?;
    centers.push(&Descriptor::from_lanes(&majority_center(&data, &all, None), width)?)?;
    let mut nodes = vec![TreeNode {
        first_child: 0,
        child_count: 0,
        word: u32::MAX,
    }];
    // breadth-first so children stay contiguous
    let mut queue = std::collections::VecDeque::from([Pending {
        node: 0,
        members: all,
        depth: 0,
    }]);
    while let Some(p) = queue.pop_front() {
        if p.depth >= depth || p.members.len() < branching {
            continue;
        }
        let groups = cluster(&data, &p.members, branching, &mut rng);
        if groups.len() < 2 {
            continue;
        }
        let first = nodes.len() as u32;
        nodes[p.node].first_child = first;
        nodes[p.node].child_count = groups.len() as u32;
        for (center, members) in groups {
            centers.push(&Descriptor::from_lanes(&center, width)?)?;
            let id = nodes.len();
            nodes.push(TreeNode {
                first_child: 0,
                child_count: 0,
                word: u32::MAX,
            });
            queue.push_back(Pending {
                node: id,
                members,
                depth: p.depth + 1,
            });
        }
    }

    let mut words = DescriptorMatrix::new(width)?;
    for (i, node) in nodes.iter_mut().enumerate() {
        if node.is_leaf() {
            node.word = words.len() as u32;
            words.push(&centers.get(i))?;
        }
    }
    let tree = VocabularyTree { nodes, centers };
    let params = TrainingParams {
        requested_words: (branching as u64).saturating_pow(depth as u32).min(u32::MAX as u64) as u32,
        branching: branching as u32,
        depth: depth as u32,
        max_iters: HKM_ITERS as u32,
        seed,
    };
    Ok(Vocabulary::from_words(
        VocabularyKind::Hkm,
        words,
        Some(tree),
        AnnParams::default(),
        params,
    ))
}

fn cluster(data: &DescriptorMatrix, members: &[u32], k: usize, rng: &mut ChaCha8Rng) -> Vec<(Vec<u64>, Vec<u32>)> {
    let seeds = kmeanspp_seeds(data, members, k, rng);
    let mut centers: Vec<Vec<u64>> = seeds.iter().map(|&s| data.row(members[s] as usize).to_vec()).collect();
    let mut assign = vec![usize::MAX; members.len()];
    for _ in 0..HKM_ITERS {
        let mut changed = false;
        for (i, &m) in members.iter().enumerate() {
            let row = data.row(m as usize);
            let best = (0..centers.len())
                .min_by_key(|&c| (hamming_lanes(row, &centers[c]), c))
                .unwrap();
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut groups: Vec<Vec<u32>> = vec![Vec::new(); centers.len()];
        for (&m, &a) in members.iter().zip(&assign) {
            groups[a].push(m);
        }
        for (c, g) in centers.iter_mut().zip(&groups) {
            if !g.is_empty() {
                *c = majority_center(data, g, Some(c));
            }
        }
    }
    let mut groups: Vec<Vec<u32>> = vec![Vec::new(); centers.len()];
    for (&m, &a) in members.iter().zip(&assign) {
        groups[a].push(m);
    }
    centers.into_iter().zip(groups).filter(|(_, g)| !g.is_empty()).collect()
}

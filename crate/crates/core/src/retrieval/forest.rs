//! Randomized k-d forest for approximate nearest neighbours under a slot mask.
//!
//! Each tree splits on a dimension drawn at random from the few with the
//! highest variance, at the mean. Search walks all trees best-bin-first from
//! one shared queue and stops after `checks` distance evaluations.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LEAF_SIZE: usize = 8;
const TOP_VARIANCE_DIMS: usize = 5;
const VARIANCE_SAMPLE: usize = 128;

#[derive(Debug, Clone)]
enum Node {
    Leaf(Vec<u32>),
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

#[derive(Debug, Clone)]
pub(crate) struct KdForest {
    trees: Vec<Tree>,
}

/// Distance ordered by `f64::total_cmp`, ties broken by point index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Candidate {
    pub dist: f64,
    pub idx: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Min-heap entry for pending branches.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Branch {
    bound: f64,
    tree: usize,
    node: usize,
}

impl Eq for Branch {}

impl Ord for Branch {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then(other.tree.cmp(&self.tree))
            .then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for Branch {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Masked squared distance over flat vectors; `weights[d]` is 0 or 1.
pub(crate) fn weighted_sq(a: &[f64], b: &[f64], active: &[bool]) -> f64 {
    a.iter()
        .zip(b)
        .zip(active)
        .filter(|(_, on)| **on)
        .map(|((x, y), _)| (x - y) * (x - y))
        .sum()
}

impl KdForest {
    pub fn build(points: &[Vec<f64>], n_trees: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trees = (0..n_trees.max(1))
            .map(|_| {
                let mut tree = Tree { nodes: Vec::new() };
                let ids: Vec<u32> = (0..points.len() as u32).collect();
                build_node(&mut tree, points, ids, &mut rng);
                tree
            })
            .collect();
        KdForest { trees }
    }

    /// Up to `k` nearest points by masked squared distance. `max_checks`
    /// bounds distance evaluations once `k` candidates exist; `usize::MAX`
    /// makes the search exact.
    pub fn search(
        &self,
        points: &[Vec<f64>],
        query: &[f64],
        active: &[bool],
        k: usize,
        max_checks: usize,
    ) -> Vec<Candidate> {
        let mut visited = vec![false; points.len()];
        let mut best: BinaryHeap<Candidate> = BinaryHeap::new();
        let mut queue: BinaryHeap<Branch> = BinaryHeap::new();
        let mut checks = 0usize;
        for t in 0..self.trees.len() {
            queue.push(Branch {
                bound: 0.0,
                tree: t,
                node: 0,
            });
        }
        while let Some(branch) = queue.pop() {
            if best.len() == k {
                let worst = best.peek().expect("k > 0").dist;
                if branch.bound > worst {
                    break;
                }
                if checks >= max_checks {
                    break;
                }
            }
            let tree = &self.trees[branch.tree];
            let mut node = branch.node;
            loop {
                match &tree.nodes[node] {
                    Node::Split {
                        dim,
                        value,
                        left,
                        right,
                    } => {
                        let diff = query[*dim] - value;
                        let (near, far) = if diff < 0.0 {
                            (*left, *right)
                        } else {
                            (*right, *left)
                        };
                        let far_bound = if active[*dim] {
                            branch.bound.max(diff * diff)
                        } else {
                            branch.bound
                        };
                        queue.push(Branch {
                            bound: far_bound,
                            tree: branch.tree,
                            node: far,
                        });
                        node = near;
                    }
                    Node::Leaf(ids) => {
                        for &i in ids {
                            let i = i as usize;
                            if visited[i] {
                                continue;
                            }
                            visited[i] = true;
                            checks += 1;
                            let c = Candidate {
                                dist: weighted_sq(&points[i], query, active),
                                idx: i,
                            };
                            if best.len() < k {
                                best.push(c);
                            } else if c < *best.peek().expect("k > 0") {
                                best.pop();
                                best.push(c);
                            }
                        }
                        break;
                    }
                }
            }
        }
        let mut out = best.into_vec();
        out.sort();
        out
    }
}

fn build_node(tree: &mut Tree, points: &[Vec<f64>], ids: Vec<u32>, rng: &mut ChaCha8Rng) -> usize {
    let slot = tree.nodes.len();
    if ids.len() <= LEAF_SIZE {
        tree.nodes.push(Node::Leaf(ids));
        return slot;
    }
    let dim_count = points[ids[0] as usize].len();
    let sample: Vec<u32> = if ids.len() > VARIANCE_SAMPLE {
        ids.choose_multiple(rng, VARIANCE_SAMPLE).copied().collect()
    } else {
        ids.clone()
    };
    let n = sample.len() as f64;
    let mut mean = vec![0.0; dim_count];
    for &i in &sample {
        for (m, x) in mean.iter_mut().zip(&points[i as usize]) {
            *m += x / n;
        }
    }
    let mut var: Vec<(f64, usize)> = (0..dim_count)
        .map(|d| {
            let v = sample
                .iter()
                .map(|&i| (points[i as usize][d] - mean[d]).powi(2))
                .sum::<f64>();
            (v, d)
        })
        .collect();
    var.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let top = TOP_VARIANCE_DIMS.min(var.iter().filter(|(v, _)| *v > 0.0).count());
    if top == 0 {
        tree.nodes.push(Node::Leaf(ids));
        return slot;
    }
    let dim = var[rng.random_range(0..top)].1;
    let value = mean[dim];
    let (left_ids, right_ids): (Vec<u32>, Vec<u32>) =
        ids.iter().partition(|&&i| points[i as usize][dim] < value);
    if left_ids.is_empty() || right_ids.is_empty() {
        tree.nodes.push(Node::Leaf(ids));
        return slot;
    }
    tree.nodes.push(Node::Leaf(Vec::new()));
    let left = build_node(tree, points, left_ids, rng);
    let right = build_node(tree, points, right_ids, rng);
    tree.nodes[slot] = Node::Split {
        dim,
        value,
        left,
        right,
    };
    slot
}

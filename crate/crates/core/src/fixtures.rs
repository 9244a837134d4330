//! Built-in graphs: the six-node star used throughout the docs and tests, a
//! small compositional knowledge graph for end-to-end runs, and random graphs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Dataset, Graph, Triple};

/// Edges 1-0, 2-0, 3-0, 4-3, 5-3 under a single relation.
pub fn star_graph() -> Graph {
    Graph::new(6, 1, star_triples()).unwrap()
}

pub fn star_triples() -> Vec<Triple> {
    [(1, 0), (2, 0), (3, 0), (4, 3), (5, 3)].iter().map(|&(h, t)| Triple::new(h, 0, t)).collect()
}

pub fn star_dataset() -> Dataset {
    Dataset::from_splits(6, 1, star_triples(), Vec::new(), Vec::new()).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ToySplit {
    /// valid and test are copies of train.
    Memorize,
    /// This fraction of triples is held out as the test split; valid is empty.
    Holdout(f64),
}

#[derive(Clone, Debug)]
pub struct ToyKg {
    pub clusters: usize,
    pub cluster_size: usize,
    /// Slots per block for the one-to-many relation.
    pub block: usize,
    pub seed: u64,
}

impl Default for ToyKg {
    fn default() -> Self {
        ToyKg { clusters: 10, cluster_size: 20, block: 4, seed: 7 }
    }
}

/// Cluster and slot offsets of the five functional relations. Relation 2 is
/// 0 then 1, relation 4 is 3 then 1.
const TOY_SHIFTS: [(isize, isize); 5] = [(1, 0), (0, 1), (1, 1), (2, -1), (2, 0)];

pub const TOY_RELATIONS: usize = 6;

impl ToyKg {
    pub fn num_entities(&self) -> usize {
        self.clusters * self.cluster_size
    }

    /// Entities sit on a clusters x slots lattice under a random relabeling.
    /// Relations 0..5 shift (cluster, slot) by fixed offsets where the target
    /// stays on the lattice. Relation 5 links a slot to every slot of its block
    /// in the next cluster.
    pub fn triples(&self) -> Vec<Triple> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n = self.num_entities();
        let mut label: Vec<u32> = (0..n as u32).collect();
        label.shuffle(&mut rng);
        let id = |c: usize, s: usize| label[c * self.cluster_size + s];
        let (nc, ns) = (self.clusters as isize, self.cluster_size as isize);

        let mut out = Vec::new();
        for (r, &(dc, ds)) in TOY_SHIFTS.iter().enumerate() {
            for c in 0..nc {
                for s in 0..ns {
                    let (c2, s2) = (c + dc, s + ds);
                    if (0..nc).contains(&c2) && (0..ns).contains(&s2) {
                        out.push(Triple::new(id(c as usize, s as usize), r as u32, id(c2 as usize, s2 as usize)));
                    }
                }
            }
        }
        let block = self.block.max(1);
        for c in 0..self.clusters.saturating_sub(1) {
            for s in 0..self.cluster_size {
                let start = s / block * block;
                for s2 in start..(start + block).min(self.cluster_size) {
                    out.push(Triple::new(id(c, s), 5, id(c + 1, s2)));
                }
            }
        }
        out.shuffle(&mut rng);
        out
    }

    pub fn dataset(&self, split: ToySplit) -> Dataset {
        let all = self.triples();
        let n = self.num_entities();
        match split {
            ToySplit::Memorize => {
                Dataset::from_splits(n, TOY_RELATIONS, all.clone(), all.clone(), all).unwrap()
            }
            ToySplit::Holdout(frac) => {
                let held = ((all.len() as f64) * frac).round() as usize;
                let (test, train) = all.split_at(held);
                Dataset::from_splits(n, TOY_RELATIONS, train.to_vec(), Vec::new(), test.to_vec())
                    .unwrap()
            }
        }
    }
}

/// Uniformly random triples (self-loops and repeats allowed).
pub fn random_triples(num_entities: usize, num_relations: usize, count: usize, seed: u64) -> Vec<Triple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            Triple::new(
                rng.gen_range(0..num_entities as u32),
                rng.gen_range(0..num_relations as u32),
                rng.gen_range(0..num_entities as u32),
            )
        })
        .collect()
}

pub fn random_graph(num_entities: usize, num_relations: usize, count: usize, seed: u64) -> Graph {
    Graph::new(num_entities, num_relations, random_triples(num_entities, num_relations, count, seed))
        .unwrap()
}

/// Large graph with a skewed degree distribution: endpoints are drawn as
/// `n·x²` for uniform `x`, then scattered by a fixed odd multiplier so hubs are
/// not simply the smallest ids.
pub fn skewed_graph(num_entities: usize, num_relations: usize, count: usize, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = num_entities as u64;
    let pick = |rng: &mut ChaCha8Rng| {
        let x: f64 = rng.gen();
        let raw = ((x * x) * n as f64) as u64 % n;
        (raw.wrapping_mul(0x9E37_79B1) % n) as u32
    };
    let triples = (0..count)
        .map(|_| {
            let h = pick(&mut rng);
            let t = pick(&mut rng);
            Triple::new(h, rng.gen_range(0..num_relations as u32), t)
        })
        .collect();
    Graph::new(num_entities, num_relations, triples).unwrap()
}

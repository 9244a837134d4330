//! Filtered link-prediction ranking.
//!
//! A query hides one side of a triple. Every candidate that would complete a
//! known triple (other than the hidden one) is removed, and the rank is
//! `1 + #{remaining candidates scoring ≥ the true entity}`, so ties count
//! against the model.

use std::collections::{BTreeMap, HashMap, HashSet};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{EntityId, RelationId, Side, Triple};
use crate::model::KgeModel;
use crate::nn::Real;
use crate::objective::{score, RelationParts, ScoreConfig};
use crate::vocab::Vocabulary;

pub const DEFAULT_SAMPLED: usize = 1000;
/// Entities encoded per forward pass when precomputing representations.
pub const EVAL_CHUNK: usize = 1 << 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    Full,
    /// This many uniformly drawn candidates per query, known answers excluded.
    Sampled(usize),
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Protocol::Full),
            "sampled" => Ok(Protocol::Sampled(DEFAULT_SAMPLED)),
            _ => match s.strip_prefix("sampled-").map(str::parse) {
                Some(Ok(n)) if n > 0 => Ok(Protocol::Sampled(n)),
                _ => Err(Error::Config(format!("protocol must be full|sampled|sampled-N, got {s:?}"))),
            },
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Protocol::Full => f.write_str("full"),
            Protocol::Sampled(DEFAULT_SAMPLED) => f.write_str("sampled"),
            Protocol::Sampled(n) => write!(f, "sampled-{n}"),
        }
    }
}

/// Anything that can score the completions of a query.
pub trait LinkScorer: Sync {
    fn num_entities(&self) -> usize;

    /// Appends to `out` the score of `triple` with its `side` replaced by
    /// each candidate in turn.
    fn score_candidates(&self, triple: Triple, side: Side, candidates: &[EntityId], out: &mut Vec<f64>);
}

/// Index of every true triple, for filtering.
#[derive(Clone, Debug, Default)]
pub struct KnownTriples {
    tails: HashMap<(EntityId, RelationId), HashSet<EntityId>>,
    heads: HashMap<(RelationId, EntityId), HashSet<EntityId>>,
}

impl KnownTriples {
    pub fn new<'a>(triples: impl IntoIterator<Item = &'a Triple>) -> Self {
        let mut k = KnownTriples::default();
        for t in triples {
            k.tails.entry((t.head, t.rel)).or_default().insert(t.tail);
            k.heads.entry((t.rel, t.tail)).or_default().insert(t.head);
        }
        k
    }

    /// Entities known to complete `triple` on `side`.
    pub fn answers(&self, triple: Triple, side: Side) -> Option<&HashSet<EntityId>> {
        match side {
            Side::Head => self.heads.get(&(triple.rel, triple.tail)),
            Side::Tail => self.tails.get(&(triple.head, triple.rel)),
        }
    }

    pub fn is_answer(&self, triple: Triple, side: Side, e: EntityId) -> bool {
        self.answers(triple, side).is_some_and(|s| s.contains(&e))
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Candidates<'a> {
    All,
    List(&'a [EntityId]),
}

pub fn rank_filtered(
    scorer: &dyn LinkScorer,
    triple: Triple,
    side: Side,
    candidates: Candidates<'_>,
    known: &KnownTriples,
) -> Result<u64> {
    let n = scorer.num_entities();
    for (what, id) in [("head", triple.head), ("tail", triple.tail)] {
        if id as usize >= n {
            return Err(Error::IdOutOfRange { kind: what, id: id as u64, count: n as u64 });
        }
    }
    let truth = triple.entity(side);
    let mut buf = Vec::with_capacity(1);
    scorer.score_candidates(triple, side, &[truth], &mut buf);
    let target = buf[0];

    let kept: Vec<EntityId> = match candidates {
        Candidates::All => (0..n as EntityId).filter(|&c| c != truth && !known.is_answer(triple, side, c)).collect(),
        Candidates::List(list) => {
            list.iter().copied().filter(|&c| c != truth && !known.is_answer(triple, side, c)).collect()
        }
    };
    let mut scores = Vec::with_capacity(kept.len());
    scorer.score_candidates(triple, side, &kept, &mut scores);
    Ok(1 + scores.iter().filter(|&&s| !(s < target)).count() as u64)
}

/// Uniform draws (with replacement) that are not known answers. If fewer than
/// `count` entities qualify, all of them are returned instead.
pub fn sample_candidates(
    rng: &mut ChaCha8Rng,
    num_entities: usize,
    triple: Triple,
    side: Side,
    known: &KnownTriples,
    count: usize,
) -> Vec<EntityId> {
    let truth = triple.entity(side);
    let excluded = known.answers(triple, side).map_or(0, |s| s.len() + !s.contains(&truth) as usize).max(1);
    let eligible = num_entities.saturating_sub(excluded);
    if eligible <= count {
        return (0..num_entities as EntityId).filter(|&c| c != truth && !known.is_answer(triple, side, c)).collect();
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let c = rng.gen_range(0..num_entities as EntityId);
        if c != truth && !known.is_answer(triple, side, c) {
            out.push(c);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RankResult {
    pub head_rank: u64,
    pub tail_rank: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RelationMetrics {
    pub mrr: f64,
    pub queries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub protocol: String,
    pub queries: usize,
    pub mrr: f64,
    #[serde(rename = "hits@1")]
    pub hits1: f64,
    #[serde(rename = "hits@3")]
    pub hits3: f64,
    #[serde(rename = "hits@10")]
    pub hits10: f64,
    pub per_relation: BTreeMap<RelationId, RelationMetrics>,
}

impl MetricReport {
    pub fn from_ranks(protocol: Protocol, triples: &[Triple], ranks: &[RankResult]) -> Result<Self> {
        if triples.is_empty() {
            return Err(Error::EmptySplit("no triples to evaluate".into()));
        }
        let mut sum = 0.0;
        let mut hits = [0usize; 3];
        let mut per: BTreeMap<RelationId, (f64, usize)> = BTreeMap::new();
        for (t, r) in triples.iter().zip(ranks) {
            for rank in [r.head_rank, r.tail_rank] {
                let rr = 1.0 / rank as f64;
                sum += rr;
                for (h, k) in hits.iter_mut().zip([1, 3, 10]) {
                    *h += (rank <= k) as usize;
                }
                let e = per.entry(t.rel).or_default();
                e.0 += rr;
                e.1 += 1;
            }
        }
        let q = 2 * triples.len();
        Ok(MetricReport {
            protocol: protocol.to_string(),
            queries: q,
            mrr: sum / q as f64,
            hits1: hits[0] as f64 / q as f64,
            hits3: hits[1] as f64 / q as f64,
            hits10: hits[2] as f64 / q as f64,
            per_relation: per.into_iter().map(|(r, (s, n))| (r, RelationMetrics { mrr: s / n as f64, queries: n })).collect(),
        })
    }
}

fn query_rng(seed: u64, index: usize, side: Side) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * index as u64 + (side == Side::Tail) as u64);
    rng
}

/// Head and tail rank of every triple. Queries run in parallel but each one
/// draws from its own seeded stream, so results do not depend on scheduling.
pub fn rank_all(
    scorer: &dyn LinkScorer,
    triples: &[Triple],
    known: &KnownTriples,
    protocol: Protocol,
    seed: u64,
) -> Result<Vec<RankResult>> {
    let n = scorer.num_entities();
    triples
        .par_iter()
        .enumerate()
        .map(|(i, &t)| {
            let rank = |side| match protocol {
                Protocol::Full => rank_filtered(scorer, t, side, Candidates::All, known),
                Protocol::Sampled(count) => {
                    let mut rng = query_rng(seed, i, side);
                    let list = sample_candidates(&mut rng, n, t, side, known, count);
                    rank_filtered(scorer, t, side, Candidates::List(&list), known)
                }
            };
            Ok(RankResult { head_rank: rank(Side::Head)?, tail_rank: rank(Side::Tail)? })
        })
        .collect()
}

pub fn evaluate(
    scorer: &dyn LinkScorer,
    triples: &[Triple],
    known: &KnownTriples,
    protocol: Protocol,
    seed: u64,
) -> Result<MetricReport> {
    if triples.is_empty() {
        return Err(Error::EmptySplit("no triples to evaluate".into()));
    }
    let ranks = rank_all(scorer, triples, known, protocol, seed)?;
    MetricReport::from_ranks(protocol, triples, &ranks)
}

/// Scores with precomputed entity representations.
pub struct EmbeddingScorer<F> {
    pub reps: Array2<F>,
    pub relations: Array2<F>,
    pub score: ScoreConfig,
}

impl<F: Real> EmbeddingScorer<F> {
    pub fn from_model(model: &KgeModel<F>, vocab: &Vocabulary) -> Result<Self> {
        let ids: Vec<EntityId> = (0..model.num_entities() as EntityId).collect();
        Ok(EmbeddingScorer {
            reps: model.representations(vocab, &ids, EVAL_CHUNK)?,
            relations: model.relations.value.clone(),
            score: model.objective.score,
        })
    }
}

impl<F: Real> LinkScorer for EmbeddingScorer<F> {
    fn num_entities(&self) -> usize {
        self.reps.nrows()
    }

    fn score_candidates(&self, triple: Triple, side: Side, candidates: &[EntityId], out: &mut Vec<f64>) {
        let rel = RelationParts::split(self.relations.row(triple.rel as usize)).expect("relation width checked at load");
        for &c in candidates {
            let t = triple.with_entity(side, c);
            let s = score(&self.score, self.reps.row(t.head as usize), self.reps.row(t.tail as usize), &rel)
                .expect("dimensions checked at load");
            out.push(s.f64());
        }
    }
}

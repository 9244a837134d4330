use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subkg_core::eval::{rank_filtered, Candidates};
use subkg_core::objective::{score, RelationParts};
use subkg_core::{
    evaluate, EmbeddingScorer, EntityId, KnownTriples, LinkScorer, Norm, Protocol, ScoreConfig, ScoreVariant, Side,
    Triple,
};

fn int_scorer(n: usize, r: usize, d: usize, seed: u64) -> EmbeddingScorer<f64> {
    // Small integer embeddings with L1 make ties common.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EmbeddingScorer {
        reps: Array2::from_shape_fn((n, d), |_| rng.gen_range(-2..=2) as f64),
        relations: Array2::from_shape_fn((r, 3 * d), |_| rng.gen_range(-1..=1) as f64),
        score: ScoreConfig { variant: ScoreVariant::Prime, u: 1.0, norm: Norm::L1 },
    }
}

/// Scores every entity, sorts descending, and returns the last position
/// holding the true score among the unfiltered entries.
fn sort_oracle(m: &EmbeddingScorer<f64>, t: Triple, side: Side, known: &KnownTriples) -> u64 {
    let f = |e: EntityId| {
        let q = t.with_entity(side, e);
        let rel = m.relations.row(q.rel as usize);
        score(&m.score, m.reps.row(q.head as usize), m.reps.row(q.tail as usize), &RelationParts::split(rel).unwrap())
            .unwrap()
    };
    let truth = t.entity(side);
    let mut all: Vec<(f64, bool)> = (0..m.reps.nrows() as EntityId)
        .filter(|&e| e == truth || !known.is_answer(t, side, e))
        .map(|e| (f(e), e == truth))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let target = f(truth);
    (all.iter().rposition(|&(s, _)| s == target).unwrap() + 1) as u64
}

#[test]
fn matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (n, r, d) in [(30, 3, 4), (200, 5, 3), (1000, 4, 2)] {
        let m = int_scorer(n, r, d, n as u64);
        let triples: Vec<Triple> = (0..150)
            .map(|_| Triple::new(rng.gen_range(0..n as u32), rng.gen_range(0..r as u32), rng.gen_range(0..n as u32)))
            .collect();
        let known = KnownTriples::new(&triples);
        let mut ties = 0;
        for &t in &triples {
            for side in [Side::Head, Side::Tail] {
                let got = rank_filtered(&m, t, side, Candidates::All, &known).unwrap();
                assert_eq!(got, sort_oracle(&m, t, side, &known), "{n} entities, {t:?} {side:?}");
                let all: Vec<EntityId> = (0..n as EntityId).filter(|&e| e != t.entity(side)).collect();
                let mut s = Vec::new();
                m.score_candidates(t, side, &[t.entity(side)], &mut s);
                m.score_candidates(t, side, &all, &mut s);
                ties += s[1..].iter().any(|&x| x == s[0]) as usize;
            }
        }
        assert!(ties > 0);
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent uniform score per (query, candidate).
struct HashScorer(usize);

impl LinkScorer for HashScorer {
    fn num_entities(&self) -> usize {
        self.0
    }

    fn score_candidates(&self, t: Triple, side: Side, candidates: &[EntityId], out: &mut Vec<f64>) {
        let q = ((t.head as u64) << 40) ^ ((t.rel as u64) << 20) ^ (t.tail as u64) ^ ((side == Side::Head) as u64) << 63;
        for &c in candidates {
            let h = splitmix(splitmix(q) ^ c as u64);
            out.push((h >> 11) as f64 / (1u64 << 53) as f64);
        }
    }
}

#[test]
fn uniform_scores_give_harmonic_mrr() {
    let n = 100;
    // One answer per (head, relation) and per (relation, tail).
    let triples: Vec<Triple> =
        (0..50u32).flat_map(|r| (0..n as u32).map(move |h| Triple::new(h, r, (h + r + 1) % n as u32))).collect();
    assert_eq!(triples.len() * 2, 10_000);
    let known = KnownTriples::new(&triples);
    let report = evaluate(&HashScorer(n), &triples, &known, Protocol::Full, 0).unwrap();
    let expected: f64 = (1..=n).map(|r| 1.0 / r as f64).sum::<f64>() / n as f64;
    assert!((expected - 0.0519).abs() < 1e-4);
    assert!((report.mrr - expected).abs() <= 0.01, "{} vs {expected}", report.mrr);
}

#[test]
fn constant_scores_rank_last() {
    struct Flat(usize);
    impl LinkScorer for Flat {
        fn num_entities(&self) -> usize {
            self.0
        }
        fn score_candidates(&self, _: Triple, _: Side, c: &[EntityId], out: &mut Vec<f64>) {
            out.extend(c.iter().map(|_| -1.5));
        }
    }
    let triples = [Triple::new(0, 0, 1), Triple::new(5, 0, 9)];
    let known = KnownTriples::new(&triples);
    for &t in &triples {
        for side in [Side::Head, Side::Tail] {
            let rank = rank_filtered(&Flat(40), t, side, Candidates::All, &known).unwrap();
            assert_eq!(rank, 40);
        }
    }
    let report = evaluate(&Flat(40), &triples, &known, Protocol::Full, 0).unwrap();
    assert!((report.mrr - 1.0 / 40.0).abs() < 1e-12);
}

struct Mapped<'a>(&'a EmbeddingScorer<f64>, fn(f64) -> f64);

impl LinkScorer for Mapped<'_> {
    fn num_entities(&self) -> usize {
        self.0.num_entities()
    }
    fn score_candidates(&self, t: Triple, side: Side, c: &[EntityId], out: &mut Vec<f64>) {
        let start = out.len();
        self.0.score_candidates(t, side, c, out);
        out[start..].iter_mut().for_each(|s| *s = (self.1)(*s));
    }
}

#[test]
fn mrr_invariant_under_increasing_maps() {
    let m = int_scorer(120, 3, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let triples: Vec<Triple> =
        (0..80).map(|_| Triple::new(rng.gen_range(0..120), rng.gen_range(0..3), rng.gen_range(0..120))).collect();
    let known = KnownTriples::new(&triples);
    let base = evaluate(&m, &triples, &known, Protocol::Full, 0).unwrap();
    let maps: [fn(f64) -> f64; 3] = [|s| 2.0 * s + 1.0, |s| s * s * s, f64::atan];
    for f in maps {
        let r = evaluate(&Mapped(&m, f), &triples, &known, Protocol::Full, 0).unwrap();
        assert_eq!(r.mrr, base.mrr);
        assert_eq!(r.hits1, base.hits1);
    }
}

/// Entities on a line; relation `r` shifts by `offset[r]`.
struct LineScorer {
    pos: Vec<f64>,
    offset: Vec<f64>,
}

impl LinkScorer for LineScorer {
    fn num_entities(&self) -> usize {
        self.pos.len()
    }
    fn score_candidates(&self, t: Triple, side: Side, c: &[EntityId], out: &mut Vec<f64>) {
        for &e in c {
            let q = t.with_entity(side, e);
            out.push(-(self.pos[q.head as usize] + self.offset[q.rel as usize] - self.pos[q.tail as usize]).abs());
        }
    }
}

/// Jitter `w` (in lattice spacings) sets how often a neighbor outranks the
/// truth. Sampling about half the candidates halves those losses, so the two
/// protocols only agree for a strong model.
fn protocols(w: f64) -> (f64, f64) {
    let n = 2000;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pos: Vec<f64> = (0..n).map(|i| (i as f64 + rng.gen_range(-w..w)) / n as f64).collect();
    let shift = [200usize, 5, 731];
    let offset: Vec<f64> = shift.iter().map(|&k| k as f64 / n as f64).collect();
    let triples: Vec<Triple> = (0..400)
        .map(|_| {
            let r = rng.gen_range(0..3);
            let h = rng.gen_range(0..n - shift[r]);
            Triple::new(h as u32, r as u32, (h + shift[r]) as u32)
        })
        .collect();
    let scorer = LineScorer { pos, offset };
    let known = KnownTriples::new(&triples);
    let full = evaluate(&scorer, &triples, &known, Protocol::Full, 0).unwrap();
    let sampled = evaluate(&scorer, &triples, &known, Protocol::Sampled(1000), 0).unwrap();
    let again = evaluate(&scorer, &triples, &known, Protocol::Sampled(1000), 0).unwrap();
    assert_eq!(again.mrr, sampled.mrr);
    (full.mrr, sampled.mrr)
}

#[test]
fn sampled_tracks_full_protocol() {
    let (full, sampled) = protocols(0.3);
    assert!(full >= 0.9 && full < 1.0, "{full}");
    assert!((full - sampled).abs() <= 0.05, "full {full} sampled {sampled}");

    let (full, sampled) = protocols(1.5);
    assert!(sampled - full > 0.05, "full {full} sampled {sampled}");
}

#[test]
fn errors() {
    let m = int_scorer(10, 2, 2, 1);
    let known = KnownTriples::default();
    assert!(evaluate(&m, &[], &known, Protocol::Full, 0).is_err());
    assert!(rank_filtered(&m, Triple::new(10, 0, 1), Side::Tail, Candidates::All, &known).is_err());
}

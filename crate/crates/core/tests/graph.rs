use std::collections::HashSet;
use std::io::Write;

use proptest::prelude::*;
use subkg_core::fixtures::{random_graph, random_triples};
use subkg_core::graph::{self, Direction, IngestOptions, SplitPaths, TripleFormat};
use subkg_core::{Error, Graph, Triple};

fn incidence_oracle(n: usize, triples: &[Triple]) -> Vec<u32> {
    let mut deg = vec![0u32; n];
    for t in triples {
        deg[t.head as usize] += 1;
        deg[t.tail as usize] += 1;
    }
    deg
}

#[test]
fn degrees_match_incidence_count() {
    let g = random_graph(50, 3, 200, 11);
    let oracle = incidence_oracle(50, g.triples());
    for u in 0..50 {
        assert_eq!(g.degree(u).unwrap(), oracle[u as usize], "entity {u}");
        assert_eq!(g.adj(u).unwrap().len() as u32, oracle[u as usize]);
    }
    assert!(g.degree(50).is_err());
}

#[test]
fn adjacency_sorted_by_degree_then_id() {
    let g = random_graph(80, 2, 300, 5);
    for u in 0..80 {
        let list = g.adj(u).unwrap();
        for w in list.windows(2) {
            let a = (std::cmp::Reverse(g.degree(w[0].neighbor).unwrap()), w[0].neighbor);
            let b = (std::cmp::Reverse(g.degree(w[1].neighbor).unwrap()), w[1].neighbor);
            assert!(a <= b, "entity {u}: {:?} before {:?}", w[0], w[1]);
        }
    }
}

#[test]
fn direction_flags_match_triples() {
    let g = random_graph(30, 4, 100, 9);
    let set: HashSet<Triple> = g.triples().iter().copied().collect();
    for u in 0..30 {
        for e in g.adj(u).unwrap() {
            let t = match e.dir {
                Direction::Out => Triple::new(u, e.rel, e.neighbor),
                Direction::In => Triple::new(e.neighbor, e.rel, u),
            };
            assert!(set.contains(&t), "{u}: {e:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn symmetric_and_degree_sum(n in 1usize..40, r in 1usize..4, count in 0usize..120, seed in any::<u64>()) {
        let triples = random_triples(n, r, count, seed);
        let g = Graph::new(n, r, triples.clone()).unwrap();
        let total: u64 = (0..n as u32).map(|u| g.degree(u).unwrap() as u64).sum();
        prop_assert_eq!(total, 2 * triples.len() as u64);
        for u in 0..n as u32 {
            for e in g.adj(u).unwrap() {
                prop_assert!(g.adj(e.neighbor).unwrap().iter().any(|b| b.neighbor == u));
            }
        }
    }

    #[test]
    fn cache_round_trip(n in 2usize..30, count in 1usize..80, seed in any::<u64>()) {
        let all = random_triples(n, 3, count + 10, seed);
        let ds = graph::Dataset::from_splits(n, 3, all[..count].to_vec(), all[count..count + 5].to_vec(), all[count + 5..].to_vec()).unwrap();
        let bytes = graph::encode_cache(&ds);
        let back = graph::decode_cache(&bytes).unwrap();
        prop_assert_eq!(&back.graph, &ds.graph);
        prop_assert_eq!(&back.valid, &ds.valid);
        prop_assert_eq!(&back.test, &ds.test);
        prop_assert_eq!(graph::encode_cache(&back), bytes);
    }
}

fn write(dir: &std::path::Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
    p
}

#[test]
fn ingest_serialize_ingest_identical() {
    let dir = tempfile::tempdir().unwrap();
    let train = write(dir.path(), "train.txt", "a likes b\nb likes c\nc knows a\nd knows d\n");
    let valid = write(dir.path(), "valid.txt", "a knows c\n");
    let test = write(dir.path(), "test.txt", "e likes a\n");
    let paths = SplitPaths { train, valid: Some(valid), test: Some(test) };
    let opts = IngestOptions { format: TripleFormat::Labels, ..IngestOptions::default() };
    let ds = graph::ingest(&paths, &opts).unwrap();
    assert_eq!(ds.graph.num_entities(), 5);
    assert_eq!(ds.graph.num_relations(), 2);
    assert_eq!(ds.graph.degree(4).unwrap(), 0);
    assert_eq!(ds.graph.degree(3).unwrap(), 2);

    let cache = dir.path().join("g.sgkg");
    let first = graph::ingest_cached(&paths, &opts, &cache).unwrap();
    let second = graph::ingest_cached(&paths, &opts, &cache).unwrap();
    assert_eq!(first.graph, second.graph);
    assert_eq!(first.entity_labels, second.entity_labels);
    assert_eq!(graph::encode_cache(&first), std::fs::read(&cache).unwrap());
}

#[test]
fn ingest_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let train = write(dir.path(), "train.txt", "0 0 1\n1 0\n");
    let paths = SplitPaths { train, valid: None, test: None };
    match graph::ingest(&paths, &IngestOptions::default()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
    let empty = write(dir.path(), "empty.txt", "");
    let paths = SplitPaths { train: empty, valid: None, test: None };
    let err = graph::ingest(&paths, &IngestOptions::default()).unwrap_err();
    assert!(err.to_string().contains("no triples"), "{err}");
}

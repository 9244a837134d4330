use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use subkg_core::fixtures::{random_graph, star_graph};
use subkg_core::objective::NegativeSamples;
use subkg_core::vocab::{build_vocabulary, select_anchors, DEFAULT_MAX_HOPS};
use subkg_core::{
    assemble, Encoder, EncoderConfig, EncoderKind, KgeModel, ModelConfig, ObjectiveConfig, Side, SubgraphBatch,
    SubgraphLayout, Triple, Vocabulary,
};

fn config(kind: EncoderKind, layout: SubgraphLayout) -> EncoderConfig {
    EncoderConfig { d_a: 16, d_n: 8, layout, kind, heads: 2, ff_mult: 2, dropout: 0.0, init_scale: 6.0 }
}

fn setup() -> (Vocabulary, usize) {
    let g = random_graph(40, 3, 120, 21);
    let anchors = select_anchors(&g, 8).unwrap();
    (build_vocabulary(&g, &anchors, 4, 3, DEFAULT_MAX_HOPS).unwrap(), 8)
}

/// Shuffles anchor slots and neighbor slots of every sequence independently.
fn shuffle_slots(batch: &SubgraphBatch, rng: &mut ChaCha8Rng) -> SubgraphBatch {
    let mut out = batch.clone();
    let l = batch.seq_len();
    let (k, m) = (batch.layout.k, batch.layout.m);
    for b in 0..batch.len() {
        for (start, len) in [(b * l, k), (b * l + k, m)] {
            let mut order: Vec<usize> = (0..len).collect();
            order.shuffle(rng);
            for (dst, &src) in order.iter().enumerate() {
                out.tokens[start + dst] = batch.tokens[start + src];
                out.active[start + dst] = batch.active[start + src];
            }
        }
    }
    out
}

fn max_abs(a: &Array2<f32>, b: &Array2<f32>) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn attention_is_slot_permutation_invariant() {
    let (vocab, na) = setup();
    let layout = SubgraphLayout { k: 4, m: 3, center: true };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let enc = Encoder::<f32>::new(config(EncoderKind::Attention, layout), 40, na, &mut rng).unwrap();
    let ids: Vec<u32> = (0..40).collect();
    let batch = assemble(&vocab, &ids, layout).unwrap();
    let (base, _) = enc.encode(&batch, None).unwrap();
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let p = shuffle_slots(&batch, &mut rng);
        let (out, _) = enc.encode(&p, None).unwrap();
        worst = worst.max(max_abs(&base, &out));
    }
    assert!(worst <= 1e-5, "{worst}");
}

#[test]
fn mlp_is_not_permutation_invariant() {
    let (vocab, na) = setup();
    let layout = SubgraphLayout { k: 4, m: 3, center: true };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let enc = Encoder::<f32>::new(config(EncoderKind::Mlp, layout), 40, na, &mut rng).unwrap();
    let ids: Vec<u32> = (0..40).collect();
    let batch = assemble(&vocab, &ids, layout).unwrap();
    let (base, _) = enc.encode(&batch, None).unwrap();
    let p = shuffle_slots(&batch, &mut rng);
    assert_ne!(p.tokens, batch.tokens);
    let (out, _) = enc.encode(&p, None).unwrap();
    assert!(max_abs(&base, &out) > 1e-3);
    assert_eq!(out.dim(), (40, 16));
}

#[test]
fn anchors_only_ignores_node_table() {
    let (vocab, na) = setup();
    let layout = SubgraphLayout { k: 4, m: 0, center: false };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut enc = Encoder::<f32>::new(config(EncoderKind::Attention, layout), 40, na, &mut rng).unwrap();
    let ids: Vec<u32> = (0..40).collect();
    let batch = assemble(&vocab, &ids, layout).unwrap();
    assert_eq!(batch.seq_len(), 4);
    let (base, cache) = enc.encode(&batch, None).unwrap();

    enc.backward(&cache, Array2::ones(base.raw_dim()).view());
    let e = &enc.embedder;
    assert!(e.node_table.grad.iter().all(|&g| g == 0.0));
    assert!(e.projection.params().iter().all(|p| p.grad.iter().all(|&g| g == 0.0)));
    assert!(e.type_embeddings.grad.row(0).iter().any(|&g| g != 0.0));
    assert!(e.type_embeddings.grad.rows().into_iter().skip(1).all(|r| r.iter().all(|&g| g == 0.0)));

    enc.embedder.node_table.value.fill(3.0);
    enc.embedder.type_embeddings.value.row_mut(1).fill(-2.0);
    enc.embedder.type_embeddings.value.row_mut(2).fill(5.0);
    let (out, _) = enc.encode(&batch, None).unwrap();
    assert_eq!(out, base);
}

#[test]
fn shared_context_different_centers_differ() {
    // 1 and 2 both hang off 0 only: same anchors, same neighbor.
    let g = star_graph();
    let anchors = select_anchors(&g, 2).unwrap();
    let vocab = build_vocabulary(&g, &anchors, 2, 1, DEFAULT_MAX_HOPS).unwrap();
    let (e1, e2) = (vocab.entry(1).unwrap(), vocab.entry(2).unwrap());
    assert_eq!(e1.anchors, e2.anchors);
    assert_eq!(e1.neighbors, e2.neighbors);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layout = SubgraphLayout { k: 2, m: 1, center: true };
    let enc = Encoder::<f32>::new(config(EncoderKind::Attention, layout), 6, 2, &mut rng).unwrap();
    let (out, _) = enc.encode(&assemble(&vocab, &[1, 2], layout).unwrap(), None).unwrap();
    let dist: f32 = (&out.row(0) - &out.row(1)).mapv(|x| x * x).sum().sqrt();
    assert!(dist > 0.0);

    let no_center = SubgraphLayout { center: false, ..layout };
    let enc = Encoder::<f32>::new(config(EncoderKind::Attention, no_center), 6, 2, &mut rng).unwrap();
    let (out, _) = enc.encode(&assemble(&vocab, &[1, 2], no_center).unwrap(), None).unwrap();
    assert_eq!(out.row(0), out.row(1));
}

#[test]
fn encode_is_pure_without_dropout() {
    let (vocab, na) = setup();
    let layout = SubgraphLayout { k: 4, m: 3, center: true };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cfg = config(EncoderKind::Attention, layout);
    cfg.dropout = 0.3;
    let enc = Encoder::<f32>::new(cfg, 40, na, &mut rng).unwrap();
    let batch = assemble(&vocab, &[0, 5, 9], layout).unwrap();
    let (a, _) = enc.encode(&batch, None).unwrap();
    let (b, _) = enc.encode(&batch, None).unwrap();
    assert_eq!(a, b);
    let (c, _) = enc.encode(&batch, Some(&mut rng)).unwrap();
    assert_ne!(a, c);
    assert!(a.iter().all(|x| x.is_finite()));
}

#[test]
fn duplicated_batch_keeps_mean_loss() {
    let (vocab, na) = setup();
    let layout = SubgraphLayout { k: 4, m: 3, center: true };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = ModelConfig { encoder: config(EncoderKind::Attention, layout), objective: ObjectiveConfig::default() };
    let mut model = KgeModel::<f32>::new(cfg, 40, 3, na, &mut rng).unwrap();
    let pos = vec![Triple::new(0, 1, 2), Triple::new(7, 0, 30)];
    let neg = NegativeSamples { n: 3, sides: vec![Side::Tail, Side::Head], ids: vec![4, 5, 6, 11, 12, 13] };
    let once = model.step(&vocab, &pos, &neg, None, false).unwrap().loss;

    let pos2: Vec<Triple> = pos.iter().chain(&pos).copied().collect();
    let neg2 = NegativeSamples {
        n: 3,
        sides: neg.sides.iter().chain(&neg.sides).copied().collect(),
        ids: neg.ids.iter().chain(&neg.ids).copied().collect(),
    };
    let twice = model.step(&vocab, &pos2, &neg2, None, false).unwrap().loss;
    assert!((once - twice).abs() <= 1e-6 * once.abs().max(1.0), "{once} vs {twice}");
}

#[test]
fn gradients_stay_inside_the_batch() {
    let (vocab, na) = setup();
    let layout = SubgraphLayout { k: 4, m: 3, center: true };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut enc = Encoder::<f32>::new(config(EncoderKind::Attention, layout), 40, na, &mut rng).unwrap();
    let batch = assemble(&vocab, &[3, 17], layout).unwrap();
    let used: std::collections::HashSet<usize> = batch
        .tokens
        .iter()
        .enumerate()
        .filter(|&(i, _)| batch.active[i] && i % batch.seq_len() >= layout.k)
        .map(|(_, &t)| t as usize)
        .collect();
    let (out, cache) = enc.encode(&batch, None).unwrap();
    enc.backward(&cache, Array2::ones(out.raw_dim()).view());
    for (row, g) in enc.embedder.node_table.grad.rows().into_iter().enumerate() {
        if !used.contains(&row) {
            assert!(g.iter().all(|&x| x == 0.0), "row {row}");
        }
    }
}

//! Anchor selection and per-entity subgraph vocabularies.
//!
//! Every entity is described by up to `k` anchors (nearest by BFS hop, ties by
//! anchor ordinal), up to `m` one-hop neighbors in degree order, and itself as
//! the center token. Anchor ordinals are assigned in (degree desc, id asc)
//! order, so within a BFS frontier the visit order coincides with ordinal
//! order.

use std::cmp::Reverse;
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::graph::{EntityId, Graph};

/// Marks an empty token slot.
pub const PAD: u32 = u32::MAX;

pub const DEFAULT_MAX_HOPS: usize = 10;

/// `ceil(0.4%)` of the entity count, clamped to a legal anchor count.
pub fn default_anchor_count(num_entities: usize) -> usize {
    num_entities.div_ceil(250).clamp(1, num_entities.saturating_sub(1).max(1))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorSet {
    anchors: Vec<EntityId>,
    ordinal_of: Vec<u32>,
}

impl AnchorSet {
    pub fn from_ordered(num_entities: usize, anchors: Vec<EntityId>) -> Result<Self> {
        let mut ordinal_of = vec![PAD; num_entities];
        for (i, &a) in anchors.iter().enumerate() {
            let slot = ordinal_of.get_mut(a as usize).ok_or(Error::IdOutOfRange {
                kind: "entity",
                id: a as u64,
                count: num_entities as u64,
            })?;
            if *slot != PAD {
                return Err(Error::InvalidArgument(format!("duplicate anchor {a}")));
            }
            *slot = i as u32;
        }
        Ok(AnchorSet { anchors, ordinal_of })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Anchor entity ids in ordinal order.
    pub fn entities(&self) -> &[EntityId] {
        &self.anchors
    }

    pub fn ordinal(&self, u: EntityId) -> Option<u32> {
        self.ordinal_of.get(u as usize).copied().filter(|&o| o != PAD)
    }

    pub fn entity(&self, ordinal: u32) -> EntityId {
        self.anchors[ordinal as usize]
    }
}

/// The `count` highest-degree entities, ties broken by ascending id.
pub fn select_anchors(graph: &Graph, count: usize) -> Result<AnchorSet> {
    let n = graph.num_entities();
    if count == 0 || count >= n {
        return Err(Error::InvalidArgument(format!(
            "anchor count must be in [1, {n}), got {count}"
        )));
    }
    let adj = graph.adjacency();
    let key = |u: &u32| (Reverse(adj.degree(*u)), *u);
    let mut ids: Vec<u32> = (0..n as u32).collect();
    ids.select_nth_unstable_by_key(count - 1, key);
    ids.truncate(count);
    ids.sort_unstable_by_key(key);
    AnchorSet::from_ordered(n, ids)
}

/// First `k` anchors met by a level-synchronous BFS from `u`, visiting each
/// frontier in (degree desc, id asc) order. `u` itself is hop 0. Slots beyond
/// the reachable anchors (within `max_hops`) are [`PAD`].
pub fn sample_anchors(
    graph: &Graph,
    anchors: &AnchorSet,
    u: EntityId,
    k: usize,
    max_hops: usize,
) -> Result<Vec<u32>> {
    graph.check_entity(u)?;
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let adj = graph.adjacency();
    let mut out = Vec::with_capacity(k);
    let mut visited = HashSet::from([u]);
    let mut frontier = vec![u];
    let mut hop = 0;
    while !frontier.is_empty() {
        for &v in &frontier {
            if let Some(o) = anchors.ordinal(v) {
                out.push(o);
                if out.len() == k {
                    return Ok(out);
                }
            }
        }
        if hop == max_hops {
            break;
        }
        let mut next = Vec::new();
        for &v in &frontier {
            for e in adj.list(v) {
                if visited.insert(e.neighbor) {
                    next.push(e.neighbor);
                }
            }
        }
        next.sort_unstable_by_key(|&w| (Reverse(adj.degree(w)), w));
        frontier = next;
        hop += 1;
    }
    out.resize(k, PAD);
    Ok(out)
}

/// First `m` distinct one-hop neighbors of `u` other than `u`, in
/// (degree desc, id asc) order, padded with [`PAD`].
pub fn sample_neighbors(graph: &Graph, u: EntityId, m: usize) -> Result<Vec<EntityId>> {
    graph.check_entity(u)?;
    let mut out: Vec<EntityId> = graph.neighbors(u).filter(|&v| v != u).take(m).collect();
    out.resize(m, PAD);
    Ok(out)
}

/// k-nearest anchors for every entity at once.
///
/// Round `d` lets each entity with free slots pull the labels its neighbors
/// gained in round `d-1`; those are exactly the anchors at hop `d`. Keeping
/// only the best `k` labels per entity never drops an anchor another entity
/// needs, so the result equals [`sample_anchors`] for every entity.
fn nearest_anchors(graph: &Graph, anchors: &AnchorSet, k: usize, max_hops: usize) -> Vec<u32> {
    let n = graph.num_entities();
    let adj = graph.adjacency();
    let mut tokens = vec![PAD; n * k];
    let mut filled = vec![0u32; n];
    // Labels at the previous hop live in tokens[v*k + prev_start[v] .. v*k + filled[v]].
    let mut prev_start = vec![0u32; n];
    for (o, &a) in anchors.entities().iter().enumerate() {
        tokens[a as usize * k] = o as u32;
        filled[a as usize] = 1;
    }

    for _hop in 1..=max_hops {
        let updates: Vec<(u32, Vec<u32>)> = (0..n as u32)
            .into_par_iter()
            .filter(|&v| (filled[v as usize] as usize) < k)
            .filter_map(|v| {
                let vi = v as usize;
                let own = &tokens[vi * k..vi * k + filled[vi] as usize];
                let mut cand = Vec::new();
                let list = adj.list(v);
                for (i, e) in list.iter().enumerate() {
                    if i > 0 && list[i - 1].neighbor == e.neighbor {
                        continue;
                    }
                    let w = e.neighbor as usize;
                    let fresh = &tokens[w * k + prev_start[w] as usize..w * k + filled[w] as usize];
                    cand.extend(fresh.iter().filter(|o| !own.contains(o)));
                }
                if cand.is_empty() {
                    return None;
                }
                cand.sort_unstable();
                cand.dedup();
                cand.truncate(k - own.len());
                Some((v, cand))
            })
            .collect();
        if updates.is_empty() {
            break;
        }
        let mut touched = vec![false; n];
        for (v, cand) in updates {
            let vi = v as usize;
            let start = filled[vi] as usize;
            tokens[vi * k + start..vi * k + start + cand.len()].copy_from_slice(&cand);
            prev_start[vi] = start as u32;
            filled[vi] = (start + cand.len()) as u32;
            touched[vi] = true;
        }
        // Entities that gained nothing this round have no fresh labels.
        for v in 0..n {
            if !touched[v] {
                prev_start[v] = filled[v];
            }
        }
    }
    tokens
}

/// Per-entity token table. The center token of entity `u` is `u` itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    k: usize,
    m: usize,
    num_entities: usize,
    graph_checksum: u64,
    anchors: AnchorSet,
    anchor_tokens: Vec<u32>,
    neighbor_tokens: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VocabEntry<'a> {
    /// Anchor ordinals, [`PAD`] for empty slots.
    pub anchors: &'a [u32],
    pub neighbors: &'a [EntityId],
    pub center: EntityId,
}

impl VocabEntry<'_> {
    /// `true` marks a pad slot; layout is (anchors, neighbors, center).
    pub fn pad_mask(&self) -> Vec<bool> {
        self.anchors
            .iter()
            .chain(self.neighbors)
            .map(|&t| t == PAD)
            .chain(std::iter::once(false))
            .collect()
    }
}

pub fn build_vocabulary(
    graph: &Graph,
    anchors: &AnchorSet,
    k: usize,
    m: usize,
    max_hops: usize,
) -> Result<Vocabulary> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if anchors.ordinal_of.len() != graph.num_entities() {
        return Err(Error::InvalidArgument("anchor set built for a different graph".into()));
    }
    let n = graph.num_entities();
    let anchor_tokens = nearest_anchors(graph, anchors, k, max_hops);
    let mut neighbor_tokens = vec![PAD; n * m];
    if m > 0 {
        neighbor_tokens.par_chunks_mut(m).enumerate().for_each(|(u, slot)| {
            for (s, v) in slot.iter_mut().zip(graph.neighbors(u as u32).filter(|&v| v != u as u32)) {
                *s = v;
            }
        });
    }
    Ok(Vocabulary {
        k,
        m,
        num_entities: n,
        graph_checksum: graph.checksum(),
        anchors: anchors.clone(),
        anchor_tokens,
        neighbor_tokens,
    })
}

pub const VOCAB_MAGIC: &[u8; 5] = b"SGVC1";

impl Vocabulary {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn graph_checksum(&self) -> u64 {
        self.graph_checksum
    }

    pub fn entry(&self, u: EntityId) -> Result<VocabEntry<'_>> {
        let ui = u as usize;
        if ui >= self.num_entities {
            return Err(Error::IdOutOfRange { kind: "entity", id: u as u64, count: self.num_entities as u64 });
        }
        Ok(VocabEntry {
            anchors: &self.anchor_tokens[ui * self.k..(ui + 1) * self.k],
            neighbors: &self.neighbor_tokens[ui * self.m..(ui + 1) * self.m],
            center: u,
        })
    }

    pub fn check_graph(&self, graph: &Graph) -> Result<()> {
        if self.graph_checksum != graph.checksum() {
            return Err(Error::ChecksumMismatch { expected: graph.checksum(), found: self.graph_checksum });
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new(VOCAB_MAGIC);
        w.u64(self.anchors.len() as u64);
        w.u64(self.k as u64);
        w.u64(self.m as u64);
        w.u64(self.num_entities as u64);
        w.u64(self.graph_checksum);
        w.u32s(self.anchors.entities());
        for u in 0..self.num_entities {
            w.u32s(&self.anchor_tokens[u * self.k..(u + 1) * self.k]);
            w.u32s(&self.neighbor_tokens[u * self.m..(u + 1) * self.m]);
            w.u32(u as u32);
        }
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Vocabulary> {
        let mut r = Reader::new(bytes, VOCAB_MAGIC)?;
        let num_anchors = r.u64()? as usize;
        let k = r.u64()? as usize;
        let m = r.u64()? as usize;
        let num_entities = r.u64()? as usize;
        let graph_checksum = r.u64()?;
        let at = r.offset();
        let ids = r.u32s(num_anchors)?;
        let anchors = AnchorSet::from_ordered(num_entities, ids)
            .map_err(|e| Error::Format { offset: at, msg: e.to_string() })?;
        let mut anchor_tokens = Vec::with_capacity(num_entities * k);
        let mut neighbor_tokens = Vec::with_capacity(num_entities * m);
        for u in 0..num_entities {
            let at = r.offset();
            let a = r.u32s(k)?;
            let nb = r.u32s(m)?;
            let center = r.u32()?;
            let bad_anchor = a.iter().any(|&o| o != PAD && o as usize >= num_anchors);
            let bad_nb = nb.iter().any(|&v| v != PAD && v as usize >= num_entities);
            if center as usize != u || bad_anchor || bad_nb {
                return Err(Error::Format { offset: at, msg: format!("corrupt record for entity {u}") });
            }
            anchor_tokens.extend(a);
            neighbor_tokens.extend(nb);
        }
        r.finish()?;
        Ok(Vocabulary { k, m, num_entities, graph_checksum, anchors, anchor_tokens, neighbor_tokens })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.encode())
    }

    /// Loads a vocabulary and verifies it was built from `graph`.
    pub fn load(path: &Path, graph: &Graph) -> Result<Vocabulary> {
        let v = Vocabulary::decode(&binio::read_file(path)?)?;
        v.check_graph(graph)?;
        Ok(v)
    }

    /// `entity: a1,..,ak | n1,..,nm | center` with anchors as entity ids and
    /// pad slots omitted.
    pub fn dump_line(&self, u: EntityId) -> Result<String> {
        let e = self.entry(u)?;
        let join = |it: &mut dyn Iterator<Item = u32>| {
            it.map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        let a = join(&mut e.anchors.iter().filter(|&&o| o != PAD).map(|&o| self.anchors.entity(o)));
        let n = join(&mut e.neighbors.iter().copied().filter(|&v| v != PAD));
        Ok(format!("{u}: {a} | {n} | {}", e.center))
    }

    pub fn dump_text(&self) -> String {
        let mut s = String::new();
        for u in 0..self.num_entities as u32 {
            let _ = writeln!(s, "{}", self.dump_line(u).unwrap());
        }
        s
    }
}

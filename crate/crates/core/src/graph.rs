//! Triple store with dense ids and an undirected CSR adjacency built from the
//! training split.
//!
//! Adjacency lists are ordered by (neighbor degree desc, neighbor id asc) so
//! degree-ordered neighbor sampling is a prefix scan. A self-loop contributes
//! two entries (one per direction), which keeps `degree(u) == adj(u).len()`.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};

pub type EntityId = u32;
pub type RelationId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub rel: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub const fn new(head: EntityId, rel: RelationId, tail: EntityId) -> Self {
        Triple { head, rel, tail }
    }

    pub fn entity(&self, side: Side) -> EntityId {
        match side {
            Side::Head => self.head,
            Side::Tail => self.tail,
        }
    }

    /// The same triple with the entity on `side` replaced.
    pub fn with_entity(self, side: Side, e: EntityId) -> Triple {
        match side {
            Side::Head => Triple { head: e, ..self },
            Side::Tail => Triple { tail: e, ..self },
        }
    }
}

/// Which end of a triple is corrupted or predicted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Head,
    Tail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Direction {
    /// The owning entity is the head of the edge.
    Out = 0,
    /// The owning entity is the tail of the edge.
    In = 1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdjEntry {
    pub neighbor: EntityId,
    pub rel: RelationId,
    pub dir: Direction,
}

/// Undirected CSR view of a triple list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    offsets: Vec<u64>,
    entries: Vec<AdjEntry>,
}

impl Adjacency {
    pub fn degree(&self, u: EntityId) -> u32 {
        (self.offsets[u as usize + 1] - self.offsets[u as usize]) as u32
    }

    pub fn list(&self, u: EntityId) -> &[AdjEntry] {
        &self.entries[self.offsets[u as usize] as usize..self.offsets[u as usize + 1] as usize]
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_entries(&self) -> usize {
        self.entries.len()
    }
}

/// Builds the symmetric adjacency and degree index for `num_entities` nodes.
///
/// Ids must already be validated against `num_entities`.
pub fn build_adjacency(num_entities: usize, train: &[Triple]) -> Adjacency {
    let mut offsets = vec![0u64; num_entities + 1];
    for t in train {
        offsets[t.head as usize + 1] += 1;
        offsets[t.tail as usize + 1] += 1;
    }
    for i in 0..num_entities {
        offsets[i + 1] += offsets[i];
    }
    let placeholder = AdjEntry { neighbor: 0, rel: 0, dir: Direction::Out };
    let mut entries = vec![placeholder; train.len() * 2];
    let mut cursor: Vec<u64> = offsets[..num_entities].to_vec();
    for t in train {
        let h = t.head as usize;
        entries[cursor[h] as usize] = AdjEntry { neighbor: t.tail, rel: t.rel, dir: Direction::Out };
        cursor[h] += 1;
        let tl = t.tail as usize;
        entries[cursor[tl] as usize] = AdjEntry { neighbor: t.head, rel: t.rel, dir: Direction::In };
        cursor[tl] += 1;
    }
    let degree: Vec<u64> = offsets.windows(2).map(|w| w[1] - w[0]).collect();
    for u in 0..num_entities {
        let seg = &mut entries[offsets[u] as usize..offsets[u + 1] as usize];
        seg.sort_unstable_by_key(|e| {
            (std::cmp::Reverse(degree[e.neighbor as usize]), e.neighbor, e.rel, e.dir)
        });
    }
    Adjacency { offsets, entries }
}

/// Immutable training graph: counts, train triples and the adjacency index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    num_entities: usize,
    num_relations: usize,
    triples: Vec<Triple>,
    adjacency: Adjacency,
    checksum: u64,
}

impl Graph {
    pub fn new(num_entities: usize, num_relations: usize, triples: Vec<Triple>) -> Result<Graph> {
        if num_entities > u32::MAX as usize || num_relations > u32::MAX as usize {
            return Err(Error::InvalidArgument("id space exceeds 32 bits".into()));
        }
        for t in &triples {
            check_triple(t, num_entities, num_relations)?;
        }
        let adjacency = build_adjacency(num_entities, &triples);
        let checksum = graph_checksum(num_entities, num_relations, &triples);
        Ok(Graph { num_entities, num_relations, triples, adjacency, checksum })
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    /// Identifies the train triples and counts; embedded in derived artifacts.
    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    pub fn check_entity(&self, u: EntityId) -> Result<()> {
        if (u as usize) < self.num_entities {
            Ok(())
        } else {
            Err(Error::IdOutOfRange { kind: "entity", id: u as u64, count: self.num_entities as u64 })
        }
    }

    pub fn degree(&self, u: EntityId) -> Result<u32> {
        self.check_entity(u)?;
        Ok(self.adjacency.degree(u))
    }

    pub fn adj(&self, u: EntityId) -> Result<&[AdjEntry]> {
        self.check_entity(u)?;
        Ok(self.adjacency.list(u))
    }

    /// Distinct neighbors of `u` in (degree desc, id asc) order. May include `u`
    /// itself when it has a self-loop.
    pub fn neighbors(&self, u: EntityId) -> impl Iterator<Item = EntityId> + '_ {
        let list = self.adjacency.list(u);
        list.iter()
            .enumerate()
            .filter(move |(i, e)| *i == 0 || list[i - 1].neighbor != e.neighbor)
            .map(|(_, e)| e.neighbor)
    }
}

fn check_triple(t: &Triple, num_entities: usize, num_relations: usize) -> Result<()> {
    for id in [t.head, t.tail] {
        if id as usize >= num_entities {
            return Err(Error::IdOutOfRange { kind: "entity", id: id as u64, count: num_entities as u64 });
        }
    }
    if t.rel as usize >= num_relations {
        return Err(Error::IdOutOfRange { kind: "relation", id: t.rel as u64, count: num_relations as u64 });
    }
    Ok(())
}

fn graph_checksum(num_entities: usize, num_relations: usize, triples: &[Triple]) -> u64 {
    let mut w = Writer::default();
    w.u64(num_entities as u64);
    w.u64(num_relations as u64);
    for t in triples {
        w.u32(t.head);
        w.u32(t.rel);
        w.u32(t.tail);
    }
    binio::digest64(&w.buf)
}

/// Train graph plus the held-out splits and optional label dictionaries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub graph: Graph,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    /// Empty in id mode.
    pub entity_labels: Vec<String>,
    pub relation_labels: Vec<String>,
    /// Digest of the source files and ingest options that produced this dataset.
    pub source_checksum: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

impl Dataset {
    pub fn from_splits(
        num_entities: usize,
        num_relations: usize,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Result<Dataset> {
        for t in valid.iter().chain(&test) {
            check_triple(t, num_entities, num_relations)?;
        }
        Ok(Dataset {
            graph: Graph::new(num_entities, num_relations, train)?,
            valid,
            test,
            entity_labels: Vec::new(),
            relation_labels: Vec::new(),
            source_checksum: 0,
        })
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => self.graph.triples(),
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn all_triples(&self) -> impl Iterator<Item = &Triple> {
        self.graph.triples().iter().chain(&self.valid).chain(&self.test)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TripleFormat {
    /// Three non-negative integers per line.
    #[default]
    Ids,
    /// Three arbitrary tokens per line; ids assigned in first-seen order.
    Labels,
}

impl std::str::FromStr for TripleFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ids" => Ok(TripleFormat::Ids),
            "labels" => Ok(TripleFormat::Labels),
            _ => Err(Error::InvalidArgument(format!("unknown format {s:?}, expected ids|labels"))),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct IngestOptions {
    pub format: TripleFormat,
    /// Declared entity count (id mode). Ids at or above it are rejected.
    pub num_entities: Option<u64>,
    pub num_relations: Option<u64>,
    /// Drop repeated train triples, keeping the first occurrence.
    pub dedup: bool,
}

#[derive(Clone, Debug)]
pub struct SplitPaths {
    pub train: PathBuf,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

struct Interner {
    ids: HashMap<String, u32>,
    labels: Vec<String>,
}

impl Interner {
    fn new() -> Self {
        Interner { ids: HashMap::new(), labels: Vec::new() }
    }

    fn get(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.ids.get(s) {
            return id;
        }
        let id = self.labels.len() as u32;
        self.ids.insert(s.to_owned(), id);
        self.labels.push(s.to_owned());
        id
    }
}

struct Parser<'a> {
    opts: &'a IngestOptions,
    entities: Interner,
    relations: Interner,
    max_entity: Option<u64>,
    max_relation: Option<u64>,
}

impl Parser<'_> {
    fn parse(&mut self, text: &str, path: &Path) -> Result<Vec<Triple>> {
        let mut out = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    path: path.to_owned(),
                    line: lineno + 1,
                    msg: format!("expected 3 fields, found {}", fields.len()),
                });
            }
            let t = match self.opts.format {
                TripleFormat::Labels => Triple::new(
                    self.entities.get(fields[0]),
                    self.relations.get(fields[1]),
                    self.entities.get(fields[2]),
                ),
                TripleFormat::Ids => {
                    let mut ids = [0u32; 3];
                    for (slot, (field, is_rel)) in
                        ids.iter_mut().zip(fields.iter().zip([false, true, false]))
                    {
                        let v: u64 = field.parse().map_err(|_| Error::Parse {
                            path: path.to_owned(),
                            line: lineno + 1,
                            msg: format!("not a non-negative integer: {field:?}"),
                        })?;
                        let (declared, kind) = if is_rel {
                            (self.opts.num_relations, "relation")
                        } else {
                            (self.opts.num_entities, "entity")
                        };
                        let limit = declared.unwrap_or(u32::MAX as u64);
                        if v >= limit {
                            return Err(Error::Parse {
                                path: path.to_owned(),
                                line: lineno + 1,
                                msg: Error::IdOutOfRange { kind, id: v, count: limit }.to_string(),
                            });
                        }
                        let max = if is_rel { &mut self.max_relation } else { &mut self.max_entity };
                        *max = Some(max.map_or(v, |m| m.max(v)));
                        *slot = v as u32;
                    }
                    Triple::new(ids[0], ids[1], ids[2])
                }
            };
            out.push(t);
        }
        Ok(out)
    }
}

/// Parses train/valid/test text with a shared dictionary. `names` label the
/// three inputs in error messages.
pub fn ingest_text(
    train: &str,
    valid: &str,
    test: &str,
    names: [&Path; 3],
    opts: &IngestOptions,
) -> Result<Dataset> {
    let mut p = Parser {
        opts,
        entities: Interner::new(),
        relations: Interner::new(),
        max_entity: None,
        max_relation: None,
    };
    let mut train_t = p.parse(train, names[0])?;
    if train_t.is_empty() {
        return Err(Error::NoTriples(names[0].to_owned()));
    }
    let valid_t = p.parse(valid, names[1])?;
    let test_t = p.parse(test, names[2])?;

    if opts.dedup {
        let mut seen = HashSet::with_capacity(train_t.len());
        train_t.retain(|t| seen.insert(*t));
    }

    let (num_entities, num_relations) = match opts.format {
        TripleFormat::Labels => (p.entities.labels.len(), p.relations.labels.len()),
        TripleFormat::Ids => (
            opts.num_entities.unwrap_or_else(|| p.max_entity.map_or(0, |m| m + 1)) as usize,
            opts.num_relations.unwrap_or_else(|| p.max_relation.map_or(0, |m| m + 1)) as usize,
        ),
    };
    let mut ds = Dataset::from_splits(num_entities, num_relations, train_t, valid_t, test_t)?;
    ds.entity_labels = p.entities.labels;
    ds.relation_labels = p.relations.labels;
    ds.source_checksum = source_checksum([train, valid, test], opts);
    Ok(ds)
}

fn source_checksum(texts: [&str; 3], opts: &IngestOptions) -> u64 {
    let mut w = Writer::default();
    for t in texts {
        w.u64(binio::digest64(t.as_bytes()));
    }
    w.u8(opts.format as u8);
    w.u64(opts.num_entities.map_or(u64::MAX, |n| n));
    w.u64(opts.num_relations.map_or(u64::MAX, |n| n));
    w.u8(opts.dedup as u8);
    binio::digest64(&w.buf)
}

fn read_text(path: Option<&Path>) -> Result<String> {
    match path {
        None => Ok(String::new()),
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e)),
    }
}

pub fn ingest(paths: &SplitPaths, opts: &IngestOptions) -> Result<Dataset> {
    let train = read_text(Some(&paths.train))?;
    let valid = read_text(paths.valid.as_deref())?;
    let test = read_text(paths.test.as_deref())?;
    let none = Path::new("<none>");
    let names = [
        paths.train.as_path(),
        paths.valid.as_deref().unwrap_or(none),
        paths.test.as_deref().unwrap_or(none),
    ];
    let ds = ingest_text(&train, &valid, &test, names, opts)?;
    log::info!(
        "ingested {} entities, {} relations, {}/{}/{} train/valid/test triples",
        ds.graph.num_entities(),
        ds.graph.num_relations(),
        ds.graph.triples().len(),
        ds.valid.len(),
        ds.test.len()
    );
    Ok(ds)
}

/// Ingests unless `cache` already holds a dataset built from identical sources.
pub fn ingest_cached(paths: &SplitPaths, opts: &IngestOptions, cache: &Path) -> Result<Dataset> {
    if cache.exists() {
        let texts = [
            read_text(Some(&paths.train))?,
            read_text(paths.valid.as_deref())?,
            read_text(paths.test.as_deref())?,
        ];
        let want = source_checksum([&texts[0], &texts[1], &texts[2]], opts);
        match load_cache(cache) {
            Ok(ds) if ds.source_checksum == want => return Ok(ds),
            Ok(_) => log::info!("{} is stale, rebuilding", cache.display()),
            Err(e) => log::warn!("ignoring unreadable cache {}: {e}", cache.display()),
        }
    }
    let ds = ingest(paths, opts)?;
    save_cache(&ds, cache)?;
    Ok(ds)
}

pub const GRAPH_MAGIC: &[u8; 5] = b"SGKG1";

pub fn encode_cache(ds: &Dataset) -> Vec<u8> {
    let g = &ds.graph;
    let mut w = Writer::new(GRAPH_MAGIC);
    w.u64(g.num_entities as u64);
    w.u64(g.num_relations as u64);
    w.u64(ds.source_checksum);
    w.u64(g.checksum);
    for split in [g.triples(), &ds.valid[..], &ds.test[..]] {
        w.u64(split.len() as u64);
        for t in split {
            w.u32(t.head);
            w.u32(t.rel);
            w.u32(t.tail);
        }
    }
    w.u64(g.adjacency.offsets.len() as u64);
    for &o in &g.adjacency.offsets {
        w.u64(o);
    }
    w.u64(g.adjacency.entries.len() as u64);
    for e in &g.adjacency.entries {
        w.u32(e.neighbor);
        w.u32(e.rel);
        w.u8(e.dir as u8);
    }
    for labels in [&ds.entity_labels, &ds.relation_labels] {
        w.u64(labels.len() as u64);
        for l in labels {
            w.str(l);
        }
    }
    w.buf
}

pub fn decode_cache(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes, GRAPH_MAGIC)?;
    let num_entities = r.u64()? as usize;
    let num_relations = r.u64()? as usize;
    let source_checksum = r.u64()?;
    let checksum = r.u64()?;
    let mut splits = Vec::with_capacity(3);
    for _ in 0..3 {
        let n = r.len(12)?;
        let flat = r.u32s(n * 3)?;
        let split: Vec<Triple> =
            flat.chunks_exact(3).map(|c| Triple::new(c[0], c[1], c[2])).collect();
        for t in &split {
            check_triple(t, num_entities, num_relations).map_err(|e| Error::Format {
                offset: r.offset(),
                msg: e.to_string(),
            })?;
        }
        splits.push(split);
    }
    let at = r.offset();
    let n_off = r.len(8)?;
    if n_off != num_entities + 1 {
        return Err(Error::Format { offset: at, msg: "offset array length mismatch".into() });
    }
    let mut offsets = Vec::with_capacity(n_off);
    for _ in 0..n_off {
        offsets.push(r.u64()?);
    }
    let at = r.offset();
    let n_entries = r.len(9)?;
    if offsets.last().copied() != Some(n_entries as u64) || n_entries != splits[0].len() * 2 {
        return Err(Error::Format { offset: at, msg: "adjacency size mismatch".into() });
    }
    let mut entries = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let at = r.offset();
        let neighbor = r.u32()?;
        let rel = r.u32()?;
        let dir = match r.u8()? {
            0 => Direction::Out,
            1 => Direction::In,
            d => return Err(Error::Format { offset: at + 8, msg: format!("bad direction {d}") }),
        };
        if neighbor as usize >= num_entities {
            return Err(Error::Format { offset: at, msg: "neighbor out of range".into() });
        }
        entries.push(AdjEntry { neighbor, rel, dir });
    }
    let mut labels = [Vec::new(), Vec::new()];
    for l in labels.iter_mut() {
        let n = r.len(8)?;
        for _ in 0..n {
            l.push(r.str()?);
        }
    }
    r.finish()?;
    let test = splits.pop().unwrap();
    let valid = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    let [entity_labels, relation_labels] = labels;
    Ok(Dataset {
        graph: Graph {
            num_entities,
            num_relations,
            triples: train,
            adjacency: Adjacency { offsets, entries },
            checksum,
        },
        valid,
        test,
        entity_labels,
        relation_labels,
        source_checksum,
    })
}

pub fn save_cache(ds: &Dataset, path: &Path) -> Result<()> {
    binio::write_file(path, &encode_cache(ds))
}

pub fn load_cache(path: &Path) -> Result<Dataset> {
    decode_cache(&binio::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::star_graph as star;

    fn ids(text: &str) -> Result<Dataset> {
        let p = Path::new("t.tsv");
        ingest_text(text, "", "", [p, p, p], &IngestOptions::default())
    }

    #[test]
    fn three_line_file() {
        let ds = ids("0 0 1\n1 0 2\n2 1 0\n").unwrap();
        assert_eq!(ds.graph.num_entities(), 3);
        assert_eq!(ds.graph.num_relations(), 2);
        assert_eq!(ds.graph.triples().len(), 3);
    }

    #[test]
    fn empty_file_is_rejected() {
        let err = ids("").unwrap_err();
        assert!(err.to_string().contains("no triples"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        match ids("0 0 1\n1 0\n").unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn declared_range_is_enforced() {
        let p = Path::new("t.tsv");
        let opts = IngestOptions { num_entities: Some(2), ..Default::default() };
        let err = ingest_text("0 0 2\n", "", "", [p, p, p], &opts).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    #[test]
    fn labels_first_seen_order() {
        let p = Path::new("t.tsv");
        let opts = IngestOptions { format: TripleFormat::Labels, ..Default::default() };
        let ds = ingest_text("b likes a\na likes c\n", "c hates b\n", "", [p, p, p], &opts).unwrap();
        assert_eq!(ds.entity_labels, ["b", "a", "c"]);
        assert_eq!(ds.relation_labels, ["likes", "hates"]);
        assert_eq!(ds.valid, vec![Triple::new(2, 1, 0)]);
    }

    #[test]
    fn star_degrees() {
        let g = star();
        let deg: Vec<u32> = (0..6).map(|u| g.degree(u).unwrap()).collect();
        assert_eq!(deg, [3, 1, 1, 3, 1, 1]);
        assert!(g.degree(6).is_err());
    }

    #[test]
    fn star_adjacency_order() {
        let g = star();
        assert_eq!(g.neighbors(0).collect::<Vec<_>>(), [3, 1, 2]);
        assert_eq!(g.neighbors(3).collect::<Vec<_>>(), [0, 4, 5]);
    }

    #[test]
    fn self_loop_counts_twice() {
        let g = Graph::new(1, 1, vec![Triple::new(0, 0, 0)]).unwrap();
        assert_eq!(g.degree(0).unwrap(), 2);
        assert_eq!(g.adj(0).unwrap().len(), 2);
        assert_eq!(g.neighbors(0).collect::<Vec<_>>(), [0]);
    }

    #[test]
    fn isolated_entity_has_zero_degree() {
        let p = Path::new("t.tsv");
        let ds = ingest_text("0 0 1\n", "", "1 0 2\n", [p, p, p], &IngestOptions::default()).unwrap();
        assert_eq!(ds.graph.num_entities(), 3);
        assert_eq!(ds.graph.degree(2).unwrap(), 0);
    }

    #[test]
    fn dedup_flag() {
        let p = Path::new("t.tsv");
        let text = "0 0 1\n0 0 1\n1 0 2\n";
        let kept = ingest_text(text, "", "", [p, p, p], &IngestOptions::default()).unwrap();
        assert_eq!(kept.graph.degree(0).unwrap(), 2);
        let opts = IngestOptions { dedup: true, ..Default::default() };
        let dd = ingest_text(text, "", "", [p, p, p], &opts).unwrap();
        assert_eq!(dd.graph.triples().len(), 2);
        assert_eq!(dd.graph.degree(0).unwrap(), 1);
    }

    #[test]
    fn truncated_cache_reports_offset() {
        let ds = ids("0 0 1\n1 0 2\n").unwrap();
        let bytes = encode_cache(&ds);
        match decode_cache(&bytes[..bytes.len() - 3]).unwrap_err() {
            Error::Format { offset, .. } => assert!(offset > 0),
            e => panic!("unexpected {e}"),
        }
    }
}

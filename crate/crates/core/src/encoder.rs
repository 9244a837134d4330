//! Entity representations from subgraph tokens.
//!
//! Anchor tokens read the anchor table (already `d_a` wide); neighbor and
//! center tokens read the shared node table (`d_n` wide) and go through a
//! linear projection to `d_a`. A type embedding is added per slot and the
//! sequence is mixed by one transformer block and mean-pooled. The MLP
//! variant concatenates the same token embeddings instead.

use ndarray::{Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::EntityId;
use crate::nn::{
    self, BlockCache, BlockDims, Dropout, KinkSignature, Linear, Parameter, Real, TransformerBlock,
};
use crate::vocab::{Vocabulary, PAD};

pub const TYPE_ANCHOR: usize = 0;
pub const TYPE_NEIGHBOR: usize = 1;
pub const TYPE_CENTER: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EncoderKind {
    #[default]
    Attention,
    Mlp,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(EncoderKind::Attention),
            "mlp" => Ok(EncoderKind::Mlp),
            _ => Err(Error::Config(format!("encoder must be attention|mlp, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncoderKind::Attention => "attention",
            EncoderKind::Mlp => "mlp",
        })
    }
}

/// Which vocabulary slots a sequence carries: the first `k` anchors, the
/// first `m` neighbors, and optionally the center.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubgraphLayout {
    pub k: usize,
    pub m: usize,
    pub center: bool,
}

impl SubgraphLayout {
    pub fn seq_len(&self) -> usize {
        self.k + self.m + self.center as usize
    }

    pub fn slot_type(&self, slot: usize) -> usize {
        if slot < self.k {
            TYPE_ANCHOR
        } else if slot < self.k + self.m {
            TYPE_NEIGHBOR
        } else {
            TYPE_CENTER
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubgraphBatch {
    pub layout: SubgraphLayout,
    pub entities: Vec<EntityId>,
    /// Anchor ordinals in anchor slots, entity ids elsewhere; [`PAD`] if empty.
    pub tokens: Vec<u32>,
    pub active: Vec<bool>,
}

impl SubgraphBatch {
    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.layout.seq_len()
    }
}

/// Looks up the token sequence of every entity in `entities`.
pub fn assemble(vocab: &Vocabulary, entities: &[EntityId], layout: SubgraphLayout) -> Result<SubgraphBatch> {
    if layout.k > vocab.k() || layout.m > vocab.m() {
        return Err(Error::Config(format!(
            "layout wants k={} m={} but the vocabulary has k={} m={}",
            layout.k,
            layout.m,
            vocab.k(),
            vocab.m()
        )));
    }
    let l = layout.seq_len();
    let mut tokens = Vec::with_capacity(entities.len() * l);
    for &u in entities {
        let e = vocab.entry(u)?;
        tokens.extend_from_slice(&e.anchors[..layout.k]);
        tokens.extend_from_slice(&e.neighbors[..layout.m]);
        if layout.center {
            tokens.push(e.center);
        }
    }
    let active = tokens.iter().map(|&t| t != PAD).collect();
    Ok(SubgraphBatch { layout, entities: entities.to_vec(), tokens, active })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_a: usize,
    pub d_n: usize,
    pub layout: SubgraphLayout,
    pub kind: EncoderKind,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    /// Embedding tables are drawn from `U(±init_scale/dim)`.
    pub init_scale: f64,
}

#[derive(Clone, Debug)]
pub struct TokenEmbedder<F> {
    pub anchor_table: Parameter<F>,
    pub node_table: Parameter<F>,
    pub projection: Linear<F>,
    pub type_embeddings: Parameter<F>,
}

#[derive(Clone, Debug)]
struct EmbedCache<F> {
    node_rows: Vec<usize>,
    node_ids: Vec<u32>,
    node_in: Array2<F>,
    proj_drop: Option<Array2<F>>,
}

#[derive(Clone, Debug)]
pub struct MlpHead<F> {
    pub hidden: Linear<F>,
    pub output: Linear<F>,
}

#[derive(Clone, Debug)]
struct MlpCache<F> {
    input: Array2<F>,
    relu_out: Array2<F>,
    drop1: Option<Array2<F>>,
    drop2: Option<Array2<F>>,
}

#[derive(Clone, Debug)]
pub enum Body<F> {
    Attention(TransformerBlock<F>),
    Mlp(MlpHead<F>),
}

#[derive(Clone, Debug)]
enum BodyCache<F> {
    Attention(BlockCache<F>),
    Mlp(MlpCache<F>),
}

#[derive(Clone, Debug)]
pub struct EncoderCache<F> {
    tokens: Vec<u32>,
    active: Vec<bool>,
    embed: EmbedCache<F>,
    body: BodyCache<F>,
}

impl<F: Real> EncoderCache<F> {
    pub fn kinks(&self, sig: &mut KinkSignature) {
        match &self.body {
            BodyCache::Attention(c) => c.kinks(sig),
            BodyCache::Mlp(c) => sig.extend(c.relu_out.iter()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder<F> {
    pub config: EncoderConfig,
    pub embedder: TokenEmbedder<F>,
    pub body: Body<F>,
    dropout: Dropout,
}

impl<F: Real> Encoder<F> {
    pub fn new(config: EncoderConfig, num_entities: usize, num_anchors: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let EncoderConfig { d_a, d_n, layout, .. } = config;
        if d_a == 0 || d_n == 0 {
            return Err(Error::Config("embedding sizes must be positive".into()));
        }
        if layout.k == 0 {
            return Err(Error::Config("at least one anchor slot is required".into()));
        }
        let dropout = Dropout::new(config.dropout)?;
        let embedder = TokenEmbedder {
            anchor_table: Parameter::uniform("anchor_table", num_anchors, d_a, config.init_scale / d_a as f64, rng)
                .row_sparse(),
            node_table: Parameter::uniform("node_table", num_entities, d_n, config.init_scale / d_n as f64, rng)
                .row_sparse(),
            projection: Linear::new("projection", d_n, d_a, rng),
            type_embeddings: Parameter::uniform("type_embeddings", 3, d_a, config.init_scale / d_a as f64, rng),
        };
        let body = match config.kind {
            EncoderKind::Attention => Body::Attention(TransformerBlock::new(
                "block",
                BlockDims { dim: d_a, heads: config.heads, ff_dim: config.ff_mult * d_a },
                dropout,
                rng,
            )?),
            EncoderKind::Mlp => Body::Mlp(MlpHead {
                hidden: Linear::new("mlp.hidden", layout.seq_len() * d_a, d_a, rng),
                output: Linear::new("mlp.output", d_a, d_a, rng),
            }),
        };
        Ok(Encoder { config, embedder, body, dropout })
    }

    pub fn layout(&self) -> SubgraphLayout {
        self.config.layout
    }

    fn embed(&self, batch: &SubgraphBatch, rng: Option<&mut ChaCha8Rng>) -> Result<(Array2<F>, EmbedCache<F>)> {
        let l = batch.seq_len();
        let d_a = self.config.d_a;
        let e = &self.embedder;
        let mut x = Array2::zeros((batch.tokens.len(), d_a));
        let mut node_rows = Vec::new();
        let mut node_ids = Vec::new();
        for (row, (&tok, &on)) in batch.tokens.iter().zip(&batch.active).enumerate() {
            if !on {
                continue;
            }
            let slot = row % l;
            if slot < batch.layout.k {
                if tok as usize >= e.anchor_table.shape().0 {
                    return Err(Error::IdOutOfRange {
                        kind: "anchor ordinal",
                        id: tok as u64,
                        count: e.anchor_table.shape().0 as u64,
                    });
                }
                x.row_mut(row).assign(&e.anchor_table.value.row(tok as usize));
            } else {
                node_rows.push(row);
                node_ids.push(tok);
            }
        }
        let node_in = nn::embed_lookup(&e.node_table, &node_ids, &vec![true; node_ids.len()])?;
        let projected = e.projection.forward(node_in.view())?;
        let (projected, proj_drop) = self.dropout.forward(projected, rng);
        for (i, &row) in node_rows.iter().enumerate() {
            x.row_mut(row).assign(&projected.row(i));
        }
        for (row, &on) in batch.active.iter().enumerate() {
            if on {
                let t = batch.layout.slot_type(row % l);
                x.row_mut(row).zip_mut_with(&e.type_embeddings.value.row(t), |a, &b| *a += b);
            }
        }
        Ok((x, EmbedCache { node_rows, node_ids, node_in, proj_drop }))
    }

    fn embed_backward(&mut self, batch_tokens: &[u32], active: &[bool], cache: &EmbedCache<F>, dx: ArrayView2<F>) {
        let layout = self.config.layout;
        let l = layout.seq_len();
        let e = &mut self.embedder;
        for (row, (&tok, &on)) in batch_tokens.iter().zip(active).enumerate() {
            if !on {
                continue;
            }
            let slot = row % l;
            e.type_embeddings.accumulate_row(layout.slot_type(slot), dx.row(row));
            if slot < layout.k {
                e.anchor_table.accumulate_row(tok as usize, dx.row(row));
            }
        }
        if cache.node_rows.is_empty() {
            return;
        }
        let mut dp = Array2::zeros((cache.node_rows.len(), self.config.d_a));
        for (i, &row) in cache.node_rows.iter().enumerate() {
            dp.row_mut(i).assign(&dx.row(row));
        }
        let dp = Dropout::backward(cache.proj_drop.as_ref(), dp);
        let dn = e.projection.backward(cache.node_in.view(), dp.view());
        nn::embed_lookup_backward(&mut e.node_table, &cache.node_ids, &vec![true; cache.node_ids.len()], dn.view());
    }

    /// `[B × d_a]` representations. `rng = None` disables dropout.
    pub fn encode(
        &self,
        batch: &SubgraphBatch,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<F>, EncoderCache<F>)> {
        if batch.layout != self.config.layout {
            return Err(Error::Config("batch layout does not match the encoder".into()));
        }
        let l = batch.seq_len();
        for (i, &u) in batch.entities.iter().enumerate() {
            if !batch.active[i * l..(i + 1) * l].iter().any(|&a| a) {
                return Err(Error::AllMasked(u));
            }
        }
        let (x, embed) = self.embed(batch, rng.as_deref_mut())?;
        let (reps, body) = match &self.body {
            Body::Attention(block) => {
                let (y, c) = block.forward(x.view(), &batch.active, l, rng)?;
                (nn::mean_pool(y.view(), &batch.active, l)?, BodyCache::Attention(c))
            }
            Body::Mlp(mlp) => {
                let b = batch.len();
                let input = x.into_shape_with_order((b, l * self.config.d_a)).map_err(|e| Error::Shape(e.to_string()))?;
                let h = mlp.hidden.forward(input.view())?;
                let (mut relu_out, drop1) = self.dropout.forward(h, rng.as_deref_mut());
                relu_out.mapv_inplace(|v| v.max(F::zero()));
                let out = mlp.output.forward(relu_out.view())?;
                let (out, drop2) = self.dropout.forward(out, rng);
                (out, BodyCache::Mlp(MlpCache { input, relu_out, drop1, drop2 }))
            }
        };
        let cache = EncoderCache { tokens: batch.tokens.clone(), active: batch.active.clone(), embed, body };
        Ok((reps, cache))
    }

    pub fn backward(&mut self, cache: &EncoderCache<F>, dreps: ArrayView2<F>) {
        let l = self.config.layout.seq_len();
        let d_a = self.config.d_a;
        let dx = match (&mut self.body, &cache.body) {
            (Body::Attention(block), BodyCache::Attention(c)) => {
                let dy = nn::mean_pool_backward(dreps, &cache.active, l);
                block.backward(c, dy.view())
            }
            (Body::Mlp(mlp), BodyCache::Mlp(c)) => {
                let dout = Dropout::backward(c.drop2.as_ref(), dreps.to_owned());
                let mut dr = mlp.output.backward(c.relu_out.view(), dout.view());
                ndarray::Zip::from(&mut dr).and(&c.relu_out).for_each(|g, &r| {
                    if r <= F::zero() {
                        *g = F::zero();
                    }
                });
                let dh = Dropout::backward(c.drop1.as_ref(), dr);
                let dinput = mlp.hidden.backward(c.input.view(), dh.view());
                let rows = dinput.nrows() * l;
                dinput.into_shape_with_order((rows, d_a)).expect("contiguous")
            }
            _ => unreachable!("cache produced by a different encoder body"),
        };
        self.embed_backward(&cache.tokens, &cache.active, &cache.embed, dx.view());
    }

    pub fn params(&self) -> Vec<&Parameter<F>> {
        let e = &self.embedder;
        let mut v = vec![&e.anchor_table, &e.node_table, &e.projection.weight, &e.projection.bias, &e.type_embeddings];
        match &self.body {
            Body::Attention(b) => v.extend(b.params()),
            Body::Mlp(m) => v.extend(m.hidden.params().into_iter().chain(m.output.params())),
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        let e = &mut self.embedder;
        let mut v = vec![
            &mut e.anchor_table,
            &mut e.node_table,
            &mut e.projection.weight,
            &mut e.projection.bias,
            &mut e.type_embeddings,
        ];
        match &mut self.body {
            Body::Attention(b) => v.extend(b.params_mut()),
            Body::Mlp(m) => v.extend(m.hidden.params_mut().into_iter().chain(m.output.params_mut())),
        }
        v
    }
}

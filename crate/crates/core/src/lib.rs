//! Knowledge graph embeddings from anchor/neighbor/center subgraph tokens.
//!
//! Pipeline: [`graph`] loads triples, [`vocab`] turns every entity into a
//! fixed token set, [`encoder`] maps token sets to vectors, [`objective`]
//! scores triples, [`train`] fits the model and [`eval`] ranks.

mod binio;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod objective;
pub mod train;
pub mod vocab;

pub use config::{RunConfig, TrainConfig};
pub use encoder::{assemble, Encoder, EncoderConfig, EncoderKind, SubgraphBatch, SubgraphLayout};
pub use error::{Error, Result};
pub use eval::{evaluate, EmbeddingScorer, KnownTriples, LinkScorer, MetricReport, Protocol};
pub use graph::{Dataset, EntityId, Graph, RelationId, Side, Split, Triple};
pub use model::{KgeModel, ModelConfig};
pub use objective::{Norm, ObjectiveConfig, ScoreConfig, ScoreVariant};
pub use train::{Checkpoint, Trainer};
pub use vocab::{AnchorSet, Vocabulary, PAD};

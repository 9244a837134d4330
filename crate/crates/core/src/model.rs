//! Encoder plus relation table: the full set of learnable parameters.

use std::collections::HashMap;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{assemble, Encoder, EncoderCache, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{EntityId, Triple};
use crate::nn::{KinkSignature, Parameter, Real};
use crate::objective::{batch_objective, NegativeSamples, ObjectiveConfig};
use crate::vocab::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub objective: ObjectiveConfig,
}

#[derive(Clone, Debug)]
pub struct KgeModel<F> {
    pub encoder: Encoder<F>,
    /// `[R × 3·d_a]`, rows `(r_head, r_tail, r)`.
    pub relations: Parameter<F>,
    pub objective: ObjectiveConfig,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutput<F> {
    pub loss: F,
    pub kinks: KinkSignature,
    pub num_encoded: usize,
}

/// Extra knobs for [`KgeModel::step_with`].
#[derive(Clone, Copy, Debug, Default)]
pub struct StepOptions<'a> {
    pub backward: bool,
    pub frozen_weights: Option<&'a [f64]>,
}

impl<F: Real> KgeModel<F> {
    pub fn new(
        config: ModelConfig,
        num_entities: usize,
        num_relations: usize,
        num_anchors: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let encoder = Encoder::new(config.encoder, num_entities, num_anchors, rng)?;
        let d = config.encoder.d_a;
        let bound = config.encoder.init_scale / d as f64;
        let relations = Parameter::uniform("relations", num_relations, 3 * d, bound, rng).row_sparse();
        Ok(KgeModel { encoder, relations, objective: config.objective })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig { encoder: self.encoder.config, objective: self.objective }
    }

    pub fn num_entities(&self) -> usize {
        self.encoder.embedder.node_table.shape().0
    }

    pub fn num_relations(&self) -> usize {
        self.relations.shape().0
    }

    fn encode_unique(
        &self,
        vocab: &Vocabulary,
        positives: &[Triple],
        negatives: &NegativeSamples,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<EntityId>, Array2<F>, EncoderCache<F>)> {
        let mut ids: Vec<EntityId> = positives.iter().flat_map(|t| [t.head, t.tail]).chain(negatives.ids.iter().copied()).collect();
        ids.sort_unstable();
        ids.dedup();
        let batch = assemble(vocab, &ids, self.encoder.layout())?;
        let (reps, cache) = self.encoder.encode(&batch, rng)?;
        Ok((ids, reps, cache))
    }

    /// Loss of one batch. With `backward`, gradients are accumulated into
    /// every parameter (callers zero them first).
    pub fn step(
        &mut self,
        vocab: &Vocabulary,
        positives: &[Triple],
        negatives: &NegativeSamples,
        rng: Option<&mut ChaCha8Rng>,
        backward: bool,
    ) -> Result<StepOutput<F>> {
        self.step_with(vocab, positives, negatives, rng, StepOptions { backward, frozen_weights: None }).map(|(o, _)| o)
    }

    /// [`step`](Self::step) that also returns the adversarial weights used.
    pub fn step_with(
        &mut self,
        vocab: &Vocabulary,
        positives: &[Triple],
        negatives: &NegativeSamples,
        rng: Option<&mut ChaCha8Rng>,
        opts: StepOptions<'_>,
    ) -> Result<(StepOutput<F>, Vec<f64>)> {
        let (ids, reps, cache) = self.encode_unique(vocab, positives, negatives, rng)?;
        let rows: HashMap<EntityId, usize> = ids.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        let out = batch_objective(reps.view(), &rows, self.relations.value.view(), positives, negatives, &self.objective, opts.frozen_weights)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite(format!("batch loss {}", out.loss)));
        }
        let mut kinks = out.kinks;
        cache.kinks(&mut kinks);
        if opts.backward {
            for (r, g) in &out.d_relations {
                self.relations.accumulate_row(*r as usize, g.view());
            }
            self.encoder.backward(&cache, out.d_reps.view());
        }
        Ok((StepOutput { loss: out.loss, kinks, num_encoded: ids.len() }, out.weights))
    }

    /// Dropout-free representations of `entities`, encoded `chunk` at a time.
    pub fn representations(&self, vocab: &Vocabulary, entities: &[EntityId], chunk: usize) -> Result<Array2<F>> {
        let d = self.encoder.config.d_a;
        let mut out = Array2::zeros((entities.len(), d));
        for (c, ids) in entities.chunks(chunk.max(1)).enumerate() {
            let batch = assemble(vocab, ids, self.encoder.layout())?;
            let (reps, _) = self.encoder.encode(&batch, None)?;
            let start = c * chunk.max(1);
            out.slice_mut(ndarray::s![start..start + ids.len(), ..]).assign(&reps);
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<&Parameter<F>> {
        let mut v = self.encoder.params();
        v.push(&self.relations);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        let mut v = self.encoder.params_mut();
        v.push(&mut self.relations);
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// The same model with every parameter converted to `G`.
    pub fn cast<G: Real>(&self, rng: &mut ChaCha8Rng) -> Result<KgeModel<G>> {
        let num_anchors = self.encoder.embedder.anchor_table.shape().0;
        let mut out = KgeModel::<G>::new(self.config(), self.num_entities(), self.num_relations(), num_anchors, rng)?;
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            dst.value = src.value.mapv(|x| G::of(x.f64()));
        }
        Ok(out)
    }
}

//! Central-difference gradient checks.
//!
//! Checks run on `f64` instances of the same generic code used for training.
//! Entries whose `±ε` perturbation moves a ReLU gate or an L1 sign (the
//! forward pass reports these through a [`KinkSignature`]) are retried with a
//! smaller step and skipped if that still crosses the kink.

use std::collections::HashMap;
use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{assemble, Encoder, EncoderConfig, EncoderKind, SubgraphBatch, SubgraphLayout};
use crate::error::{Error, Result};
use crate::graph::{Graph, Side, Triple};
use crate::model::{KgeModel, ModelConfig, StepOptions};
use crate::nn::{self, BlockDims, Dropout, KinkSignature, LayerNorm, Linear, Parameter, TransformerBlock};
use crate::objective::{self, NegativeSamples, Norm, ObjectiveConfig, RelationParts, ScoreConfig, ScoreVariant};
use crate::vocab::{build_vocabulary, select_anchors, Vocabulary};

pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Smallest denominator in the relative error, so gradients below this
/// magnitude are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-2;

/// A scalar function of some parameters.
pub trait Differentiable {
    fn params_mut(&mut self) -> Vec<&mut Parameter<f64>>;
    /// Value at the current parameters. With `backward`, also accumulates
    /// the analytic gradient into each parameter's `grad`.
    fn evaluate(&mut self, backward: bool) -> Result<(f64, KinkSignature)>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub case: String,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tolerance && p.checked > 0)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| !(p.max_rel_err <= self.tolerance && p.checked > 0))
            .map(|p| p.name.as_str())
            .collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn grad_check(case: &str, f: &mut dyn Differentiable, eps: f64, tol: f64) -> Result<GradReport> {
    for p in f.params_mut() {
        p.grad.fill(0.0);
    }
    let (f0, sig0) = f.evaluate(true)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite(format!("{case}: loss {f0}")));
    }
    let analytic: Vec<Array2<f64>> = f.params_mut().iter().map(|p| p.grad.clone()).collect();
    let mut params = Vec::with_capacity(analytic.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let name = f.params_mut()[pi].name.clone();
        let mut check = ParamCheck { name, max_rel_err: 0.0, checked: 0, skipped: 0 };
        for (idx, &a) in grad.indexed_iter() {
            let mut numeric = None;
            // At a kink, shrink the step a couple of times before giving up.
            for h in [eps, eps / 10.0, eps / 100.0] {
                let orig = f.params_mut()[pi].value[idx];
                f.params_mut()[pi].value[idx] = orig + h;
                let plus = f.evaluate(false);
                f.params_mut()[pi].value[idx] = orig - h;
                let minus = f.evaluate(false);
                f.params_mut()[pi].value[idx] = orig;
                let ((fp, sp), (fm, sm)) = (plus?, minus?);
                if !fp.is_finite() || !fm.is_finite() {
                    return Err(Error::NonFinite(format!("{case}: perturbed loss")));
                }
                if sp == sig0 && sm == sig0 {
                    numeric = Some((fp - fm) / (2.0 * h));
                    break;
                }
            }
            match numeric {
                Some(n) => {
                    check.max_rel_err = check.max_rel_err.max(rel_err(a, n));
                    check.checked += 1;
                }
                None => check.skipped += 1,
            }
        }
        params.push(check);
    }
    Ok(GradReport { case: case.to_string(), tolerance: tol, params })
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound))
}

fn project(y: &Array2<f64>, c: &Array2<f64>) -> f64 {
    (y * c).sum()
}

struct FnParam(Parameter<f64>);

impl Differentiable for FnParam {
    fn params_mut(&mut self) -> Vec<&mut Parameter<f64>> {
        vec![&mut self.0]
    }

    fn evaluate(&mut self, backward: bool) -> Result<(f64, KinkSignature)> {
        let v = self.0.value.mapv(|x| x * x).sum();
        if backward {
            let g = self.0.value.mapv(|x| 2.0 * x);
            self.0.grad += &g;
        }
        Ok((v, KinkSignature::default()))
    }
}

/// `‖θ‖²`, used to check the checker.
pub fn quadratic_case(theta: &[f64]) -> impl Differentiable {
    FnParam(Parameter::new("theta", Array2::from_shape_vec((1, theta.len()), theta.to_vec()).unwrap()))
}

struct LinearCase {
    x: Parameter<f64>,
    layer: Linear<f64>,
    c: Array2<f64>,
}

impl Differentiable for LinearCase {
    fn params_mut(&mut self) -> Vec<&mut Parameter<f64>> {
        let [w, b] = self.layer.params_mut();
        vec![&mut self.x, w, b]
    }

    fn evaluate(&mut self, backward: bool) -> Result<(f64, KinkSignature)> {
        let y = self.layer.forward(self.x.value.view())?;
        if backward {
            let dx = self.layer.backward(self.x.value.view(), self.c.view());
            self.x.grad += &dx;
        }
        Ok((project(&y, &self.c), KinkSignature::default()))
    }
}

struct EmbedCase {
    table: Parameter<f64>,
    ids: Vec<u32>,
    active: Vec<bool>,
    c: Array2<f64>,
}

impl Differentiable for EmbedCase {
    fn params_mut(&mut self) -> Vec<&mut Parameter<f64>> {
        vec![&mut self.table]
    }

    fn evaluate(&mut self, backward: bool) -> Result<(f64, KinkSignature)> {
        let y = nn::embed_lookup(&self.table, &self.ids, &self.active)?;
        if backward {
            nn::embed_lookup_backward(&mut self.table, &self.ids, &self.active, self.c.view());
        }
        Ok((project(&y, &self.c), KinkSignature::default()))
    }
}

struct LayerNormCase {
    x: Parameter<f64>,
    ln: LayerNorm<f64>,
    c: Array2<f64>,
}

impl Differentiable for LayerNormCase {
    fn params_mut(&mut self) -> Vec<&mut Parameter<f64>> {
        let [g, b] = self.ln.params_mut();
        vec![&mut self.x, g, b]
    }

    fn evaluate(&mut self, backward: bool) -> Result<(f64, KinkSignature)> {
        let (y, cache) = self.ln.forward(self.x.value.view());
        if backward {
            let dx = self.ln.backward(&cache, self.c.view());
            self.x.grad += &dx;
        }
        Ok((project(&y, &self.c), KinkSignature::default()))
    }
}

struct PoolCase {
    x: Parameter<f64>,
    active: Vec<bool>,
    seq_len: usize,
    c: Array2<f64>,
}

impl Differentiable for PoolCase {
    fn params_mut(&mut self) -> Vec<&mut Parameter<f64>> {
        vec![&mut self.x]
    }

    fn evaluate(&mut self, backward: bool) -> Result<(f64, KinkSignature)> {
        let y = nn::mean_pool(self.x.value.view(), &self.active, self.seq_len)?;
        if backward {
            let dx = nn::mean_pool_backward(self.c.view(), &self.active, self.seq_len);
            self.x.grad += &dx;
        }
        Ok((project(&y, &self.c), KinkSignature::default()))
    }
}

struct BlockCase {
    x: Parameter<f64>,
    block: TransformerBlock<f64>,
    active: Vec<bool>,
    seq_len: usize,
    c: Array2<f64>,
}

impl Differentiable for BlockCase {
    fn params_mut(&mut self) -> Vec<&mut Parameter<f64>> {
        let mut v = vec![&mut self.x];
        v.extend(self.block.params_mut());
        v
    }

    fn evaluate(&mut self, backward: bool) -> Result<(f64, KinkSignature)> {
        let (y, cache) = self.block.forward(self.x.value.view(), &self.active, self.seq_len, None)?;
        let mut sig = KinkSignature::default();
        cache.kinks(&mut sig);
        if backward {
            let dx = self.block.backward(&cache, self.c.view());
            self.x.grad += &dx;
        }
        Ok((project(&y, &self.c), sig))
    }
}

struct ScoreCase {
    cfg: ScoreConfig,
    /// Rows: h, t.
    ent: Parameter<f64>,
    rel: Parameter<f64>,
}

impl Differentiable for ScoreCase {
    fn params_mut(&mut self) -> Vec<&mut Parameter<f64>> {
        vec![&mut self.ent, &mut self.rel]
    }

    fn evaluate(&mut self, backward: bool) -> Result<(f64, KinkSignature)> {
        let rel_row = self.rel.value.row(0);
        let rel = RelationParts::split(rel_row)?;
        let (h, t) = (self.ent.value.row(0), self.ent.value.row(1));
        let s = objective::score(&self.cfg, h, t, &rel)?;
        let mut sig = KinkSignature::default();
        let g = objective::score_backward(&self.cfg, h, t, &rel, 1.0, Some(&mut sig))?;
        if backward {
            self.ent.accumulate_row(0, g.h.view());
            self.ent.accumulate_row(1, g.t.view());
            self.rel.accumulate_row(0, g.rel.view());
        }
        Ok((s, sig))
    }
}

struct LossCase {
    /// Column 0 is the positive score, the rest are negatives.
    scores: Parameter<f64>,
    gamma: f64,
    weights: Vec<f64>,
}

impl Differentiable for LossCase {
    fn params_mut(&mut self) -> Vec<&mut Parameter<f64>> {
        vec![&mut self.scores]
    }

    fn evaluate(&mut self, backward: bool) -> Result<(f64, KinkSignature)> {
        let s = self.scores.value.row(0).to_vec();
        let l = objective::weighted_loss(s[0], &s[1..], self.gamma, &self.weights)?;
        if backward {
            let mut g = vec![l.d_pos];
            g.extend(&l.d_negs);
            self.scores.accumulate_row(0, Array1::from(g).view());
        }
        Ok((l.loss, KinkSignature::default()))
    }
}

struct EncoderCase {
    encoder: Encoder<f64>,
    batch: SubgraphBatch,
    c: Array2<f64>,
}

impl Differentiable for EncoderCase {
    fn params_mut(&mut self) -> Vec<&mut Parameter<f64>> {
        self.encoder.params_mut()
    }

    fn evaluate(&mut self, backward: bool) -> Result<(f64, KinkSignature)> {
        let (reps, cache) = self.encoder.encode(&self.batch, None)?;
        let mut sig = KinkSignature::default();
        cache.kinks(&mut sig);
        if backward {
            self.encoder.backward(&cache, self.c.view());
        }
        Ok((project(&reps, &self.c), sig))
    }
}

struct ModelCase {
    model: KgeModel<f64>,
    vocab: Vocabulary,
    positives: Vec<Triple>,
    negatives: NegativeSamples,
    weights: Vec<f64>,
}

impl Differentiable for ModelCase {
    fn params_mut(&mut self) -> Vec<&mut Parameter<f64>> {
        self.model.params_mut()
    }

    fn evaluate(&mut self, backward: bool) -> Result<(f64, KinkSignature)> {
        let opts = StepOptions { backward, frozen_weights: Some(&self.weights) };
        let (out, _) = self.model.step_with(&self.vocab, &self.positives, &self.negatives, None, opts)?;
        Ok((out.loss, out.kinks))
    }
}

/// The 10-entity graph used by the end-to-end check.
pub fn tiny_graph() -> Graph {
    let edges = [
        (0, 0, 1),
        (1, 0, 2),
        (2, 1, 3),
        (3, 1, 0),
        (0, 2, 4),
        (4, 0, 5),
        (5, 1, 6),
        (6, 2, 0),
        (7, 0, 0),
        (8, 1, 1),
        (2, 2, 8),
        (3, 0, 5),
    ];
    Graph::new(10, 3, edges.iter().map(|&(h, r, t)| Triple::new(h, r, t)).collect()).unwrap()
}

fn small_encoder_config(kind: EncoderKind, layout: SubgraphLayout) -> EncoderConfig {
    EncoderConfig { d_a: 8, d_n: 4, layout, kind, heads: 2, ff_mult: 4, dropout: 0.0, init_scale: 6.0 }
}

fn score_cfgs() -> [(ScoreVariant, Norm, f64); 4] {
    [
        (ScoreVariant::V2, Norm::L1, 0.1),
        (ScoreVariant::V2, Norm::L2, 0.1),
        (ScoreVariant::Prime, Norm::L1, 0.1),
        (ScoreVariant::Prime, Norm::L2, 0.1),
    ]
}

/// Every differentiable piece plus the encoder→score→loss composite.
pub fn suite(seed: u64) -> Result<Vec<(String, Box<dyn Differentiable>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(String, Box<dyn Differentiable>)> = Vec::new();

    let x = Parameter::new("x", random_matrix(&mut rng, 3, 5, 1.0));
    let layer = Linear::new("linear", 5, 4, &mut rng);
    let c = random_matrix(&mut rng, 3, 4, 1.0);
    cases.push(("linear".into(), Box::new(LinearCase { x, layer, c })));

    let table = Parameter::new("table", random_matrix(&mut rng, 5, 3, 1.0));
    let c = random_matrix(&mut rng, 6, 3, 1.0);
    let case = EmbedCase { table, ids: vec![1, 0, 4, 1, 3, 2], active: vec![true, true, false, true, true, true], c };
    cases.push(("embed_lookup".into(), Box::new(case)));

    let mut ln = LayerNorm::new("ln", 6);
    ln.gain.value = random_matrix(&mut rng, 1, 6, 1.0) + 1.0;
    ln.bias.value = random_matrix(&mut rng, 1, 6, 0.5);
    let x = Parameter::new("x", random_matrix(&mut rng, 4, 6, 1.0));
    let c = random_matrix(&mut rng, 4, 6, 1.0);
    cases.push(("layer_norm".into(), Box::new(LayerNormCase { x, ln, c })));

    let x = Parameter::new("x", random_matrix(&mut rng, 6, 4, 1.0));
    let c = random_matrix(&mut rng, 2, 4, 1.0);
    let active = vec![true, false, true, true, true, true];
    cases.push(("mean_pool".into(), Box::new(PoolCase { x, active, seq_len: 3, c })));

    let dims = BlockDims { dim: 8, heads: 2, ff_dim: 32 };
    let block = TransformerBlock::new("block", dims, Dropout::new(0.0)?, &mut rng)?;
    let x = Parameter::new("x", random_matrix(&mut rng, 8, 8, 1.0));
    let c = random_matrix(&mut rng, 8, 8, 1.0);
    let active = vec![true, true, true, true, true, false, true, true];
    cases.push(("attention_block".into(), Box::new(BlockCase { x, block, active, seq_len: 4, c })));

    for (variant, norm, u) in score_cfgs() {
        let cfg = ScoreConfig { variant, u, norm };
        let case = ScoreCase {
            cfg,
            ent: Parameter::new("entities", random_matrix(&mut rng, 2, 6, 1.0)),
            rel: Parameter::new("relation", random_matrix(&mut rng, 1, 18, 1.0)),
        };
        cases.push((format!("score_{variant}_{norm}"), Box::new(case)));
    }

    let scores = Parameter::new("scores", random_matrix(&mut rng, 1, 5, 8.0));
    let negs: Vec<f64> = scores.value.row(0).iter().skip(1).copied().collect();
    let weights = objective::adversarial_weights(&negs, 1.0);
    cases.push(("self_adversarial_loss".into(), Box::new(LossCase { scores, gamma: 6.0, weights })));

    let graph = tiny_graph();
    let anchors = select_anchors(&graph, 3)?;
    let vocab = build_vocabulary(&graph, &anchors, 3, 2, crate::vocab::DEFAULT_MAX_HOPS)?;
    let layout = SubgraphLayout { k: 3, m: 2, center: true };
    let ids: Vec<u32> = (0..10).collect();
    for kind in [EncoderKind::Attention, EncoderKind::Mlp] {
        let encoder = Encoder::new(small_encoder_config(kind, layout), 10, anchors.len(), &mut rng)?;
        let batch = assemble(&vocab, &ids, layout)?;
        let c = random_matrix(&mut rng, ids.len(), 8, 1.0);
        cases.push((format!("encoder_{kind}"), Box::new(EncoderCase { encoder, batch, c })));
    }

    for norm in [Norm::L1, Norm::L2] {
        let config = ModelConfig {
            encoder: small_encoder_config(EncoderKind::Attention, layout),
            objective: ObjectiveConfig { score: ScoreConfig { variant: ScoreVariant::Prime, u: 0.1, norm }, gamma: 6.0, alpha: 1.0 },
        };
        let mut model = KgeModel::new(config, 10, graph.num_relations(), anchors.len(), &mut rng)?;
        let positives: Vec<Triple> = graph.triples()[..4].to_vec();
        let n = 3;
        let negatives = NegativeSamples {
            n,
            sides: (0..positives.len()).map(|i| if i % 2 == 0 { Side::Head } else { Side::Tail }).collect(),
            ids: (0..positives.len() * n).map(|_| rng.gen_range(0..10)).collect(),
        };
        let (_, weights) =
            model.step_with(&vocab, &positives, &negatives, None, StepOptions { backward: false, frozen_weights: None })?;
        let case = ModelCase { model, vocab: vocab.clone(), positives, negatives, weights };
        cases.push((format!("composite_{norm}"), Box::new(case)));
    }
    Ok(cases)
}

pub fn run_suite(seed: u64, eps: f64, tol: f64) -> Result<Vec<GradReport>> {
    suite(seed)?.into_iter().map(|(name, mut case)| grad_check(&name, case.as_mut(), eps, tol)).collect()
}

/// One line per (case, parameter).
pub fn format_reports(reports: &[GradReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<24} {:<22} {:>12} {:>8} {:>8}  status", "case", "param", "max_rel_err", "checked", "skipped");
    for r in reports {
        for p in &r.params {
            let ok = p.max_rel_err <= r.tolerance && p.checked > 0;
            let _ = writeln!(
                out,
                "{:<24} {:<22} {:>12.3e} {:>8} {:>8}  {}",
                r.case,
                p.name,
                p.max_rel_err,
                p.checked,
                p.skipped,
                if ok { "ok" } else { "FAIL" }
            );
        }
    }
    out
}

impl<D: Differentiable + ?Sized> Differentiable for Box<D> {
    fn params_mut(&mut self) -> Vec<&mut Parameter<f64>> {
        (**self).params_mut()
    }

    fn evaluate(&mut self, backward: bool) -> Result<(f64, KinkSignature)> {
        (**self).evaluate(backward)
    }
}

/// Wraps a case and flips the sign of one parameter's analytic gradient.
pub struct Corrupted<D> {
    pub inner: D,
    pub param: String,
}

impl<D: Differentiable> Differentiable for Corrupted<D> {
    fn params_mut(&mut self) -> Vec<&mut Parameter<f64>> {
        self.inner.params_mut()
    }

    fn evaluate(&mut self, backward: bool) -> Result<(f64, KinkSignature)> {
        let before: HashMap<String, Array2<f64>> =
            self.inner.params_mut().iter().map(|p| (p.name.clone(), p.grad.clone())).collect();
        let out = self.inner.evaluate(backward)?;
        if backward {
            for p in self.inner.params_mut() {
                if p.name == self.param {
                    let prev = &before[&p.name];
                    let delta = &p.grad - prev;
                    p.grad = prev - &delta;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_exact() {
        let mut q = quadratic_case(&[1.0, 2.0]);
        q.evaluate(true).unwrap();
        assert_eq!(q.params_mut()[0].grad.row(0).to_vec(), [2.0, 4.0]);
        let r = grad_check("quadratic", &mut q, DEFAULT_EPS, 1e-6).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn sign_flip_is_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let case = LinearCase {
            x: Parameter::new("x", random_matrix(&mut rng, 3, 5, 1.0)),
            layer: Linear::new("linear", 5, 4, &mut rng),
            c: random_matrix(&mut rng, 3, 4, 1.0),
        };
        let mut bad = Corrupted { inner: case, param: "linear.weight".into() };
        let r = grad_check("linear", &mut bad, DEFAULT_EPS, DEFAULT_TOL).unwrap();
        assert!(!r.passed());
        assert_eq!(r.failures(), ["linear.weight"]);
    }

    #[test]
    fn suite_passes_seed_1() {
        let reports = run_suite(1, DEFAULT_EPS, DEFAULT_TOL).unwrap();
        let text = format_reports(&reports);
        assert!(reports.iter().all(|r| r.passed()), "{text}");
    }
}

//! Triple scores and the self-adversarial loss.
//!
//! A relation row of width `3·D` is read as `(r_head, r_tail, r)`. Scores are
//! negated distances, so higher is more plausible and every score is `≤ 0`.

use std::collections::HashMap;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Zip};

use crate::error::{Error, Result};
use crate::graph::{EntityId, RelationId, Side, Triple};
use crate::nn::{KinkSignature, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Norm {
    #[default]
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScoreVariant {
    /// `−‖h∘(r_head+u) − t∘(r_tail+u) + r‖`
    V2,
    /// `−‖h − t + r + u·(h∘r_head − t∘r_tail)‖`
    #[default]
    Prime,
}

impl std::str::FromStr for Norm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            _ => Err(Error::Config(format!("norm must be l1|l2, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
        })
    }
}

impl std::str::FromStr for ScoreVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triplere_v2" => Ok(ScoreVariant::V2),
            "triplere_prime" => Ok(ScoreVariant::Prime),
            _ => Err(Error::Config(format!("score must be triplere_prime|triplere_v2, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for ScoreVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreVariant::V2 => "triplere_v2",
            ScoreVariant::Prime => "triplere_prime",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreConfig {
    pub variant: ScoreVariant,
    pub u: f64,
    pub norm: Norm,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig { variant: ScoreVariant::Prime, u: 0.1, norm: Norm::L1 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RelationParts<'a, F> {
    pub head: ArrayView1<'a, F>,
    pub tail: ArrayView1<'a, F>,
    pub trans: ArrayView1<'a, F>,
}

impl<'a, F: Real> RelationParts<'a, F> {
    pub fn split(row: ArrayView1<'a, F>) -> Result<Self> {
        if row.len() % 3 != 0 {
            return Err(Error::Shape(format!("relation row of length {} is not 3·D", row.len())));
        }
        let d = row.len() / 3;
        Ok(RelationParts {
            head: row.slice_move(s![..d]),
            tail: row.slice_move(s![d..2 * d]),
            trans: row.slice_move(s![2 * d..]),
        })
    }

    pub fn dim(&self) -> usize {
        self.trans.len()
    }
}

fn check_dims<F: Real>(h: ArrayView1<F>, t: ArrayView1<F>, rel: &RelationParts<F>) -> Result<()> {
    let d = h.len();
    if t.len() != d || rel.head.len() != d || rel.tail.len() != d || rel.trans.len() != d {
        return Err(Error::Shape(format!(
            "score inputs h={} t={} r_head={} r_tail={} r={}",
            d,
            t.len(),
            rel.head.len(),
            rel.tail.len(),
            rel.trans.len()
        )));
    }
    Ok(())
}

/// The vector whose norm is the (negated) score.
pub fn inner_vector<F: Real>(
    variant: ScoreVariant,
    h: ArrayView1<F>,
    t: ArrayView1<F>,
    rel: &RelationParts<F>,
    u: f64,
) -> Result<Array1<F>> {
    check_dims(h, t, rel)?;
    let u = F::of(u);
    let mut v = rel.trans.to_owned();
    match variant {
        ScoreVariant::V2 => Zip::from(&mut v)
            .and(h)
            .and(t)
            .and(rel.head)
            .and(rel.tail)
            .for_each(|v, &h, &t, &rh, &rt| *v += h * (rh + u) - t * (rt + u)),
        ScoreVariant::Prime => Zip::from(&mut v)
            .and(h)
            .and(t)
            .and(rel.head)
            .and(rel.tail)
            .for_each(|v, &h, &t, &rh, &rt| *v += h - t + u * (h * rh - t * rt)),
    }
    Ok(v)
}

pub fn norm_of<F: Real>(v: ArrayView1<F>, norm: Norm) -> F {
    match norm {
        Norm::L1 => v.iter().map(|x| x.abs()).sum(),
        Norm::L2 => v.iter().map(|&x| x * x).sum::<F>().sqrt(),
    }
}

pub fn score<F: Real>(cfg: &ScoreConfig, h: ArrayView1<F>, t: ArrayView1<F>, rel: &RelationParts<F>) -> Result<F> {
    let v = inner_vector(cfg.variant, h, t, rel, cfg.u)?;
    Ok(-norm_of(v.view(), cfg.norm))
}

pub fn score_v2<F: Real>(h: ArrayView1<F>, t: ArrayView1<F>, rel: &RelationParts<F>, u: f64, norm: Norm) -> Result<F> {
    score(&ScoreConfig { variant: ScoreVariant::V2, u, norm }, h, t, rel)
}

pub fn score_prime<F: Real>(
    h: ArrayView1<F>,
    t: ArrayView1<F>,
    rel: &RelationParts<F>,
    u: f64,
    norm: Norm,
) -> Result<F> {
    score(&ScoreConfig { variant: ScoreVariant::Prime, u, norm }, h, t, rel)
}

/// `−‖h − t + r‖`
pub fn score_transe<F: Real>(h: ArrayView1<F>, t: ArrayView1<F>, r: ArrayView1<F>, norm: Norm) -> F {
    let v = &h - &t + r;
    -norm_of(v.view(), norm)
}

/// Gradients of one score with respect to its inputs.
#[derive(Clone, Debug)]
pub struct ScoreGrad<F> {
    pub h: Array1<F>,
    pub t: Array1<F>,
    /// Laid out like the relation row: `(r_head, r_tail, r)`.
    pub rel: Array1<F>,
}

/// Backward of [`score`] scaled by `ds`. L1 signs are pushed into `kinks`.
pub fn score_backward<F: Real>(
    cfg: &ScoreConfig,
    h: ArrayView1<F>,
    t: ArrayView1<F>,
    rel: &RelationParts<F>,
    ds: F,
    kinks: Option<&mut KinkSignature>,
) -> Result<ScoreGrad<F>> {
    let v = inner_vector(cfg.variant, h, t, rel, cfg.u)?;
    if let Some(k) = kinks {
        if cfg.norm == Norm::L1 {
            k.extend(v.iter());
        }
    }
    // d(−‖v‖)/dv
    let dv: Array1<F> = match cfg.norm {
        Norm::L1 => v.mapv(|x| {
            if x > F::zero() {
                -ds
            } else if x < F::zero() {
                ds
            } else {
                F::zero()
            }
        }),
        Norm::L2 => {
            let n = norm_of(v.view(), Norm::L2);
            if n > F::zero() {
                v.mapv(|x| -ds * x / n)
            } else {
                Array1::zeros(v.len())
            }
        }
    };
    let d = v.len();
    let u = F::of(cfg.u);
    let mut gh = Array1::zeros(d);
    let mut gt = Array1::zeros(d);
    let mut grel = Array1::zeros(3 * d);
    for i in 0..d {
        let (hi, ti, rh, rt, g) = (h[i], t[i], rel.head[i], rel.tail[i], dv[i]);
        match cfg.variant {
            ScoreVariant::V2 => {
                gh[i] = g * (rh + u);
                gt[i] = -g * (rt + u);
                grel[i] = g * hi;
                grel[d + i] = -g * ti;
            }
            ScoreVariant::Prime => {
                gh[i] = g * (F::one() + u * rh);
                gt[i] = -g * (F::one() + u * rt);
                grel[i] = g * u * hi;
                grel[d + i] = -g * u * ti;
            }
        }
        grel[2 * d + i] = g;
    }
    Ok(ScoreGrad { h: gh, t: gt, rel: grel })
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialLoss<F> {
    pub loss: F,
    pub d_pos: F,
    pub d_negs: Vec<F>,
    pub weights: Vec<F>,
}

/// `softmax(α·f)` over the negative scores.
pub fn adversarial_weights<F: Real>(negs: &[F], alpha: f64) -> Vec<f64> {
    let top = negs.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(alpha * x.f64()));
    let mut w: Vec<f64> = negs.iter().map(|&x| (alpha * x.f64() - top).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= z);
    w
}

/// `−log σ(γ + f_pos) − Σ w_i·log σ(−f_i − γ)` with `w = softmax(α·f)`.
///
/// The weights are constants in the backward pass. Scalars are reduced in
/// `f64` regardless of `F`.
pub fn self_adversarial_loss<F: Real>(pos: F, negs: &[F], gamma: f64, alpha: f64) -> Result<AdversarialLoss<F>> {
    if negs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("score fed to the loss".into()));
    }
    let w = adversarial_weights(negs, alpha);
    weighted_loss(pos, negs, gamma, &w)
}

/// The same loss with caller-supplied weights.
pub fn weighted_loss<F: Real>(pos: F, negs: &[F], gamma: f64, weights: &[f64]) -> Result<AdversarialLoss<F>> {
    if negs.is_empty() {
        return Err(Error::InvalidArgument("self-adversarial loss needs at least one negative".into()));
    }
    if weights.len() != negs.len() {
        return Err(Error::Shape(format!("{} weights for {} negatives", weights.len(), negs.len())));
    }
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    let p = pos.f64();
    if !p.is_finite() || negs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("score fed to the loss".into()));
    }
    let mut loss = softplus(-gamma - p);
    let d_pos = -sigmoid(-gamma - p);
    let mut d_negs = Vec::with_capacity(negs.len());
    for (&fi, &wi) in negs.iter().zip(weights) {
        let fi = fi.f64();
        loss += wi * softplus(fi + gamma);
        d_negs.push(F::of(wi * sigmoid(fi + gamma)));
    }
    Ok(AdversarialLoss {
        loss: F::of(loss),
        d_pos: F::of(d_pos),
        d_negs,
        weights: weights.iter().map(|&w| F::of(w)).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub score: ScoreConfig,
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig { score: ScoreConfig::default(), gamma: 6.0, alpha: 1.0 }
    }
}

/// Corrupted entities for a batch: `n` per positive, all on one side.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeSamples {
    pub n: usize,
    pub sides: Vec<Side>,
    /// Row-major `[B × n]`.
    pub ids: Vec<EntityId>,
}

impl NegativeSamples {
    pub fn row(&self, i: usize) -> &[EntityId] {
        &self.ids[i * self.n..(i + 1) * self.n]
    }
}

#[derive(Clone, Debug)]
pub struct BatchLoss<F> {
    pub loss: F,
    /// Same shape as the representation matrix passed in.
    pub d_reps: Array2<F>,
    pub d_relations: Vec<(RelationId, Array1<F>)>,
    pub kinks: KinkSignature,
    /// Adversarial weights used, row-major `[B × n]`.
    pub weights: Vec<f64>,
}

/// Mean self-adversarial loss over `positives`. Entity `e` is represented by
/// row `rows[&e]` of `reps`. `frozen` replaces the adversarial weights
/// (row-major `[B × n]`), which makes the loss exactly the function whose
/// gradient is returned.
pub fn batch_objective<F: Real>(
    reps: ArrayView2<F>,
    rows: &HashMap<EntityId, usize>,
    relations: ArrayView2<F>,
    positives: &[Triple],
    negatives: &NegativeSamples,
    cfg: &ObjectiveConfig,
    frozen: Option<&[f64]>,
) -> Result<BatchLoss<F>> {
    let b = positives.len();
    if b == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if negatives.sides.len() != b || negatives.ids.len() != b * negatives.n {
        return Err(Error::Shape(format!(
            "{} positives but {} sides and {} negative ids (n = {})",
            b,
            negatives.sides.len(),
            negatives.ids.len(),
            negatives.n
        )));
    }
    if relations.ncols() != 3 * reps.ncols() {
        return Err(Error::Shape(format!(
            "relation width {} does not match 3 × representation width {}",
            relations.ncols(),
            reps.ncols()
        )));
    }
    let row = |e: EntityId| {
        rows.get(&e).copied().ok_or_else(|| Error::InvalidArgument(format!("entity {e} missing from the encoded batch")))
    };
    let rel_row = |r: RelationId| {
        if (r as usize) < relations.nrows() {
            Ok(relations.row(r as usize))
        } else {
            Err(Error::IdOutOfRange { kind: "relation", id: r as u64, count: relations.nrows() as u64 })
        }
    };

    if let Some(w) = frozen {
        if w.len() != negatives.ids.len() {
            return Err(Error::Shape(format!("{} frozen weights for {} negatives", w.len(), negatives.ids.len())));
        }
    }
    let scale = 1.0 / b as f64;
    let mut weights = Vec::with_capacity(negatives.ids.len());
    let mut total = 0.0;
    let mut d_reps = Array2::zeros(reps.raw_dim());
    let mut d_rel: HashMap<RelationId, Array1<F>> = HashMap::new();
    let mut kinks = KinkSignature::default();
    let mut scored = Vec::with_capacity(negatives.n + 1);
    for (i, &pos) in positives.iter().enumerate() {
        let side = negatives.sides[i];
        let rel = RelationParts::split(rel_row(pos.rel)?)?;
        scored.clear();
        scored.push(pos);
        scored.extend(negatives.row(i).iter().map(|&e| pos.with_entity(side, e)));
        let mut fs = Vec::with_capacity(scored.len());
        for tr in &scored {
            fs.push(score(&cfg.score, reps.row(row(tr.head)?), reps.row(row(tr.tail)?), &rel)?);
        }
        let l = match frozen {
            Some(w) => weighted_loss(fs[0], &fs[1..], cfg.gamma, &w[i * negatives.n..(i + 1) * negatives.n])?,
            None => self_adversarial_loss(fs[0], &fs[1..], cfg.gamma, cfg.alpha)?,
        };
        weights.extend(l.weights.iter().map(|w| w.f64()));
        total += l.loss.f64();
        let grel = d_rel.entry(pos.rel).or_insert_with(|| Array1::zeros(relations.ncols()));
        for (j, tr) in scored.iter().enumerate() {
            let ds = if j == 0 { l.d_pos } else { l.d_negs[j - 1] } * F::of(scale);
            let (hr, tr_) = (row(tr.head)?, row(tr.tail)?);
            let g = score_backward(&cfg.score, reps.row(hr), reps.row(tr_), &rel, ds, Some(&mut kinks))?;
            d_reps.row_mut(hr).scaled_add(F::one(), &g.h);
            d_reps.row_mut(tr_).scaled_add(F::one(), &g.t);
            grel.scaled_add(F::one(), &g.rel);
        }
    }
    let mut d_relations: Vec<_> = d_rel.into_iter().collect();
    d_relations.sort_by_key(|(r, _)| *r);
    Ok(BatchLoss { loss: F::of(total * scale), d_reps, d_relations, kinks, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn parts(row: &Array1<f64>) -> RelationParts<'_, f64> {
        RelationParts::split(row.view()).unwrap()
    }

    #[test]
    fn hand_values() {
        let h = array![1.0, 2.0];
        let t = array![0.0, 1.0];
        // (r_head, r_tail, r)
        let rel = array![1.0, 1.0, 2.0, 0.0, 1.0, 0.0];
        let r = parts(&rel);
        assert_eq!(score_v2(h.view(), t.view(), &r, 1.0, Norm::L1).unwrap(), -6.0);
        let p = score_prime(h.view(), t.view(), &r, 0.1, Norm::L1).unwrap();
        assert!((p + 3.3).abs() < 1e-12);
    }

    #[test]
    fn exact_cancellation() {
        let h = array![0.3, -1.2, 2.0];
        let rel = array![0.5, 0.1, -0.7, 0.5, 0.1, -0.7, 0.0, 0.0, 0.0];
        for u in [0.0, 0.1, 3.0] {
            for norm in [Norm::L1, Norm::L2] {
                assert_eq!(score_v2(h.view(), h.view(), &parts(&rel), u, norm).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn dim_mismatch() {
        let rel = array![1.0, 1.0, 1.0];
        assert!(score_v2(array![1.0].view(), array![1.0, 2.0].view(), &parts(&rel), 0.1, Norm::L1).is_err());
        assert!(RelationParts::split(array![1.0, 2.0].view()).is_err());
    }

    #[test]
    fn loss_weights() {
        let l = self_adversarial_loss(-3.0f64, &[-5.0], 6.0, 1.0).unwrap();
        assert_eq!(l.weights, [1.0]);
        let l = self_adversarial_loss(-3.0f64, &[-4.0; 4], 6.0, 1.0).unwrap();
        assert!(l.weights.iter().all(|&w| (w - 0.25).abs() < 1e-15));
        assert!(self_adversarial_loss(-3.0f64, &[], 6.0, 1.0).is_err());
    }

    #[test]
    fn loss_falls_as_positive_rises() {
        let negs = [-2.0, -8.0, -4.0];
        let mut prev = f64::INFINITY;
        for k in 0..50 {
            let l = self_adversarial_loss(-20.0 + k as f64 * 0.5, &negs, 6.0, 1.0).unwrap();
            assert!(l.loss < prev);
            prev = l.loss;
        }
    }
}

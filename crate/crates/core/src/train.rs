//! Training loop, optimizer and checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{self, Reader, Writer};
use crate::config::{RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EmbeddingScorer, KnownTriples};
use crate::graph::{Dataset, Side, Split, Triple};
use crate::model::KgeModel;
use crate::nn::{Parameter, Real};
use crate::objective::NegativeSamples;
use crate::vocab::Vocabulary;

/// Step decay: `lr` before `max_steps / 2`, `lr · lr_decay_factor` from then on.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.max_steps / 2 {
        cfg.lr
    } else {
        cfg.lr * cfg.lr_decay_factor
    }
}

/// Corrupts the head or the tail of each positive (a fair coin per positive)
/// with `n` entities drawn uniformly. Draws are not filtered.
pub fn sample_negatives(positives: &[Triple], n: usize, num_entities: usize, rng: &mut ChaCha8Rng) -> NegativeSamples {
    let mut sides = Vec::with_capacity(positives.len());
    let mut ids = Vec::with_capacity(positives.len() * n);
    for _ in positives {
        sides.push(if rng.gen::<bool>() { Side::Head } else { Side::Tail });
        ids.extend((0..n).map(|_| rng.gen_range(0..num_entities as u32)));
    }
    NegativeSamples { n, sides, ids }
}

/// Adam with decoupled weight decay.
///
/// Row-sparse parameters are updated lazily: only rows that received
/// gradient this step move, and only their moments decay.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Array2<F>>,
    pub v: Vec<Array2<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(params: &[&Parameter<F>], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: params.iter().map(|p| Array2::zeros(p.value.raw_dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.value.raw_dim())).collect(),
        }
    }

    pub fn from_config(params: &[&Parameter<F>], cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    }

    /// Fails without touching anything if a gradient is not finite.
    pub fn step(&mut self, params: &mut [&mut Parameter<F>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Shape(format!("optimizer holds {} moments for {} parameters", self.m.len(), params.len())));
        }
        let rows: Vec<Vec<u32>> = params.iter_mut().map(|p| p.active_rows()).collect();
        for (p, rs) in params.iter().zip(&rows) {
            for &r in rs {
                if p.grad.row(r as usize).iter().any(|g| !g.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {} (row {r})", p.name)));
                }
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let bc1 = F::of(1.0 - self.beta1.powi(t));
        let bc2 = F::of(1.0 - self.beta2.powi(t));
        let lr_f = F::of(lr);
        let decay = F::of(1.0 - lr * self.weight_decay);
        let eps = F::of(self.eps);
        let one = F::one();
        for (i, p) in params.iter_mut().enumerate() {
            for &r in &rows[i] {
                let r = r as usize;
                let mut value = p.value.row_mut(r);
                let grad = p.grad.row(r);
                let mut m = self.m[i].row_mut(r);
                let mut v = self.v[i].row_mut(r);
                for j in 0..value.len() {
                    let g = grad[j];
                    m[j] = b1 * m[j] + (one - b1) * g;
                    v[j] = b2 * v[j] + (one - b2) * g * g;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    value[j] = value[j] * decay - lr_f * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"SGCK1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume training or to evaluate.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub num_entities: usize,
    pub num_relations: usize,
    pub num_anchors: usize,
    pub graph_checksum: u64,
    pub best_valid_mrr: Option<f64>,
    pub rng: RngState,
    pub params: Vec<(String, Array2<f32>)>,
    pub adam_t: u64,
    pub moments: Vec<(Array2<f32>, Array2<f32>)>,
}

fn write_matrix(w: &mut Writer, a: &Array2<f32>) {
    w.f32s(a.as_slice().expect("standard layout"));
}

fn read_matrix(r: &mut Reader<'_>, rows: usize, cols: usize) -> Result<Array2<f32>> {
    let v = r.f32s(rows * cols)?;
    Ok(Array2::from_shape_vec((rows, cols), v).expect("length matches"))
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new(CHECKPOINT_MAGIC);
        w.str(&self.config.echo());
        w.u64(self.step);
        w.u64(self.num_entities as u64);
        w.u64(self.num_relations as u64);
        w.u64(self.num_anchors as u64);
        w.u64(self.graph_checksum);
        w.u8(self.best_valid_mrr.is_some() as u8);
        w.u64(self.best_valid_mrr.unwrap_or(0.0).to_bits());
        for b in self.rng.seed {
            w.u8(b);
        }
        w.u64(self.rng.stream);
        w.u64(self.rng.word_pos as u64);
        w.u64((self.rng.word_pos >> 64) as u64);
        w.u64(self.adam_t);
        w.u32(self.params.len() as u32);
        for ((name, value), (m, v)) in self.params.iter().zip(&self.moments) {
            w.str(name);
            w.u64(value.nrows() as u64);
            w.u64(value.ncols() as u64);
            write_matrix(&mut w, value);
            write_matrix(&mut w, m);
            write_matrix(&mut w, v);
        }
        let digest = binio::digest64(&w.buf);
        w.u64(digest);
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + CHECKPOINT_MAGIC.len() {
            return Err(Error::Format { offset: 0, msg: "truncated checkpoint".into() });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let mut r = Reader::new(body, CHECKPOINT_MAGIC)?;
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if stored != binio::digest64(body) {
            return Err(Error::Format { offset: body.len() as u64, msg: "checkpoint digest mismatch".into() });
        }
        let config = RunConfig::parse(&r.str()?)?;
        let step = r.u64()?;
        let num_entities = r.u64()? as usize;
        let num_relations = r.u64()? as usize;
        let num_anchors = r.u64()? as usize;
        let graph_checksum = r.u64()?;
        let has_best = r.u8()? != 0;
        let best_bits = r.u64()?;
        let mut seed = [0u8; 32];
        for b in &mut seed {
            *b = r.u8()?;
        }
        let stream = r.u64()?;
        let word_pos = r.u64()? as u128 | (r.u64()? as u128) << 64;
        let adam_t = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        let mut moments = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.str()?;
            let at = r.offset();
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            if rows.checked_mul(cols).and_then(|n| n.checked_mul(12)).is_none_or(|n| n as u64 > body.len() as u64) {
                return Err(Error::Format { offset: at, msg: format!("implausible shape {rows}x{cols} for {name}") });
            }
            let value = read_matrix(&mut r, rows, cols)?;
            let m = read_matrix(&mut r, rows, cols)?;
            let v = read_matrix(&mut r, rows, cols)?;
            params.push((name, value));
            moments.push((m, v));
        }
        r.finish()?;
        Ok(Checkpoint {
            config,
            step,
            num_entities,
            num_relations,
            num_anchors,
            graph_checksum,
            best_valid_mrr: has_best.then(|| f64::from_bits(best_bits)),
            rng: RngState { seed, stream, word_pos },
            params,
            adam_t,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        binio::write_file(&tmp, &self.encode())?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&binio::read_file(path)?)
    }

    /// Rebuilds the model these parameters belong to.
    pub fn model(&self) -> Result<KgeModel<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model =
            KgeModel::new(self.config.model(), self.num_entities, self.num_relations, self.num_anchors, &mut rng)?;
        let mut slots = model.params_mut();
        if slots.len() != self.params.len() {
            return Err(Error::Format {
                offset: 0,
                msg: format!("checkpoint has {} parameters, config implies {}", self.params.len(), slots.len()),
            });
        }
        for (slot, (name, value)) in slots.iter_mut().zip(&self.params) {
            if slot.name != *name || slot.value.dim() != value.dim() {
                return Err(Error::Format {
                    offset: 0,
                    msg: format!("parameter {name} {:?} does not match {} {:?}", value.dim(), slot.name, slot.value.dim()),
                });
            }
            slot.value.assign(value);
        }
        Ok(model)
    }

    pub fn check_graph(&self, dataset: &Dataset) -> Result<()> {
        let found = dataset.graph.checksum();
        if found != self.graph_checksum {
            return Err(Error::ChecksumMismatch { expected: found, found: self.graph_checksum });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub last_loss: f64,
    pub best_valid_mrr: Option<f64>,
}

pub struct Trainer<'a> {
    pub dataset: &'a Dataset,
    pub vocab: &'a Vocabulary,
    pub config: RunConfig,
    pub model: KgeModel<f32>,
    pub optimizer: AdamW<f32>,
    pub step: u64,
    pub best_valid_mrr: Option<f64>,
    rng: ChaCha8Rng,
    known: Option<KnownTriples>,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, vocab: &'a Vocabulary, config: RunConfig) -> Result<Self> {
        config.validate()?;
        vocab.check_graph(&dataset.graph)?;
        if dataset.graph.triples().is_empty() {
            return Err(Error::EmptySplit("train".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let model = KgeModel::new(
            config.model(),
            dataset.graph.num_entities(),
            dataset.graph.num_relations(),
            vocab.num_anchors(),
            &mut rng,
        )?;
        let optimizer = AdamW::from_config(&model.params(), &config.train);
        Ok(Trainer { dataset, vocab, config, model, optimizer, step: 0, best_valid_mrr: None, rng, known: None })
    }

    pub fn resume(dataset: &'a Dataset, vocab: &'a Vocabulary, ckpt: &Checkpoint) -> Result<Self> {
        ckpt.check_graph(dataset)?;
        vocab.check_graph(&dataset.graph)?;
        let model = ckpt.model()?;
        let mut optimizer = AdamW::from_config(&model.params(), &ckpt.config.train);
        optimizer.t = ckpt.adam_t;
        for (i, (m, v)) in ckpt.moments.iter().enumerate() {
            optimizer.m[i].assign(m);
            optimizer.v[i].assign(v);
        }
        Ok(Trainer {
            dataset,
            vocab,
            config: ckpt.config,
            model,
            optimizer,
            step: ckpt.step,
            best_valid_mrr: ckpt.best_valid_mrr,
            rng: ckpt.rng.restore(),
            known: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config,
            step: self.step,
            num_entities: self.model.num_entities(),
            num_relations: self.model.num_relations(),
            num_anchors: self.model.encoder.embedder.anchor_table.shape().0,
            graph_checksum: self.dataset.graph.checksum(),
            best_valid_mrr: self.best_valid_mrr,
            rng: RngState::capture(&self.rng),
            params: self.model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            adam_t: self.optimizer.t,
            moments: self.optimizer.m.iter().cloned().zip(self.optimizer.v.iter().cloned()).collect(),
        }
    }

    /// One optimizer step; returns the batch loss.
    pub fn train_step(&mut self) -> Result<f32> {
        let cfg = self.config.train;
        let train = self.dataset.graph.triples();
        let positives: Vec<Triple> = (0..cfg.batch_size).map(|_| train[self.rng.gen_range(0..train.len())]).collect();
        let negatives = sample_negatives(&positives, cfg.neg_size, self.dataset.graph.num_entities(), &mut self.rng);
        self.model.zero_grad();
        let out = self.model.step(self.vocab, &positives, &negatives, Some(&mut self.rng), true)?;
        let lr = lr_at(self.step, &cfg);
        self.optimizer.step(&mut self.model.params_mut(), lr)?;
        self.step += 1;
        Ok(out.loss)
    }

    /// Filtered MRR on the validation split, or `None` if it is empty.
    pub fn validate(&mut self) -> Result<Option<f64>> {
        let valid = self.dataset.split(Split::Valid);
        if valid.is_empty() {
            return Ok(None);
        }
        let known = self.known.get_or_insert_with(|| KnownTriples::new(self.dataset.all_triples()));
        let scorer = EmbeddingScorer::from_model(&self.model, self.vocab)?;
        let report = evaluate(&scorer, valid, known, self.config.train.valid_protocol, self.config.train.seed)?;
        Ok(Some(report.mrr))
    }

    fn dump_diagnostics(&mut self, dir: &Path, err: &Error) -> Result<PathBuf> {
        let path = dir.join(format!("nonfinite_step_{}.txt", self.step));
        let mut text = format!("step = {}\nlr = {}\nerror = {err}\n\n", self.step, lr_at(self.step, &self.config.train));
        text.push_str("param max_abs_value max_abs_grad nonfinite_values nonfinite_grads\n");
        for p in self.model.params() {
            let maxv = p.value.iter().fold(0f32, |a, x| a.max(x.abs()));
            let maxg = p.grad.iter().fold(0f32, |a, x| a.max(x.abs()));
            let bad_v = p.value.iter().filter(|x| !x.is_finite()).count();
            let bad_g = p.grad.iter().filter(|x| !x.is_finite()).count();
            text.push_str(&format!("{} {maxv} {maxg} {bad_v} {bad_g}\n", p.name));
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Trains until `until` (capped at `max_steps`). With `out`, writes
    /// `config.txt`, appends to `metrics.csv`, and keeps `last.ckpt` and
    /// `best.ckpt` there.
    pub fn run(&mut self, until: u64, out: Option<&Path>) -> Result<TrainSummary> {
        let cfg = self.config.train;
        let until = until.min(cfg.max_steps);
        let mut metrics = match out {
            Some(dir) => Some(open_outputs(dir, &self.config, self.step)?),
            None => None,
        };
        let (mut window, mut count, mut last_loss) = (0.0f64, 0u64, f64::NAN);
        while self.step < until {
            let loss = match self.train_step() {
                Ok(l) => l,
                Err(e @ Error::NonFinite(_)) => {
                    if let Some(dir) = out {
                        let dump = self.dump_diagnostics(dir, &e)?;
                        log::error!("non-finite value at step {}; diagnostics in {}", self.step, dump.display());
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            window += loss as f64;
            count += 1;
            let s = self.step;
            let valid_mrr = if s % cfg.valid_interval == 0 || s == cfg.max_steps { self.validate()? } else { None };
            if s % cfg.log_interval == 0 || valid_mrr.is_some() || s == until {
                last_loss = window / count as f64;
                let lr = lr_at(s - 1, &cfg);
                let mrr = valid_mrr.map(|m| format!("{m:.6}")).unwrap_or_default();
                log::info!("step {s} loss {last_loss:.6} lr {lr:e} valid_mrr {mrr}");
                if let Some(f) = metrics.as_mut() {
                    writeln!(f, "{s},{last_loss:.6},{lr:e},{mrr}").map_err(|e| Error::io(out.unwrap().join("metrics.csv"), e))?;
                }
                window = 0.0;
                count = 0;
            }
            if let Some(m) = valid_mrr {
                if self.best_valid_mrr.is_none_or(|b| m > b) {
                    self.best_valid_mrr = Some(m);
                    if let Some(dir) = out {
                        self.checkpoint().save(&dir.join("best.ckpt"))?;
                    }
                }
            }
            if let Some(dir) = out {
                if s % cfg.checkpoint_interval == 0 || s == until {
                    self.checkpoint().save(&dir.join("last.ckpt"))?;
                }
            }
        }
        Ok(TrainSummary { steps: self.step, last_loss, best_valid_mrr: self.best_valid_mrr })
    }
}

fn open_outputs(dir: &Path, config: &RunConfig, step: u64) -> Result<File> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join("config.txt");
    let echo = format!("# subkg run config, format 1\n{}", config.echo());
    fs::write(&cfg_path, echo).map_err(|e| Error::io(&cfg_path, e))?;
    let path = dir.join("metrics.csv");
    let fresh = step == 0 || !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    if fresh {
        writeln!(f, "step,loss,lr,valid_mrr").map_err(|e| Error::io(&path, e))?;
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 5e-4);
        assert_eq!(lr_at(249_999, &cfg), 5e-4);
        assert!((lr_at(250_000, &cfg) - 5e-5).abs() < 1e-18);
        assert!((lr_at(500_000, &cfg) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn negatives_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pos = vec![Triple::new(0, 0, 0); 512];
        let neg = sample_negatives(&pos, 64, 10, &mut rng);
        assert_eq!(neg.ids.len(), 512 * 64);
        assert!(neg.ids.iter().all(|&e| e < 10));
        let one = sample_negatives(&pos[..3], 5, 1, &mut rng);
        assert!(one.ids.iter().all(|&e| e == 0));
    }

    #[test]
    fn adam_first_step() {
        let mut p = Parameter::<f64>::zeros("p", 1, 1);
        let mut opt = AdamW::new(&[&p], 0.9, 0.999, 1e-8, 0.0);
        p.grad.fill(1.0);
        opt.step(&mut [&mut p], 0.1).unwrap();
        assert!((p.value[[0, 0]] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn adam_zero_grad_no_change() {
        let mut p = Parameter::<f64>::filled("p", 2, 3, 0.7);
        let mut opt = AdamW::new(&[&p], 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut [&mut p], 0.1).unwrap();
        assert!(p.value.iter().all(|&x| x == 0.7));
    }

    #[test]
    fn adam_rejects_nonfinite_without_mutating() {
        let mut p = Parameter::<f32>::filled("p", 1, 2, 1.0);
        let mut opt = AdamW::new(&[&p], 0.9, 0.999, 1e-8, 0.0);
        p.grad[[0, 1]] = f32::NAN;
        assert!(matches!(opt.step(&mut [&mut p], 0.1), Err(Error::NonFinite(_))));
        assert_eq!(opt.t, 0);
        assert!(p.value.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn sparse_rows_untouched() {
        let mut p = Parameter::<f64>::filled("table", 4, 2, 1.0).row_sparse();
        let mut opt = AdamW::new(&[&p], 0.9, 0.999, 1e-8, 0.01);
        p.accumulate_row(2, ndarray::arr1(&[1.0, -1.0]).view());
        opt.step(&mut [&mut p], 0.1).unwrap();
        for r in [0, 1, 3] {
            assert!(p.value.row(r).iter().all(|&x| x == 1.0));
        }
        assert!(p.value[[2, 0]] < 1.0 && p.value[[2, 1]] > 1.0);
    }

    #[test]
    fn checkpoint_truncation_detected() {
        let ds = crate::fixtures::star_dataset();
        let a = crate::vocab::select_anchors(&ds.graph, 2).unwrap();
        let v = crate::vocab::build_vocabulary(&ds.graph, &a, 2, 1, 10).unwrap();
        let cfg = RunConfig::preset("star").unwrap();
        let t = Trainer::new(&ds, &v, cfg).unwrap();
        let bytes = t.checkpoint().encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(Checkpoint::decode(&flipped).is_err());
    }
}

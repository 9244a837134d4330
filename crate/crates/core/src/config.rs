//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored; unknown keys are errors. The
//! echo written next to every artifact parses back to the same config.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::{EncoderConfig, EncoderKind, SubgraphLayout};
use crate::error::{Error, Result};
use crate::eval::Protocol;
use crate::model::ModelConfig;
use crate::objective::{Norm, ObjectiveConfig, ScoreConfig, ScoreVariant};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub neg_size: usize,
    pub max_steps: u64,
    pub lr: f64,
    /// Multiplies `lr` from `max_steps / 2` on.
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub log_interval: u64,
    pub valid_interval: u64,
    pub checkpoint_interval: u64,
    pub valid_protocol: Protocol,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 512,
            neg_size: 64,
            max_steps: 500_000,
            lr: 5e-4,
            lr_decay_factor: 0.1,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            log_interval: 100,
            valid_interval: 10_000,
            checkpoint_interval: 10_000,
            valid_protocol: Protocol::Sampled(crate::eval::DEFAULT_SAMPLED),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunConfig {
    pub d_a: usize,
    pub d_n: usize,
    pub k_anchors: usize,
    pub m_neighbors: usize,
    /// Anchor set size when the vocabulary is built here; 0 picks the default.
    pub num_anchors: usize,
    pub use_neighbors: bool,
    pub use_center: bool,
    pub encoder: EncoderKind,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    pub score: ScoreVariant,
    pub u: f64,
    pub norm: Norm,
    pub gamma: f64,
    pub alpha: f64,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            d_a: 256,
            d_n: 32,
            k_anchors: 20,
            m_neighbors: 5,
            num_anchors: 0,
            use_neighbors: true,
            use_center: true,
            encoder: EncoderKind::Attention,
            heads: 4,
            ff_mult: 4,
            dropout: 0.05,
            score: ScoreVariant::Prime,
            u: 0.1,
            norm: Norm::L1,
            gamma: 6.0,
            alpha: 1.0,
            train: TrainConfig::default(),
        }
    }
}

/// `(key, description)` for every accepted key, in echo order.
pub const KEYS: &[(&str, &str)] = &[
    ("d_a", "anchor and representation width"),
    ("d_n", "node table width before projection"),
    ("k_anchors", "anchor tokens per entity"),
    ("m_neighbors", "neighbor tokens per entity"),
    ("num_anchors", "anchor set size for built vocabularies; 0 = 0.4% of entities"),
    ("use_neighbors", "include neighbor tokens"),
    ("use_center", "include the center token"),
    ("encoder", "attention|mlp"),
    ("heads", "attention heads"),
    ("ff_mult", "feed-forward width as a multiple of d_a"),
    ("dropout", "dropout after each linear layer"),
    ("score", "triplere_prime|triplere_v2"),
    ("u", "score constant"),
    ("norm", "l1|l2"),
    ("gamma", "loss margin; embeddings start in U(±gamma/dim)"),
    ("alpha", "adversarial softmax temperature"),
    ("batch_size", "positives per step"),
    ("neg_size", "negatives per positive"),
    ("max_steps", "training steps"),
    ("lr", "initial learning rate"),
    ("lr_decay_factor", "learning-rate multiplier from max_steps/2"),
    ("weight_decay", "decoupled weight decay"),
    ("beta1", "first-moment decay"),
    ("beta2", "second-moment decay"),
    ("adam_eps", "optimizer epsilon"),
    ("seed", "rng seed"),
    ("log_interval", "steps between metrics rows"),
    ("valid_interval", "steps between validation runs"),
    ("checkpoint_interval", "steps between checkpoints"),
    ("valid_protocol", "full|sampled|sampled-N"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "d_a" => self.d_a = parse(key, value)?,
            "d_n" => self.d_n = parse(key, value)?,
            "k_anchors" => self.k_anchors = parse(key, value)?,
            "m_neighbors" => self.m_neighbors = parse(key, value)?,
            "num_anchors" => self.num_anchors = parse(key, value)?,
            "use_neighbors" => self.use_neighbors = parse(key, value)?,
            "use_center" => self.use_center = parse(key, value)?,
            "encoder" => self.encoder = value.parse()?,
            "heads" => self.heads = parse(key, value)?,
            "ff_mult" => self.ff_mult = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "score" => self.score = value.parse()?,
            "u" => self.u = parse(key, value)?,
            "norm" => self.norm = value.parse()?,
            "gamma" => self.gamma = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "neg_size" => t.neg_size = parse(key, value)?,
            "max_steps" => t.max_steps = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "lr_decay_factor" => t.lr_decay_factor = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "log_interval" => t.log_interval = parse(key, value)?,
            "valid_interval" => t.valid_interval = parse(key, value)?,
            "checkpoint_interval" => t.checkpoint_interval = parse(key, value)?,
            "valid_protocol" => t.valid_protocol = value.parse()?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        Some(match key {
            "d_a" => self.d_a.to_string(),
            "d_n" => self.d_n.to_string(),
            "k_anchors" => self.k_anchors.to_string(),
            "m_neighbors" => self.m_neighbors.to_string(),
            "num_anchors" => self.num_anchors.to_string(),
            "use_neighbors" => self.use_neighbors.to_string(),
            "use_center" => self.use_center.to_string(),
            "encoder" => self.encoder.to_string(),
            "heads" => self.heads.to_string(),
            "ff_mult" => self.ff_mult.to_string(),
            "dropout" => self.dropout.to_string(),
            "score" => self.score.to_string(),
            "u" => self.u.to_string(),
            "norm" => self.norm.to_string(),
            "gamma" => self.gamma.to_string(),
            "alpha" => self.alpha.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "neg_size" => t.neg_size.to_string(),
            "max_steps" => t.max_steps.to_string(),
            "lr" => t.lr.to_string(),
            "lr_decay_factor" => t.lr_decay_factor.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "adam_eps" => t.adam_eps.to_string(),
            "seed" => t.seed.to_string(),
            "log_interval" => t.log_interval.to_string(),
            "valid_interval" => t.valid_interval.to_string(),
            "checkpoint_interval" => t.checkpoint_interval.to_string(),
            "valid_protocol" => t.valid_protocol.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", i + 1)),
                e => e,
            })?;
        }
        self.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let positive = [
            ("d_a", self.d_a as f64),
            ("d_n", self.d_n as f64),
            ("k_anchors", self.k_anchors as f64),
            ("heads", self.heads as f64),
            ("ff_mult", self.ff_mult as f64),
            ("gamma", self.gamma),
            ("batch_size", t.batch_size as f64),
            ("neg_size", t.neg_size as f64),
            ("max_steps", t.max_steps as f64),
            ("lr", t.lr),
            ("log_interval", t.log_interval as f64),
            ("valid_interval", t.valid_interval as f64),
            ("checkpoint_interval", t.checkpoint_interval as f64),
        ];
        for (k, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if !self.d_a.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_a={} is not divisible by heads={}", self.d_a, self.heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if !self.u.is_finite() || !self.alpha.is_finite() || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::Config("u, alpha, beta1, beta2 must be finite; betas in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> SubgraphLayout {
        SubgraphLayout {
            k: self.k_anchors,
            m: if self.use_neighbors { self.m_neighbors } else { 0 },
            center: self.use_center,
        }
    }

    pub fn anchor_count(&self, num_entities: usize) -> usize {
        match self.num_anchors {
            0 => crate::vocab::default_anchor_count(num_entities),
            n => n,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d_a: self.d_a,
                d_n: self.d_n,
                layout: self.layout(),
                kind: self.encoder,
                heads: self.heads,
                ff_mult: self.ff_mult,
                dropout: self.dropout,
                init_scale: self.gamma,
            },
            objective: ObjectiveConfig {
                score: ScoreConfig { variant: self.score, u: self.u, norm: self.norm },
                gamma: self.gamma,
                alpha: self.alpha,
            },
        }
    }

    /// Every key, one `key = value` per line.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("every listed key has a value"));
        }
        out
    }

    /// Built-in configurations: `toy` (the compositional graph) and `star`.
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let text = match name {
            "toy" => TOY_PRESET,
            "star" => STAR_PRESET,
            _ => return Err(Error::Config(format!("unknown preset {name:?} (toy|star)"))),
        };
        c.apply_text(text)?;
        Ok(c)
    }
}

pub const TOY_PRESET: &str = "\
d_a = 64
d_n = 16
k_anchors = 5
m_neighbors = 3
num_anchors = 20
heads = 4
dropout = 0.0
batch_size = 128
neg_size = 32
max_steps = 5000
lr = 0.005
valid_interval = 1000
checkpoint_interval = 1000
valid_protocol = full
";

pub const STAR_PRESET: &str = "\
d_a = 8
d_n = 4
k_anchors = 2
m_neighbors = 1
num_anchors = 2
heads = 2
batch_size = 8
neg_size = 4
max_steps = 100
valid_protocol = full
";

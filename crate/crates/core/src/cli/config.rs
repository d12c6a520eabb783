//! Run configuration in a flat `section.key = value` format.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! paths.dataset = data/train.jsonl
//! model.d = 32
//! train.steps = 200
//! train.mapping.family = cosine
//! eval.lambdas = 0,0.5,1
//! sample.sampler = ddim
//! sample.ddim_steps = 100
//! ```

use crate::error::{Error, Result};
use crate::metrics::DEFAULT_LAMBDAS;
use crate::model::{ModelConfig, Sampler, TrainConfig};
use crate::schedule::Shape;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub aliases: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    /// `vocab` is filled in from the vocabulary at training time.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub min_count: usize,
    pub lambdas: Vec<f64>,
    pub alias_k: usize,
    pub sampler: Sampler,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            paths: Paths::default(),
            model: ModelConfig::small(0, 16, 16),
            train: TrainConfig::default(),
            min_count: 1,
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            alias_k: 5,
            sampler: Sampler::Ddpm,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s.trim())).collect()
}

pub fn parse_sampler(name: &str, ddim_steps: Option<usize>) -> Result<Sampler> {
    match (name, ddim_steps) {
        ("ddpm", _) => Ok(Sampler::Ddpm),
        ("ddim", Some(steps)) => Ok(Sampler::Ddim { steps }),
        ("ddim", None) => Err(Error::Config("ddim needs a step count".into())),
        (other, _) => Err(Error::Config(format!("unknown sampler {other:?}"))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut ddim_steps = None;
        let mut sampler = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "sample.sampler" => sampler = Some(value.to_string()),
                "sample.ddim_steps" => ddim_steps = Some(parse(key, value)?),
                _ => cfg.set(key, value).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?,
            }
        }
        if sampler.is_some() || ddim_steps.is_some() {
            let name = sampler.unwrap_or_else(|| "ddim".into());
            cfg.sampler = parse_sampler(&name, ddim_steps)?;
        }
        Ok(cfg)
    }

    /// Sets one key; unknown keys are an error.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let p = || Some(PathBuf::from(v));
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "seed" => self.seed = parse(key, v)?,
            "paths.dataset" => self.paths.dataset = p(),
            "paths.vocab" => self.paths.vocab = p(),
            "paths.aliases" => self.paths.aliases = p(),
            "paths.gold" => self.paths.gold = p(),
            "paths.checkpoint" => self.paths.checkpoint = p(),
            "paths.out" => self.paths.out = p(),
            "model.d" => m.d = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.enc_layers" => m.enc_layers = parse(key, v)?,
            "model.dec_layers" => m.dec_layers = parse(key, v)?,
            "model.ffn" => m.ffn = parse(key, v)?,
            "model.n_max" => m.n_max = parse(key, v)?,
            "model.g_max" => m.g_max = parse(key, v)?,
            "model.tie_weights" => m.tie_weights = parse(key, v)?,
            "train.steps" => t.steps = parse(key, v)?,
            "train.sqrt_offset" => t.sqrt_offset = parse(key, v)?,
            "train.floor" => t.floor = parse(key, v)?,
            "train.k_up" => t.k_up = parse(key, v)?,
            "train.k_win" => t.k_win = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.warmup" => t.warmup = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.clip" => t.clip = parse(key, v)?,
            "train.batch" => t.batch = parse(key, v)?,
            "train.total_steps" => t.total_steps = parse(key, v)?,
            "train.n_mc" => t.n_mc = parse(key, v)?,
            "train.graph_aware" => t.graph_aware = parse(key, v)?,
            "train.alias_k" => t.alias_k = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = Some(parse(key, v)?),
            "train.mapping.family" => t.mapping.shape = Shape::parse(v)?,
            "train.mapping.tau" => t.mapping.tau = parse(key, v)?,
            "train.mapping.alpha_min" => t.mapping.alpha_min = Some(parse(key, v)?),
            "vocab.min_count" => self.min_count = parse(key, v)?,
            "eval.lambdas" => self.lambdas = parse_list(key, v)?,
            "eval.alias_k" => self.alias_k = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every set field, one per line; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", &self.seed);
        let paths = [
            ("paths.dataset", &self.paths.dataset),
            ("paths.vocab", &self.paths.vocab),
            ("paths.aliases", &self.paths.aliases),
            ("paths.gold", &self.paths.gold),
            ("paths.checkpoint", &self.paths.checkpoint),
            ("paths.out", &self.paths.out),
        ];
        for (k, p) in paths {
            if let Some(p) = p {
                kv(k, &p.display());
            }
        }
        let (m, t) = (&self.model, &self.train);
        kv("model.d", &m.d);
        kv("model.heads", &m.heads);
        kv("model.enc_layers", &m.enc_layers);
        kv("model.dec_layers", &m.dec_layers);
        kv("model.ffn", &m.ffn);
        kv("model.n_max", &m.n_max);
        kv("model.g_max", &m.g_max);
        kv("model.tie_weights", &m.tie_weights);
        kv("train.steps", &t.steps);
        kv("train.sqrt_offset", &t.sqrt_offset);
        kv("train.floor", &t.floor);
        kv("train.k_up", &t.k_up);
        kv("train.k_win", &t.k_win);
        kv("train.lr", &t.lr);
        kv("train.warmup", &t.warmup);
        kv("train.weight_decay", &t.weight_decay);
        kv("train.clip", &t.clip);
        kv("train.batch", &t.batch);
        kv("train.total_steps", &t.total_steps);
        kv("train.n_mc", &t.n_mc);
        kv("train.graph_aware", &t.graph_aware);
        kv("train.alias_k", &t.alias_k);
        if let Some(c) = t.checkpoint_every {
            kv("train.checkpoint_every", &c);
        }
        kv("train.mapping.family", &t.mapping.shape.name());
        kv("train.mapping.tau", &t.mapping.tau);
        if let Some(a) = t.mapping.alpha_min {
            kv("train.mapping.alpha_min", &a);
        }
        kv("vocab.min_count", &self.min_count);
        let lambdas: Vec<String> = self.lambdas.iter().map(f64::to_string).collect();
        kv("eval.lambdas", &lambdas.join(","));
        kv("eval.alias_k", &self.alias_k);
        match self.sampler {
            Sampler::Ddpm => kv("sample.sampler", &"ddpm"),
            Sampler::Ddim { steps } => {
                kv("sample.sampler", &"ddim");
                kv("sample.ddim_steps", &steps);
            }
        }
        out
    }

    /// The path, if set and present on disk.
    pub fn require<'a>(&'a self, name: &str, path: &'a Option<PathBuf>) -> Result<&'a Path> {
        let p = path.as_deref().ok_or_else(|| Error::Config(format!("missing {name} path")))?;
        if !p.exists() {
            return Err(Error::Config(format!("{name} path {} does not exist", p.display())));
        }
        Ok(p)
    }
}

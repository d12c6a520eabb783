//! Binary checkpoint container.
//!
//! `KGDIFFCK`, a `u32` version and a `u32` section count, then named sections.
//! Each section is `u32` name length, UTF-8 name, a kind byte and the payload:
//! kind 0 is a tensor (`u64` rows, `u64` cols, row-major little-endian `f64`),
//! kind 1 is UTF-8 text (`u64` length, bytes). All integers are little-endian.

use super::net::{Cond, Net, Params};
use super::sample::{sample_ddim, sample_ddpm, InferenceSchedule, SampleOutput, Sampler};
use super::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::kg::TokenSequence;
use crate::schedule::{AnchorSchedule, CumulativeSchedule, TokenSchedule, TokenWiseSchedule};
use ndarray::Array2;
use rand::Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 8] = b"KGDIFFCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: Params,
    pub schedules: TokenWiseSchedule,
    pub anchor: Option<AnchorSchedule>,
    /// Aligned occurrences per token behind the anchor.
    pub counts: BTreeMap<u32, u64>,
    pub vocab_fingerprint: String,
    pub step: u64,
}

enum Section {
    Tensor(Array2<f64>),
    Text(String),
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("1 x n")
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflow".into()))
    }
}

impl Checkpoint {
    pub fn net(&self) -> Net {
        Net { cfg: self.model.clone(), params: self.params.clone() }
    }

    pub fn inference_schedule(&self) -> Result<InferenceSchedule> {
        InferenceSchedule::new(self.schedules.baseline.clone(), self.anchor.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections: Vec<(String, Section)> = vec![
            ("config/model".into(), Section::Text(serde_json::to_string(&self.model)?)),
            ("config/train".into(), Section::Text(serde_json::to_string(&self.train)?)),
            ("vocab".into(), Section::Text(self.vocab_fingerprint.clone())),
            ("step".into(), Section::Text(self.step.to_string())),
            ("counts".into(), Section::Text(serde_json::to_string(&self.counts)?)),
            ("schedule/baseline".into(), Section::Tensor(row(self.schedules.baseline.values()))),
            ("schedule/alpha_min".into(), Section::Tensor(row(&[self.schedules.alpha_min]))),
        ];
        for (name, p) in &self.params {
            sections.push((format!("param/{name}"), Section::Tensor(p.clone())));
        }
        for (id, s) in &self.schedules.per_token {
            sections.push((format!("schedule/token/{id}"), Section::Tensor(row(&s.coeffs))));
        }
        if let Some(a) = &self.anchor {
            sections.push(("anchor".into(), Section::Tensor(row(a.0.values()))));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (name, sec) in sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match sec {
                Section::Tensor(t) => {
                    out.push(0);
                    out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
                    out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
                    for v in t.iter() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Section::Text(s) => {
                    out.push(1);
                    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
                    out.extend_from_slice(s.as_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()?;
        let mut sections = BTreeMap::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("bad section name".into()))?;
            let kind = r.take(1)?[0];
            let sec = match kind {
                0 => {
                    let (rows, cols) = (r.len()?, r.len()?);
                    let bytes = r.take(rows.checked_mul(cols).and_then(|x| x.checked_mul(8)).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
                    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                    Section::Tensor(Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))?)
                }
                1 => {
                    let n = r.len()?;
                    Section::Text(String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("bad text section".into()))?)
                }
                k => return Err(Error::Format(format!("unknown section kind {k}"))),
            };
            sections.insert(name, sec);
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let text = |name: &str| match sections.get(name) {
            Some(Section::Text(s)) => Ok(s.clone()),
            _ => Err(Error::Format(format!("missing text section {name:?}"))),
        };
        let tensor = |name: &str| match sections.get(name) {
            Some(Section::Tensor(t)) => Ok(t.clone()),
            _ => Err(Error::Format(format!("missing tensor section {name:?}"))),
        };
        let flat = |t: Array2<f64>| t.into_iter().collect::<Vec<f64>>();
        let model: ModelConfig = serde_json::from_str(&text("config/model")?)?;
        let train: TrainConfig = serde_json::from_str(&text("config/train")?)?;
        let step = text("step")?.parse().map_err(|_| Error::Format("bad step counter".into()))?;
        let counts = serde_json::from_str(&text("counts")?)?;
        let baseline = CumulativeSchedule::new(flat(tensor("schedule/baseline")?))?;
        let alpha_min = tensor("schedule/alpha_min")?[[0, 0]];
        let mut params = Params::new();
        let mut per_token = BTreeMap::new();
        for (name, sec) in &sections {
            if let (Some(p), Section::Tensor(t)) = (name.strip_prefix("param/"), sec) {
                params.insert(p.to_string(), t.clone());
            } else if let (Some(id), Section::Tensor(t)) = (name.strip_prefix("schedule/token/"), sec) {
                let id: u32 = id.parse().map_err(|_| Error::Format(format!("bad token section {name:?}")))?;
                per_token.insert(id, TokenSchedule::from_coeffs(flat(t.clone()))?);
            }
        }
        let anchor = match sections.get("anchor") {
            Some(Section::Tensor(t)) => Some(AnchorSchedule(CumulativeSchedule::new(flat(t.clone()))?)),
            _ => None,
        };
        let ckpt = Checkpoint {
            model,
            train,
            params,
            schedules: TokenWiseSchedule { baseline, per_token, alpha_min },
            anchor,
            counts,
            vocab_fingerprint: text("vocab")?,
            step,
        };
        ckpt.check_shapes()?;
        Ok(ckpt)
    }

    fn check_shapes(&self) -> Result<()> {
        let reference = Net::init(self.model.clone(), &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        for (name, p) in &reference.params {
            match self.params.get(name) {
                Some(q) if q.dim() == p.dim() => {}
                Some(q) => return Err(Error::Shape(format!("parameter {name} has shape {:?}, expected {:?}", q.dim(), p.dim()))),
                None => return Err(Error::Format(format!("missing parameter {name}"))),
            }
        }
        if self.params.len() != reference.params.len() {
            return Err(Error::Format("unexpected extra parameters".into()));
        }
        if self.params.values().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical("non-finite parameter in checkpoint".into()));
        }
        let steps = self.schedules.steps();
        if self.schedules.per_token.values().any(|s| s.cumulative.steps() != steps) {
            return Err(Error::Shape("token schedule length differs from baseline".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_bytes()?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Samples one sequence per serialized graph, using the predicted lengths.
    pub fn generate(&self, graphs: &[TokenSequence], sampler: Sampler, rng: &mut impl Rng) -> Result<SampleOutput> {
        if graphs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let net = self.net();
        let (n, g) = (self.model.n_max, self.model.g_max);
        if let Some(bad) = graphs.iter().find(|s| s.n_max() != g) {
            return Err(Error::Shape(format!("graph sequence of length {} but g_max = {g}", bad.n_max())));
        }
        let mut cond = Cond {
            batch: graphs.len(),
            graph: graphs.iter().flat_map(|s| s.ids.iter().copied()).collect(),
            graph_mask: graphs.iter().flat_map(|s| s.mask.iter().copied()).collect(),
            target_mask: vec![true; graphs.len() * n],
        };
        let lens = net.predict_lengths(&cond)?;
        cond.target_mask = lens.iter().flat_map(|&l| (0..n).map(move |i| i < l)).collect();
        let den = net.with_memory(&cond)?;
        let sched = self.inference_schedule()?;
        match sampler {
            Sampler::Ddpm => sample_ddpm(&den, net.embedding(), net.rounding_matrix(), &cond, &sched, rng),
            Sampler::Ddim { steps } => sample_ddim(&den, net.embedding(), net.rounding_matrix(), &cond, &sched, steps, rng),
        }
    }
}

//! The encoder–decoder denoiser `M_θ(z_t, t, G)`.

use super::tape::{AttnLayout, Tape, Var};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::kg::PAD_ID;
use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

pub type Params = BTreeMap<String, Array2<f64>>;

/// Conditioning for a batch of `batch` examples.
#[derive(Debug, Clone)]
pub struct Cond {
    pub batch: usize,
    /// Serialized graph ids, `batch * g_max`.
    pub graph: Vec<u32>,
    pub graph_mask: Vec<bool>,
    /// `true` for real (non-PAD) target positions, `batch * n_max`.
    pub target_mask: Vec<bool>,
}

/// Anything that maps a noisy latent batch to a clean-latent estimate and
/// per-position graph attention mass.
pub trait Denoise {
    fn denoise(&self, z_t: &Array2<f64>, ts: &[usize], cond: &Cond) -> Result<(Array2<f64>, Vec<f64>)>;
}

/// Sinusoidal embedding of a scalar position or timestep.
pub fn sinusoid(pos: f64, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let freq = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / d as f64);
            if j % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            }
        })
        .collect()
}

fn positions(batch: usize, len: usize, d: usize) -> Array2<f64> {
    let mut out = Array2::zeros((batch * len, d));
    for i in 0..len {
        let row = ndarray::Array1::from(sinusoid(i as f64, d));
        for b in 0..batch {
            out.row_mut(b * len + i).assign(&row);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub cfg: ModelConfig,
    pub params: Params,
}

type Vars = BTreeMap<String, Var>;

fn normal(rng: &mut impl Rng, r: usize, c: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| std * rng.sample::<f64, _>(StandardNormal))
}

impl Net {
    pub fn init(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (v, d, f) = (cfg.vocab, cfg.d, cfg.ffn);
        let mut p = Params::new();
        let lin = |p: &mut Params, name: &str, i: usize, o: usize, rng: &mut _| {
            p.insert(format!("{name}.w"), normal(rng, i, o, (1.0 / i as f64).sqrt()));
            p.insert(format!("{name}.b"), Array2::zeros((1, o)));
        };
        let ln = |p: &mut Params, name: &str| {
            p.insert(format!("{name}.g"), Array2::ones((1, d)));
            p.insert(format!("{name}.b"), Array2::zeros((1, d)));
        };
        p.insert("tok.emb".into(), normal(rng, v, d, 1.0));
        if !cfg.tie_weights {
            p.insert("round.w".into(), normal(rng, v, d, 1.0));
        }
        p.insert("enc.emb".into(), normal(rng, v, d, 1.0));
        for l in 0..cfg.enc_layers {
            let pre = format!("enc.{l}");
            ln(&mut p, &format!("{pre}.ln1"));
            for m in ["q", "k", "v", "o"] {
                lin(&mut p, &format!("{pre}.attn.{m}"), d, d, rng);
            }
            ln(&mut p, &format!("{pre}.ln2"));
            lin(&mut p, &format!("{pre}.ffn1"), d, f, rng);
            lin(&mut p, &format!("{pre}.ffn2"), f, d, rng);
        }
        ln(&mut p, "enc.ln");
        lin(&mut p, "dec.in", d, d, rng);
        lin(&mut p, "dec.time", d, d, rng);
        for l in 0..cfg.dec_layers {
            let pre = format!("dec.{l}");
            ln(&mut p, &format!("{pre}.ln1"));
            for m in ["q", "k", "v", "o"] {
                lin(&mut p, &format!("{pre}.self.{m}"), d, d, rng);
            }
            ln(&mut p, &format!("{pre}.ln2"));
            for m in ["q", "k", "v", "o"] {
                lin(&mut p, &format!("{pre}.cross.{m}"), d, d, rng);
            }
            p.insert(format!("{pre}.cross.null_k"), normal(rng, 1, d, 1.0));
            p.insert(format!("{pre}.cross.null_v"), Array2::zeros((1, d)));
            ln(&mut p, &format!("{pre}.ln3"));
            lin(&mut p, &format!("{pre}.ffn1"), d, f, rng);
            lin(&mut p, &format!("{pre}.ffn2"), f, d, rng);
        }
        ln(&mut p, "dec.ln");
        lin(&mut p, "dec.out", d, d, rng);
        lin(&mut p, "len", d, cfg.n_max + 1, rng);
        Ok(Net { cfg, params: p })
    }

    /// Replaces the token embedding with orthonormal rows (requires `|W| ≤ d`).
    pub fn orthogonal_embeddings(&mut self, rng: &mut impl Rng) -> Result<()> {
        let (v, d) = (self.cfg.vocab, self.cfg.d);
        if v > d {
            return Err(Error::Config(format!("orthogonal init needs vocab {v} <= d {d}")));
        }
        let mut e = normal(rng, v, d, 1.0);
        for i in 0..v {
            for j in 0..i {
                let proj = e.row(i).dot(&e.row(j));
                let rj = e.row(j).to_owned();
                e.row_mut(i).scaled_add(-proj, &rj);
            }
            let norm = e.row(i).dot(&e.row(i)).sqrt();
            e.row_mut(i).mapv_inplace(|x| x / norm);
        }
        self.params.insert("tok.emb".into(), e);
        Ok(())
    }

    pub fn embedding(&self) -> &Array2<f64> {
        &self.params["tok.emb"]
    }

    pub fn rounding_matrix(&self) -> &Array2<f64> {
        if self.cfg.tie_weights {
            &self.params["tok.emb"]
        } else {
            &self.params["round.w"]
        }
    }

    /// `g_Φ(S)`: one embedding row per id. Fails on an out-of-vocabulary id.
    pub fn embed(&self, ids: &[u32]) -> Result<Array2<f64>> {
        let emb = self.embedding();
        let mut out = Array2::zeros((ids.len(), self.cfg.d));
        for (r, &id) in ids.iter().enumerate() {
            if id as usize >= emb.nrows() {
                return Err(Error::OutOfRange(format!("token id {id} outside vocabulary of {}", emb.nrows())));
            }
            out.row_mut(r).assign(&emb.row(id as usize));
        }
        Ok(out)
    }

    pub fn leaves(&self, tape: &mut Tape) -> Vars {
        self.params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect()
    }

    fn linear(tape: &mut Tape, pv: &Vars, name: &str, x: Var) -> Var {
        let y = tape.matmul(x, pv[&format!("{name}.w")]);
        tape.add_row(y, pv[&format!("{name}.b")])
    }

    fn layer_norm(tape: &mut Tape, pv: &Vars, name: &str, x: Var) -> Var {
        tape.layer_norm(x, pv[&format!("{name}.g")], pv[&format!("{name}.b")])
    }

    fn mha(tape: &mut Tape, pv: &Vars, name: &str, xq: Var, xkv: Var, layout: AttnLayout, null: bool) -> Var {
        let q = Self::linear(tape, pv, &format!("{name}.q"), xq);
        let k = Self::linear(tape, pv, &format!("{name}.k"), xkv);
        let v = Self::linear(tape, pv, &format!("{name}.v"), xkv);
        let null = null.then(|| (pv[&format!("{name}.null_k")], pv[&format!("{name}.null_v")]));
        let a = tape.attention(q, k, v, null, layout);
        Self::linear(tape, pv, &format!("{name}.o"), a)
    }

    fn ffn(tape: &mut Tape, pv: &Vars, pre: &str, x: Var) -> Var {
        let h = Self::linear(tape, pv, &format!("{pre}.ffn1"), x);
        let h = tape.gelu(h);
        Self::linear(tape, pv, &format!("{pre}.ffn2"), h)
    }

    fn check_cond(&self, cond: &Cond) -> Result<()> {
        let (b, g, n) = (cond.batch, self.cfg.g_max, self.cfg.n_max);
        if cond.graph.len() != b * g || cond.graph_mask.len() != b * g || cond.target_mask.len() != b * n {
            return Err(Error::Shape(format!("conditioning does not match batch {b}, g_max {g}, n_max {n}")));
        }
        if let Some(&id) = cond.graph.iter().find(|&&id| id as usize >= self.cfg.vocab) {
            return Err(Error::OutOfRange(format!("graph token id {id} outside vocabulary")));
        }
        Ok(())
    }

    /// Encoder memory over the serialized graph tokens, `batch * g_max` rows.
    pub fn encode(&self, tape: &mut Tape, pv: &Vars, cond: &Cond) -> Var {
        let (b, g, d) = (cond.batch, self.cfg.g_max, self.cfg.d);
        let ids = cond.graph.iter().map(|&i| i as usize).collect();
        let x = tape.gather(pv["enc.emb"], ids);
        let pos = tape.leaf(positions(b, g, d));
        let mut x = tape.add(x, pos);
        for l in 0..self.cfg.enc_layers {
            let pre = format!("enc.{l}");
            let h = Self::layer_norm(tape, pv, &format!("{pre}.ln1"), x);
            let layout = AttnLayout { batch: b, q_len: g, k_len: g, heads: self.cfg.heads, key_mask: cond.graph_mask.clone() };
            let a = Self::mha(tape, pv, &format!("{pre}.attn"), h, h, layout, false);
            x = tape.add(x, a);
            let h = Self::layer_norm(tape, pv, &format!("{pre}.ln2"), x);
            let f = Self::ffn(tape, pv, &pre, h);
            x = tape.add(x, f);
        }
        Self::layer_norm(tape, pv, "enc.ln", x)
    }

    /// Decoder pass. Returns `ẑ_0` and the per-position graph attention mass
    /// averaged over heads and cross-attention layers (0 at PAD positions).
    pub fn decode(&self, tape: &mut Tape, pv: &Vars, z_t: Var, ts: &[usize], memory: Var, cond: &Cond) -> (Var, Vec<f64>) {
        let (b, n, g, d) = (cond.batch, self.cfg.n_max, self.cfg.g_max, self.cfg.d);
        let mut temb = Array2::zeros((b * n, d));
        for (bi, &t) in ts.iter().enumerate() {
            let row = ndarray::Array1::from(sinusoid(t as f64, d));
            for i in 0..n {
                temb.row_mut(bi * n + i).assign(&row);
            }
        }
        let temb = tape.leaf(temb);
        let temb = Self::linear(tape, pv, "dec.time", temb);
        let x = Self::linear(tape, pv, "dec.in", z_t);
        let pos = tape.leaf(positions(b, n, d));
        let x = tape.add(x, pos);
        let mut x = tape.add(x, temb);
        let first_mass = tape.key_mass.len();
        for l in 0..self.cfg.dec_layers {
            let pre = format!("dec.{l}");
            let h = Self::layer_norm(tape, pv, &format!("{pre}.ln1"), x);
            let layout = AttnLayout { batch: b, q_len: n, k_len: n, heads: self.cfg.heads, key_mask: cond.target_mask.clone() };
            let a = Self::mha(tape, pv, &format!("{pre}.self"), h, h, layout, false);
            x = tape.add(x, a);
            let h = Self::layer_norm(tape, pv, &format!("{pre}.ln2"), x);
            let layout = AttnLayout { batch: b, q_len: n, k_len: g, heads: self.cfg.heads, key_mask: cond.graph_mask.clone() };
            let a = Self::mha(tape, pv, &format!("{pre}.cross"), h, memory, layout, true);
            x = tape.add(x, a);
            let h = Self::layer_norm(tape, pv, &format!("{pre}.ln3"), x);
            let f = Self::ffn(tape, pv, &pre, h);
            x = tape.add(x, f);
        }
        let h = Self::layer_norm(tape, pv, "dec.ln", x);
        let zhat = Self::linear(tape, pv, "dec.out", h);
        let layers = &tape.key_mass[first_mass..];
        let w = (0..b * n)
            .map(|r| {
                if cond.target_mask[r] {
                    (layers.iter().map(|m| m[r]).sum::<f64>() / layers.len() as f64).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect();
        (zhat, w)
    }

    /// Length logits over `0..=n_max` from the masked mean of the encoder memory.
    pub fn length_logits(&self, tape: &mut Tape, pv: &Vars, memory: Var, cond: &Cond) -> Var {
        let g = self.cfg.g_max;
        let mut weights = vec![0.0; cond.batch * g];
        for b in 0..cond.batch {
            let n = cond.graph_mask[b * g..(b + 1) * g].iter().filter(|&&m| m).count().max(1);
            for i in 0..g {
                if cond.graph_mask[b * g + i] {
                    weights[b * g + i] = 1.0 / n as f64;
                }
            }
        }
        let pooled = tape.mean_pool(memory, g, weights);
        Self::linear(tape, pv, "len", pooled)
    }

    /// Predicted target length per example, in `1..=n_max`.
    pub fn predict_lengths(&self, cond: &Cond) -> Result<Vec<usize>> {
        self.check_cond(cond)?;
        let mut tape = Tape::new();
        let pv = self.leaves(&mut tape);
        let memory = self.encode(&mut tape, &pv, cond);
        let logits = self.length_logits(&mut tape, &pv, memory, cond);
        Ok(tape
            .value(logits)
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 1;
                for k in 2..row.len() {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }

    /// Encodes once and returns a denoiser that reuses the memory across calls.
    pub fn with_memory(&self, cond: &Cond) -> Result<Encoded<'_>> {
        self.check_cond(cond)?;
        let mut tape = Tape::new();
        let pv = self.leaves(&mut tape);
        let m = self.encode(&mut tape, &pv, cond);
        Ok(Encoded { net: self, memory: tape.value(m).clone() })
    }

    fn run(&self, z_t: &Array2<f64>, ts: &[usize], cond: &Cond, memory: Option<&Array2<f64>>) -> Result<(Array2<f64>, Vec<f64>)> {
        self.check_cond(cond)?;
        if z_t.dim() != (cond.batch * self.cfg.n_max, self.cfg.d) || ts.len() != cond.batch {
            return Err(Error::Shape(format!("latent {:?} / {} timesteps for batch {}", z_t.dim(), ts.len(), cond.batch)));
        }
        let mut tape = Tape::new();
        let pv = self.leaves(&mut tape);
        let memory = match memory {
            Some(m) => tape.leaf(m.clone()),
            None => self.encode(&mut tape, &pv, cond),
        };
        let z = tape.leaf(z_t.clone());
        let (zhat, w) = self.decode(&mut tape, &pv, z, ts, memory, cond);
        let out = tape.value(zhat).clone();
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite denoiser output".into()));
        }
        Ok((out, w))
    }
}

impl Denoise for Net {
    fn denoise(&self, z_t: &Array2<f64>, ts: &[usize], cond: &Cond) -> Result<(Array2<f64>, Vec<f64>)> {
        self.run(z_t, ts, cond, None)
    }
}

/// A [`Net`] with precomputed encoder memory for one conditioning batch.
pub struct Encoded<'a> {
    net: &'a Net,
    memory: Array2<f64>,
}

impl Denoise for Encoded<'_> {
    fn denoise(&self, z_t: &Array2<f64>, ts: &[usize], cond: &Cond) -> Result<(Array2<f64>, Vec<f64>)> {
        self.net.run(z_t, ts, cond, Some(&self.memory))
    }
}

/// Per-position categorical distribution over the vocabulary and its argmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Rounded {
    pub ids: Vec<u32>,
    pub probs: Array2<f64>,
}

/// `softmax(W z_i)` per row; ties go to the lowest id.
pub fn round(zhat: &Array2<f64>, w: &Array2<f64>) -> Rounded {
    let mut probs = zhat.dot(&w.t());
    let mut ids = Vec::with_capacity(probs.nrows());
    for mut row in probs.axis_iter_mut(Axis(0)) {
        let mut best = 0;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        ids.push(best as u32);
        let max = row[best];
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    Rounded { ids, probs }
}

/// Rounds only the positions marked in `mask`; the rest become PAD.
pub(crate) fn round_masked(zhat: &Array2<f64>, w: &Array2<f64>, mask: &[bool]) -> Vec<u32> {
    round(zhat, w).ids.into_iter().zip(mask).map(|(id, &m)| if m { id } else { PAD_ID }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(vocab: usize) -> Net {
        let cfg = ModelConfig { vocab, d: 8, heads: 2, enc_layers: 1, dec_layers: 2, ffn: 12, n_max: 5, g_max: 6, tie_weights: true };
        Net::init(cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap()
    }

    fn cond() -> Cond {
        Cond {
            batch: 2,
            graph: vec![1, 7, 2, 8, 0, 0, 1, 9, 2, 7, 3, 6],
            graph_mask: vec![true, true, true, true, false, false, true, true, true, true, true, true],
            target_mask: vec![true, true, true, false, false, true, true, true, true, true],
        }
    }

    #[test]
    fn denoise_is_deterministic_and_masses_bounded() {
        let net = tiny(10);
        let z = normal(&mut ChaCha8Rng::seed_from_u64(1), 10, 8, 1.0);
        let c = cond();
        let (a, wa) = net.denoise(&z, &[3, 40], &c).unwrap();
        let (b, wb) = net.denoise(&z, &[3, 40], &c).unwrap();
        assert_eq!(a, b);
        assert_eq!(wa, wb);
        for (i, w) in wa.iter().enumerate() {
            assert!((0.0..=1.0).contains(w));
            if !c.target_mask[i] {
                assert_eq!(*w, 0.0);
            }
        }
        let (e, _) = net.with_memory(&c).unwrap().denoise(&z, &[3, 40], &c).unwrap();
        assert_eq!(a, e);
    }

    #[test]
    fn masked_graph_keys_are_ignored() {
        let net = tiny(10);
        let z = normal(&mut ChaCha8Rng::seed_from_u64(2), 10, 8, 1.0);
        let c = cond();
        let mut c2 = c.clone();
        // permute / overwrite the two padded graph slots of example 0
        c2.graph[4] = 9;
        c2.graph[5] = 3;
        let (a, wa) = net.denoise(&z, &[5, 5], &c).unwrap();
        let (b, wb) = net.denoise(&z, &[5, 5], &c2).unwrap();
        assert_eq!(a, b);
        assert_eq!(wa, wb);
    }

    #[test]
    fn embed_lookup() {
        let net = tiny(10);
        let e = net.embed(&[0, 0, 0]).unwrap();
        for r in 0..3 {
            assert_eq!(e.row(r), net.embedding().row(0));
        }
        let e = net.embed(&[4, 4]).unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert!(net.embed(&[10]).is_err());
    }

    #[test]
    fn rounding_ties_and_dominance() {
        let w = Array2::eye(3);
        let r = round(&Array2::zeros((1, 3)), &w);
        assert_eq!(r.ids, vec![0]);
        assert!(r.probs.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        let r = round(&ndarray::arr2(&[[0.0, 0.0, 5.0]]), &w);
        assert_eq!(r.ids, vec![2]);
        assert!((r.probs.row(0).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tied_orthogonal_round_trip() {
        let mut net = tiny(8);
        net.orthogonal_embeddings(&mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let ids: Vec<u32> = (0..8).collect();
        // nearest-row oracle: for orthonormal rows e_i·e_j = δ_ij, so row i scores 1 only against itself
        let z = net.embed(&ids).unwrap();
        let gram = z.dot(&net.embedding().t());
        for i in 0..8 {
            for j in 0..8 {
                assert!((gram[[i, j]] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        assert_eq!(round(&z, net.rounding_matrix()).ids, ids);
    }

    #[test]
    fn sinusoid_values() {
        let s = sinusoid(0.0, 4);
        assert_eq!(s, vec![0.0, 1.0, 0.0, 1.0]);
        let s = sinusoid(1.0, 2);
        assert!((s[0] - 1f64.sin()).abs() < 1e-15);
    }
}

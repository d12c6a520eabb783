//! The end-to-end objective, difficulty estimation and the training loop.

use super::checkpoint::Checkpoint;
use super::diffusion::{forward_noise, position_alpha_bars};
use super::net::{Cond, Denoise, Net};
use super::optim::{lr_at, AdamW};
use super::tape::Tape;
use super::{ModelConfig, TrainConfig};
use crate::alignment::{detect_and_link, expand_aliases};
use crate::error::{Error, Result};
use crate::kg::Example;
use crate::kg::{encode, TokenSequence, Vocab};
use crate::schedule::{
    anchor_from, build_token_schedules, sqrt_baseline, AnchorSchedule, DifficultyProfile, Profiles, TokenWiseSchedule,
    WindowSpec,
};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};

pub type Grads = BTreeMap<String, Array2<f64>>;

/// One encoded training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub graph: Vec<u32>,
    pub graph_mask: Vec<bool>,
    pub target: TokenSequence,
    /// Per target position: part of an aligned mention.
    pub aligned: Vec<bool>,
}

/// Serializes, encodes and aligns each example.
pub fn prepare_examples(
    examples: &[Example],
    vocab: &Vocab,
    n_max: usize,
    g_max: usize,
    alias_k: usize,
) -> Result<Vec<TrainExample>> {
    examples
        .iter()
        .map(|ex| {
            let graph = encode(&ex.graph.serialize()?, vocab, g_max);
            let target = encode(&ex.text, vocab, n_max);
            let table = expand_aliases(&ex.graph, alias_k, &[]);
            let mut aligned = vec![false; n_max];
            for p in detect_and_link(&target, vocab, &table).positions() {
                aligned[p] = true;
            }
            Ok(TrainExample { graph: graph.ids, graph_mask: graph.mask, target, aligned })
        })
        .collect()
}

pub(crate) fn cond_of(batch: &[&TrainExample]) -> Cond {
    Cond {
        batch: batch.len(),
        graph: batch.iter().flat_map(|e| e.graph.iter().copied()).collect(),
        graph_mask: batch.iter().flat_map(|e| e.graph_mask.iter().copied()).collect(),
        target_mask: batch.iter().flat_map(|e| e.target.mask.iter().copied()).collect(),
    }
}

/// `sqrt(1 − ᾱ_r) ε_r` per row; unit rows get zeros and consume no draws.
fn scaled_noise(alpha_bar: &[f64], d: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut out = Array2::zeros((alpha_bar.len(), d));
    for (mut row, &ab) in out.rows_mut().into_iter().zip(alpha_bar) {
        if ab < 1.0 {
            let s = (1.0 - ab).sqrt();
            row.mapv_inplace(|_| s * rng.sample::<f64, _>(StandardNormal));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub denoise: f64,
    pub consistency: f64,
    pub rounding: f64,
    pub length: f64,
}

/// Monte Carlo estimate of the end-to-end objective and its gradient.
///
/// One `t ~ U{2..T}` per example for the denoising term, a consistency term at
/// `t = 1`, the teacher-forced rounding term, and the length classifier's
/// cross-entropy. Each term is averaged over non-PAD positions, then over the batch.
pub fn loss_e2e(net: &Net, batch: &[&TrainExample], sched: &TokenWiseSchedule, rng: &mut impl Rng) -> Result<(LossBreakdown, Grads)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let steps = sched.steps();
    if steps < 2 {
        return Err(Error::Config("T must be at least 2".into()));
    }
    let (b, n, d) = (batch.len(), net.cfg.n_max, net.cfg.d);
    let cond = cond_of(batch);
    let seqs: Vec<&TokenSequence> = batch.iter().map(|e| &e.target).collect();
    let aligned: Vec<&[bool]> = batch.iter().map(|e| e.aligned.as_slice()).collect();
    if seqs.iter().any(|s| s.n_max() != n) {
        return Err(Error::Shape(format!("targets must have length {n}")));
    }
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(2..=steps)).collect();
    let ab_t = position_alpha_bars(&seqs, &aligned, sched, &ts)?;
    let ones = vec![1; b];
    let ab_1 = position_alpha_bars(&seqs, &aligned, sched, &ones)?;
    let noise_t = scaled_noise(&ab_t, d, rng);
    let noise_1 = scaled_noise(&ab_1, d, rng);

    let mut weights = vec![0.0; b * n];
    for (bi, s) in seqs.iter().enumerate() {
        let len = s.len();
        for (i, &m) in s.mask.iter().enumerate() {
            if m {
                weights[bi * n + i] = 1.0 / (len * b) as f64;
            }
        }
    }
    let ids: Vec<usize> = seqs.iter().flat_map(|s| s.ids.iter().map(|&i| i as usize)).collect();

    let mut tape = Tape::new();
    let pv = net.leaves(&mut tape);
    let z0 = tape.gather(pv["tok.emb"], ids.clone());
    let memory = net.encode(&mut tape, &pv, &cond);

    let noisy = |tape: &mut Tape, ab: &[f64], noise: Array2<f64>| {
        let signal = tape.scale_rows(z0, ab.iter().map(|a| a.sqrt()).collect());
        let noise = tape.leaf(noise);
        tape.add(signal, noise)
    };
    let z_t = noisy(&mut tape, &ab_t, noise_t);
    let (zhat_t, _) = net.decode(&mut tape, &pv, z_t, &ts, memory, &cond);
    let l_den = tape.sq_err(zhat_t, z0, weights.clone());

    let z_1 = noisy(&mut tape, &ab_1, noise_1);
    let (zhat_1, _) = net.decode(&mut tape, &pv, z_1, &ones, memory, &cond);
    let l_cons = tape.sq_err(z0, zhat_1, weights.clone());

    let w_round = if net.cfg.tie_weights { pv["tok.emb"] } else { pv["round.w"] };
    let logits = tape.matmul_t(z0, w_round);
    let l_round = tape.cross_entropy(logits, ids, weights);

    let len_logits = net.length_logits(&mut tape, &pv, memory, &cond);
    let lens = seqs.iter().map(|s| s.len()).collect();
    let l_len = tape.cross_entropy(len_logits, lens, vec![1.0 / b as f64; b]);

    let total = tape.sum(vec![(l_den, 1.0), (l_cons, 1.0), (l_round, 1.0), (l_len, 1.0)]);
    let report = LossBreakdown {
        total: tape.scalar(total),
        denoise: tape.scalar(l_den),
        consistency: tape.scalar(l_cons),
        rounding: tape.scalar(l_round),
        length: tape.scalar(l_len),
    };
    let mut grads_raw = tape.backward(total);
    let grads = pv
        .iter()
        .map(|(name, v)| {
            let g = grads_raw[v.index()].take().unwrap_or_else(|| Array2::zeros(net.params[name].dim()));
            (name.clone(), g)
        })
        .collect();
    Ok((report, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultyConfig {
    pub n_mc: usize,
    /// Evaluation stride; `None` means `max(1, T/50)`.
    pub stride: Option<usize>,
    /// Examples per denoiser call.
    pub chunk: usize,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        DifficultyConfig { n_mc: 8, stride: None, chunk: 64 }
    }
}

fn eval_grid(steps: usize, stride: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = std::iter::once(1).chain((stride..=steps).step_by(stride)).collect();
    grid.push(steps);
    grid.dedup();
    grid
}

/// Per-token difficulty profiles `ℓ_t` for every aligned token id, measured on
/// an evaluation grid and linearly interpolated to all of `1..=T`.
pub fn estimate_difficulty(
    den: &impl Denoise,
    emb: &Array2<f64>,
    examples: &[&TrainExample],
    sched: &TokenWiseSchedule,
    cfg: &DifficultyConfig,
    rng: &mut impl Rng,
) -> Result<Profiles> {
    let subset: Vec<&TrainExample> = examples.iter().copied().filter(|e| e.aligned.iter().any(|&a| a)).collect();
    if subset.is_empty() {
        return Err(Error::NoAlignedTokens);
    }
    if cfg.n_mc == 0 || cfg.chunk == 0 {
        return Err(Error::Config("n_mc and chunk must be positive".into()));
    }
    let steps = sched.steps();
    let stride = cfg.stride.unwrap_or((steps / 50).max(1)).max(1);
    let grid = eval_grid(steps, stride);
    let mut sums: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    for e in &subset {
        for (i, &a) in e.aligned.iter().enumerate() {
            if a && e.target.mask[i] {
                *counts.entry(e.target.ids[i]).or_default() += 1;
                sums.entry(e.target.ids[i]).or_insert_with(|| vec![0.0; grid.len()]);
            }
        }
    }
    for chunk in subset.chunks(cfg.chunk) {
        let cond = cond_of(chunk);
        let seqs: Vec<&TokenSequence> = chunk.iter().map(|e| &e.target).collect();
        let aligned: Vec<&[bool]> = chunk.iter().map(|e| e.aligned.as_slice()).collect();
        let ids: Vec<u32> = seqs.iter().flat_map(|s| s.ids.iter().copied()).collect();
        let mut z0 = Array2::zeros((ids.len(), emb.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            z0.row_mut(r).assign(&emb.row(id as usize));
        }
        for (gi, &t) in grid.iter().enumerate() {
            let ts = vec![t; chunk.len()];
            let ab = position_alpha_bars(&seqs, &aligned, sched, &ts)?;
            for _ in 0..cfg.n_mc {
                let z_t = forward_noise(&z0, &ab, rng)?;
                let (zhat, _) = den.denoise(&z_t, &ts, &cond)?;
                for (r, &id) in ids.iter().enumerate() {
                    let (bi, i) = (r / seqs[0].n_max(), r % seqs[0].n_max());
                    if aligned[bi][i] && seqs[bi].mask[i] {
                        let diff = &zhat.row(r) - &z0.row(r);
                        sums.get_mut(&id).expect("counted above")[gi] += diff.dot(&diff) / cfg.n_mc as f64;
                    }
                }
            }
        }
    }
    sums.into_iter()
        .map(|(id, s)| {
            let c = counts[&id];
            let at_grid: Vec<f64> = s.iter().map(|v| v / c as f64).collect();
            let losses = (1..=steps)
                .map(|t| {
                    let k = grid.partition_point(|&g| g < t);
                    if grid[k] == t {
                        at_grid[k]
                    } else {
                        let (t0, t1) = (grid[k - 1], grid[k]);
                        let f = (t - t0) as f64 / (t1 - t0) as f64;
                        at_grid[k - 1] + f * (at_grid[k] - at_grid[k - 1])
                    }
                })
                .collect();
            Ok((id, DifficultyProfile::new(losses, c)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossBreakdown,
}

/// Training progress callbacks.
pub enum TrainEvent<'a> {
    Step(&'a StepLog),
    ScheduleUpdate { step: usize, tokens: usize },
    Checkpoint(&'a Checkpoint),
}

fn update_schedules(
    net: &Net,
    examples: &[TrainExample],
    baseline: &TokenWiseSchedule,
    current: &TokenWiseSchedule,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Option<(TokenWiseSchedule, AnchorSchedule, BTreeMap<u32, u64>)>> {
    let refs: Vec<&TrainExample> = examples.iter().filter(|e| e.aligned.iter().any(|&a| a)).collect();
    let dcfg = DifficultyConfig { n_mc: cfg.n_mc, stride: None, chunk: refs.len().max(1) };
    let result = if refs.is_empty() {
        Err(Error::NoAlignedTokens)
    } else {
        let den = net.with_memory(&cond_of(&refs))?;
        estimate_difficulty(&den, net.embedding(), &refs, current, &dcfg, rng)
    };
    let profiles = match result {
        Err(Error::NoAlignedTokens) => {
            log::warn!("no aligned tokens in the training set; schedules stay at the baseline");
            return Ok(None);
        }
        other => other?,
    };
    let spec = WindowSpec::new(cfg.steps, cfg.k_win)?;
    let ids: BTreeSet<u32> = profiles.keys().copied().collect();
    let tw = build_token_schedules(&baseline.baseline, &ids, &profiles, &spec, &cfg.mapping)?;
    let counts: BTreeMap<u32, u64> = profiles.iter().map(|(k, p)| (*k, p.count)).collect();
    let anchor = anchor_from(&tw, &counts)?;
    Ok(Some((tw, anchor, counts)))
}

/// Trains a fresh denoiser. Fully determined by `cfg.seed`.
pub fn train(
    examples: &[TrainExample],
    model: ModelConfig,
    cfg: &TrainConfig,
    vocab_fingerprint: &str,
    mut on_event: impl FnMut(TrainEvent<'_>),
) -> Result<Checkpoint> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Net::init(model, &mut rng)?;
    let baseline = TokenWiseSchedule::baseline_only(sqrt_baseline(cfg.steps, cfg.sqrt_offset, cfg.floor)?);
    let mut ckpt = Checkpoint {
        model: net.cfg.clone(),
        train: cfg.clone(),
        params: Default::default(),
        schedules: baseline.clone(),
        anchor: None,
        counts: BTreeMap::new(),
        vocab_fingerprint: vocab_fingerprint.to_string(),
        step: 0,
    };
    let mut opt = AdamW::new(cfg.weight_decay, cfg.clip);
    let bsz = cfg.batch.min(examples.len());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    for step in 1..=cfg.total_steps {
        let mut batch = Vec::with_capacity(bsz);
        while batch.len() < bsz {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&examples[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = loss_e2e(&net, &batch, &ckpt.schedules, &mut rng)?;
        if !loss.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at step {step}: {loss:?}")));
        }
        let lr = lr_at(step - 1, cfg.lr, cfg.warmup, cfg.total_steps);
        let grad_norm = opt.step(&mut net.params, &grads, lr);
        on_event(TrainEvent::Step(&StepLog { step, lr, grad_norm, loss }));

        if cfg.graph_aware && step % cfg.k_up == 0 {
            if let Some((tw, anchor, counts)) = update_schedules(&net, examples, &baseline, &ckpt.schedules, cfg, &mut rng)? {
                on_event(TrainEvent::ScheduleUpdate { step, tokens: tw.per_token.len() });
                ckpt.schedules = tw;
                ckpt.anchor = Some(anchor);
                ckpt.counts = counts;
            }
        }
        if cfg.checkpoint_every.is_some_and(|k| k > 0 && step % k == 0 && step < cfg.total_steps) {
            ckpt.params = net.params.clone();
            ckpt.step = step as u64;
            on_event(TrainEvent::Checkpoint(&ckpt));
        }
    }
    ckpt.params = net.params;
    ckpt.step = cfg.total_steps as u64;
    Ok(ckpt)
}

use super::config::{parse_sampler, RunConfig};
use super::{toy, Cli, Command, Inputs};
use crate::alignment::{
    detect_and_link, expand_aliases, parse_alias_file, score_alignment, AlignmentRecord, AlignmentReport,
};
use crate::error::{Error, Result};
use crate::kg::{encode, parse_dataset, tokenize, Example, KnowledgeGraph, Vocab};
use crate::metrics::{
    bleu, entity_table, esr, esr_table, extract_entity_sets, fgt_report, make_edit, summarize, EvalRecord,
    GraphEdit,
};
use crate::model::{prepare_examples, train, Checkpoint, ModelConfig, Sampler, TrainEvent};
use crate::schedule::{sqrt_baseline, write_schedule_table, ScheduleHeader, TokenWiseSchedule};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

struct Ctx {
    cfg: RunConfig,
    out: Option<PathBuf>,
}

impl Ctx {
    fn emit(&self, text: &str) -> Result<()> {
        match &self.out {
            Some(p) => fs::write(p, text)?,
            None => print!("{text}"),
        }
        Ok(())
    }

    fn data(&self, inputs: &Inputs) -> Result<Vec<Example>> {
        let path = inputs.data.clone().or_else(|| self.cfg.paths.dataset.clone());
        let path = path.ok_or_else(|| Error::Config("no dataset given (--data or paths.dataset)".into()))?;
        read_dataset(&path)
    }

    fn vocab(&self, inputs: &Inputs) -> Result<Vocab> {
        let path = inputs.vocab.clone().or_else(|| self.cfg.paths.vocab.clone());
        let path = path.ok_or_else(|| Error::Config("no vocabulary given (--vocab or paths.vocab)".into()))?;
        Vocab::from_tsv(&fs::read_to_string(path)?)
    }

    fn aliases(&self, inputs: &Inputs) -> Result<Vec<(String, String)>> {
        match inputs.aliases.clone().or_else(|| self.cfg.paths.aliases.clone()) {
            Some(p) => parse_alias_file(&fs::read_to_string(p)?),
            None => Ok(Vec::new()),
        }
    }

    fn checkpoint_path(&self, inputs: &Inputs) -> Option<PathBuf> {
        inputs.checkpoint.clone().or_else(|| self.cfg.paths.checkpoint.clone())
    }
}

fn read_dataset(path: &Path) -> Result<Vec<Example>> {
    let parsed = parse_dataset(&fs::read_to_string(path)?);
    if let Some(e) = parsed.errors.into_iter().next() {
        return Err(e);
    }
    Ok(parsed.examples)
}

fn read_lines(path: &Path, expected: usize) -> Result<Vec<String>> {
    let lines: Vec<String> = fs::read_to_string(path)?.lines().map(str::to_string).collect();
    if lines.len() != expected {
        return Err(Error::Format(format!("{} has {} lines, expected {expected}", path.display(), lines.len())));
    }
    Ok(lines)
}

fn jsonl<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(&r)?);
        out.push('\n');
    }
    Ok(out)
}

fn lexicon(examples: &[Example]) -> Vec<String> {
    let set: BTreeSet<String> = examples.iter().flat_map(|e| e.graph.entity_set()).collect();
    set.into_iter().collect()
}

pub(super) fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli.out.clone().or_else(|| cfg.paths.out.clone());
    let ctx = Ctx { cfg, out };
    match cli.command {
        Command::Serialize { inputs } => serialize(&ctx, &inputs),
        Command::BuildVocab { inputs, min_count } => build_vocab(&ctx, &inputs, min_count),
        Command::Align { inputs, k } => align(&ctx, &inputs, k),
        Command::AlignScore { inputs, gold, k } => align_score(&ctx, &inputs, gold, k),
        Command::ScheduleBuild { inputs } => schedule_build(&ctx, &inputs),
        Command::ToyExample => ctx.emit(&toy::render(&toy::toy_example()?)),
        Command::Train { inputs, total_steps } => train_cmd(&ctx, &inputs, total_steps),
        Command::Sample { inputs, sampler, ddim_steps } => sample(&ctx, &inputs, sampler, ddim_steps),
        Command::EvalFgt { inputs, hyp, lambdas } => eval_fgt(&ctx, &inputs, &hyp, lambdas),
        Command::EvalEsr { inputs, hyp, edited, hyp_edited } => eval_esr(&ctx, &inputs, &hyp, &edited, &hyp_edited),
        Command::EvalBleu { inputs, hyp } => eval_bleu(&ctx, &inputs, &hyp),
        Command::EditGen { inputs } => edit_gen(&ctx, &inputs),
    }
}

fn serialize(ctx: &Ctx, inputs: &Inputs) -> Result<()> {
    let mut out = String::new();
    for ex in ctx.data(inputs)? {
        let _ = writeln!(out, "{}\t{}", ex.graph.serialize()?, ex.text);
    }
    ctx.emit(&out)
}

fn corpus(examples: &[Example]) -> Result<Vec<String>> {
    let mut c: Vec<String> = examples.iter().map(|e| e.text.clone()).collect();
    for e in examples {
        c.push(e.graph.serialize()?);
    }
    Ok(c)
}

fn build_vocab(ctx: &Ctx, inputs: &Inputs, min_count: Option<usize>) -> Result<()> {
    let examples = ctx.data(inputs)?;
    let vocab = Vocab::build(&corpus(&examples)?, min_count.unwrap_or(ctx.cfg.min_count));
    ctx.emit(&vocab.to_tsv())
}

/// Predicted alignments over each text's own tokens.
fn predict_alignments(ctx: &Ctx, inputs: &Inputs, k: Option<usize>) -> Result<Vec<(Example, crate::alignment::AlignmentSet, usize)>> {
    let examples = ctx.data(inputs)?;
    let extra = ctx.aliases(inputs)?;
    let k = k.unwrap_or(ctx.cfg.alias_k);
    let texts: Vec<&str> = examples.iter().map(|e| e.text.as_str()).collect();
    let vocab = Vocab::build(&texts, 1);
    Ok(examples
        .into_iter()
        .map(|ex| {
            let n = tokenize(&ex.text).len();
            let seq = encode(&ex.text, &vocab, n);
            let set = detect_and_link(&seq, &vocab, &expand_aliases(&ex.graph, k, &extra));
            (ex, set, n)
        })
        .collect())
}

fn align(ctx: &Ctx, inputs: &Inputs, k: Option<usize>) -> Result<()> {
    let rows = predict_alignments(ctx, inputs, k)?;
    ctx.emit(&jsonl(rows.iter().enumerate().map(|(i, (ex, set, _))| AlignmentRecord::from_set(i, set, &ex.graph)))?)
}

fn align_score(ctx: &Ctx, inputs: &Inputs, gold: Option<PathBuf>, k: Option<usize>) -> Result<()> {
    let gold = gold.or_else(|| ctx.cfg.paths.gold.clone());
    let gold = gold.ok_or_else(|| Error::Config("no gold alignments given (--gold or paths.gold)".into()))?;
    let mut records: BTreeMap<usize, AlignmentRecord> = BTreeMap::new();
    for (i, line) in fs::read_to_string(&gold)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: AlignmentRecord =
            serde_json::from_str(line).map_err(|e| Error::Record { line: i + 1, msg: e.to_string() })?;
        records.insert(r.example_id, r);
    }
    let pred = predict_alignments(ctx, inputs, k)?;
    let mut total = AlignmentReport::default();
    for (i, (ex, set, n)) in pred.iter().enumerate() {
        let Some(g) = records.get(&i) else { continue };
        let seq = crate::kg::TokenSequence::from_ids(vec![crate::kg::UNK_ID; *n], *n);
        total = total.merge(&score_alignment(set, &g.to_set(&ex.graph)?, &seq, &ex.graph)?);
    }
    let report = serde_json::json!({
        "examples": total.examples,
        "precision": total.precision(),
        "recall": total.recall(),
        "f1": total.f1(),
        "token_coverage": total.token_coverage(),
        "node_coverage": total.node_coverage(),
        "mean_links": total.mean_links(),
    });
    ctx.emit(&format!("{report}\n"))
}

fn schedule_build(ctx: &Ctx, inputs: &Inputs) -> Result<()> {
    let text = match ctx.checkpoint_path(inputs) {
        Some(p) => {
            let ck = Checkpoint::load(&p)?;
            let header = ScheduleHeader { shape: ck.train.mapping.shape, tau: ck.train.mapping.tau, k_win: ck.train.k_win };
            write_schedule_table(&header, &ck.schedules, ck.anchor.as_ref())
        }
        None => {
            let t = &ctx.cfg.train;
            t.validate()?;
            let base = sqrt_baseline(t.steps, t.sqrt_offset, t.floor)?;
            let header = ScheduleHeader { shape: t.mapping.shape, tau: t.mapping.tau, k_win: t.k_win };
            write_schedule_table(&header, &TokenWiseSchedule::baseline_only(base), None)
        }
    };
    ctx.emit(&text)
}

fn train_cmd(ctx: &Ctx, inputs: &Inputs, total_steps: Option<usize>) -> Result<()> {
    let dir = ctx.out.clone().ok_or_else(|| Error::Config("train needs --out <dir>".into()))?;
    let examples = ctx.data(inputs)?;
    if examples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let vocab = match inputs.vocab.clone().or_else(|| ctx.cfg.paths.vocab.clone()) {
        Some(_) => ctx.vocab(inputs)?,
        None => Vocab::build(&corpus(&examples)?, ctx.cfg.min_count),
    };
    let mut tcfg = ctx.cfg.train.clone();
    tcfg.seed = ctx.cfg.seed;
    if let Some(n) = total_steps {
        tcfg.total_steps = n;
    }
    let model = ModelConfig { vocab: vocab.len(), ..ctx.cfg.model.clone() };
    model.validate()?;
    tcfg.validate()?;
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("vocab.tsv"), vocab.to_tsv())?;
    let mut effective = ctx.cfg.clone();
    effective.train = tcfg.clone();
    fs::write(dir.join("config.txt"), effective.to_text())?;

    let prepared = prepare_examples(&examples, &vocab, model.n_max, model.g_max, tcfg.alias_k)?;
    let mut log = String::from("step\tlr\tgrad_norm\ttotal\tdenoise\tconsistency\trounding\tlength\n");
    let mut saved = Vec::new();
    let ck = train(&prepared, model, &tcfg, &vocab.fingerprint(), |ev| match ev {
        TrainEvent::Step(s) => {
            let l = &s.loss;
            let _ = writeln!(
                log,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                s.step, s.lr, s.grad_norm, l.total, l.denoise, l.consistency, l.rounding, l.length
            );
        }
        TrainEvent::ScheduleUpdate { step, tokens } => log::info!("step {step}: rebuilt schedules for {tokens} tokens"),
        TrainEvent::Checkpoint(c) => saved.push(c.clone()),
    })?;
    for c in saved {
        c.save(&dir.join(format!("checkpoint-{}.bin", c.step)))?;
    }
    fs::write(dir.join("train_log.tsv"), log)?;
    ck.save(&dir.join("checkpoint.bin"))?;
    let header = ScheduleHeader { shape: tcfg.mapping.shape, tau: tcfg.mapping.tau, k_win: tcfg.k_win };
    fs::write(dir.join("schedules.tsv"), write_schedule_table(&header, &ck.schedules, ck.anchor.as_ref()))?;
    println!("checkpoint {} sha256 {}", dir.join("checkpoint.bin").display(), ck.hash()?);
    Ok(())
}

const SAMPLE_CHUNK: usize = 64;

fn sample(ctx: &Ctx, inputs: &Inputs, sampler: Option<String>, ddim_steps: Option<usize>) -> Result<()> {
    let ck_path = ctx.checkpoint_path(inputs).ok_or_else(|| Error::Config("no checkpoint given".into()))?;
    if !ck_path.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", ck_path.display())));
    }
    let ck = Checkpoint::load(&ck_path)?;
    let vocab = ctx.vocab(inputs)?;
    if vocab.fingerprint() != ck.vocab_fingerprint {
        return Err(Error::Format("vocabulary does not match the checkpoint's vocabulary hash".into()));
    }
    let sampler = match (sampler, ddim_steps) {
        (None, None) => ctx.cfg.sampler,
        (s, d) => parse_sampler(s.as_deref().unwrap_or("ddim"), d)?,
    };
    let examples = ctx.data(inputs)?;
    let graphs = examples
        .iter()
        .map(|e| Ok(encode(&e.graph.serialize()?, &vocab, ck.model.g_max)))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let mut texts = String::new();
    let mut calls_log = String::from("example_id\tdenoiser_calls\n");
    for (c, chunk) in graphs.chunks(SAMPLE_CHUNK).enumerate() {
        let out = ck.generate(chunk, sampler, &mut rng)?;
        for (j, seq) in out.sequences.iter().enumerate() {
            let _ = writeln!(texts, "{}", vocab.decode(seq));
            let _ = writeln!(calls_log, "{}\t{}", c * SAMPLE_CHUNK + j, out.calls);
        }
    }
    let label = match sampler {
        Sampler::Ddpm => "ddpm".to_string(),
        Sampler::Ddim { steps } => format!("ddim/{steps}"),
    };
    log::info!("sampled {} sequences with {label}", graphs.len());
    match &ctx.out {
        Some(p) => {
            let mut log_path = p.clone().into_os_string();
            log_path.push(".calls.tsv");
            fs::write(log_path, &calls_log)?;
        }
        None => eprint!("{calls_log}"),
    }
    ctx.emit(&texts)
}

fn lambda_list(ctx: &Ctx, arg: Option<String>) -> Result<Vec<f64>> {
    let lambdas = match arg {
        Some(s) => RunConfig::parse(&format!("eval.lambdas = {s}"))?.lambdas,
        None => ctx.cfg.lambdas.clone(),
    };
    if lambdas.is_empty() {
        return Err(Error::Config("empty λ list".into()));
    }
    Ok(lambdas)
}

/// Hard invariants of a record; a violation is reported as a numerical failure.
fn check_record(r: &EvalRecord, lambdas: &[f64]) -> Result<()> {
    let mut sorted: Vec<(f64, f64)> = lambdas.iter().map(|l| (*l, r.fgt[&l.to_string()])).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let fail = |m: &str| Err(Error::Numerical(format!("example {}: {m}", r.example_id)));
    if sorted.windows(2).any(|w| w[1].1 > w[0].1) {
        return fail("FGT increases with λ");
    }
    if let Some(&(_, v)) = sorted.iter().find(|(l, _)| *l == 0.0) {
        if v != r.f1 {
            return fail("FGT@0 differs from F1");
        }
    }
    for v in [r.esr, r.bleu].into_iter().flatten() {
        if !(0.0..=1.0).contains(&v) {
            return fail("score outside [0, 1]");
        }
    }
    Ok(())
}

fn fgt_records(ctx: &Ctx, examples: &[Example], hyps: &[String], lambdas: &[f64]) -> Result<Vec<EvalRecord>> {
    let lex = lexicon(examples);
    examples
        .iter()
        .zip(hyps)
        .enumerate()
        .map(|(i, (ex, hyp))| {
            let table = entity_table(&ex.graph, lex.iter().map(String::as_str), ctx.cfg.alias_k);
            let sets = extract_entity_sets(&ex.graph, hyp, &table);
            if sets.n == 0 {
                log::warn!("example {i}: empty generation");
            }
            let rep = fgt_report(&sets, lambdas).or_else(|_| {
                let zero = lambdas.iter().map(|l| (l.to_string(), 0.0)).collect();
                Ok::<_, Error>(crate::metrics::FgtReport { precision: 0.0, recall: 0.0, f1: 0.0, h_count: 0, fgt: zero })
            })?;
            Ok(EvalRecord {
                example_id: i,
                fgt: rep.fgt,
                recall: rep.recall,
                f1: rep.f1,
                h_count: rep.h_count,
                esr: None,
                bleu: None,
            })
        })
        .collect()
}

fn finish_eval(ctx: &Ctx, records: &[EvalRecord], lambdas: &[f64]) -> Result<()> {
    let mut out = jsonl(records)?;
    out.push_str(&serde_json::to_string(&summarize(records))?);
    out.push('\n');
    ctx.emit(&out)?;
    records.iter().try_for_each(|r| check_record(r, lambdas))
}

fn eval_fgt(ctx: &Ctx, inputs: &Inputs, hyp: &Path, lambdas: Option<String>) -> Result<()> {
    let lambdas = lambda_list(ctx, lambdas)?;
    let examples = ctx.data(inputs)?;
    let hyps = read_lines(hyp, examples.len())?;
    let records = fgt_records(ctx, &examples, &hyps, &lambdas)?;
    finish_eval(ctx, &records, &lambdas)
}

fn eval_bleu(ctx: &Ctx, inputs: &Inputs, hyp: &Path) -> Result<()> {
    let lambdas = ctx.cfg.lambdas.clone();
    let examples = ctx.data(inputs)?;
    let hyps = read_lines(hyp, examples.len())?;
    let mut records = fgt_records(ctx, &examples, &hyps, &lambdas)?;
    for ((r, ex), h) in records.iter_mut().zip(&examples).zip(&hyps) {
        r.bleu = Some(bleu(h, &[ex.text.as_str()], 4));
    }
    finish_eval(ctx, &records, &lambdas)
}

fn eval_esr(ctx: &Ctx, inputs: &Inputs, hyp: &Path, edited: &Path, hyp_edited: &Path) -> Result<()> {
    let lambdas = ctx.cfg.lambdas.clone();
    let examples = ctx.data(inputs)?;
    let edited = read_dataset(edited)?;
    if edited.len() != examples.len() {
        return Err(Error::Format(format!("{} edited records for {} originals", edited.len(), examples.len())));
    }
    let hyps = read_lines(hyp, examples.len())?;
    let hyps2 = read_lines(hyp_edited, examples.len())?;
    let mut all: Vec<Example> = examples.clone();
    all.extend(edited.iter().cloned());
    let lex = lexicon(&all);
    let mut records = fgt_records(ctx, &examples, &hyps, &lambdas)?;
    for (i, r) in records.iter_mut().enumerate() {
        let (g, g2) = (&examples[i].graph, &edited[i].graph);
        let table = esr_table(g, g2, lex.iter().map(String::as_str), ctx.cfg.alias_k);
        r.esr = Some(esr(g, &hyps[i], g2, &hyps2[i], &table).score);
    }
    finish_eval(ctx, &records, &lambdas)
}

#[derive(Serialize)]
struct EditedRecord<'a> {
    triples: Vec<[&'a str; 3]>,
    text: &'a str,
    edit: &'a GraphEdit,
}

fn edit_gen(ctx: &Ctx, inputs: &Inputs) -> Result<()> {
    let examples = ctx.data(inputs)?;
    let lex = lexicon(&examples);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let edits: Vec<(KnowledgeGraph, GraphEdit)> =
        examples.iter().map(|ex| make_edit(&ex.graph, &lex, &mut rng)).collect::<Result<_>>()?;
    let rows = examples.iter().zip(&edits).map(|(ex, (g2, edit))| EditedRecord {
        triples: g2.triples.iter().map(|t| [t.head.as_str(), t.rel.as_str(), t.tail.as_str()]).collect(),
        text: &ex.text,
        edit,
    });
    ctx.emit(&jsonl(rows)?)
}

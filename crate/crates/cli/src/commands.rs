use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use ssmqa::dataset::synth::{qa_corpus_with, QaSynthConfig};
use ssmqa::dataset::{
    build_chat_prompt, compute_stats, encode_record, load_squad_style, parse_squad_style, save_squad_style,
    ChatTemplate, Lang, QaRecord,
};
use ssmqa::lora::attach;
use ssmqa::metrics::{normalize, rouge_n_tokens, TextTokenizer};
use ssmqa::prompting::{
    generate, predict_span_query, render_query, select_best, PromptTemplate, SelectionConfig,
};
use ssmqa::ssm::{ModelConfig, SsmModel};
use ssmqa::tokenizer::{Vocab, SOS_ID};
use ssmqa::trainer::{
    evaluate, load_checkpoint, prepare_examples, save_checkpoint, train as run_training, EvalMode, SpanHead,
    TrainConfig, TrainOutputs, TrainState,
};

use crate::manifest::{manifest_path, RunManifest};
use crate::{EvalArgs, InferArgs, Mode, PreprocessArgs, StatsArgs, SynthArgs, TrainArgs, VocabArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(ssmqa::Error),
    Io(PathBuf, std::io::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
        }
    }
}

impl From<ssmqa::Error> for CliError {
    fn from(e: ssmqa::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    /// 2 usage, 3 invalid input data, 4 runtime failure.
    pub fn exit_code(&self) -> u8 {
        use ssmqa::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(
                E::InvalidArgument(_) | E::Validation { .. } | E::Alignment { .. } | E::Shape(_) | E::Encoding(_) | E::Json(_),
            ) => 3,
            CliError::Core(_) | CliError::Io(..) => 4,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn io<T>(path: &Path, r: std::io::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn write_manifest(mut m: RunManifest, outputs: &[&Path], beside: &Path) -> CliResult {
    m.outputs = outputs.iter().map(|p| p.to_path_buf()).collect();
    let path = manifest_path(beside);
    io(&path, m.write(&path))
}

fn manifest(command: &str, config: Option<&Path>, inputs: &[&Path], seed: Option<u64>) -> CliResult<RunManifest> {
    io(inputs.first().copied().unwrap_or(Path::new(".")), RunManifest::new(command, config, inputs, seed))
}

/// Passages from a text file (one per line) or a JSON dataset (context, question and answer).
fn corpus_text(path: &Path, lang: Option<&str>) -> CliResult<Vec<String>> {
    let text = io(path, std::fs::read_to_string(path))?;
    if path.extension().is_some_and(|e| e == "json") {
        let records = parse_squad_style(&text)?;
        Ok(records
            .into_iter()
            .filter(|r| lang.is_none_or(|l| r.lang.as_str() == l))
            .flat_map(|r| [r.context, r.question, r.answer])
            .collect())
    } else {
        Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_owned).collect())
    }
}

fn template_text() -> Vec<String> {
    let mut out = ChatTemplate::default().literal_text();
    let p = PromptTemplate::default();
    out.push(p.system.clone());
    out.extend(p.delimiters());
    out
}

fn train_vocab(texts: &[String], size: usize) -> CliResult<Vocab> {
    Ok(Vocab::train(texts.iter().map(String::as_str), size)?)
}

pub fn vocab(a: &VocabArgs) -> CliResult {
    let mut texts = Vec::new();
    for p in &a.corpus {
        texts.extend(corpus_text(p, a.lang.as_deref())?);
    }
    if !a.no_template_text {
        texts.extend(template_text());
    }
    let v = train_vocab(&texts, a.size as usize)?;
    v.save(&a.out)?;
    eprintln!("wrote {} entries to {}", v.len(), a.out.display());
    let inputs: Vec<&Path> = a.corpus.iter().map(PathBuf::as_path).collect();
    write_manifest(manifest("vocab", None, &inputs, None)?, &[&a.out], &a.out)
}

#[derive(Serialize)]
struct PreparedRecord<'a> {
    #[serde(flatten)]
    record: &'a QaRecord,
    token_ids: Vec<usize>,
    context_offset: usize,
    token_start: usize,
    token_end: usize,
    attention_mask: Vec<u8>,
}

#[derive(Serialize)]
struct Prepared<'a> {
    data: Vec<PreparedRecord<'a>>,
}

pub fn preprocess(a: &PreprocessArgs) -> CliResult {
    let records = load_squad_style(&a.data)?;
    let v = Vocab::load(&a.vocab)?;
    let mut data = Vec::with_capacity(records.len());
    for r in &records {
        let enc = encode_record(r, &v, a.max_len)?;
        data.push(PreparedRecord {
            record: r,
            token_ids: enc.token_ids,
            context_offset: enc.context_offset,
            token_start: enc.token_start,
            token_end: enc.token_end,
            attention_mask: enc.attention_mask,
        });
    }
    let json = serde_json::to_string_pretty(&Prepared { data }).map_err(ssmqa::Error::from)?;
    io(&a.out, std::fs::write(&a.out, json))?;
    eprintln!("aligned {} records", records.len());
    write_manifest(manifest("preprocess", None, &[&a.data, &a.vocab], None)?, &[&a.out], &a.out)
}

pub fn stats(a: &StatsArgs) -> CliResult {
    let records = load_squad_style(&a.data)?;
    let s = compute_stats(&records)?;
    let written = s.write_reports(&a.out_dir)?;
    for (lang, n) in &s.counts {
        eprintln!("{lang}: {n} records");
    }
    let outs: Vec<&Path> = written.iter().map(PathBuf::as_path).collect();
    write_manifest(manifest("stats", None, &[&a.data], None)?, &outs, &a.out_dir)
}

pub fn synth(a: &SynthArgs) -> CliResult {
    let records = qa_corpus_with(&QaSynthConfig {
        n: a.n,
        seed: a.seed,
        langs: vec![Lang::Hi, Lang::Mr],
        max_fillers_before: a.max_fillers_before,
        max_fillers_after: a.max_fillers_after,
    });
    save_squad_style(&records, &a.out)?;
    write_manifest(manifest("synth", None, &[], Some(a.seed))?, &[&a.out], &a.out)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = io(path, std::fs::read_to_string(path))?;
    Ok(serde_json::from_str(&text).map_err(ssmqa::Error::from)?)
}

fn fresh_state(a: &TrainArgs, records: &[QaRecord]) -> CliResult<TrainState<f32>> {
    let mut cfg = match &a.config {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => TrainConfig::preset(&a.preset)?,
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    cfg.validate()?;
    let vocab = match &a.vocab {
        Some(p) => Vocab::load(p)?,
        None => {
            let mut texts: Vec<String> = records
                .iter()
                .flat_map(|r| [r.context.clone(), r.question.clone(), r.answer.clone()])
                .collect();
            texts.extend(template_text());
            train_vocab(&texts, a.vocab_size)?
        }
    };
    let template = match &a.template {
        Some(p) => ChatTemplate::load(p)?,
        None => ChatTemplate::default(),
    };
    let mut mcfg = match &a.model_config {
        Some(p) => read_json::<ModelConfig>(p)?,
        None => ModelConfig::preset(&a.preset)?,
    };
    mcfg.vocab_size = vocab.len();
    mcfg.init_seed = cfg.seed;
    cfg.max_seq_len = cfg.max_seq_len.min(mcfg.max_seq_len);
    let mut model = SsmModel::<f32>::new(mcfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    attach(&mut model, &cfg.lora, &mut rng)?;
    if cfg.span_head {
        SpanHead::attach(&mut model, &mut rng)?;
    }
    let mut state = TrainState::new(model, cfg);
    state.vocab = Some(vocab);
    state.template = Some(template);
    Ok(state)
}

pub fn train(a: &TrainArgs) -> CliResult {
    let records = load_squad_style(&a.data)?;
    let eval_records = a.eval.as_deref().map(load_squad_style).transpose()?;
    let mut state = match &a.resume {
        Some(p) => {
            let mut s = load_checkpoint::<f32>(p)?;
            if let Some(e) = a.epochs {
                s.config.epochs = e;
            }
            s
        }
        None => fresh_state(a, &records)?,
    };
    let vocab = state
        .vocab
        .clone()
        .ok_or_else(|| CliError::Usage("the checkpoint carries no vocabulary".into()))?;
    let template = state.template.clone().unwrap_or_default();
    let data = prepare_examples(&records, &vocab, &template, &state.config)?;
    let held = eval_records
        .as_deref()
        .map(|r| prepare_examples(r, &vocab, &template, &state.config))
        .transpose()?;
    io(&a.out_dir, std::fs::create_dir_all(&a.out_dir))?;
    vocab.save(&a.out_dir.join("vocab.tsv"))?;
    let out = TrainOutputs {
        out_dir: Some(a.out_dir.clone()),
    };
    let summary = run_training(&mut state, &data, held.as_deref(), &out)?;
    let mut checkpoints = summary.checkpoints.clone();
    if checkpoints.is_empty() {
        let name = if state.step == 0 { "initial" } else { "final" };
        let p = a.out_dir.join(name);
        save_checkpoint(&state, &p)?;
        checkpoints.push(p);
    }
    for (i, l) in summary.epoch_losses.iter().enumerate() {
        eprintln!("epoch {} mean loss {l:.4}", state.epoch - summary.epoch_losses.len() + i + 1);
    }
    eprintln!("{} optimizer steps, {} checkpoints", state.step, checkpoints.len());
    let mut inputs: Vec<&Path> = vec![&a.data];
    inputs.extend(a.eval.as_deref());
    inputs.extend(a.vocab.as_deref());
    inputs.extend(a.model_config.as_deref());
    inputs.extend(a.template.as_deref());
    inputs.extend(a.resume.as_deref());
    let outs: Vec<&Path> = checkpoints.iter().map(PathBuf::as_path).collect();
    write_manifest(
        manifest("train", a.config.as_deref(), &inputs, Some(state.config.seed))?,
        &outs,
        &a.out_dir,
    )
}

fn load_for_inference(path: &Path) -> CliResult<(TrainState<f32>, Vocab)> {
    let state = load_checkpoint::<f32>(path)?;
    let vocab = state
        .vocab
        .clone()
        .ok_or_else(|| CliError::Usage(format!("checkpoint {} carries no vocabulary", path.display())))?;
    Ok((state, vocab))
}

fn pick_mode(requested: Option<Mode>, state: &TrainState<f32>) -> Mode {
    requested.unwrap_or(if SpanHead::present(&state.model) { Mode::Span } else { Mode::Generate })
}

pub fn eval(a: &EvalArgs) -> CliResult {
    let (state, vocab) = load_for_inference(&a.checkpoint)?;
    let records = load_squad_style(&a.data)?;
    let mode = pick_mode(a.mode, &state);
    if mode == Mode::Span && !SpanHead::present(&state.model) {
        return Err(CliError::Usage("span evaluation needs a checkpoint with a span head".into()));
    }
    let mut cfg = state.config.clone();
    cfg.span_head = mode == Mode::Span;
    cfg.lm_objective = mode == Mode::Generate;
    let template = state.template.clone().unwrap_or_default();
    let examples = prepare_examples(&records, &vocab, &template, &cfg)?;
    let eval_mode = match mode {
        Mode::Span => EvalMode::Span,
        Mode::Generate => EvalMode::Generate,
    };
    let mut result = evaluate(&state.model, &examples, &vocab, &template, &cfg, eval_mode, None)?;
    if a.rouge_n {
        for row in &mut result.report.per_sample {
            let p = vocab.tokens(&normalize(&row.prediction));
            let g = vocab.tokens(&normalize(&row.gold));
            row.rouge_1 = Some(rouge_n_tokens(&p, &g, 1));
            row.rouge_2 = Some(rouge_n_tokens(&p, &g, 2));
        }
    }
    io(&a.out, std::fs::create_dir_all(&a.out))?;
    let json = a.out.join("report.json");
    let csv = a.out.join("report.csv");
    result.report.write_json(&json)?;
    result.report.write_csv(&csv)?;
    let c = result.report.corpus_all();
    println!(
        "n={} em={:.4} f1={:.4} bleu={:.4} rouge_l={:.4} embed={:.4}{}",
        c.count,
        c.em,
        c.f1,
        c.bleu,
        c.rouge_l,
        c.embed,
        result.loss.map(|l| format!(" loss={l:.4}")).unwrap_or_default()
    );
    write_manifest(
        manifest("eval", None, &[&a.checkpoint, &a.data], None)?,
        &[&json, &csv],
        &a.out,
    )
}

#[derive(Serialize)]
struct InferOutput {
    answer: String,
    score: f64,
    candidates: Vec<(String, f64)>,
}

pub fn infer(a: &InferArgs) -> CliResult {
    let (state, vocab) = load_for_inference(&a.checkpoint)?;
    let cfg = &state.config;
    let out = match pick_mode(a.mode, &state) {
        Mode::Span => {
            if a.shots > 0 || a.prompt_template.is_some() || a.examples.is_some() {
                return Err(CliError::Usage(
                    "--shots, --examples and --prompt-template apply to generate mode".into(),
                ));
            }
            let need = vocab.encode(&a.question, false).len() + vocab.encode(&a.context, false).len() + 3;
            if need > cfg.max_seq_len {
                return Err(ssmqa::Error::InvalidArgument(format!(
                    "question and context need {need} tokens, the model accepts {}",
                    cfg.max_seq_len
                ))
                .into());
            }
            let p = predict_span_query(&state.model, &a.question, &a.context, &vocab, cfg.max_seq_len, cfg.max_answer_tokens)?;
            InferOutput {
                answer: p.text.clone(),
                score: p.score,
                candidates: vec![(p.text, p.score)],
            }
        }
        Mode::Generate => {
            let prompt = if a.shots > 0 || a.prompt_template.is_some() {
                let template = match &a.prompt_template {
                    Some(p) => PromptTemplate::load(p)?,
                    None => PromptTemplate::default(),
                };
                let shots = match (&a.examples, a.shots) {
                    (_, 0) => Vec::new(),
                    (None, _) => return Err(CliError::Usage("--shots needs --examples".into())),
                    (Some(p), k) => {
                        let all = load_squad_style(p)?;
                        if all.len() < k {
                            return Err(CliError::Usage(format!("{} holds {} records, {k} shots requested", p.display(), all.len())));
                        }
                        all[..k].to_vec()
                    }
                };
                let text = render_query(&template, &a.question, &a.context, &shots)?;
                let mut ids = vec![SOS_ID];
                ids.extend(vocab.encode(&text, false));
                ids
            } else {
                let rec = QaRecord {
                    id: "query".into(),
                    lang: Lang::Other,
                    context: a.context.clone(),
                    question: a.question.clone(),
                    answer: String::new(),
                    answer_start: 0,
                };
                let template = state.template.clone().unwrap_or_default();
                build_chat_prompt(&rec, &template, &vocab, usize::MAX)?
            };
            let sel_cfg = SelectionConfig {
                samples: a.samples as usize,
                temperature: a.temperature.unwrap_or(if a.samples > 1 { 0.8 } else { 0.0 }),
                max_tokens: a.max_tokens,
                lambda: a.lambda,
                seed: a.seed,
            };
            let candidates = generate(&state.model, &vocab, &prompt, &sel_cfg)?;
            let sel = select_best(&candidates, &state.model, &prompt, &sel_cfg)?;
            InferOutput {
                answer: sel.answer,
                score: sel.score,
                candidates: candidates.into_iter().map(|c| c.text).zip(sel.scores).collect(),
            }
        }
    };
    println!("{}", out.answer);
    if a.verbose {
        println!("score\t{:.6}", out.score);
        for (i, (text, s)) in out.candidates.iter().enumerate() {
            println!("candidate\t{i}\t{s:.6}\t{text}");
        }
    }
    if let Some(p) = &a.out {
        let json = serde_json::to_string_pretty(&out).map_err(ssmqa::Error::from)?;
        io(p, std::fs::write(p, json))?;
        let mut inputs: Vec<&Path> = vec![&a.checkpoint];
        inputs.extend(a.examples.as_deref());
        inputs.extend(a.prompt_template.as_deref());
        write_manifest(manifest("infer", None, &inputs, Some(a.seed))?, &[p], p)?;
    }
    Ok(())
}

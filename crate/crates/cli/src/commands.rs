use std::io::{Read, Write};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ote_core::data::{parse_conll, parse_conll_str, parse_plain_text, parse_semeval_str, parse_semeval_xml, write_conll, PretrainedEmbeddings};
use ote_core::evaluation::{
    export_embeddings, format_metrics, format_metrics_delta, nearest_neighbors, pca_project, predict_corpus, read_export,
    score_subsets, suffix_groups, write_export, EmbeddingSource,
};
use ote_core::iob::{encode as iob_encode, Tag};
use ote_core::model_io::{load_model, save_model, SavedModel};
use ote_core::numerics::Fault;
use ote_core::pipeline::{build_vocabularies, fit, fit_with_validation, init_model};
use ote_core::synthetic::gradcheck_fixture;
use ote_core::training::model_grad_check;
use ote_core::{Corpus, ModelConfig, ModelError, Split, SubsetSpec, TrainConfig, Variant};

use crate::grid;
use crate::{AnalyzeCmd, Cmd, EvalArgs, GradcheckArgs, GridArgs, InputFormat, TagArgs, TrainArgs, Training};

pub fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Train(a) => train(a),
        Cmd::Grid(a) => grid_search(a),
        Cmd::Tag(a) => tag(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Analyze(a) => analyze(a),
        Cmd::Gradcheck(a) => gradcheck(a),
    }
}

fn resolve(path: &Path, format: InputFormat) -> InputFormat {
    if format != InputFormat::Auto {
        return format;
    }
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("xml") => InputFormat::Xml,
        Some("txt") => InputFormat::Text,
        _ => InputFormat::Conll,
    }
}

/// Reads a corpus; `-` is standard input. Plain text carries no gold spans.
fn load_corpus(path: &Path, format: InputFormat, split: Split) -> Result<Corpus> {
    let format = resolve(path, format);
    if path == Path::new("-") {
        let mut text = String::new();
        std::io::stdin().read_to_string(&mut text).context("reading standard input")?;
        return Ok(match format {
            InputFormat::Xml => parse_semeval_str(&text, split)?,
            InputFormat::Conll => parse_conll_str(&text, split)?,
            _ => parse_plain_text(&text),
        });
    }
    Ok(match format {
        InputFormat::Xml => parse_semeval_xml(path, split)?,
        InputFormat::Text => {
            parse_plain_text(&std::fs::read_to_string(path).with_context(|| format!("{}", path.display()))?)
        }
        _ => parse_conll(path, split)?,
    })
}

fn load_gold(path: &Path, format: InputFormat, split: Split) -> Result<Corpus> {
    if resolve(path, format) == InputFormat::Text {
        bail!("{}: plain text has no gold annotations; use review XML or CoNLL", path.display());
    }
    load_corpus(path, format, split)
}

fn open_model(path: &Path) -> Result<SavedModel> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Writes to `path`, or standard output without one.
fn emit(path: Option<&Path>, contents: &str) -> Result<()> {
    match path {
        Some(p) => write_file(p, contents),
        None => {
            std::io::stdout().write_all(contents.as_bytes())?;
            Ok(())
        }
    }
}

fn train_config(t: &Training, patience: usize, val_fraction: f64, target_f1: Option<f64>) -> TrainConfig {
    TrainConfig {
        batch_size: t.batch_size,
        max_norm: t.max_norm,
        l2_coeff: t.l2,
        learning_rate: t.learning_rate,
        dropout_rate: t.dropout,
        max_epochs: t.max_epochs,
        patience,
        val_fraction,
        seed: t.seed,
        target_f1,
        ..TrainConfig::default()
    }
}

fn model_config(t: &Training, variant: Variant, hidden: usize, char_dim: usize) -> ModelConfig {
    ModelConfig {
        variant,
        word_dim: t.word_dim,
        hidden,
        char_dim,
        dropout: t.dropout,
        seed: t.seed,
        word_emb_trainable: !t.freeze_embeddings,
        ..ModelConfig::default()
    }
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let t = &a.training;
    let cfg = train_config(t, a.patience, a.val_fraction, a.target_f1);
    cfg.validate()?;
    let corpus = load_gold(&a.train, a.format, Split::Train)?;
    let validation = a.validation.as_deref().map(|p| load_gold(p, a.format, Split::Train)).transpose()?;
    let (words, chars) = build_vocabularies(&corpus, a.vocab)?;
    let model = init_model(model_config(t, a.variant, a.hidden, a.char_dim), &words, &chars, t.embeddings.as_deref())?;
    let start = Instant::now();
    let (saved, report) = match &validation {
        Some(v) => fit_with_validation(&corpus, v, words, chars, model, &cfg)?,
        None => fit(&corpus, words, chars, model, &cfg)?,
    };
    let model_path = a.model.clone().unwrap_or_else(|| t.out_dir.join("model.otem"));
    if let Some(dir) = model_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_model(&model_path, &saved).with_context(|| format!("writing {}", model_path.display()))?;
    let report_path = t.out_dir.join("train_report.tsv");
    write_file(&report_path, &format!("epoch\tloss\tval_f1\n{report}"))?;
    println!(
        "{} model: best validation F1 {:.4} at epoch {} of {} (stopped: {}, {:.1}s)",
        a.variant,
        report.best_val_f1,
        report.best_epoch,
        report.epochs.len(),
        report.stop_reason,
        start.elapsed().as_secs_f64()
    );
    println!("wrote {} and {}", model_path.display(), report_path.display());
    Ok(ExitCode::SUCCESS)
}

fn grid_search(a: GridArgs) -> Result<ExitCode> {
    let points = grid::enumerate(a.variant, &a.vocab, &a.hidden, &a.char_dim);
    if a.dry_run {
        println!("{} {} runs x {} folds", points.len(), a.variant, a.folds);
        for p in &points {
            println!("{p}");
        }
        return Ok(ExitCode::SUCCESS);
    }
    let t = &a.training;
    let cfg = train_config(t, t.max_epochs, TrainConfig::default().val_fraction, None);
    cfg.validate()?;
    let corpus = load_gold(&a.train, a.format, Split::Train)?;
    let base = model_config(t, a.variant, 0, 0);
    let mut rows = Vec::with_capacity(points.len());
    for (i, &p) in points.iter().enumerate() {
        let start = Instant::now();
        let row = grid::run_point(&corpus, p, &base, &cfg, a.folds, t.embeddings.as_deref())?;
        eprintln!(
            "[{}/{}] {p}\tmean F1 {:.4} (epoch {}, {:.0}s)",
            i + 1,
            points.len(),
            row.mean_f1,
            row.best_epoch,
            start.elapsed().as_secs_f64()
        );
        rows.push(row);
    }
    let table = grid::format_table(&grid::rank(rows));
    let out = a.out.clone().unwrap_or_else(|| t.out_dir.join("grid.tsv"));
    write_file(&out, &table)?;
    print!("{table}");
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn tag(a: TagArgs) -> Result<ExitCode> {
    let m = open_model(&a.model)?;
    let variant = m.params.config.variant;
    if let Some(want) = a.expect_variant.filter(|w| *w != variant) {
        return Err(ModelError::Capability(format!("{} is a {variant} model, but {want} was requested", a.model.display())).into());
    }
    let corpus = load_corpus(&a.input, a.format, Split::Test)?;
    let pred = predict_corpus(&m.params, &corpus, &m.words, &m.chars)?;
    let mut spans = String::new();
    for (s, p) in corpus.sentences.iter().zip(&pred) {
        for sp in p {
            spans.push_str(&format!("{}\t{}\t{}\t{}\n", s.id, sp.start, sp.end, s.surface(*sp)));
        }
    }
    emit(a.out.as_deref(), &spans)?;
    if let Some(path) = &a.conll {
        let tags: Vec<Vec<Tag>> = corpus
            .sentences
            .iter()
            .zip(&pred)
            .map(|(s, p)| iob_encode(s.len(), p))
            .collect::<Result<_, _>>()?;
        let pairs: Vec<_> = corpus.sentences.iter().zip(&tags).map(|(s, t)| (s, t.as_slice())).collect();
        write_file(path, &write_conll(&pairs))?;
    }
    log::info!("tagged {} sentences, {} spans", corpus.len(), pred.iter().map(Vec::len).sum::<usize>());
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let specs = match &a.subsets {
        Some(list) => list.split(',').map(|s| s.trim().parse()).collect::<Result<Vec<SubsetSpec>, _>>()?,
        None => SubsetSpec::standard(),
    };
    let m = open_model(&a.model)?;
    let gold = load_gold(&a.gold, a.format, Split::Test)?;
    // OOV subsets are defined by the first model's vocabulary so both
    // models are scored on the same sentences
    let score = |other: &SavedModel| -> Result<Vec<(SubsetSpec, ote_core::PRF)>> {
        let pred = predict_corpus(&other.params, &gold, &other.words, &other.chars)?;
        Ok(score_subsets(&gold, &m.words, &pred, &specs))
    };
    let first = score(&m)?;
    let table = match &a.compare {
        Some(path) => format_metrics_delta(&first, &score(&open_model(path)?)?),
        None => format_metrics(&first),
    };
    print!("{table}");
    if let Some(out) = &a.out {
        write_file(out, &table)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn analyze(cmd: AnalyzeCmd) -> Result<ExitCode> {
    match cmd {
        AnalyzeCmd::Neighbors(a) => {
            let space: Vec<(String, Vec<f32>)> = match (&a.model, &a.embeddings) {
                (Some(path), _) => model_space(&open_model(path)?, a.source, &a.word)?,
                (None, Some(path)) => {
                    if a.source != EmbeddingSource::Word {
                        bail!("--source charword needs --model");
                    }
                    PretrainedEmbeddings::read_file(path, None)?.entries
                }
                (None, None) => unreachable!("clap enforces one of --model/--embeddings"),
            };
            let query = if space.iter().any(|(t, _)| t == &a.word) { a.word.clone() } else { a.word.to_lowercase() };
            if !space.iter().any(|(t, _)| t == &query) {
                let closest = space
                    .iter()
                    .map(|(t, _)| (strsim::levenshtein(&query, t), t))
                    .min()
                    .map(|(_, t)| t.clone());
                match closest {
                    Some(c) => bail!("unknown word {:?}; closest known word: {c:?}", a.word),
                    None => bail!("unknown word {:?}; the embedding space is empty", a.word),
                }
            }
            let out: String = nearest_neighbors(&space, &query, a.k)?
                .iter()
                .map(|(t, c)| format!("{t}\t{c:.4}\n"))
                .collect();
            print!("{out}");
        }
        AnalyzeCmd::SuffixExport(a) => {
            let m = open_model(&a.model)?;
            let top: Vec<&String> = m.words.symbols().iter().take(a.top).collect();
            let tokens: Vec<(String, Option<String>)> = suffix_groups(&top, &a.suffixes.iter().collect::<Vec<_>>())
                .into_iter()
                .map(|(t, l)| (t, Some(l)))
                .collect();
            let rows = export_embeddings(&m.params, &m.words, &m.chars, &tokens, a.source)?;
            let mut buf = Vec::new();
            write_export(&rows, &mut buf)?;
            emit(a.out.as_deref(), &String::from_utf8(buf)?)?;
            log::info!("exported {} suffix-bearing words", rows.len());
        }
        AnalyzeCmd::Pca(a) => {
            let file = std::fs::File::open(&a.input).with_context(|| format!("{}", a.input.display()))?;
            let rows = read_export(std::io::BufReader::new(file))?;
            let vectors: Vec<Vec<f64>> = rows.iter().map(|r| r.vector.iter().map(|&v| v as f64).collect()).collect();
            let coords = pca_project(&vectors)?;
            let labeled = rows.iter().any(|r| r.label.is_some());
            let mut out = String::from(if labeled { "token\tlabel\tpc1\tpc2\n" } else { "token\tpc1\tpc2\n" });
            for (r, [x, y]) in rows.iter().zip(coords) {
                match (&r.label, labeled) {
                    (l, true) => out.push_str(&format!("{}\t{}\t{x:.6}\t{y:.6}\n", r.token, l.as_deref().unwrap_or(""))),
                    (_, false) => out.push_str(&format!("{}\t{x:.6}\t{y:.6}\n", r.token)),
                }
            }
            emit(a.out.as_deref(), &out)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Vocabulary words with their vectors. The character encoder can embed
/// any string, so with `charword` the query is added when missing.
fn model_space(m: &SavedModel, source: EmbeddingSource, query: &str) -> Result<Vec<(String, Vec<f32>)>> {
    let mut tokens: Vec<(String, Option<String>)> = m.words.symbols().iter().map(|w| (w.clone(), None)).collect();
    if source == EmbeddingSource::CharWord && !tokens.iter().any(|(t, _)| t == query) {
        tokens.push((query.to_string(), None));
    }
    let rows = export_embeddings(&m.params, &m.words, &m.chars, &tokens, source)?;
    Ok(rows.into_iter().map(|r| (r.token, r.vector)).collect())
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let start = Instant::now();
    let fault = a.inject_fault.then_some(Fault::SigmoidSignFlip);
    let mut failed = Vec::new();
    for variant in [Variant::WordOnly, Variant::CharWord] {
        let (mut m, batch) = gradcheck_fixture(variant, a.seed);
        let r = model_grad_check(&mut m, &batch, &TrainConfig::default(), fault)?;
        for p in &r.params {
            println!("{variant}\t{}\t{}\t{:.3e}", p.name, p.entries, p.max_rel_error);
        }
        let ok = r.max_rel_error < a.tolerance;
        println!(
            "{variant}: max relative error {:.3e} over {} parameter groups ({})",
            r.max_rel_error,
            r.params.len(),
            if ok { "ok" } else { "FAILED" }
        );
        if !ok {
            failed.push(format!("{variant} {}", r.worst_param.unwrap_or_default()));
        }
    }
    println!("{:.2}s", start.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed (tolerance {:e}) at: {}", a.tolerance, failed.join(", "));
        Ok(ExitCode::from(1))
    }
}

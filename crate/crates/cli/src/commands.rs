//! Subcommand bodies. Every JSON artifact carries the config fingerprint and
//! the global seed.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use chrono::DateTime;
use goalscan::corpus::{class_stats, load_corpus, split_by_report, ClassStats, Corpus, CorpusFormat};
use goalscan::evaluation::{evaluate, table_row, EvalSettings};
use goalscan::gateway::{
    load_scenario, ChatBackend, ChatSettings, EmbedBackend, Gateway, HashEmbedder, OpenAiBackend, ResponseCache,
    RetryPolicy,
};
use goalscan::matrix::{
    render_csv, render_table1_markdown, render_table2_markdown, run_matrix, MatrixInputs, MatrixPlan, MatrixResult,
    NamedInstruction,
};
use goalscan::prompting::{Instruction, InstructionOrigin};
use goalscan::selection::{build_index, EmbeddingIndex, SelectionContext, SelectionPolicy};
use goalscan::tuner::{render_evolution, write_events_jsonl, Clock, FixedClock, SystemClock, TuneResult, Tuner};
use goalscan::Execution;
use serde::{Deserialize, Serialize};

use crate::config::{ChatKind, EmbedKind, PolicyKind, RunConfig};
use crate::failure::{tune_kind, Failure, Kind};

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    config_fingerprint: String,
    seed: u64,
    #[serde(flatten)]
    body: T,
}

fn envelope<T>(config: &RunConfig, body: T) -> Envelope<T> {
    Envelope {
        config_fingerprint: config.fingerprint(),
        seed: config.seed,
        body,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| Failure::other(anyhow::Error::new(e).context(format!("writing {}", path.display()))))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(Failure::other)?;
    text.push('\n');
    write_file(path, text)
}

fn out(config: &RunConfig, name: &str) -> PathBuf {
    config.output_dir.join(name)
}

/// `SOURCE_DATE_EPOCH` pins every recorded timestamp.
fn clock() -> Result<Box<dyn Clock>, Failure> {
    match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(v) => {
            let secs: i64 = v
                .trim()
                .parse()
                .map_err(|_| Failure::config(anyhow::anyhow!("SOURCE_DATE_EPOCH is not an integer: {v}")))?;
            let t = DateTime::from_timestamp(secs, 0)
                .ok_or_else(|| Failure::config(anyhow::anyhow!("SOURCE_DATE_EPOCH out of range")))?;
            Ok(Box::new(FixedClock(t)))
        }
        Err(_) => Ok(Box::new(SystemClock)),
    }
}

/// Scripted scenarios may be order dependent, so they always run on one thread.
fn execution(config: &RunConfig) -> Execution {
    match config.backend.kind {
        ChatKind::Scripted => Execution::Sequential,
        ChatKind::Http => Execution::with_parallelism(config.parallelism),
    }
}

fn gateway(config: &RunConfig) -> Result<Gateway, Failure> {
    let b = &config.backend;
    let http = || -> Result<Arc<OpenAiBackend>, Failure> {
        let backend = OpenAiBackend::from_env(&b.base_url, &b.credential_env_var)?
            .with_retry(RetryPolicy {
                max_retries: b.retry_max,
                base_delay_ms: b.retry_base_delay_ms,
                ..RetryPolicy::default()
            })
            .with_parallelism(config.parallelism)
            .with_embedding_model(config.embedding.model.clone(), config.embedding.dim);
        Ok(Arc::new(backend))
    };
    let mut shared_http = None;
    let chat: Arc<dyn ChatBackend> = match b.kind {
        ChatKind::Http => {
            let h = http()?;
            shared_http = Some(h.clone());
            h
        }
        ChatKind::Scripted => {
            let path = b.scenario_path.as_deref().expect("validated");
            Arc::new(load_scenario(path)?)
        }
    };
    let embedder: Arc<dyn EmbedBackend> = match config.embedding.kind {
        EmbedKind::MockEmbed => Arc::new(HashEmbedder::new(config.embedding.dim)),
        EmbedKind::Http => match shared_http {
            Some(h) => h,
            None => http()?,
        },
    };
    let cache = match &b.cache_dir {
        Some(dir) => ResponseCache::on_disk(dir)
            .map_err(|e| Failure::config(anyhow::Error::new(e).context("opening cache dir")))?,
        None => ResponseCache::in_memory(),
    };
    Ok(Gateway::new(chat, embedder).with_cache(cache).with_settings(ChatSettings {
        model: config.model.clone(),
        temperature: config.temperature,
        ..ChatSettings::default()
    }))
}

fn load(path: &Path) -> Result<Corpus, Failure> {
    Ok(load_corpus(path, CorpusFormat::from_path(path))?)
}

/// Train and test sets from pre-split files or by splitting `corpus.path`.
fn load_sets(config: &RunConfig) -> Result<(Option<Corpus>, Option<Corpus>), Failure> {
    let c = &config.corpus;
    if c.train.is_some() || c.test.is_some() {
        let train = c.train.as_deref().map(load).transpose()?;
        let test = c.test.as_deref().map(load).transpose()?;
        return Ok((train, test));
    }
    match &c.path {
        Some(path) => {
            let corpus = load(path)?;
            let spec = c.split_spec(config.seed).map_err(Failure::config)?;
            let (train, test) = split_by_report(&corpus, &spec)?;
            Ok((Some(train), Some(test)))
        }
        None => Ok((None, None)),
    }
}

fn need(corpus: Option<Corpus>, key: &str) -> Result<Corpus, Failure> {
    corpus.ok_or_else(|| Failure::config(anyhow::anyhow!("{key} (or corpus.path with a split) is required")))
}

#[derive(Serialize)]
struct StatsView<'a> {
    name: &'a str,
    reports: usize,
    #[serde(flatten)]
    stats: ClassStats,
}

fn stats_view(corpus: &Corpus) -> StatsView<'_> {
    let stats = class_stats(corpus);
    StatsView {
        name: corpus.name(),
        reports: stats.per_report.len(),
        stats,
    }
}

pub fn split(config: &RunConfig) -> Result<(), Failure> {
    let path = config
        .corpus
        .path
        .as_deref()
        .ok_or_else(|| Failure::config(anyhow::anyhow!("corpus.path is required to split")))?;
    let corpus = load(path)?;
    let spec = config.corpus.split_spec(config.seed).map_err(Failure::config)?;
    let (train, test) = split_by_report(&corpus, &spec)?;
    train.write_jsonl(&out(config, "train.jsonl"))?;
    test.write_jsonl(&out(config, "test.jsonl"))?;

    #[derive(Serialize)]
    struct SplitStats<'a> {
        split: &'a goalscan::corpus::SplitSpec,
        train: StatsView<'a>,
        test: StatsView<'a>,
    }
    let (tr, te) = (stats_view(&train), stats_view(&test));
    println!(
        "train: {} passages from {} reports; test: {} passages from {} reports",
        tr.stats.total, tr.reports, te.stats.total, te.reports
    );
    write_json(
        &out(config, "stats.json"),
        &envelope(config, SplitStats { split: &spec, train: tr, test: te }),
    )
}

pub fn stats(config: &RunConfig) -> Result<(), Failure> {
    let c = &config.corpus;
    let mut corpora = Vec::new();
    for path in [&c.path, &c.train, &c.test].into_iter().flatten() {
        corpora.push(load(path)?);
    }
    if corpora.is_empty() {
        return Err(Failure::config(anyhow::anyhow!("no corpus configured")));
    }
    #[derive(Serialize)]
    struct Stats<'a> {
        corpora: Vec<StatsView<'a>>,
    }
    let value = envelope(config, Stats { corpora: corpora.iter().map(stats_view).collect() });
    let text = serde_json::to_string_pretty(&value).map_err(Failure::other)?;
    println!("{text}");
    write_file(&out(config, "stats.json"), text + "\n")
}

pub fn index(config: &RunConfig) -> Result<(), Failure> {
    let (train, _) = load_sets(config)?;
    let train = need(train, "corpus.train")?;
    let gw = gateway(config)?;
    let mut index = build_index(&train, &gw, execution(config))?;
    index.header.config_fingerprint = Some(config.fingerprint());
    let path = config.index.clone().unwrap_or_else(|| out(config, "index.jsonl"));
    index.write_jsonl(&path)?;
    println!("indexed {} passages into {}", index.len(), path.display());
    Ok(())
}

fn read_index(config: &RunConfig) -> Result<Option<EmbeddingIndex>, Failure> {
    config
        .index
        .as_deref()
        .map(|p| {
            if !p.exists() {
                return Err(Failure::config(anyhow::anyhow!("index {} does not exist", p.display())));
            }
            Ok(EmbeddingIndex::read_jsonl(p)?)
        })
        .transpose()
}

pub fn eval(config: &RunConfig) -> Result<(), Failure> {
    let policy = config.policy.resolve(config.policy.kind, config.seed).map_err(Failure::config)?;
    if matches!(policy, SelectionPolicy::Similar { .. }) && config.index.is_none() {
        return Err(Failure::new(
            Kind::Precondition,
            anyhow::anyhow!("the similar policy needs an embedding index; build one with `goalscan index` and pass --index"),
        ));
    }
    let instruction = config.instruction.load().map_err(Failure::config)?;
    let (train, test) = load_sets(config)?;
    let test = need(test, "corpus.test")?;
    let index = read_index(config)?;
    let gw = gateway(config)?;
    let exec = execution(config);
    let ctx = SelectionContext {
        gateway: &gw,
        index: index.as_ref(),
        train: train.as_ref(),
        exec,
    };
    let report = evaluate(&gw, &instruction, &policy, &test, &ctx, EvalSettings { repeats: config.repeats, exec })?;
    let row = table_row(policy.name(), &report.mean);

    #[derive(Serialize)]
    struct EvalOutput<'a> {
        model: &'a str,
        instruction: &'a Instruction,
        policy: &'a SelectionPolicy,
        dataset: &'a str,
        report: &'a goalscan::evaluation::EvalReport,
        row: &'a str,
    }
    write_json(
        &out(config, "eval_report.json"),
        &envelope(
            config,
            EvalOutput {
                model: &config.model,
                instruction: &instruction,
                policy: &policy,
                dataset: test.name(),
                report: &report,
                row: &row,
            },
        ),
    )?;
    write_file(&out(config, "eval_row.md"), format!("{row}\n"))?;
    println!("{row}");
    Ok(())
}

fn write_tune_artifacts(config: &RunConfig, dir: &Path, result: &TuneResult) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(Failure::other)?;
    write_file(&dir.join("tuned_instruction.txt"), &result.final_instruction.text)?;
    write_file(&dir.join("evolution.txt"), render_evolution(result))?;
    write_events_jsonl(&result.events, &dir.join("events.jsonl")).map_err(Failure::other)?;
    write_json(&dir.join("tune_result.json"), &envelope(config, result))
}

pub fn tune(config: &RunConfig) -> Result<(), Failure> {
    let instruction = config.instruction.load().map_err(Failure::config)?;
    let (train, _) = load_sets(config)?;
    let train = need(train, "corpus.train")?;
    let gw = gateway(config)?;
    let clock = clock()?;
    let outcome = Tuner::new(&gw, config.tuner.clone())
        .with_execution(execution(config))
        .with_clock(clock.as_ref())
        .tune(&instruction, &train);
    match outcome {
        Ok(result) => {
            write_tune_artifacts(config, &config.output_dir, &result)?;
            println!(
                "{} of {} candidates accepted; train F1 {:.4} -> {:.4}",
                result.accepted().count(),
                result.candidates_evaluated,
                result.initial_f1,
                result.final_train_f1
            );
            Ok(())
        }
        Err(abort) => {
            write_events_jsonl(&abort.events, &out(config, "events.jsonl")).map_err(Failure::other)?;
            write_file(&out(config, "TUNE_ABORTED"), format!("{}\n", abort))?;
            let kind = tune_kind(&abort.error);
            Err(Failure::new(kind, abort))
        }
    }
}

fn matrix_instruction(name: &str) -> Result<NamedInstruction, Failure> {
    Ok(match name {
        "simple" => NamedInstruction {
            name: "Simple".into(),
            instruction: Instruction::simple(),
        },
        "expert" => NamedInstruction {
            name: "Expert".into(),
            instruction: Instruction::expert(),
        },
        path => {
            let path = Path::new(path);
            let text = std::fs::read_to_string(path).map_err(Failure::config)?;
            NamedInstruction {
                name: path.file_stem().map_or_else(|| "custom".into(), |s| s.to_string_lossy().into_owned()),
                instruction: Instruction::new(text, InstructionOrigin::User).map_err(Failure::config)?,
            }
        }
    })
}

pub fn matrix(config: &RunConfig) -> Result<(), Failure> {
    let instructions = config
        .matrix
        .instructions
        .iter()
        .map(|n| matrix_instruction(n))
        .collect::<Result<Vec<_>, _>>()?;
    let strategies = config
        .matrix
        .strategies
        .iter()
        .map(|&k| config.policy.resolve(k, config.seed))
        .collect::<anyhow::Result<Vec<_>>>()
        .map_err(Failure::config)?;
    let (train, test) = load_sets(config)?;
    let train = need(train, "corpus.train")?;
    let test = need(test, "corpus.test")?;
    let gw = gateway(config)?;
    let exec = execution(config);
    let clock = clock()?;

    let mut index = read_index(config)?;
    if index.is_none() && config.matrix.strategies.contains(&PolicyKind::Similar) {
        // A failed build leaves the similar cells to fail individually.
        match build_index(&train, &gw, exec) {
            Ok(mut built) => {
                built.header.config_fingerprint = Some(config.fingerprint());
                built.write_jsonl(&out(config, "index.jsonl"))?;
                index = Some(built);
            }
            Err(e) => eprintln!("warning: index build failed: {e}"),
        }
    }

    let plan = MatrixPlan {
        instructions,
        strategies,
        tuning: config.matrix.tuning.clone(),
        eval: EvalSettings {
            repeats: config.repeats,
            exec,
        },
        tuner: config.tuner.clone(),
        config_fingerprint: config.fingerprint(),
    };
    let result = run_matrix(
        &plan,
        &MatrixInputs {
            gateway: &gw,
            train: &train,
            test: &test,
            index: index.as_ref(),
            clock: clock.as_ref(),
        },
    );

    for variant in &result.tuned {
        if let Ok(tuned) = &variant.outcome {
            let dir = out(config, "tuned").join(format!("{}-{}", variant.initial, variant.tuning.name()));
            write_tune_artifacts(config, &dir, tuned)?;
        }
    }
    write_json(&out(config, "matrix.json"), &envelope(config, &result))?;
    write_tables(config, &result)?;
    print!("{}\n{}", render_table1_markdown(&result), if result.tuning.is_empty() {
        String::new()
    } else {
        format!("\n{}", render_table2_markdown(&result))
    });

    let failed_tuning = result.tuned.iter().filter(|t| t.outcome.is_err()).count();
    if result.failed_cells() > 0 || failed_tuning > 0 {
        return Err(Failure::new(
            Kind::Partial,
            anyhow::anyhow!(
                "{} of {} cells failed ({} tuning runs failed)",
                result.failed_cells(),
                result.cells.len(),
                failed_tuning
            ),
        ));
    }
    Ok(())
}

fn write_tables(config: &RunConfig, result: &MatrixResult) -> Result<(), Failure> {
    write_file(&out(config, "table1.md"), render_table1_markdown(result))?;
    write_file(&out(config, "table1.csv"), render_csv(result, 1))?;
    if !result.tuning.is_empty() {
        write_file(&out(config, "table2.md"), render_table2_markdown(result))?;
        write_file(&out(config, "table2.csv"), render_csv(result, 2))?;
    }
    Ok(())
}

pub fn render(input: &Path, table: u8, csv: bool) -> Result<(), Failure> {
    let text = std::fs::read_to_string(input)
        .with_context(|| format!("reading {}", input.display()))
        .map_err(Failure::config)?;
    let parsed: Envelope<MatrixResult> = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", input.display()))
        .map_err(Failure::config)?;
    let result = parsed.body;
    let rendered = match (table, csv) {
        (_, true) => render_csv(&result, table),
        (1, false) => render_table1_markdown(&result),
        _ => render_table2_markdown(&result),
    };
    print!("{rendered}");
    Ok(())
}

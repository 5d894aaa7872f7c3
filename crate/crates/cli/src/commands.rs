//! Subcommand implementations and error classification.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use sgrag_core::answer::{
    append_transcript, ask, read_script, read_transcript, AnswerRecord, AskError,
    GenerationBackend, GenerationError, RemoteChatBackend, RemoteChatConfig, StubBackend,
    TranscriptRecord,
};
use sgrag_core::chunks::{
    build_chunks, read_chunk_dump, write_chunk_dump, ChunkError, KnowledgeChunk,
};
use sgrag_core::evaluation::{
    default_questions, read_questions, render_report, run_ablation, score_transcript, EvalError,
    Pipeline, QaItem, ReportRow,
};
use sgrag_core::prompt::{PromptError, PromptTemplate, DEFAULT_HEAD};
use sgrag_core::relation_model::{
    ModelWeights, PrototypeTable, RelationDims, RelationError, RelationModel,
};
use sgrag_core::scene_graph::{load_dataset, write_lines, SceneGraph, SceneGraphError};
use sgrag_core::util::sha256_hex;
use sgrag_core::vector_store::{
    index_chunks, load_index, save_index, EmbedError, Embedder, Index, IndexError,
    LocalHashEmbedder, RemoteEmbedder, RemoteEmbedderConfig,
};
use thiserror::Error;

use crate::config::{BackendKind, ConfigError, EmbedderKind, RelationSource, RunConfig, StubMode};
use crate::Command;

pub const INDEX_EXTENSION: &str = "sgidx";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Transport(String),
    #[error("{0}")]
    Internal(String),
    /// Already reported to the user; exit with this code.
    #[error("exit {0}")]
    Reported(u8),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Transport(_) => 4,
            CliError::Internal(_) => 5,
            CliError::Reported(c) => *c,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<SceneGraphError> for CliError {
    fn from(e: SceneGraphError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ChunkError> for CliError {
    fn from(e: ChunkError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<RelationError> for CliError {
    fn from(e: RelationError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::Io { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EmbedError> for CliError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::Transport(_) => CliError::Transport(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<IndexError> for CliError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::InvalidK => CliError::Usage(e.to_string()),
            IndexError::Embed {
                source: EmbedError::Transport(_),
                ..
            } => CliError::Transport(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<GenerationError> for CliError {
    fn from(e: GenerationError) -> Self {
        match e {
            GenerationError::Transport(_) => CliError::Transport(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<AskError> for CliError {
    fn from(e: AskError) -> Self {
        let message = e.to_string();
        let class = match e {
            AskError::InvalidK => CliError::Usage(String::new()),
            AskError::Index(inner) | AskError::Retrieve(inner) => inner.into(),
            AskError::Embed(inner) => inner.into(),
            AskError::Generate(inner) => inner.into(),
            AskError::Prompt(_) | AskError::Provenance(_) => CliError::Data(String::new()),
        };
        class.with_message(message)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidKValues(_) => CliError::Usage(e.to_string()),
            EvalError::Pool(_) => CliError::Internal(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl CliError {
    fn with_message(self, message: String) -> Self {
        match self {
            CliError::Usage(_) => CliError::Usage(message),
            CliError::Data(_) => CliError::Data(message),
            CliError::Transport(_) => CliError::Transport(message),
            CliError::Internal(_) => CliError::Internal(message),
            other => other,
        }
    }
}

fn write_failed(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("writing {}: {e}", path.display()))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))
}

fn require<'a, T>(value: &'a Option<T>, key: &str, command: &str) -> Result<&'a T, CliError> {
    value
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("`{command}` requires {key}")))
}

/// Writes `text` to `--output` or standard output. Dry runs never touch files.
fn emit(cfg: &RunConfig, text: &str) -> Result<(), CliError> {
    match &cfg.output {
        Some(path) if cfg.dry_run => {
            info!(
                "dry run: would write {} bytes to {}",
                text.len(),
                path.display()
            );
            Ok(())
        }
        Some(path) => fs::write(path, text).map_err(|e| write_failed(path, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| CliError::Internal(e.to_string()))
        }
    }
}

fn write_file(cfg: &RunConfig, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if cfg.dry_run {
        info!(
            "dry run: would write {} bytes to {}",
            bytes.len(),
            path.display()
        );
        return Ok(());
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| write_failed(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| write_failed(path, e))
}

/// File-system-safe stem for an image id.
pub fn sanitize_id(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn index_file(dir: &Path, image_id: &str) -> PathBuf {
    dir.join(format!("{}.{INDEX_EXTENSION}", sanitize_id(image_id)))
}

fn relation_model(cfg: &RunConfig, graphs: &[SceneGraph]) -> Result<RelationModel, CliError> {
    let entities: BTreeSet<String> = graphs.iter().flat_map(|g| g.categories()).collect();
    let predicates: BTreeSet<String> = graphs.iter().flat_map(|g| g.predicates()).collect();
    if predicates.is_empty() {
        return Err(RelationError::EmptyPredicates.into());
    }
    let weights = match &cfg.weights {
        Some(path) => {
            let w = ModelWeights::read_text(open(path)?)?;
            w.validate()?;
            Some(w)
        }
        None => None,
    };
    let prototypes = match &cfg.prototypes {
        Some(path) => Some(PrototypeTable::from_word_vectors(
            open(path)?,
            entities.iter().map(String::as_str),
            predicates.iter().map(String::as_str),
        )?),
        None => None,
    };
    let d_t = weights
        .as_ref()
        .map(|w| w.dims().d_t)
        .or_else(|| prototypes.as_ref().map(PrototypeTable::dim))
        .unwrap_or(RelationDims::default().d_t);
    let dims = weights
        .as_ref()
        .map(ModelWeights::dims)
        .unwrap_or(RelationDims {
            d_t,
            ..RelationDims::default()
        });
    let seeded = RelationModel::seeded(
        dims,
        entities.iter().map(String::as_str),
        predicates.iter().map(String::as_str),
        cfg.seed,
    );
    let prototypes = prototypes.unwrap_or(seeded.prototypes);
    if prototypes.dim() != dims.d_t {
        return Err(CliError::Data(format!(
            "prototype width {} does not match weight width d_t = {}",
            prototypes.dim(),
            dims.d_t
        )));
    }
    Ok(RelationModel {
        weights: weights.unwrap_or(seeded.weights),
        prototypes,
        seed: cfg.seed,
    })
}

/// Loads, score-filters and (optionally) relation-infers the dataset.
pub fn load_graphs(cfg: &RunConfig, command: &str) -> Result<Vec<SceneGraph>, CliError> {
    let path = require(&cfg.dataset, "--dataset", command)?;
    let mut graphs: Vec<SceneGraph> = load_dataset(path, cfg.format, cfg.adapter)?
        .iter()
        .map(|g| g.filter_by_score(cfg.min_score))
        .collect();
    let mut seen = BTreeSet::new();
    for g in &graphs {
        if !seen.insert(g.image_id().to_string()) {
            return Err(CliError::Data(format!(
                "duplicate image id `{}` in dataset",
                g.image_id()
            )));
        }
    }
    if cfg.relation_model == RelationSource::PenetToy {
        let model = relation_model(cfg, &graphs)?;
        graphs = graphs
            .iter()
            .map(|g| {
                let inferred = model.infer_relations(g, cfg.relation_threshold)?;
                info!("{}: inferred {} relations", g.image_id(), inferred.len());
                Ok(g.with_relations(inferred)?)
            })
            .collect::<Result<_, CliError>>()?;
    }
    info!("loaded {} scene graphs", graphs.len());
    Ok(graphs)
}

pub fn make_embedder(cfg: &RunConfig) -> Result<Box<dyn Embedder>, CliError> {
    match cfg.embedder {
        EmbedderKind::Local => Ok(Box::new(LocalHashEmbedder::new(cfg.embed_dim))),
        EmbedderKind::Remote => {
            let mut rc = RemoteEmbedderConfig::new(
                cfg.embed_url.clone().unwrap_or_default(),
                cfg.embed_model.clone().unwrap_or_default(),
            );
            rc.api_key = cfg.embed_api_key.clone();
            rc.timeout = cfg.embed_timeout;
            rc.max_in_flight = cfg.max_in_flight;
            Ok(Box::new(RemoteEmbedder::new(rc)?))
        }
    }
}

pub fn make_backend(cfg: &RunConfig) -> Result<Box<dyn GenerationBackend>, CliError> {
    if cfg.dry_run {
        return Ok(Box::new(StubBackend::EchoFirstContextLine));
    }
    match cfg.backend {
        BackendKind::Stub => Ok(Box::new(match cfg.stub_mode {
            StubMode::Echo => StubBackend::EchoFirstContextLine,
            StubMode::Template => StubBackend::TemplateFill,
            StubMode::Scripted => {
                let path = require(&cfg.stub_script, "--stub-script", "scripted stub")?;
                StubBackend::Scripted(read_script(open(path)?).map_err(CliError::Data)?)
            }
        })),
        BackendKind::Remote => {
            let mut rc = RemoteChatConfig::new(cfg.llm_url.clone().unwrap_or_default());
            rc.model = cfg.llm_model.clone();
            rc.api_key = cfg.llm_api_key.clone();
            rc.temperature = cfg.temperature;
            rc.max_tokens = cfg.max_tokens;
            rc.timeout = cfg.llm_timeout;
            rc.max_in_flight = cfg.max_in_flight;
            Ok(Box::new(RemoteChatBackend::new(rc)?))
        }
    }
}

pub fn make_template(cfg: &RunConfig) -> Result<PromptTemplate, CliError> {
    Ok(match &cfg.prompt_head {
        Some(path) => PromptTemplate::from_file(path)?,
        None => PromptTemplate::new(DEFAULT_HEAD)?,
    })
}

fn pool(cfg: &RunConfig) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| CliError::Internal(format!("could not start worker pool: {e}")))
}

fn read_question_file(path: &Path) -> Result<Vec<QaItem>, CliError> {
    Ok(read_questions(open(path)?)?)
}

pub fn run(command: &Command, cfg: &RunConfig) -> Result<(), CliError> {
    match command {
        Command::Ingest { .. } => ingest(cfg),
        Command::Chunk { .. } => chunk(cfg),
        Command::Index { .. } => index(cfg),
        Command::Ask { .. } => ask_command(cfg),
        Command::Eval { .. } => eval(cfg),
        Command::Ablate { .. } => ablate(cfg),
        Command::Report { .. } => report(cfg),
    }
}

fn ingest(cfg: &RunConfig) -> Result<(), CliError> {
    let graphs = load_graphs(cfg, "ingest")?;
    let mut buf = Vec::new();
    write_lines(&graphs, &mut buf).map_err(|e| CliError::Internal(e.to_string()))?;
    emit(
        cfg,
        &String::from_utf8(buf).map_err(|e| CliError::Internal(e.to_string()))?,
    )
}

fn all_chunks(graphs: &[SceneGraph]) -> Vec<KnowledgeChunk> {
    graphs.iter().flat_map(build_chunks).collect()
}

fn chunk(cfg: &RunConfig) -> Result<(), CliError> {
    let graphs = load_graphs(cfg, "chunk")?;
    let chunks = all_chunks(&graphs);
    let mut buf = Vec::new();
    write_chunk_dump(&chunks, &mut buf).map_err(|e| CliError::Internal(e.to_string()))?;
    info!("built {} chunks from {} images", chunks.len(), graphs.len());
    emit(
        cfg,
        &String::from_utf8(buf).map_err(|e| CliError::Internal(e.to_string()))?,
    )
}

fn index(cfg: &RunConfig) -> Result<(), CliError> {
    let target = require(&cfg.index, "--index", "index")?;
    let chunks = match &cfg.chunks {
        Some(path) => read_chunk_dump(open(path)?)?,
        None => all_chunks(&load_graphs(cfg, "index")?),
    };
    let embedder = make_embedder(cfg)?;
    if cfg.corpus {
        let idx = index_chunks(&chunks, true, embedder.as_ref())?;
        if !cfg.dry_run {
            save_index(&idx, target)?;
        }
        println!("{}\t{}", target.display(), idx.len());
        return Ok(());
    }
    let mut by_image: BTreeMap<&str, Vec<KnowledgeChunk>> = BTreeMap::new();
    for c in &chunks {
        by_image
            .entry(c.image_id.as_str())
            .or_default()
            .push(c.clone());
    }
    let built = pool(cfg)?.install(|| {
        by_image
            .par_iter()
            .map(|(id, cs)| index_chunks(cs, false, embedder.as_ref()).map(|idx| (*id, idx)))
            .collect::<Result<Vec<_>, _>>()
    })?;
    if !cfg.dry_run {
        fs::create_dir_all(target).map_err(|e| write_failed(target, e))?;
    }
    for (id, idx) in &built {
        let path = index_file(target, id);
        if !cfg.dry_run {
            save_index(idx, &path)?;
        }
        println!("{}\t{}", path.display(), idx.len());
    }
    Ok(())
}

/// Where `ask` finds the index for an image.
enum IndexSource {
    Pooled(Index),
    Directory(PathBuf),
    Dataset(BTreeMap<String, SceneGraph>),
}

impl IndexSource {
    fn resolve(
        &self,
        image_id: &str,
        embedder: &dyn Embedder,
    ) -> Result<std::borrow::Cow<'_, Index>, CliError> {
        use std::borrow::Cow;
        match self {
            IndexSource::Pooled(idx) => Ok(Cow::Borrowed(idx)),
            IndexSource::Directory(dir) => {
                let path = index_file(dir, image_id);
                if !path.is_file() {
                    return Err(CliError::Data(format!(
                        "no index for image `{image_id}` at {}",
                        path.display()
                    )));
                }
                Ok(Cow::Owned(load_index(&path)?))
            }
            IndexSource::Dataset(graphs) => {
                let graph = graphs.get(image_id).ok_or_else(|| {
                    CliError::Data(format!("image `{image_id}` is not in the dataset"))
                })?;
                Ok(Cow::Owned(index_chunks(
                    &build_chunks(graph),
                    false,
                    embedder,
                )?))
            }
        }
    }
}

fn ask_command(cfg: &RunConfig) -> Result<(), CliError> {
    let items: Vec<QaItem> = match (&cfg.questions, &cfg.image, &cfg.question) {
        (Some(path), None, None) => read_question_file(path)?,
        (None, Some(image), Some(question)) => vec![QaItem {
            image_id: image.clone(),
            question: question.clone(),
            focus_categories: vec![],
            answers: None,
        }],
        _ => {
            return Err(CliError::Usage(
                "`ask` requires either --image with --question, or --questions".to_string(),
            ))
        }
    };
    let single = cfg.questions.is_none();
    let source = match (&cfg.index, cfg.corpus) {
        (Some(path), true) => IndexSource::Pooled(load_index(path)?),
        (Some(dir), false) => IndexSource::Directory(dir.clone()),
        (None, true) => {
            let graphs = load_graphs(cfg, "ask")?;
            IndexSource::Pooled(index_chunks(
                &all_chunks(&graphs),
                true,
                make_embedder(cfg)?.as_ref(),
            )?)
        }
        (None, false) => IndexSource::Dataset(
            load_graphs(cfg, "ask")?
                .into_iter()
                .map(|g| (g.image_id().to_string(), g))
                .collect(),
        ),
    };
    let embedder = make_embedder(cfg)?;
    let backend = make_backend(cfg)?;
    let template = make_template(cfg)?;

    let answer_one = |item: &QaItem| -> Result<AnswerRecord, CliError> {
        let index = source.resolve(&item.image_id, embedder.as_ref())?;
        Ok(ask(
            &index,
            &item.question,
            cfg.k,
            &template,
            embedder.as_ref(),
            backend.as_ref(),
        )?)
    };
    let results: Vec<Result<AnswerRecord, CliError>> =
        pool(cfg)?.install(|| items.par_iter().map(answer_one).collect());

    let mut records = Vec::new();
    let mut stdout = String::new();
    let mut first_error = None;
    for (item, result) in items.iter().zip(results) {
        match result {
            Ok(record) => {
                if let Some(dir) = &cfg.dump_prompts {
                    let sha = sha256_hex(&record.prompt.text);
                    let path = dir.join(format!(
                        "{}-{}.txt",
                        sanitize_id(&item.image_id),
                        &sha[..12]
                    ));
                    write_file(cfg, &path, record.prompt.text.as_bytes())?;
                }
                if single {
                    stdout.push_str(&record.answer_text);
                    stdout.push('\n');
                } else {
                    stdout.push_str(&format!(
                        "{}\t{}\n",
                        item.image_id,
                        record.answer_text.replace('\n', " ")
                    ));
                }
                if record.refused {
                    warn!("{}: backend returned an empty answer", item.image_id);
                }
                records.push(TranscriptRecord::from_answer(&item.image_id, &record));
            }
            Err(e) if single => return Err(e),
            Err(e) => {
                warn!("{}: {e}", item.image_id);
                first_error.get_or_insert(e);
            }
        }
    }
    if let Some(path) = &cfg.transcript {
        if cfg.dry_run {
            info!(
                "dry run: would append {} records to {}",
                records.len(),
                path.display()
            );
        } else {
            append_transcript(path, &records).map_err(|e| write_failed(path, e))?;
        }
    }
    emit(cfg, &stdout)?;
    match first_error {
        Some(e) if records.is_empty() => Err(e),
        Some(_) => {
            warn!(
                "{} of {} questions failed",
                items.len() - records.len(),
                items.len()
            );
            Ok(())
        }
        None => Ok(()),
    }
}

fn write_scores(cfg: &RunConfig, rows: &[ReportRow]) -> Result<(), CliError> {
    if let Some(path) = &cfg.scores_output {
        let json =
            serde_json::to_string_pretty(rows).map_err(|e| CliError::Internal(e.to_string()))?;
        write_file(cfg, path, format!("{json}\n").as_bytes())?;
    }
    Ok(())
}

fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let graphs = load_graphs(cfg, "eval")?;
    let path = require(&cfg.transcript, "--transcript", "eval")?;
    let records = read_transcript(open(path)?).map_err(CliError::Data)?;
    let questions = match &cfg.questions {
        Some(p) => read_question_file(p)?,
        None => Vec::new(),
    };
    let summary = score_transcript(&graphs, &records, &questions)?;
    let backends: BTreeSet<&str> = records.iter().map(|r| r.backend.as_str()).collect();
    let method = if backends.is_empty() {
        "transcript".to_string()
    } else {
        backends.into_iter().collect::<Vec<_>>().join("+")
    };
    let rows = vec![ReportRow {
        method,
        scores: summary.scores,
        evaluated: summary.evaluated,
        failures: 0,
    }];
    if let Some(acc) = summary.vqa_accuracy {
        eprintln!(
            "vqa accuracy: {acc:.4} over {} answers",
            summary.vqa_evaluated
        );
    }
    write_scores(cfg, &rows)?;
    emit(cfg, &render_report(&rows, cfg.out_format))
}

fn ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let graphs = load_graphs(cfg, "ablate")?;
    let questions = match &cfg.questions {
        Some(p) => read_question_file(p)?,
        None => default_questions(&graphs),
    };
    let embedder = make_embedder(cfg)?;
    let backend = make_backend(cfg)?;
    let template = make_template(cfg)?;
    let pipeline = Pipeline {
        embedder: embedder.as_ref(),
        backend: backend.as_ref(),
        template: &template,
        jobs: cfg.jobs,
    };
    let ablation = run_ablation(&graphs, &questions, &cfg.k_values, &pipeline)?;
    for row in &ablation {
        if row.failures > 0 {
            eprintln!(
                "k={}: {} of {} questions failed",
                row.k,
                row.failures,
                row.failures + row.evaluated
            );
        }
    }
    if ablation.iter().all(|r| r.evaluated == 0) && !questions.is_empty() {
        return Err(CliError::Data(
            "every question failed; see the log for causes".to_string(),
        ));
    }
    let rows: Vec<ReportRow> = ablation.iter().map(ReportRow::from_ablation).collect();
    write_scores(cfg, &rows)?;
    emit(cfg, &render_report(&rows, cfg.out_format))
}

fn report(cfg: &RunConfig) -> Result<(), CliError> {
    let path = require(&cfg.scores, "--scores", "report")?;
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
    let rows: Vec<ReportRow> = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    emit(cfg, &render_report(&rows, cfg.out_format))
}

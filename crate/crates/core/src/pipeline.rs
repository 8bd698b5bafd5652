//! End-to-end runs: tokenizer, bi-encoder training, indexing, retrieval and
//! evaluation, plus the pooling × entity-type × metric grid.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::bpe::{train_bpe, Vocabulary};
use crate::corpus::{Corpus, EntityType, TypeScheme};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::{build_report, EvalReport, ReportSettings};
use crate::pooling::PoolingKind;
use crate::retrieval::{build_indices, retrieve_mentions, EmbeddingIndex, Metric, RetrievalResult};
use crate::train::{train, BiEncoder, BiEncoderConfig, TrainConfig, TrainLog};

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Layout of both encoders; `vocab_size` is taken from the tokenizer.
    pub encoder: EncoderConfig,
    pub bpe_vocab_size: usize,
    pub pooling: PoolingKind,
    pub metric: Metric,
    pub use_entity_type: bool,
    pub train: TrainConfig,
    pub k_grid: Vec<usize>,
    /// Seeds both encoder initialisation and batch shuffling.
    pub seed: u64,
}

impl PipelineConfig {
    /// Desk-scale model for the toy corpus: D=64, L=2, n=32, 30 epochs.
    pub fn toy() -> Self {
        PipelineConfig {
            encoder: EncoderConfig::desk(0),
            bpe_vocab_size: 400,
            pooling: PoolingKind::Cls,
            metric: Metric::Dot,
            use_entity_type: false,
            train: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
            k_grid: vec![1, 5, 10, 25, 50, 64],
            seed: 0,
        }
    }

    pub fn model_config(&self, vocab: &Vocabulary) -> BiEncoderConfig {
        let encoder = EncoderConfig {
            vocab_size: vocab.len(),
            seed: self.seed,
            ..self.encoder
        };
        BiEncoderConfig::new(encoder, self.pooling, self.use_entity_type)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }
}

/// Titles, descriptions and context documents of every world.
pub fn tokenizer_texts(corpus: &Corpus) -> Vec<String> {
    let mut texts = Vec::new();
    for w in corpus.worlds() {
        for e in w.entities() {
            texts.push(e.title.clone());
            texts.push(e.description.clone());
        }
        texts.extend(w.extra_documents().map(|(_, t)| t.to_string()));
    }
    texts
}

pub fn train_vocabulary(corpus: &Corpus, target_size: usize) -> Result<Vocabulary> {
    train_bpe(tokenizer_texts(corpus), target_size, &TypeScheme::default())
}

pub fn train_model(corpus: &Corpus, mention_set: &str, vocab: &Vocabulary, cfg: &PipelineConfig) -> Result<(BiEncoder, TrainLog)> {
    let mut model = BiEncoder::new(cfg.model_config(vocab))?;
    let log = train(&mut model, corpus, mention_set, vocab, &cfg.train_config())?;
    Ok((model, log))
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub indices: BTreeMap<String, EmbeddingIndex>,
    pub results: Vec<RetrievalResult>,
    pub report: EvalReport,
}

/// Indexes every world touched by `mention_set`, retrieves up to the largest
/// K of the grid, and aggregates.
pub fn evaluate(
    corpus: &Corpus,
    mention_set: &str,
    vocab: &Vocabulary,
    model: &BiEncoder,
    metric: Metric,
    k_grid: &[usize],
) -> Result<Evaluation> {
    let mentions = corpus
        .mentions(mention_set)
        .ok_or_else(|| Error::Validation(format!("no mention set named {mention_set}")))?;
    let k = k_grid.iter().copied().max().ok_or_else(|| Error::Config("empty K grid".into()))?;
    let indices = build_indices(corpus, mentions, model, vocab, metric)?;
    let results = retrieve_mentions(corpus, mentions, &indices, model, vocab, k)?;
    let settings = ReportSettings {
        k_grid: k_grid.to_vec(),
        ..ReportSettings::new(metric, model.config.pooling, model.config.template.use_entity_type)
    };
    let report = build_report(&results, mentions, settings)?;
    Ok(Evaluation { indices, results, report })
}

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub vocab: Vocabulary,
    pub model: BiEncoder,
    pub log: TrainLog,
    pub evaluation: Evaluation,
}

/// Tokenizer, training on `train_set`, and evaluation on `eval_set`.
pub fn run_pipeline(corpus: &Corpus, train_set: &str, eval_set: &str, cfg: &PipelineConfig) -> Result<PipelineRun> {
    let vocab = train_vocabulary(corpus, cfg.bpe_vocab_size)?;
    let (model, log) = train_model(corpus, train_set, &vocab, cfg)?;
    let evaluation = evaluate(corpus, eval_set, &vocab, &model, cfg.metric, &cfg.k_grid)?;
    Ok(PipelineRun { vocab, model, log, evaluation })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentGrid {
    pub poolings: Vec<PoolingKind>,
    pub metrics: Vec<Metric>,
    pub entity_types: Vec<bool>,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        ExperimentGrid {
            poolings: PoolingKind::ALL.to_vec(),
            metrics: Metric::ALL.to_vec(),
            entity_types: vec![false, true],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRow {
    pub pooling: PoolingKind,
    pub entity_types: bool,
    pub metric: Metric,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentTable {
    pub k_grid: Vec<usize>,
    pub rows: Vec<ExperimentRow>,
}

impl ExperimentTable {
    pub fn row(&self, pooling: PoolingKind, entity_types: bool, metric: Metric) -> Option<&ExperimentRow> {
        self.rows
            .iter()
            .find(|r| r.pooling == pooling && r.entity_types == entity_types && r.metric == metric)
    }

    /// One row per configuration with micro accuracy at each K.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("pooling\tentity_types\tmetric\tmentions");
        for k in &self.k_grid {
            let _ = write!(out, "\tacc@{k}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{}\t{}\t{}\t{}",
                r.pooling,
                if r.entity_types { "on" } else { "off" },
                r.metric,
                r.report.mention_count
            );
            for k in &self.k_grid {
                let _ = write!(out, "\t{:.4}", r.report.micro[k]);
            }
            out.push('\n');
        }
        out
    }
}

/// Trains one model per (pooling, entity types) cell and evaluates it under
/// every metric. `types` supplies annotations for the typed cells.
pub fn run_experiment(
    corpus: &Corpus,
    types: Option<&HashMap<String, EntityType>>,
    train_set: &str,
    eval_set: &str,
    grid: &ExperimentGrid,
    base: &PipelineConfig,
) -> Result<ExperimentTable> {
    if grid.poolings.is_empty() || grid.metrics.is_empty() || grid.entity_types.is_empty() {
        return Err(Error::Config("experiment grid has an empty axis".into()));
    }
    if grid.entity_types.contains(&true) && types.is_none() {
        return Err(Error::Config("typed cells need entity type annotations".into()));
    }
    let vocab = train_vocabulary(corpus, base.bpe_vocab_size)?;
    let mut typed = corpus.clone();
    let mut untyped = corpus.clone();
    if let Some(t) = types {
        typed.apply_type_annotations(t);
    }
    untyped.clear_type_annotations();
    let cells: Vec<(PoolingKind, bool)> = grid
        .entity_types
        .iter()
        .flat_map(|&t| grid.poolings.iter().map(move |&p| (p, t)))
        .collect();
    let per_cell: Vec<Vec<ExperimentRow>> = cells
        .par_iter()
        .map(|&(pooling, entity_types)| {
            let c = if entity_types { &typed } else { &untyped };
            let cfg = PipelineConfig {
                pooling,
                use_entity_type: entity_types,
                ..base.clone()
            };
            let (model, log) = train_model(c, train_set, &vocab, &cfg)?;
            log::info!(
                "{pooling} types={entity_types}: final loss {:.4}",
                log.epochs.last().map_or(f64::NAN, |e| e.mean_loss)
            );
            grid.metrics
                .iter()
                .map(|&metric| {
                    let eval = evaluate(c, eval_set, &vocab, &model, metric, &base.k_grid)?;
                    Ok(ExperimentRow {
                        pooling,
                        entity_types,
                        metric,
                        report: eval.report,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut k_grid = base.k_grid.clone();
    k_grid.sort_unstable();
    k_grid.dedup();
    Ok(ExperimentTable {
        k_grid,
        rows: per_cell.into_iter().flatten().collect(),
    })
}

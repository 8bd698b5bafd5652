//! `candgen`: tokenizer training, bi-encoder training, entity indexing,
//! retrieval, evaluation and the ablation grid, composed through files.

mod manifest;
mod settings;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use candgen::bpe::{train_bpe, Vocabulary};
use candgen::corpus::{load_entity_type_annotations, write_entity_type_annotations, Corpus, TypeScheme};
use candgen::encoder::EncoderConfig;
use candgen::evaluation::{build_report, ReportSettings};
use candgen::pipeline::{run_experiment, tokenizer_texts, ExperimentGrid, PipelineConfig};
use candgen::pooling::PoolingKind;
use candgen::retrieval::{build_index, read_results, write_results, EmbeddingIndex, Metric};
use candgen::synthetic::{synthetic_corpus, SyntheticConfig};
use candgen::train::{train, BiEncoder, BiEncoderConfig, TrainConfig};
use candgen::template::{build_mention_sequence, TemplateConfig};

use manifest::{Manifest, MANIFEST_SUFFIX};
use settings::{List, Settings, Switch};

#[derive(Parser, Debug)]
#[command(name = "candgen", version, about = "Dense bi-encoder candidate generation for entity linking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat key=value file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for embedding and retrieval (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long)]
    pooling: Option<PoolingKind>,
    /// Entity-type annotation sidecar (`id<TAB>type`), or `off`.
    #[arg(long)]
    entity_types: Option<String>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the seeded synthetic corpus and its type sidecar.
    MakeToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        entities: Option<usize>,
        #[arg(long)]
        mentions: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Learn a BPE vocabulary from titles, descriptions and context pages.
    TrainBpe {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train mention and entity encoders with in-batch negatives.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        mention_set: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Embed entity dictionaries into per-world indexes.
    Embed {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Index only the worlds this mention set touches.
        #[arg(long)]
        mention_set: Option<String>,
        #[arg(long)]
        metric: Option<Metric>,
        #[arg(long)]
        entity_types: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Retrieve top-K entities for every mention of a set.
    Retrieve {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        mention_set: Option<String>,
        /// Defaults to min(64, world size).
        #[arg(long)]
        k: Option<usize>,
        /// Defaults to the metric stored with the index.
        #[arg(long)]
        metric: Option<Metric>,
        #[arg(long)]
        entity_types: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Top-K accuracy of retrieval results, overall and per world.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        mention_set: Option<String>,
        #[arg(long)]
        k_grid: Option<List<usize>>,
        /// Output prefix for `.report`, `.curve.tsv` and `.txt`.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Pooling × entity types × metric comparison table.
    Experiment {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        mention_set: Option<String>,
        #[arg(long)]
        eval_set: Option<String>,
        #[arg(long)]
        poolings: Option<List<PoolingKind>>,
        #[arg(long)]
        metrics: Option<List<Metric>>,
        /// Entity-type settings to sweep, e.g. `off,on`.
        #[arg(long)]
        types: Option<List<Switch>>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        k_grid: Option<List<usize>>,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn init_threads(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring the worker pool")
}

/// Loaded corpus and whether entity types were applied.
fn load_corpus(dir: &Path, types: &Option<PathBuf>, manifest: &mut Manifest) -> Result<(Corpus, bool)> {
    let mut corpus = Corpus::load_dir(dir).with_context(|| format!("loading corpus {}", dir.display()))?;
    manifest.input("corpus", dir)?;
    match types {
        Some(path) => {
            let ann = load_entity_type_annotations(path, &TypeScheme::default())?;
            manifest.input("entity-types", path)?;
            corpus.apply_type_annotations(&ann);
            Ok((corpus, true))
        }
        None => Ok((corpus, false)),
    }
}

/// `off` or a sidecar path, from flag then config.
fn entity_types(settings: &mut Settings, flag: Option<String>) -> Result<Option<PathBuf>> {
    let raw = settings.get_opt::<String>("entity-types", flag)?;
    let path = match raw.as_deref() {
        None | Some("off") => None,
        Some(p) => Some(PathBuf::from(p)),
    };
    settings.note("entity-types", if path.is_some() { "on" } else { "off" });
    Ok(path)
}

fn model_config(settings: &mut Settings, m: &ModelArgs, vocab_size: usize, use_types: bool) -> Result<(BiEncoderConfig, TrainConfig)> {
    let desk = EncoderConfig::desk(vocab_size);
    let defaults = TrainConfig::default();
    let seed = settings.get("seed", m.seed, 0u64)?;
    let encoder = EncoderConfig {
        hidden: settings.get("hidden", m.hidden, desk.hidden)?,
        layers: settings.get("layers", m.layers, desk.layers)?,
        heads: settings.get("heads", m.heads, desk.heads)?,
        ff_dim: settings.get("ff-dim", m.ff_dim, desk.ff_dim)?,
        max_len: settings.get("max-len", m.max_len, desk.max_len)?,
        vocab_size,
        dropout: settings.get("dropout", m.dropout, desk.dropout)?,
        seed,
    };
    let pooling = settings.get("pooling", m.pooling, PoolingKind::Cls)?;
    let train_cfg = TrainConfig {
        batch_size: settings.get("batch-size", m.batch_size, defaults.batch_size)?,
        epochs: settings.get("epochs", m.epochs, defaults.epochs)?,
        learning_rate: settings.get("lr", m.lr, defaults.learning_rate)?,
        weight_decay: settings.get("weight-decay", m.weight_decay, defaults.weight_decay)?,
        seed,
        ..defaults
    };
    Ok((BiEncoderConfig::new(encoder, pooling, use_types), train_cfg))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeToy { out, seed, entities, mentions, common } => {
            let mut s = Settings::load(common.config.as_deref())?;
            let d = SyntheticConfig::default();
            let cfg = SyntheticConfig {
                seed: s.get("seed", seed, d.seed)?,
                entities: s.get("entities", entities, d.entities)?,
                mentions: s.get("mentions", mentions, d.mentions)?,
                ..d
            };
            let toy = synthetic_corpus(&cfg)?;
            toy.corpus.write_dir(&out)?;
            write_entity_type_annotations(out.join("types.tsv"), &toy.types)?;
            Manifest::new("make-toy", s.resolved()).write(&out.join(MANIFEST_SUFFIX))?;
            println!("wrote toy corpus to {}", out.display());
        }
        Command::TrainBpe { corpus, vocab_size, out, common } => {
            let mut s = Settings::load(common.config.as_deref())?;
            let size = s.get("vocab-size", vocab_size, 1000usize)?;
            let mut m = Manifest::default();
            let (c, _) = load_corpus(&corpus, &None, &mut m)?;
            let vocab = train_bpe(tokenizer_texts(&c), size, &TypeScheme::default())?;
            vocab.save(&out)?;
            let mut manifest = Manifest::new("train-bpe", s.resolved());
            manifest.input("corpus", &corpus)?;
            manifest.write(&out.join(MANIFEST_SUFFIX))?;
            println!("vocabulary of {} tokens ({} merges) in {}", vocab.len(), vocab.merges().len(), out.display());
        }
        Command::Train { corpus, vocab, mention_set, out, model, common } => {
            let mut s = Settings::load(common.config.as_deref())?;
            init_threads(s.get("threads", common.threads, 1usize)?)?;
            let set = s.get("mention-set", mention_set, "train".to_string())?;
            let types = entity_types(&mut s, model.entity_types.clone())?;
            let v = Vocabulary::load(&vocab, &TypeScheme::default())?;
            let mut manifest = Manifest::default();
            let (c, use_types) = load_corpus(&corpus, &types, &mut manifest)?;
            let (model_cfg, train_cfg) = model_config(&mut s, &model, v.len(), use_types)?;
            let mut bi = BiEncoder::new(model_cfg)?;
            let log = train(&mut bi, &c, &set, &v, &train_cfg)?;
            bi.save(&out)?;
            log.write(out.join("train_log.tsv"))?;
            let mut manifest = Manifest::new("train", s.resolved());
            manifest.input("corpus", &corpus)?;
            manifest.input("vocab", &vocab)?;
            if let Some(t) = &types {
                manifest.input("entity-types", t)?;
            }
            manifest.write(&out.join(MANIFEST_SUFFIX))?;
            for e in &log.epochs {
                println!("epoch {}\tloss {:.6}\tlr {:e}", e.epoch, e.mean_loss, e.learning_rate);
            }
        }
        Command::Embed { corpus, vocab, model, mention_set, metric, entity_types: et, out, common } => {
            let mut s = Settings::load(common.config.as_deref())?;
            init_threads(s.get("threads", common.threads, 0usize)?)?;
            let metric = s.get("metric", metric, Metric::Dot)?;
            let set = s.get_opt("mention-set", mention_set)?;
            let types = entity_types(&mut s, et)?;
            let v = Vocabulary::load(&vocab, &TypeScheme::default())?;
            let bi = BiEncoder::load(&model)?;
            let mut manifest = Manifest::new("embed", s.resolved());
            let (c, _) = load_corpus(&corpus, &types, &mut manifest)?;
            manifest.input("vocab", &vocab)?;
            manifest.input("model", &model)?;
            let worlds: Vec<String> = match &set {
                Some(name) => {
                    let ms = c.mentions(name).with_context(|| format!("no mention set {name}"))?;
                    let mut w: Vec<String> = ms.iter().map(|m| m.world.clone()).collect();
                    w.sort();
                    w.dedup();
                    w
                }
                None => c.worlds().map(|w| w.name.clone()).collect(),
            };
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for name in &worlds {
                let world = c.world(name).with_context(|| format!("unknown world {name}"))?;
                let index = build_index(world, &bi, &v, metric)?;
                index.save(out.join(name))?;
                println!("{name}\t{} entities\twidth {}", index.len(), index.dim());
            }
            manifest.write(&out.join(MANIFEST_SUFFIX))?;
        }
        Command::Retrieve { corpus, vocab, model, index, mention_set, k, metric, entity_types: et, out, common } => {
            let mut s = Settings::load(common.config.as_deref())?;
            init_threads(s.get("threads", common.threads, 0usize)?)?;
            let set = s.get("mention-set", mention_set, "val".to_string())?;
            let k = s.get_opt("k", k)?;
            let metric = s.get_opt("metric", metric)?;
            let types = entity_types(&mut s, et)?;
            let v = Vocabulary::load(&vocab, &TypeScheme::default())?;
            let bi = BiEncoder::load(&model)?;
            let mut manifest = Manifest::new("retrieve", s.resolved());
            let (c, _) = load_corpus(&corpus, &types, &mut manifest)?;
            manifest.input("vocab", &vocab)?;
            manifest.input("model", &model)?;
            manifest.input("index", &index)?;
            let mentions = c.mentions(&set).with_context(|| format!("no mention set {set}"))?;
            let mut indices: BTreeMap<String, EmbeddingIndex> = BTreeMap::new();
            for m in mentions {
                if !indices.contains_key(&m.world) {
                    let idx = EmbeddingIndex::load(index.join(&m.world))
                        .with_context(|| format!("loading index for world {}", m.world))?;
                    if let Some(k) = k {
                        if k > idx.len() {
                            bail!("--k {k} exceeds the {} entities of world {}", idx.len(), m.world);
                        }
                    }
                    indices.insert(m.world.clone(), idx);
                }
            }
            let template: &TemplateConfig = &bi.config.template;
            let results = mentions
                .iter()
                .map(|m| {
                    let idx = &indices[&m.world];
                    let context = c.context_words(m).with_context(|| format!("mention {}: context missing", m.mention_id))?;
                    let seq = build_mention_sequence(m, &context, &v, template)?;
                    let q = bi.embed_mention(&seq)?;
                    let kk = k.unwrap_or(64.min(idx.len()));
                    let metric = metric.unwrap_or(idx.metric);
                    let candidates = idx.top_k(q.values.view(), kk, metric)?;
                    Ok(candgen::retrieval::RetrievalResult {
                        mention_id: m.mention_id.clone(),
                        candidates,
                        exhaustive: kk == idx.len(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            write_results(&out, &results)?;
            let first = indices.values().next().context("mention set is empty")?;
            let meta = format!(
                "metric={}\npooling={}\nuse_entity_type={}\n",
                metric.unwrap_or(first.metric),
                bi.config.pooling,
                bi.config.template.use_entity_type
            );
            let meta_path = sidecar(&out, "meta");
            std::fs::write(&meta_path, meta).with_context(|| format!("writing {}", meta_path.display()))?;
            manifest.write(&sidecar(&out, MANIFEST_SUFFIX))?;
            println!("{} mentions retrieved into {}", results.len(), out.display());
        }
        Command::Eval { corpus, results, mention_set, k_grid, out, common } => {
            let mut s = Settings::load(common.config.as_deref())?;
            let set = s.get("mention-set", mention_set, "val".to_string())?;
            let grid = s.get("k-grid", k_grid, List(candgen::evaluation::DEFAULT_K_GRID.to_vec()))?;
            let mut manifest = Manifest::new("eval", s.resolved());
            let (c, _) = load_corpus(&corpus, &None, &mut manifest)?;
            manifest.input("results", &results)?;
            let rs = read_results(&results)?;
            let meta_path = sidecar(&results, "meta");
            let meta = std::fs::read_to_string(&meta_path).unwrap_or_default();
            let kv: BTreeMap<&str, &str> = meta.lines().filter_map(|l| l.split_once('=')).collect();
            let settings = ReportSettings {
                metric: kv.get("metric").map_or(Ok(Metric::Dot), |m| m.parse())?,
                pooling: kv.get("pooling").map_or(Ok(PoolingKind::Cls), |p| p.parse())?,
                use_entity_type: kv.get("use_entity_type").is_some_and(|v| *v == "true"),
                k_grid: grid.0,
            };
            let mentions = c.mentions(&set).with_context(|| format!("no mention set {set}"))?;
            let report = build_report(&rs, mentions, settings)?;
            report.write(&out)?;
            manifest.write(&sidecar(&out, MANIFEST_SUFFIX))?;
            print!("{}", report.render_table());
        }
        Command::Experiment {
            corpus,
            mention_set,
            eval_set,
            poolings,
            metrics,
            types,
            vocab_size,
            k_grid,
            model,
            out,
            common,
        } => {
            let mut s = Settings::load(common.config.as_deref())?;
            init_threads(s.get("threads", common.threads, 0usize)?)?;
            let train_set = s.get("mention-set", mention_set, "train".to_string())?;
            let eval_set = s.get("eval-set", eval_set, train_set.clone())?;
            let d = ExperimentGrid::default();
            let grid = ExperimentGrid {
                poolings: s.get("poolings", poolings, List(d.poolings))?.0,
                metrics: s.get("metrics", metrics, List(d.metrics))?.0,
                entity_types: s
                    .get("types", types, List(vec![Switch(false), Switch(true)]))?
                    .0
                    .into_iter()
                    .map(|t| t.0)
                    .collect(),
            };
            let type_file = entity_types(&mut s, model.entity_types.clone())?;
            let toy = PipelineConfig::toy();
            let bpe_size = s.get("vocab-size", vocab_size, toy.bpe_vocab_size)?;
            let k_grid = s.get("k-grid", k_grid, List(toy.k_grid.clone()))?.0;
            let mut manifest = Manifest::default();
            let (c, _) = load_corpus(&corpus, &None, &mut manifest)?;
            let ann = match &type_file {
                Some(p) => Some(load_entity_type_annotations(p, &TypeScheme::default())?),
                None => None,
            };
            let (model_cfg, train_cfg) = model_config(&mut s, &model, 0, false)?;
            let base = PipelineConfig {
                encoder: model_cfg.encoder,
                bpe_vocab_size: bpe_size,
                pooling: model_cfg.pooling,
                metric: Metric::Dot,
                use_entity_type: false,
                train: train_cfg,
                k_grid,
                seed: train_cfg.seed,
            };
            let table = run_experiment(&c, ann.as_ref(), &train_set, &eval_set, &grid, &base)?;
            let text = table.to_tsv();
            std::fs::write(&out, &text).with_context(|| format!("writing {}", out.display()))?;
            let mut manifest = Manifest::new("experiment", s.resolved());
            manifest.input("corpus", &corpus)?;
            if let Some(p) = &type_file {
                manifest.input("entity-types", p)?;
            }
            manifest.write(&sidecar(&out, MANIFEST_SUFFIX))?;
            print!("{text}");
        }
    }
    Ok(())
}

/// `<path>.<ext>` next to an output file.
fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

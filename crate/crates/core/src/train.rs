//! Bi-encoder training with in-batch negatives.
//!
//! For a batch of B gold pairs `(m_i, e_i)` the score matrix holds
//! `S[i][j] = y_m_i · y_e_j` and each row contributes
//! `-S[i][i] + log Σ_j exp(S[i][j])`, averaged over the batch. Parameters
//! are updated with Adam and decoupled weight decay under a learning rate
//! that decays linearly to zero.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bpe::Vocabulary;
use crate::corpus::{Corpus, MentionRecord};
use crate::encoder::{decays, EncoderConfig, EncoderGrads, EncoderParams, ForwardCache, HiddenStates};
use crate::error::{Error, Result};
use crate::pooling::{backward_reduce_with, reduce_with, PooledVector, PoolingKind, PoolingOptions};
use crate::template::{build_entity_sequence, build_mention_sequence, TemplateConfig, TokenSequence};

pub fn pair_score(y_m: &PooledVector, y_e: &PooledVector) -> Result<f64> {
    if y_m.dim() != y_e.dim() {
        return Err(Error::Shape(format!(
            "mention vector of width {} against entity vector of width {}",
            y_m.dim(),
            y_e.dim()
        )));
    }
    Ok(y_m.values.dot(&y_e.values))
}

/// `B×B` matrix of mention-entity scores; the diagonal holds gold pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix(pub Array2<f64>);

impl ScoreMatrix {
    pub fn from_vectors(mentions: &Array2<f64>, entities: &Array2<f64>) -> Result<Self> {
        if mentions.dim() != entities.dim() {
            return Err(Error::Shape(format!(
                "{:?} mention rows against {:?} entity rows",
                mentions.dim(),
                entities.dim()
            )));
        }
        Ok(ScoreMatrix(mentions.dot(&entities.t())))
    }
}

/// Mean in-batch loss and its gradient with respect to the scores.
pub fn inbatch_loss(scores: &ScoreMatrix) -> Result<(f64, Array2<f64>)> {
    let s = &scores.0;
    let b = s.nrows();
    if b == 0 || s.ncols() != b {
        return Err(Error::Shape(format!("score matrix {:?} is not square", s.dim())));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("score matrix".into()));
    }
    let mut grad = Array2::zeros((b, b));
    let mut total = 0.0;
    for i in 0..b {
        let row = s.row(i);
        let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[i];
        for j in 0..b {
            grad[[i, j]] = ((row[j] - lse).exp() - if i == j { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((total / b as f64, grad))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 5,
            learning_rate: 3e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        if self.weight_decay < 0.0 || self.epsilon <= 0.0 {
            return Err(Error::Config("weight decay must be >= 0 and epsilon > 0".into()));
        }
        Ok(())
    }
}

/// `base · (1 − t/T)` at step `t` of `T`.
pub fn linear_decay(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    base * (1.0 - step.min(total) as f64 / total as f64)
}

/// Adam moments for one encoder.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: EncoderParams,
    v: EncoderParams,
    step: u64,
}

impl AdamW {
    pub fn new(params: &EncoderParams) -> Self {
        AdamW {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// One update. Decay multiplies decaying tensors by `1 − lr·wd` before
    /// the Adam step and never enters the moments.
    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderGrads, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        let grads = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((name, p), (_, g)), m), v) in names.iter().zip(params.tensors_mut()).zip(grads).zip(ms).zip(vs) {
            let decay = if decays(name) { cfg.weight_decay } else { 0.0 };
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    *p *= 1.0 - lr * decay;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.epsilon);
                });
        }
    }
}

/// Which encoder, if any, is held fixed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Freeze {
    #[default]
    None,
    Mention,
    Entity,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiEncoderConfig {
    pub encoder: EncoderConfig,
    pub template: TemplateConfig,
    pub pooling: PoolingKind,
    pub pooling_options: PoolingOptions,
    /// One set of weights for both sides.
    pub shared_weights: bool,
}

impl BiEncoderConfig {
    pub fn new(encoder: EncoderConfig, pooling: PoolingKind, use_entity_type: bool) -> Self {
        BiEncoderConfig {
            encoder,
            template: TemplateConfig::new(encoder.max_len, use_entity_type),
            pooling,
            pooling_options: PoolingOptions::default(),
            shared_weights: false,
        }
    }

    pub fn slot_count(&self) -> usize {
        self.template.conc_slot_count()
    }

    pub fn output_dim(&self) -> usize {
        self.pooling.output_dim(self.encoder.hidden, self.slot_count())
    }
}

/// Mention encoder T1 and entity encoder T2 with their pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct BiEncoder {
    pub config: BiEncoderConfig,
    pub mention: EncoderParams,
    /// `None` when weights are shared with the mention encoder.
    pub entity: Option<EncoderParams>,
}

/// Gradients for both encoders; `entity` is `None` under weight sharing.
#[derive(Clone, Debug, PartialEq)]
pub struct BiGrads {
    pub mention: EncoderGrads,
    pub entity: Option<EncoderGrads>,
}

impl BiGrads {
    pub fn scale(&mut self, factor: f64) {
        self.mention.scale(factor);
        if let Some(e) = &mut self.entity {
            e.scale(factor);
        }
    }
}

/// Forward activations for one batch.
pub struct BatchForward {
    mention: Vec<(HiddenStates, ForwardCache, Vec<usize>)>,
    entity: Vec<(HiddenStates, ForwardCache, Vec<usize>)>,
    pub mention_vectors: Array2<f64>,
    pub entity_vectors: Array2<f64>,
}

impl BatchForward {
    pub fn scores(&self) -> Result<ScoreMatrix> {
        ScoreMatrix::from_vectors(&self.mention_vectors, &self.entity_vectors)
    }
}

/// One training example: a templated mention and its gold entity.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub mention: TokenSequence,
    pub entity: TokenSequence,
    pub gold_entity_id: String,
}

fn dropout_rng(seed: u64, step: u64, index: usize, side: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(1 << 20) ^ ((index as u64) << 1) ^ side);
    rng
}

impl BiEncoder {
    /// Fresh encoders; the entity encoder draws from `seed + 1`.
    pub fn new(config: BiEncoderConfig) -> Result<Self> {
        if config.template.max_len != config.encoder.max_len {
            return Err(Error::Config(format!(
                "template max_len {} differs from encoder max_len {}",
                config.template.max_len, config.encoder.max_len
            )));
        }
        let mention = EncoderParams::init(config.encoder)?;
        let entity = if config.shared_weights {
            None
        } else {
            Some(EncoderParams::init(EncoderConfig {
                seed: config.encoder.seed.wrapping_add(1),
                ..config.encoder
            })?)
        };
        Ok(BiEncoder { config, mention, entity })
    }

    pub fn entity_encoder(&self) -> &EncoderParams {
        self.entity.as_ref().unwrap_or(&self.mention)
    }

    fn pool(&self, h: &HiddenStates, seq: &TokenSequence) -> Result<PooledVector> {
        reduce_with(
            h,
            &seq.special_indices(),
            self.config.pooling,
            self.config.slot_count(),
            self.config.pooling_options,
        )
    }

    pub fn embed_mention(&self, seq: &TokenSequence) -> Result<PooledVector> {
        let (h, _) = self.mention.forward(seq)?;
        self.pool(&h, seq)
    }

    pub fn embed_entity(&self, seq: &TokenSequence) -> Result<PooledVector> {
        let (h, _) = self.entity_encoder().forward(seq)?;
        self.pool(&h, seq)
    }

    fn encode_side(
        &self,
        params: &EncoderParams,
        seqs: &[&TokenSequence],
        dropout: Option<(u64, u64, u64)>,
    ) -> Result<Vec<(HiddenStates, ForwardCache, Vec<usize>, PooledVector)>> {
        seqs.par_iter()
            .enumerate()
            .map(|(i, seq)| {
                let (h, cache) = match dropout {
                    Some((seed, step, side)) if params.config.dropout > 0.0 => {
                        params.forward_train(seq, &mut dropout_rng(seed, step, i, side))?
                    }
                    _ => params.forward(seq)?,
                };
                let y = self.pool(&h, seq)?;
                Ok((h, cache, seq.special_indices(), y))
            })
            .collect()
    }

    /// Runs both encoders over a batch. `dropout` carries `(seed, step)` for
    /// training-mode passes.
    pub fn forward_batch(&self, batch: &[TrainingPair], dropout: Option<(u64, u64)>) -> Result<BatchForward> {
        let ms: Vec<&TokenSequence> = batch.iter().map(|p| &p.mention).collect();
        let es: Vec<&TokenSequence> = batch.iter().map(|p| &p.entity).collect();
        let mention = self.encode_side(&self.mention, &ms, dropout.map(|(s, t)| (s, t, 0)))?;
        let entity = self.encode_side(self.entity_encoder(), &es, dropout.map(|(s, t)| (s, t, 1)))?;
        let stack = |side: &[(HiddenStates, ForwardCache, Vec<usize>, PooledVector)]| {
            let views: Vec<_> = side.iter().map(|r| r.3.values.view()).collect();
            ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
        };
        let mention_vectors = stack(&mention)?;
        let entity_vectors = stack(&entity)?;
        let strip = |side: Vec<(HiddenStates, ForwardCache, Vec<usize>, PooledVector)>| {
            side.into_iter().map(|(h, c, s, _)| (h, c, s)).collect()
        };
        Ok(BatchForward {
            mention: strip(mention),
            entity: strip(entity),
            mention_vectors,
            entity_vectors,
        })
    }

    fn backward_side(
        &self,
        params: &EncoderParams,
        side: &[(HiddenStates, ForwardCache, Vec<usize>)],
        dvectors: &Array2<f64>,
    ) -> Result<EncoderGrads> {
        let cfg = &self.config;
        let per_example: Vec<EncoderGrads> = side
            .par_iter()
            .enumerate()
            .map(|(i, (h, cache, specials))| {
                let dy: Array1<f64> = dvectors.row(i).to_owned();
                let dh = backward_reduce_with(h, specials, cfg.pooling, cfg.slot_count(), cfg.pooling_options, &dy)?;
                params.backward(cache, &dh)
            })
            .collect::<Result<_>>()?;
        // fixed summation order keeps results independent of thread count
        let mut total = params.zeros_like();
        for g in &per_example {
            total.add_scaled(g, 1.0);
        }
        Ok(total)
    }

    /// Back-propagates a gradient on the score matrix into both encoders.
    pub fn backward_batch(&self, fwd: &BatchForward, dscores: &Array2<f64>, freeze: Freeze) -> Result<BiGrads> {
        let b = fwd.mention.len();
        if dscores.dim() != (b, b) {
            return Err(Error::Shape(format!("score gradient {:?} for batch {b}", dscores.dim())));
        }
        let d_mention = dscores.dot(&fwd.entity_vectors);
        let d_entity = dscores.t().dot(&fwd.mention_vectors);
        let mention_grads = if freeze == Freeze::Mention {
            self.mention.zeros_like()
        } else {
            self.backward_side(&self.mention, &fwd.mention, &d_mention)?
        };
        let entity_grads = if freeze == Freeze::Entity {
            self.entity_encoder().zeros_like()
        } else {
            self.backward_side(self.entity_encoder(), &fwd.entity, &d_entity)?
        };
        Ok(match self.entity {
            Some(_) => BiGrads {
                mention: mention_grads,
                entity: Some(entity_grads),
            },
            None => {
                let mut shared = mention_grads;
                shared.add_scaled(&entity_grads, 1.0);
                BiGrads {
                    mention: shared,
                    entity: None,
                }
            }
        })
    }

    /// Mean in-batch loss with parameter gradients.
    pub fn loss_and_grads(&self, batch: &[TrainingPair], freeze: Freeze) -> Result<(f64, BiGrads)> {
        let fwd = self.forward_batch(batch, None)?;
        let (loss, dscores) = inbatch_loss(&fwd.scores()?)?;
        Ok((loss, self.backward_batch(&fwd, &dscores, freeze)?))
    }

    pub fn batch_loss(&self, batch: &[TrainingPair]) -> Result<f64> {
        let fwd = self.forward_batch(batch, None)?;
        Ok(inbatch_loss(&fwd.scores()?)?.0)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let c = &self.config;
        let meta = format!(
            "pooling={}\nuse_entity_type={}\nrepeat_mention_surface={}\nliteral_length={}\nspecial_over_all_rows={}\nshared_weights={}\n",
            c.pooling,
            c.template.use_entity_type,
            c.template.repeat_mention_surface,
            c.pooling_options.literal_length,
            c.pooling_options.special_over_all_rows,
            c.shared_weights,
        );
        let meta_path = dir.join(MODEL_META);
        std::fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
        self.mention.save(dir.join(MENTION_CHECKPOINT))?;
        if let Some(e) = &self.entity {
            e.save(dir.join(ENTITY_CHECKPOINT))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(MODEL_META);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let mut kv = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad model metadata line {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("model metadata lacks {k}")))
        };
        let flag = |k: &str| -> Result<bool> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("model metadata {k} is not a boolean")))
        };
        let mention = EncoderParams::load(dir.join(MENTION_CHECKPOINT))?;
        let shared_weights = flag("shared_weights")?;
        let entity = if shared_weights {
            None
        } else {
            Some(EncoderParams::load(dir.join(ENTITY_CHECKPOINT))?)
        };
        let config = BiEncoderConfig {
            encoder: mention.config,
            template: TemplateConfig {
                max_len: mention.config.max_len,
                use_entity_type: flag("use_entity_type")?,
                repeat_mention_surface: flag("repeat_mention_surface")?,
            },
            pooling: get("pooling")?.parse()?,
            pooling_options: PoolingOptions {
                literal_length: flag("literal_length")?,
                special_over_all_rows: flag("special_over_all_rows")?,
            },
            shared_weights,
        };
        Ok(BiEncoder { config, mention, entity })
    }
}

pub const MODEL_META: &str = "model.txt";
pub const MENTION_CHECKPOINT: &str = "mention.ckpt";
pub const ENTITY_CHECKPOINT: &str = "entity.ckpt";

/// Templates every mention of a set with its gold entity.
pub fn build_training_pairs(
    corpus: &Corpus,
    mentions: &[MentionRecord],
    vocab: &Vocabulary,
    template: &TemplateConfig,
) -> Result<Vec<TrainingPair>> {
    mentions
        .iter()
        .map(|m| {
            let context = corpus.context_words(m).ok_or_else(|| {
                Error::Validation(format!("mention {}: context document missing", m.mention_id))
            })?;
            let gold = corpus.gold_entity(m).ok_or_else(|| {
                Error::Validation(format!("mention {}: gold entity missing", m.mention_id))
            })?;
            Ok(TrainingPair {
                mention: build_mention_sequence(m, &context, vocab, template)?,
                entity: build_entity_sequence(gold, vocab, template)?,
                gold_entity_id: gold.entity_id.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate of the epoch's last step.
    pub learning_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
    /// Batches that held the same gold entity more than once.
    pub collisions: usize,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        self.epochs
            .iter()
            .map(|e| format!("{}\t{:.10}\t{:e}\n", e.epoch, e.mean_loss, e.learning_rate))
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_tsv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Trains `model` in place on pre-templated pairs.
pub fn train_pairs(model: &mut BiEncoder, pairs: &[TrainingPair], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Validation("no training pairs".into()));
    }
    let batches_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt_mention = AdamW::new(&model.mention);
    let mut opt_entity = model.entity.as_ref().map(AdamW::new);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut lr = cfg.learning_rate;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainingPair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let distinct: HashSet<&str> = batch.iter().map(|p| p.gold_entity_id.as_str()).collect();
            if distinct.len() < batch.len() {
                log.collisions += 1;
                log::debug!("step {step}: in-batch gold collision ({} of {} distinct)", distinct.len(), batch.len());
            }
            let fwd = model.forward_batch(&batch, Some((cfg.seed, step as u64)))?;
            let (loss, dscores) = inbatch_loss(&fwd.scores()?)?;
            let grads = model.backward_batch(&fwd, &dscores, Freeze::None)?;
            lr = linear_decay(cfg.learning_rate, step, total_steps);
            opt_mention.step(&mut model.mention, &grads.mention, lr, cfg);
            if let (Some(params), Some(opt), Some(g)) = (model.entity.as_mut(), opt_entity.as_mut(), grads.entity.as_ref()) {
                opt.step(params, g, lr, cfg);
            }
            loss_sum += loss;
            step += 1;
        }
        let mean_loss = loss_sum / batches_per_epoch as f64;
        log::info!("epoch {epoch}: mean loss {mean_loss:.6}, lr {lr:e}");
        log.epochs.push(EpochLog {
            epoch,
            mean_loss,
            learning_rate: lr,
        });
    }
    if log.collisions > 0 {
        log::warn!("{} batches contained duplicate gold entities", log.collisions);
    }
    log.steps = step;
    Ok(log)
}

/// Trains on a named mention set of `corpus`.
pub fn train(
    model: &mut BiEncoder,
    corpus: &Corpus,
    mention_set: &str,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let mentions = corpus
        .mentions(mention_set)
        .ok_or_else(|| Error::Validation(format!("no mention set named {mention_set}")))?;
    let pairs = build_training_pairs(corpus, mentions, vocab, &model.config.template)?;
    train_pairs(model, &pairs, cfg)
}

pub const GRADIENT_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    /// `mention` or `entity`, then the tensor name.
    pub encoder: &'static str,
    pub tensor: String,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&GroupError> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
    }

    pub fn max_relative_error(&self) -> f64 {
        self.worst().map_or(0.0, |g| g.max_relative_error)
    }

    pub fn ensure_below(&self, tolerance: f64) -> Result<()> {
        match self.worst() {
            Some(w) if w.max_relative_error >= tolerance => Err(Error::Validation(format!(
                "gradient check failed: {}.{} relative error {:e} >= {tolerance:e}",
                w.encoder, w.tensor, w.max_relative_error
            ))),
            _ => Ok(()),
        }
    }
}

/// Compares analytic gradients of the mean in-batch loss with fourth-order
/// central differences (step `h`) on every parameter of every trainable encoder.
/// A tensor's error is its largest absolute discrepancy divided by the
/// largest gradient magnitude in that tensor, floored at `GRADIENT_FLOOR`
/// so tensors with an identically zero gradient compare absolute noise.
pub fn gradient_check(model: &BiEncoder, batch: &[TrainingPair], freeze: Freeze, h: f64) -> Result<GradCheckReport> {
    if model.config.encoder.dropout != 0.0 {
        return Err(Error::Config("gradient check requires dropout 0".into()));
    }
    let (_, grads) = model.loss_and_grads(batch, freeze)?;
    let mut groups = Vec::new();
    let mut sides: Vec<(&'static str, &EncoderGrads)> = Vec::new();
    if freeze != Freeze::Mention || model.entity.is_none() {
        sides.push(("mention", &grads.mention));
    }
    if let (Some(g), true) = (grads.entity.as_ref(), freeze != Freeze::Entity) {
        sides.push(("entity", g));
    }
    for (side, g) in sides {
        let analytic_tensors = g.tensors();
        for (ti, (name, analytic)) in analytic_tensors.iter().enumerate() {
            let mut worst_abs = 0.0f64;
            let mut scale = GRADIENT_FLOOR;
            for idx in 0..analytic.len() {
                let (r, c) = (idx / analytic.ncols(), idx % analytic.ncols());
                let perturbed = |delta: f64| -> Result<f64> {
                    let mut m = model.clone();
                    let target = match (side, m.entity.as_mut()) {
                        ("entity", Some(e)) => e,
                        _ => &mut m.mention,
                    };
                    target.tensors_mut()[ti][[r, c]] += delta;
                    m.batch_loss(batch)
                };
                let numeric = (8.0 * (perturbed(h)? - perturbed(-h)?) - (perturbed(2.0 * h)? - perturbed(-2.0 * h)?))
                    / (12.0 * h);
                let a = analytic[[r, c]];
                worst_abs = worst_abs.max((a - numeric).abs());
                scale = scale.max(a.abs()).max(numeric.abs());
            }
            groups.push(GroupError {
                encoder: side,
                tensor: name.clone(),
                max_relative_error: worst_abs / scale,
            });
        }
    }
    Ok(GradCheckReport { groups })
}

//! Pre-layer-norm transformer encoder with an explicit backward pass.
//!
//! Each block computes `x + Attn(LN1(x))` followed by `x + FFN(LN2(x))`, with
//! a GELU feed-forward. A final layer norm follows the last block; with zero
//! blocks the output is the plain embedding sum. Only the first `len`
//! (attention-length) positions are processed, which is equivalent to masking
//! padded keys; padded output rows are zero.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::bpe::TokenId;
use crate::error::{Error, Result};
use crate::template::TokenSequence;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const CHECKPOINT_MAGIC: &[u8; 8] = b"CGCKPT01";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl EncoderConfig {
    /// Small default: D=64, L=2, H=2, n=32, feed-forward 256.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            hidden: 64,
            layers: 2,
            heads: 2,
            ff_dim: 256,
            max_len: 32,
            vocab_size,
            dropout: 0.0,
            seed: 0,
        }
    }

    /// BERT-base sized layout (D=768, L=12, H=12, n=128).
    pub fn base(vocab_size: usize) -> Self {
        EncoderConfig {
            hidden: 768,
            layers: 12,
            heads: 12,
            ff_dim: 3072,
            max_len: 128,
            vocab_size,
            dropout: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return fail("hidden dimension must be a positive multiple of the head count");
        }
        if self.max_len < 4 {
            return fail("max_len must be at least 4");
        }
        if self.vocab_size == 0 || self.ff_dim == 0 {
            return fail("vocab_size and ff_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array2<f64>,
    pub ln1_b: Array2<f64>,
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub bk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub ln2_g: Array2<f64>,
    pub ln2_b: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

/// Weights of one encoder. Vectors are stored as `1×k` matrices so every
/// tensor shares a type; gradients reuse the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array2<f64>,
    pub lnf_b: Array2<f64>,
}

pub type EncoderGrads = EncoderParams;

/// Whether the optimizer applies weight decay to the named tensor.
/// Embeddings and projection matrices decay; biases and norms do not.
pub fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    matches!(leaf, "tok_emb" | "pos_emb" | "wq" | "wk" | "wv" | "wo" | "w1" | "w2")
}

impl EncoderParams {
    fn filled(config: EncoderConfig, mut fill: impl FnMut(&str, usize, usize) -> Array2<f64>) -> Self {
        let d = config.hidden;
        let f = config.ff_dim;
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                ln1_g: fill("ln_g", 1, d),
                ln1_b: fill("b", 1, d),
                wq: fill("w", d, d),
                bq: fill("b", 1, d),
                wk: fill("w", d, d),
                bk: fill("b", 1, d),
                wv: fill("w", d, d),
                bv: fill("b", 1, d),
                wo: fill("w", d, d),
                bo: fill("b", 1, d),
                ln2_g: fill("ln_g", 1, d),
                ln2_b: fill("b", 1, d),
                w1: fill("w", d, f),
                b1: fill("b", 1, f),
                w2: fill("w", f, d),
                b2: fill("b", 1, d),
            })
            .collect();
        // embeddings are drawn after the layers; order is part of the seed contract
        let tok_emb = fill("w", config.vocab_size, d);
        let pos_emb = fill("w", config.max_len, d);
        EncoderParams {
            config,
            tok_emb,
            pos_emb,
            layers,
            lnf_g: fill("ln_g", 1, d),
            lnf_b: fill("b", 1, d),
        }
    }

    /// Normal(0, 0.02) weights, zero biases, unit layer-norm scales.
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        Ok(Self::filled(config, |kind, r, c| match kind {
            "w" => Array2::from_shape_fn((r, c), |_| normal.sample(&mut rng)),
            "ln_g" => Array2::ones((r, c)),
            _ => Array2::zeros((r, c)),
        }))
    }

    pub fn zeros(config: EncoderConfig) -> Self {
        Self::filled(config, |_, r, c| Array2::zeros((r, c)))
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    /// Every tensor with its name, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ] {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("lnf_g".to_string(), &self.lnf_g));
        out.push(("lnf_b".to_string(), &self.lnf_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &EncoderParams, scale: f64) {
        let others = other.tensors();
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(others) {
            dst.scaled_add(scale, src);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn check_sequence(&self, seq: &TokenSequence) -> Result<()> {
        if seq.ids.len() != self.config.max_len {
            return Err(Error::Shape(format!(
                "sequence length {} but encoder max_len {}",
                seq.ids.len(),
                self.config.max_len
            )));
        }
        if seq.len == 0 || seq.len > seq.ids.len() {
            return Err(Error::Shape(format!("attention length {}", seq.len)));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Inference forward pass (no dropout).
    pub fn forward(&self, seq: &TokenSequence) -> Result<(HiddenStates, ForwardCache)> {
        self.forward_impl(seq, None)
    }

    /// Training forward pass; dropout masks are drawn from `rng` when the
    /// configured rate is non-zero.
    pub fn forward_train(
        &self,
        seq: &TokenSequence,
        rng: &mut ChaCha8Rng,
    ) -> Result<(HiddenStates, ForwardCache)> {
        self.forward_impl(seq, Some(rng))
    }

    fn forward_impl(
        &self,
        seq: &TokenSequence,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(HiddenStates, ForwardCache)> {
        self.check_sequence(seq)?;
        let cfg = &self.config;
        let len = seq.len;
        let ids: Vec<TokenId> = seq.ids[..len].to_vec();
        let mut x = Array2::<f64>::zeros((len, cfg.hidden));
        for (i, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(i);
            row += &self.tok_emb.row(id as usize);
            row += &self.pos_emb.row(i);
        }
        let rate = if rng.is_some() { cfg.dropout } else { 0.0 };
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let (out, cache) = layer_forward(layer, cfg, x, rate, rng.as_deref_mut());
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("encoder layer {li}")));
            }
            layer_caches.push(cache);
            x = out;
        }
        let (out, final_norm) = if self.layers.is_empty() {
            (x.clone(), None)
        } else {
            let (y, c) = layer_norm(&x.view(), &self.lnf_g, &self.lnf_b);
            (y, Some(c))
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("final layer norm".into()));
        }
        let mut states = Array2::zeros((cfg.max_len, cfg.hidden));
        states.slice_mut(s![..len, ..]).assign(&out);
        Ok((
            HiddenStates { states, len },
            ForwardCache {
                ids,
                layers: layer_caches,
                final_norm,
            },
        ))
    }

    pub fn backward(&self, cache: &ForwardCache, upstream: &Array2<f64>) -> Result<EncoderGrads> {
        let mut grads = self.zeros_like();
        self.accumulate_backward(cache, upstream, &mut grads)?;
        Ok(grads)
    }

    /// Adds the parameter gradients for `upstream` (the gradient on the
    /// `n×D` hidden states) into `grads`.
    pub fn accumulate_backward(
        &self,
        cache: &ForwardCache,
        upstream: &Array2<f64>,
        grads: &mut EncoderGrads,
    ) -> Result<()> {
        let cfg = &self.config;
        if upstream.dim() != (cfg.max_len, cfg.hidden) {
            return Err(Error::Shape(format!(
                "upstream gradient {:?}, expected {:?}",
                upstream.dim(),
                (cfg.max_len, cfg.hidden)
            )));
        }
        if grads.config != self.config || cache.layers.len() != self.layers.len() {
            return Err(Error::Shape("gradient buffer or cache from another encoder".into()));
        }
        let len = cache.ids.len();
        let mut dx = upstream.slice(s![..len, ..]).to_owned();
        if let Some(norm) = &cache.final_norm {
            dx = layer_norm_backward(&dx, norm, &self.lnf_g, &mut grads.lnf_g, &mut grads.lnf_b);
        }
        for li in (0..self.layers.len()).rev() {
            dx = layer_backward(&self.layers[li], cfg, &cache.layers[li], dx, &mut grads.layers[li]);
        }
        for (i, &id) in cache.ids.iter().enumerate() {
            let g = dx.row(i);
            let mut tok = grads.tok_emb.row_mut(id as usize);
            tok += &g;
            let mut pos = grads.pos_emb.row_mut(i);
            pos += &g;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let c = &self.config;
        let mut bytes = Vec::with_capacity(8 * (9 + self.parameter_count()));
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [c.hidden, c.layers, c.heads, c.ff_dim, c.max_len, c.vocab_size] {
            bytes.extend_from_slice(&(v as u64).to_le_bytes());
        }
        bytes.extend_from_slice(&c.dropout.to_le_bytes());
        bytes.extend_from_slice(&c.seed.to_le_bytes());
        for (_, t) in self.tensors() {
            for v in t.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;

        let manifest_path = manifest_path(path);
        let mut m = String::new();
        for (name, t) in self.tensors() {
            m.push_str(&format!("{name}\t{}\t{}\n", t.nrows(), t.ncols()));
        }
        std::fs::write(&manifest_path, m).map_err(|e| Error::io(&manifest_path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 + 8 * 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap());
        let config = EncoderConfig {
            hidden: word(0) as usize,
            layers: word(1) as usize,
            heads: word(2) as usize,
            ff_dim: word(3) as usize,
            max_len: word(4) as usize,
            vocab_size: word(5) as usize,
            dropout: f64::from_bits(word(6)),
            seed: word(7),
        };
        config.validate()?;
        let mut params = EncoderParams::zeros(config);
        let expected = 72 + 8 * params.parameter_count();
        if bytes.len() != expected {
            return Err(Error::Checkpoint(format!(
                "{}: {} bytes, expected {expected}",
                path.display(),
                bytes.len()
            )));
        }
        let mut offset = 72;
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v = f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap());
                offset += 8;
            }
        }
        if !params.is_finite() {
            return Err(Error::Checkpoint(format!("{}: non-finite weights", path.display())));
        }
        Ok(params)
    }
}

/// Path of the textual tensor manifest written next to a checkpoint.
pub fn manifest_path(checkpoint: &Path) -> std::path::PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".manifest");
    name.into()
}

/// Last-layer token representations, `max_len × D`. Rows at and beyond
/// `len` are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    pub states: Array2<f64>,
    pub len: usize,
}

impl HiddenStates {
    pub fn new(states: Array2<f64>, len: usize) -> Result<Self> {
        if len == 0 || len > states.nrows() {
            return Err(Error::Shape(format!(
                "attention length {len} for {} rows",
                states.nrows()
            )));
        }
        Ok(HiddenStates { states, len })
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn rows(&self) -> usize {
        self.states.nrows()
    }
}

#[derive(Clone, Debug)]
struct NormCache {
    xhat: Array2<f64>,
    rstd: Vec<f64>,
}

#[derive(Clone, Debug)]
struct LayerCache {
    norm1: NormCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    mask1: Option<Array2<f64>>,
    norm2: NormCache,
    b: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
    mask2: Option<Array2<f64>>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    ids: Vec<TokenId>,
    layers: Vec<LayerCache>,
    final_norm: Option<NormCache>,
}

fn layer_norm(x: &ArrayView2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut rstd = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * r);
        rstd.push(r);
    }
    let y = &xhat * g + b;
    (y, NormCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    g: &Array2<f64>,
    dg: &mut Array2<f64>,
    db: &mut Array2<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * g;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() / d;
        let mean_dh_xh = dh.dot(&xh) / d;
        let r = cache.rstd[i];
        Zip::from(dx.row_mut(i))
            .and(&dh)
            .and(&xh)
            .for_each(|o, &a, &h| *o = r * (a - mean_dh - h * mean_dh_xh));
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn dropout_mask(shape: (usize, usize), rate: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Array2<f64>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    Some(Array2::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    }))
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn layer_forward(
    p: &LayerParams,
    cfg: &EncoderConfig,
    x: Array2<f64>,
    rate: f64,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Array2<f64>, LayerCache) {
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let (a, norm1) = layer_norm(&x.view(), &p.ln1_g, &p.ln1_b);
    let q = a.dot(&p.wq) + &p.bq;
    let k = a.dot(&p.wk) + &p.bk;
    let v = a.dot(&p.wv) + &p.bv;
    let mut ctx = Array2::zeros(x.dim());
    let mut probs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut scores);
        ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let mut o = ctx.dot(&p.wo) + &p.bo;
    let mask1 = dropout_mask(o.dim(), rate, rng.as_deref_mut());
    if let Some(m) = &mask1 {
        o *= m;
    }
    let x1 = x + &o;

    let (b, norm2) = layer_norm(&x1.view(), &p.ln2_g, &p.ln2_b);
    let u = b.dot(&p.w1) + &p.b1;
    let g = u.mapv(gelu);
    let mut f = g.dot(&p.w2) + &p.b2;
    let mask2 = dropout_mask(f.dim(), rate, rng);
    if let Some(m) = &mask2 {
        f *= m;
    }
    let out = x1 + &f;
    (
        out,
        LayerCache {
            norm1,
            a,
            q,
            k,
            v,
            probs,
            ctx,
            mask1,
            norm2,
            b,
            u,
            g,
            mask2,
        },
    )
}

fn sum_rows(m: &Array2<f64>) -> Array2<f64> {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}

fn layer_backward(
    p: &LayerParams,
    cfg: &EncoderConfig,
    c: &LayerCache,
    dout: Array2<f64>,
    gp: &mut LayerParams,
) -> Array2<f64> {
    // feed-forward branch
    let mut df = dout.clone();
    if let Some(m) = &c.mask2 {
        df *= m;
    }
    gp.w2 += &c.g.t().dot(&df);
    gp.b2 += &sum_rows(&df);
    let dg = df.dot(&p.w2.t());
    let du = &dg * &c.u.mapv(gelu_grad);
    gp.w1 += &c.b.t().dot(&du);
    gp.b1 += &sum_rows(&du);
    let db = du.dot(&p.w1.t());
    let dx1 = dout + layer_norm_backward(&db, &c.norm2, &p.ln2_g, &mut gp.ln2_g, &mut gp.ln2_b);

    // attention branch
    let mut d_o = dx1.clone();
    if let Some(m) = &c.mask1 {
        d_o *= m;
    }
    gp.wo += &c.ctx.t().dot(&d_o);
    gp.bo += &sum_rows(&d_o);
    let dctx = d_o.dot(&p.wo.t());

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(c.q.dim());
    let mut dk = Array2::zeros(c.k.dim());
    let mut dv = Array2::zeros(c.v.dim());
    for (h, probs) in c.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dctx_h = dctx.slice(cols);
        let dprobs = dctx_h.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
        let mut dscores = probs * &dprobs;
        for (mut row, prow) in dscores.rows_mut().into_iter().zip(probs.rows()) {
            let total = row.sum();
            Zip::from(&mut row).and(&prow).for_each(|d, &pr| *d -= pr * total);
        }
        dscores *= scale;
        dq.slice_mut(cols).assign(&dscores.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&dscores.t().dot(&c.q.slice(cols)));
    }
    gp.wq += &c.a.t().dot(&dq);
    gp.bq += &sum_rows(&dq);
    gp.wk += &c.a.t().dot(&dk);
    gp.bk += &sum_rows(&dk);
    gp.wv += &c.a.t().dot(&dv);
    gp.bv += &sum_rows(&dv);
    let da = dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
    dx1 + layer_norm_backward(&da, &c.norm1, &p.ln1_g, &mut gp.ln1_g, &mut gp.ln1_b)
}

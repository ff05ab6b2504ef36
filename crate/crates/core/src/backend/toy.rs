//! Deterministic toy backend.
//!
//! Text encoder: token + position embedding tables followed by causal
//! self-attention blocks (`x + attn(x)`, then `x + tanh(x W1 + b1) W2`).
//! Noise predictor: an input projection plus sinusoidal timestep features,
//! then one cross-attention block per attention side (queries from the
//! average-pooled latent features, keys/values from the text embeddings,
//! result upsampled and added back), then `tanh` of an output projection.
//! All weights are drawn from a seeded ChaCha stream.

use alloc::vec;
use alloc::vec::Vec;

use super::tokenizer::WordTokenizer;
use super::{
    check_embeddings, AttentionEditor, AttentionLayer, AttentionMap, Backend, BackendDescriptor, BackendError,
    DifferentiableBackend, Embeddings, EncoderKind, EncoderState, Latent, NoisePrediction, TokenIds, TokenSequence,
    Tokenized,
};
use crate::image::RgbImage;
use crate::linalg::{softmax_rows, softmax_rows_backward, Mat};
use crate::rng;

/// Pixels per latent cell along each axis.
pub const DECODE_FACTOR: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyConfig {
    pub max_len: usize,
    pub width: usize,
    pub latent_side: usize,
    pub latent_channels: usize,
    pub attention_sides: Vec<usize>,
    pub attn_dim: usize,
    pub encoder_blocks: usize,
    pub mlp_mult: usize,
    pub hash_buckets: u32,
    pub train_timesteps: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            max_len: 16,
            width: 32,
            latent_side: 8,
            latent_channels: 4,
            attention_sides: vec![8, 4],
            attn_dim: 16,
            encoder_blocks: 2,
            mlp_mult: 2,
            hash_buckets: crate::backend::tokenizer::DEFAULT_HASH_BUCKETS,
            train_timesteps: 1000,
            seed: 0x70_79,
        }
    }
}

impl ToyConfig {
    pub fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            backend_id: alloc::format!("toy-l{}-h{}-s{}-seed{}", self.max_len, self.width, self.latent_side, self.seed),
            max_len: self.max_len,
            width: self.width,
            latent_side: self.latent_side,
            latent_channels: self.latent_channels,
            attention_sides: self.attention_sides.clone(),
            token_ids: TokenIds { bos: 1, eos: 2, pad: 0 },
            train_timesteps: self.train_timesteps,
        }
    }
}

/// Offsets into the flat encoder parameter blob.
#[derive(Debug, Clone)]
struct EncoderLayout {
    vocab: usize,
    len: usize,
    width: usize,
    hidden: usize,
    tok_emb: usize,
    pos_emb: usize,
    blocks: Vec<BlockOffsets>,
    total: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockOffsets {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    w1: usize,
    b1: usize,
    w2: usize,
}

impl EncoderLayout {
    fn new(vocab: usize, len: usize, width: usize, blocks: usize, hidden: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let tok_emb = take(vocab * width);
        let pos_emb = take(len * width);
        let blocks = (0..blocks)
            .map(|_| BlockOffsets {
                wq: take(width * width),
                wk: take(width * width),
                wv: take(width * width),
                wo: take(width * width),
                w1: take(width * hidden),
                b1: take(hidden),
                w2: take(hidden * width),
            })
            .collect();
        Self { vocab, len, width, hidden, tok_emb, pos_emb, blocks, total: at }
    }
}

#[derive(Debug, Clone)]
struct CrossLayer {
    side: usize,
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
}

#[derive(Debug, Clone)]
struct NoisePredictor {
    w_in: Mat,
    layers: Vec<CrossLayer>,
    w_out: Mat,
}

pub struct ToyBackend {
    config: ToyConfig,
    descriptor: BackendDescriptor,
    tokenizer: WordTokenizer,
    layout: EncoderLayout,
    frozen: EncoderState,
    predictor: NoisePredictor,
    alphas_cumprod: Vec<f64>,
}

struct BlockCache {
    x: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Mat,
    ctx: Mat,
    x1: Mat,
    act: Mat,
}

struct LayerCache {
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Mat,
}

/// Latent-to-RGB projection (4 latent channels); extra channels are ignored.
const DECODE_RGB: [[f64; 3]; 4] =
    [[0.298, 0.207, 0.208], [0.187, 0.286, 0.173], [-0.158, 0.189, 0.264], [-0.184, -0.271, -0.473]];
const DECODE_GAIN: f64 = 2.5;

fn random_mat(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let mut v = rng::standard_normal_vec(rng, rows * cols);
    for x in &mut v {
        *x *= std;
    }
    Mat::from_vec(rows, cols, v)
}

impl ToyBackend {
    pub fn new(config: ToyConfig) -> Result<Self, BackendError> {
        let descriptor = config.descriptor();
        descriptor.validate()?;
        if config.encoder_blocks == 0 || config.attn_dim == 0 || config.attention_sides.is_empty() {
            return Err(BackendError::InvalidDescriptor("toy backend needs blocks, attention dim and layers"));
        }
        let tokenizer = WordTokenizer::with_buckets(&descriptor, config.hash_buckets);
        let (h, l) = (config.width, config.max_len);
        let hidden = h * config.mlp_mult.max(1);
        let layout = EncoderLayout::new(tokenizer.vocab_size(), l, h, config.encoder_blocks, hidden);

        let mut wrng = rng::stream(config.seed, rng::LABEL_TOY_WEIGHTS, 0);
        let mut params = vec![0.0; layout.total];
        let mut fill = |offset: usize, n: usize, std: f64, r: &mut rand_chacha::ChaCha8Rng| {
            let v = rng::standard_normal_vec(r, n);
            for (p, x) in params[offset..offset + n].iter_mut().zip(v) {
                *p = x * std;
            }
        };
        fill(layout.tok_emb, layout.vocab * h, 0.5, &mut wrng);
        fill(layout.pos_emb, l * h, 0.1, &mut wrng);
        let inv_h = 1.0 / libm::sqrt(h as f64);
        let inv_hidden = 1.0 / libm::sqrt(hidden as f64);
        for b in layout.blocks.clone() {
            fill(b.wq, h * h, inv_h, &mut wrng);
            fill(b.wk, h * h, inv_h, &mut wrng);
            fill(b.wv, h * h, inv_h, &mut wrng);
            fill(b.wo, h * h, 0.5 * inv_h, &mut wrng);
            fill(b.w1, h * hidden, inv_h, &mut wrng);
            fill(b.w2, hidden * h, 0.5 * inv_hidden, &mut wrng);
        }

        let c = config.latent_channels;
        let d = config.attn_dim;
        let mut prng = rng::stream(config.seed, rng::LABEL_TOY_WEIGHTS, 1);
        let inv_c = 1.0 / libm::sqrt(c as f64);
        let inv_d = 1.0 / libm::sqrt(d as f64);
        let w_in = random_mat(&mut prng, c, c, inv_c);
        let layers = config
            .attention_sides
            .iter()
            .map(|&side| CrossLayer {
                side,
                wq: random_mat(&mut prng, c, d, 2.0 * inv_c),
                wk: random_mat(&mut prng, h, d, 2.0 * inv_h),
                wv: random_mat(&mut prng, h, d, inv_h),
                wo: random_mat(&mut prng, d, c, inv_d),
            })
            .collect();
        let w_out = random_mat(&mut prng, c, c, inv_c);

        let alphas_cumprod = scaled_linear_alphas_cumprod(config.train_timesteps, 0.00085, 0.012);
        let frozen = EncoderState { kind: EncoderKind::Frozen, params, descriptor: descriptor.clone() };
        Ok(Self {
            config,
            descriptor,
            tokenizer,
            layout,
            frozen,
            predictor: NoisePredictor { w_in, layers, w_out },
            alphas_cumprod,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &WordTokenizer {
        &self.tokenizer
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    fn check_state(&self, state: &EncoderState) -> Result<(), BackendError> {
        self.descriptor.ensure_same(&state.descriptor.backend_id)?;
        if state.params.len() != self.layout.total {
            return Err(BackendError::ShapeMismatch {
                what: "encoder parameters",
                expected: self.layout.total,
                got: state.params.len(),
            });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &TokenSequence) -> Result<(), BackendError> {
        if tokens.len() != self.descriptor.max_len {
            return Err(BackendError::ShapeMismatch {
                what: "token sequence",
                expected: self.descriptor.max_len,
                got: tokens.len(),
            });
        }
        if let Some(&bad) = tokens.as_slice().iter().find(|&&t| t as usize >= self.layout.vocab) {
            return Err(BackendError::ShapeMismatch {
                what: "token id",
                expected: self.layout.vocab,
                got: bad as usize,
            });
        }
        Ok(())
    }

    fn encoder_forward(&self, params: &[f64], tokens: &TokenSequence) -> (Mat, Vec<BlockCache>) {
        let lay = &self.layout;
        let (l, h, f) = (lay.len, lay.width, lay.hidden);
        let mut x = Mat::zeros(l, h);
        for (i, &tok) in tokens.as_slice().iter().enumerate() {
            let te = &params[lay.tok_emb + tok as usize * h..][..h];
            let pe = &params[lay.pos_emb + i * h..][..h];
            for ((o, a), b) in x.row_mut(i).iter_mut().zip(te).zip(pe) {
                *o = a + b;
            }
        }
        let scale = 1.0 / libm::sqrt(h as f64);
        let mut caches = Vec::with_capacity(lay.blocks.len());
        for b in &lay.blocks {
            let wq = Mat::from_slice(h, h, &params[b.wq..b.wq + h * h]);
            let wk = Mat::from_slice(h, h, &params[b.wk..b.wk + h * h]);
            let wv = Mat::from_slice(h, h, &params[b.wv..b.wv + h * h]);
            let wo = Mat::from_slice(h, h, &params[b.wo..b.wo + h * h]);
            let w1 = Mat::from_slice(h, f, &params[b.w1..b.w1 + h * f]);
            let b1 = &params[b.b1..b.b1 + f];
            let w2 = Mat::from_slice(f, h, &params[b.w2..b.w2 + f * h]);

            let q = x.matmul(&wq);
            let k = x.matmul(&wk);
            let v = x.matmul(&wv);
            let mut probs = q.matmul_t(&k);
            probs.scale(scale);
            for i in 0..l {
                for j in i + 1..l {
                    probs.set(i, j, f64::NEG_INFINITY);
                }
            }
            softmax_rows(&mut probs);
            let ctx = probs.matmul(&v);
            let mut x1 = ctx.matmul(&wo);
            x1.add_assign(&x);
            let mut act = x1.matmul(&w1);
            for row in act.data.chunks_mut(f) {
                for (a, bias) in row.iter_mut().zip(b1) {
                    *a = libm::tanh(*a + bias);
                }
            }
            let mut x2 = act.matmul(&w2);
            x2.add_assign(&x1);
            let prev = core::mem::replace(&mut x, x2);
            caches.push(BlockCache { x: prev, q, k, v, probs, ctx, x1, act });
        }
        (x, caches)
    }

    fn timestep_features(&self, t: usize) -> Vec<f64> {
        let c = self.config.latent_channels;
        (0..c)
            .map(|i| {
                let freq = libm::pow(10_000.0, -((i / 2) as f64) / (c as f64 / 2.0).max(1.0));
                let arg = t as f64 * freq;
                0.5 * if i % 2 == 0 { libm::sin(arg) } else { libm::cos(arg) }
            })
            .collect()
    }

    fn predictor_forward(
        &self,
        latent: &Latent,
        emb: &Embeddings,
        t: usize,
        mut editor: Option<&mut dyn AttentionEditor>,
    ) -> (Mat, Vec<LayerCache>) {
        let p = &self.predictor;
        let side = self.config.latent_side;
        let scale = 1.0 / libm::sqrt(self.config.attn_dim as f64);
        let mut h = latent.as_mat().matmul(&p.w_in);
        let temb = self.timestep_features(t);
        for row in h.data.chunks_mut(temb.len()) {
            for (v, e) in row.iter_mut().zip(&temb) {
                *v += e;
            }
        }
        let mut caches = Vec::with_capacity(p.layers.len());
        for (index, layer) in p.layers.iter().enumerate() {
            let factor = side / layer.side;
            let pooled = avg_pool(&h, side, factor);
            let q = pooled.matmul(&layer.wq);
            let k = emb.matmul(&layer.wk);
            let v = emb.matmul(&layer.wv);
            let mut probs = q.matmul_t(&k);
            probs.scale(scale);
            if let Some(ed) = editor.as_deref_mut() {
                let info = AttentionLayer { index, side: layer.side, tokens: emb.rows };
                ed.edit(&info, &mut probs.data);
            }
            softmax_rows(&mut probs);
            let out = probs.matmul(&v).matmul(&layer.wo);
            let mut next = upsample(&out, layer.side, factor);
            next.add_assign(&h);
            h = next;
            caches.push(LayerCache { q, k, v, probs });
        }
        let mut eps = h.matmul(&p.w_out);
        for v in &mut eps.data {
            *v = libm::tanh(*v);
        }
        (eps, caches)
    }
}

fn scaled_linear_alphas_cumprod(n: usize, beta_start: f64, beta_end: f64) -> Vec<f64> {
    let (s0, s1) = (libm::sqrt(beta_start), libm::sqrt(beta_end));
    let mut acc = 1.0;
    (0..n)
        .map(|i| {
            let frac = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            let b = s0 + (s1 - s0) * frac;
            acc *= 1.0 - b * b;
            acc
        })
        .collect()
}

/// Average-pools a `side x side` pixel-major grid by `factor`.
fn avg_pool(m: &Mat, side: usize, factor: usize) -> Mat {
    if factor == 1 {
        return m.clone();
    }
    let out_side = side / factor;
    let c = m.cols;
    let mut out = Mat::zeros(out_side * out_side, c);
    let w = 1.0 / (factor * factor) as f64;
    for y in 0..side {
        for x in 0..side {
            let dst = (y / factor) * out_side + x / factor;
            let src = m.row(y * side + x);
            for (o, s) in out.row_mut(dst).iter_mut().zip(src) {
                *o += s * w;
            }
        }
    }
    out
}

/// Transpose of [`avg_pool`].
fn avg_pool_backward(g: &Mat, side: usize, factor: usize) -> Mat {
    if factor == 1 {
        return g.clone();
    }
    let out_side = side / factor;
    let w = 1.0 / (factor * factor) as f64;
    let mut out = Mat::zeros(side * side, g.cols);
    for y in 0..side {
        for x in 0..side {
            let src = g.row((y / factor) * out_side + x / factor);
            for (o, s) in out.row_mut(y * side + x).iter_mut().zip(src) {
                *o = s * w;
            }
        }
    }
    out
}

/// Nearest upsampling of a `side x side` grid by `factor`.
fn upsample(m: &Mat, side: usize, factor: usize) -> Mat {
    if factor == 1 {
        return m.clone();
    }
    let big = side * factor;
    let mut out = Mat::zeros(big * big, m.cols);
    for y in 0..big {
        for x in 0..big {
            let src = m.row((y / factor) * side + x / factor);
            out.row_mut(y * big + x).copy_from_slice(src);
        }
    }
    out
}

/// Transpose of [`upsample`]: sums each block.
fn upsample_backward(g: &Mat, side: usize, factor: usize) -> Mat {
    if factor == 1 {
        return g.clone();
    }
    let big = side * factor;
    let mut out = Mat::zeros(side * side, g.cols);
    for y in 0..big {
        for x in 0..big {
            let src = g.row(y * big + x);
            for (o, s) in out.row_mut((y / factor) * side + x / factor).iter_mut().zip(src) {
                *o += s;
            }
        }
    }
    out
}

impl Backend for ToyBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn tokenize(&self, text: &str) -> Result<Tokenized, BackendError> {
        self.tokenizer.tokenize(text)
    }

    fn frozen_encoder(&self) -> &EncoderState {
        &self.frozen
    }

    fn encode_tokens(&self, state: &EncoderState, tokens: &TokenSequence) -> Result<Embeddings, BackendError> {
        self.check_state(state)?;
        self.check_tokens(tokens)?;
        Ok(self.encoder_forward(&state.params, tokens).0)
    }

    fn predict_noise(
        &self,
        latent: &Latent,
        embeddings: &Embeddings,
        t: usize,
        editor: Option<&mut dyn AttentionEditor>,
    ) -> Result<NoisePrediction, BackendError> {
        self.check_latent(latent)?;
        check_embeddings(&self.descriptor, embeddings)?;
        self.check_t(t)?;
        let (eps, caches) = self.predictor_forward(latent, embeddings, t, editor);
        let attention = caches
            .into_iter()
            .zip(&self.predictor.layers)
            .enumerate()
            .map(|(index, (c, layer))| AttentionMap {
                layer: AttentionLayer { index, side: layer.side, tokens: embeddings.rows },
                probs: c.probs.data,
            })
            .collect();
        Ok(NoisePrediction {
            noise: Latent { side: latent.side, channels: latent.channels, data: eps.data },
            attention,
        })
    }

    fn decode_latent(&self, latent: &Latent) -> Result<RgbImage, BackendError> {
        self.check_latent(latent)?;
        let side = latent.side;
        let out_side = (side * DECODE_FACTOR) as u32;
        let mut img = RgbImage::new(out_side, out_side);
        for y in 0..side {
            for x in 0..side {
                let cell = &latent.data[(y * side + x) * latent.channels..][..latent.channels];
                let mut rgb = [0u8; 3];
                for (k, out) in rgb.iter_mut().enumerate() {
                    let z: f64 = cell.iter().zip(DECODE_RGB.iter()).map(|(v, w)| v * w[k]).sum();
                    let s = 1.0 / (1.0 + libm::exp(-DECODE_GAIN * z));
                    *out = libm::round(s * 255.0) as u8;
                }
                for dy in 0..DECODE_FACTOR {
                    for dx in 0..DECODE_FACTOR {
                        img.put_pixel((x * DECODE_FACTOR + dx) as u32, (y * DECODE_FACTOR + dy) as u32, rgb);
                    }
                }
            }
        }
        Ok(img)
    }

    fn encode_image(&self, image: &RgbImage) -> Latent {
        let side = self.config.latent_side;
        let px = (side * DECODE_FACTOR) as u32;
        let img = if image.width == px && image.height == px { image.clone() } else { image.resize_nearest(px, px) };
        let c = self.config.latent_channels;
        let mut latent = Latent::zeros(side, c);
        let norm = 1.0 / (DECODE_FACTOR * DECODE_FACTOR) as f64;
        for y in 0..side {
            for x in 0..side {
                let mut mean = [0.0f64; 3];
                for dy in 0..DECODE_FACTOR {
                    for dx in 0..DECODE_FACTOR {
                        let p = img.pixel((x * DECODE_FACTOR + dx) as u32, (y * DECODE_FACTOR + dy) as u32);
                        for k in 0..3 {
                            mean[k] += p[k] as f64 / 255.0 * norm;
                        }
                    }
                }
                let cell = &mut latent.data[(y * side + x) * c..][..c];
                for (ch, out) in cell.iter_mut().enumerate().take(DECODE_RGB.len()) {
                    *out = (0..3).map(|k| DECODE_RGB[ch][k] * (2.0 * mean[k] - 1.0)).sum::<f64>() * 2.0;
                }
            }
        }
        latent
    }

    fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }
}

impl ToyBackend {
    fn check_latent(&self, latent: &Latent) -> Result<(), BackendError> {
        if latent.side != self.config.latent_side {
            return Err(BackendError::ShapeMismatch {
                what: "latent side",
                expected: self.config.latent_side,
                got: latent.side,
            });
        }
        if latent.channels != self.config.latent_channels {
            return Err(BackendError::ShapeMismatch {
                what: "latent channels",
                expected: self.config.latent_channels,
                got: latent.channels,
            });
        }
        if latent.data.len() != latent.side * latent.side * latent.channels {
            return Err(BackendError::ShapeMismatch {
                what: "latent data",
                expected: latent.side * latent.side * latent.channels,
                got: latent.data.len(),
            });
        }
        Ok(())
    }

    fn check_t(&self, t: usize) -> Result<(), BackendError> {
        if t >= self.config.train_timesteps {
            return Err(BackendError::TimestepOutOfRange { t, max: self.config.train_timesteps });
        }
        Ok(())
    }
}

impl DifferentiableBackend for ToyBackend {
    fn encoder_vjp(
        &self,
        state: &EncoderState,
        tokens: &TokenSequence,
        d_embeddings: &Embeddings,
    ) -> Result<Vec<f64>, BackendError> {
        self.check_state(state)?;
        self.check_tokens(tokens)?;
        check_embeddings(&self.descriptor, d_embeddings)?;
        let params = &state.params;
        let lay = &self.layout;
        let (l, h, f) = (lay.len, lay.width, lay.hidden);
        let scale = 1.0 / libm::sqrt(h as f64);
        let (_, caches) = self.encoder_forward(params, tokens);
        let mut grad = vec![0.0; lay.total];
        let mut dx = d_embeddings.clone();

        for (b, cache) in lay.blocks.iter().zip(&caches).rev() {
            let wq = Mat::from_slice(h, h, &params[b.wq..b.wq + h * h]);
            let wk = Mat::from_slice(h, h, &params[b.wk..b.wk + h * h]);
            let wv = Mat::from_slice(h, h, &params[b.wv..b.wv + h * h]);
            let wo = Mat::from_slice(h, h, &params[b.wo..b.wo + h * h]);
            let w1 = Mat::from_slice(h, f, &params[b.w1..b.w1 + h * f]);
            let w2 = Mat::from_slice(f, h, &params[b.w2..b.w2 + f * h]);

            // x2 = x1 + tanh(x1 W1 + b1) W2
            let d_w2 = cache.act.t_matmul(&dx);
            let mut dz = dx.matmul_t(&w2);
            for (g, a) in dz.data.iter_mut().zip(&cache.act.data) {
                *g *= 1.0 - a * a;
            }
            let d_w1 = cache.x1.t_matmul(&dz);
            let mut d_b1 = vec![0.0; f];
            for row in dz.data.chunks(f) {
                for (acc, g) in d_b1.iter_mut().zip(row) {
                    *acc += g;
                }
            }
            let mut dx1 = dz.matmul_t(&w1);
            dx1.add_assign(&dx);

            // x1 = x + softmax(mask(q k^T * scale)) v Wo
            let d_wo = cache.ctx.t_matmul(&dx1);
            let d_ctx = dx1.matmul_t(&wo);
            let d_probs = d_ctx.matmul_t(&cache.v);
            let d_v = cache.probs.t_matmul(&d_ctx);
            let mut d_scores = softmax_rows_backward(&cache.probs, &d_probs);
            d_scores.scale(scale);
            let d_q = d_scores.matmul(&cache.k);
            let d_k = d_scores.t_matmul(&cache.q);
            let d_wq = cache.x.t_matmul(&d_q);
            let d_wk = cache.x.t_matmul(&d_k);
            let d_wv = cache.x.t_matmul(&d_v);
            let mut d_in = dx1;
            d_in.add_assign(&d_q.matmul_t(&wq));
            d_in.add_assign(&d_k.matmul_t(&wk));
            d_in.add_assign(&d_v.matmul_t(&wv));

            for (off, g) in [
                (b.wq, &d_wq.data),
                (b.wk, &d_wk.data),
                (b.wv, &d_wv.data),
                (b.wo, &d_wo.data),
                (b.w1, &d_w1.data),
                (b.b1, &d_b1),
                (b.w2, &d_w2.data),
            ] {
                for (acc, v) in grad[off..off + g.len()].iter_mut().zip(g.iter()) {
                    *acc += v;
                }
            }
            dx = d_in;
        }

        for (i, &tok) in tokens.as_slice().iter().enumerate() {
            let row = dx.row(i);
            let te = lay.tok_emb + tok as usize * h;
            let pe = lay.pos_emb + i * h;
            for (j, g) in row.iter().enumerate() {
                grad[te + j] += g;
                grad[pe + j] += g;
            }
        }
        debug_assert_eq!(l, tokens.len());
        Ok(grad)
    }

    fn noise_vjp(
        &self,
        latent: &Latent,
        embeddings: &Embeddings,
        t: usize,
        d_noise: &Latent,
    ) -> Result<Embeddings, BackendError> {
        self.check_latent(latent)?;
        self.check_latent(d_noise)?;
        check_embeddings(&self.descriptor, embeddings)?;
        self.check_t(t)?;
        let p = &self.predictor;
        let side = self.config.latent_side;
        let scale = 1.0 / libm::sqrt(self.config.attn_dim as f64);
        let (eps, caches) = self.predictor_forward(latent, embeddings, t, None);

        let mut du = d_noise.as_mat();
        for (g, e) in du.data.iter_mut().zip(&eps.data) {
            *g *= 1.0 - e * e;
        }
        let mut dh = du.matmul_t(&p.w_out);
        let mut d_emb = Mat::zeros(embeddings.rows, embeddings.cols);
        for (layer, cache) in p.layers.iter().zip(&caches).rev() {
            let factor = side / layer.side;
            let d_out = upsample_backward(&dh, layer.side, factor);
            let g = d_out.matmul_t(&layer.wo);
            let d_probs = g.matmul_t(&cache.v);
            let d_v = cache.probs.t_matmul(&g);
            let mut d_scores = softmax_rows_backward(&cache.probs, &d_probs);
            d_scores.scale(scale);
            let d_q = d_scores.matmul(&cache.k);
            let d_k = d_scores.t_matmul(&cache.q);
            d_emb.add_assign(&d_k.matmul_t(&layer.wk));
            d_emb.add_assign(&d_v.matmul_t(&layer.wv));
            let d_pooled = d_q.matmul_t(&layer.wq);
            dh.add_assign(&avg_pool_backward(&d_pooled, side, factor));
        }
        Ok(d_emb)
    }
}

//! Affective multimodal transformer: video encoder, chord decoder with
//! relative-position masked self-attention and cross-attention, and
//! constrained autoregressive generation.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnMask, ParamId, ParamStore, Tape, Var};
use crate::dataset::NON_SEMANTIC_FEATURES;
use crate::error::{Error, Result};
use crate::music::{ChordEvent, ChordQuality, ChordVocabulary, Key, Mode, Token};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub d_ff: usize,
    pub d_sem: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub max_rel_dist: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 512,
            n_heads: 8,
            n_layers_enc: 6,
            n_layers_dec: 6,
            d_ff: 2048,
            d_sem: 768,
            vocab_size: ChordVocabulary::SIZE,
            max_len: 300,
            max_rel_dist: 300,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    /// A small configuration for desk-scale experiments.
    pub fn small(d_sem: usize) -> Self {
        ModelConfig {
            d_model: 32,
            n_heads: 2,
            n_layers_enc: 1,
            n_layers_dec: 1,
            d_ff: 64,
            d_sem,
            max_len: 300,
            max_rel_dist: 32,
            dropout: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_len == 0 || self.max_rel_dist == 0 || self.d_ff == 0 {
            return bad("max_len, max_rel_dist and d_ff must be >= 1".into());
        }
        if self.vocab_size != ChordVocabulary::SIZE {
            return bad(format!("vocab_size must be {}", ChordVocabulary::SIZE));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn video_dim(&self) -> usize {
        NON_SEMANTIC_FEATURES + self.d_sem
    }

    /// Closed-form learnable scalar count.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ff;
        let embeddings = QUALITY_ROWS * d + ROOT_ROWS * d + (d + 1) * d + d + self.video_dim() * d + d;
        let attn = 4 * (d * d + d);
        let norm = 2 * d;
        let ff = d * f + f + f * d + d;
        let enc_layer = 2 * norm + attn + ff;
        let dec_layer = 3 * norm + 2 * attn + ff + (2 * self.max_rel_dist - 1) * d;
        embeddings
            + self.n_layers_enc * enc_layer
            + norm
            + self.n_layers_dec * dec_layer
            + norm
            + d * self.vocab_size
            + self.vocab_size
    }
}

// 13 qualities then silence, pad, sos
const QUALITY_ROWS: usize = ChordQuality::COUNT + 3;
// 12 roots then silence, pad, sos
const ROOT_ROWS: usize = 12 + 3;

fn embedding_rows(token: usize) -> Result<(usize, usize)> {
    Ok(match ChordVocabulary::detokenize(token)? {
        Token::Event(ChordEvent::Chord(c)) => (c.quality.index(), c.root.value() as usize),
        Token::Event(ChordEvent::Silence) => (ChordQuality::COUNT, 12),
        Token::Pad => (ChordQuality::COUNT + 1, 13),
        Token::Sos => (ChordQuality::COUNT + 2, 14),
    })
}

/// Key scalar concatenated to every chord embedding: 1 major, 0 minor.
pub fn key_scalar(key: Key) -> f64 {
    match key.mode {
        Mode::Major => 1.0,
        Mode::Minor => 0.0,
    }
}

/// Sinusoidal positional encoding table, `n x d`.
pub fn positional_encoding(n: usize, d: usize) -> Matrix {
    let mut pe = Matrix::zeros(n, d);
    for pos in 0..n {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct AttnWeights {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm1: Norm,
    attn: AttnWeights,
    norm2: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    norm1: Norm,
    self_attn: AttnWeights,
    rel: Vec<ParamId>,
    norm2: Norm,
    cross_attn: AttnWeights,
    norm3: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct Layout {
    quality_emb: ParamId,
    root_emb: ParamId,
    chord_proj: Linear,
    video_proj: Linear,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    head: Linear,
}

/// How the parameters are created.
enum Init<'a> {
    Random(&'a mut ChaCha8Rng),
    From(&'a ParamStore),
}

struct Builder<'a> {
    store: ParamStore,
    init: Init<'a>,
}

impl Builder<'_> {
    fn tensor(&mut self, name: String, rows: usize, cols: usize, fill: Fill) -> Result<ParamId> {
        let value = match &mut self.init {
            Init::Random(rng) => match fill {
                Fill::Xavier => {
                    let limit = (6.0 / (rows + cols) as f64).sqrt();
                    Matrix::uniform(rows, cols, limit, *rng)
                }
                Fill::Normal(std) => Matrix::randn(rows, cols, std, *rng),
                Fill::Const(v) => Matrix::filled(rows, cols, v),
            },
            Init::From(src) => {
                let id = src
                    .find(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
                let m = src.get(id);
                if m.shape() != (rows, cols) {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        m.shape(),
                        (rows, cols)
                    )));
                }
                m.clone()
            }
        };
        Ok(self.store.add(name, value))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.tensor(format!("{name}.w"), fan_in, fan_out, Fill::Xavier)?,
            b: self.tensor(format!("{name}.b"), 1, fan_out, Fill::Const(0.0))?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            g: self.tensor(format!("{name}.g"), 1, d, Fill::Const(1.0))?,
            b: self.tensor(format!("{name}.b"), 1, d, Fill::Const(0.0))?,
        })
    }

    fn attn(&mut self, name: &str, d: usize) -> Result<AttnWeights> {
        Ok(AttnWeights {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            o: self.linear(&format!("{name}.o"), d, d)?,
        })
    }

    fn ff(&mut self, name: &str, d: usize, f: usize) -> Result<FeedForward> {
        Ok(FeedForward {
            up: self.linear(&format!("{name}.up"), d, f)?,
            down: self.linear(&format!("{name}.down"), f, d)?,
        })
    }
}

#[derive(Clone, Copy)]
enum Fill {
    Xavier,
    Normal(f64),
    Const(f64),
}

fn build_layout(cfg: &ModelConfig, init: Init<'_>) -> Result<(ParamStore, Layout)> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut b = Builder {
        store: ParamStore::new(),
        init,
    };
    let emb_std = 1.0 / (d as f64).sqrt();
    let quality_emb = b.tensor("embed.quality".into(), QUALITY_ROWS, d, Fill::Normal(emb_std))?;
    let root_emb = b.tensor("embed.root".into(), ROOT_ROWS, d, Fill::Normal(emb_std))?;
    let chord_proj = b.linear("embed.chord", d + 1, d)?;
    let video_proj = b.linear("embed.video", cfg.video_dim(), d)?;
    let mut encoder = Vec::with_capacity(cfg.n_layers_enc);
    for l in 0..cfg.n_layers_enc {
        encoder.push(EncoderLayer {
            norm1: b.norm(&format!("enc.{l}.norm1"), d)?,
            attn: b.attn(&format!("enc.{l}.attn"), d)?,
            norm2: b.norm(&format!("enc.{l}.norm2"), d)?,
            ff: b.ff(&format!("enc.{l}.ff"), d, cfg.d_ff)?,
        });
    }
    let enc_norm = b.norm("enc.norm", d)?;
    let mut decoder = Vec::with_capacity(cfg.n_layers_dec);
    for l in 0..cfg.n_layers_dec {
        let norm1 = b.norm(&format!("dec.{l}.norm1"), d)?;
        let self_attn = b.attn(&format!("dec.{l}.self"), d)?;
        let rel = (0..cfg.n_heads)
            .map(|h| {
                b.tensor(
                    format!("dec.{l}.self.rel.{h}"),
                    2 * cfg.max_rel_dist - 1,
                    cfg.d_head(),
                    Fill::Normal(emb_std),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        decoder.push(DecoderLayer {
            norm1,
            self_attn,
            rel,
            norm2: b.norm(&format!("dec.{l}.norm2"), d)?,
            cross_attn: b.attn(&format!("dec.{l}.cross"), d)?,
            norm3: b.norm(&format!("dec.{l}.norm3"), d)?,
            ff: b.ff(&format!("dec.{l}.ff"), d, cfg.d_ff)?,
        });
    }
    let dec_norm = b.norm("dec.norm", d)?;
    let head = b.linear("head", d, cfg.vocab_size)?;
    let layout = Layout {
        quality_emb,
        root_emb,
        chord_proj,
        video_proj,
        encoder,
        enc_norm,
        decoder,
        dec_norm,
        head,
    };
    if let Init::From(src) = b.init {
        if src.len() != b.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, configuration needs {}",
                src.len(),
                b.store.len()
            )));
        }
    }
    Ok((b.store, layout))
}

/// Per-pass switches: dropout, decoder attention flavor, and optional
/// capture of attention probability matrices.
pub struct Pass<'r> {
    dropout: f64,
    rng: Option<&'r mut ChaCha8Rng>,
    /// Use learned relative-position logits in decoder self-attention.
    pub relative: bool,
    /// When `Some`, every attention probability matrix is appended here.
    pub attention: Option<Vec<Var>>,
}

impl<'r> Pass<'r> {
    pub fn eval() -> Self {
        Pass {
            dropout: 0.0,
            rng: None,
            relative: true,
            attention: None,
        }
    }

    pub fn train(dropout: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Pass {
            dropout,
            rng: Some(rng),
            relative: true,
            attention: None,
        }
    }

    pub fn absolute(mut self) -> Self {
        self.relative = false;
        self
    }

    pub fn tracing(mut self) -> Self {
        self.attention = Some(Vec::new());
        self
    }

    fn drop(&mut self, tape: &mut Tape, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => tape.dropout(x, self.dropout, rng),
            _ => x,
        }
    }
}

/// Scaled dot-product attention for one head:
/// `softmax((q k^T + S_rel) / sqrt(d_k)) v`, with
/// `S_rel[i, j] = q_i . rel[clip(j - i)]` when a relative table is given.
pub fn relative_self_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    rel: Option<(Var, usize)>,
    mask: &AttnMask,
) -> (Var, Var) {
    let d_k = tape.value(q).cols() as f64;
    let mut scores = tape.matmul_t(q, k);
    if let Some((table, max_rel)) = rel {
        let s_rel = tape.rel_logits(q, table, max_rel);
        scores = tape.add(scores, s_rel);
    }
    let scaled = tape.scale(scores, 1.0 / d_k.sqrt());
    let probs = tape.softmax(scaled, Some(mask));
    (tape.matmul(probs, v), probs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationConstraints {
    pub max_repeat_chord: usize,
    pub max_repeat_silence: usize,
}

impl Default for GenerationConstraints {
    fn default() -> Self {
        GenerationConstraints {
            max_repeat_chord: 2,
            max_repeat_silence: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum Decoding {
    #[default]
    Greedy,
    Sample {
        temperature: f64,
        seed: u64,
    },
}

/// Generated chords plus the logits each step was chosen from.
#[derive(Debug, Clone)]
pub struct Generation {
    pub chords: Vec<ChordEvent>,
    /// Row `t` holds the step-`t` logits; primer rows are the teacher-forced
    /// logits for the primer chord.
    pub logits: Matrix,
}

#[derive(Debug, Clone)]
pub struct AmtModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl AmtModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, layout) = build_layout(&config, Init::Random(&mut rng))?;
        Ok(AmtModel { config, params, layout })
    }

    /// Rebuilds a model from named tensors, checking every shape.
    pub fn from_params(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        let (params, layout) = build_layout(&config, Init::From(params))?;
        Ok(AmtModel { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Ids of all relative-position tables.
    pub fn relative_tables(&self) -> Vec<ParamId> {
        self.layout.decoder.iter().flat_map(|l| l.rel.iter().copied()).collect()
    }

    fn linear(&self, tape: &mut Tape, x: Var, l: Linear) -> Var {
        let w = tape.param(l.w);
        let b = tape.param(l.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    fn norm(&self, tape: &mut Tape, x: Var, n: Norm) -> Var {
        let g = tape.param(n.g);
        let b = tape.param(n.b);
        tape.layer_norm(x, g, b)
    }

    fn add_positions(&self, tape: &mut Tape, x: Var) -> Var {
        let n = tape.value(x).rows();
        let pe = tape.constant(positional_encoding(n, self.config.d_model));
        tape.add(x, pe)
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.config.max_len {
            return Err(Error::Shape(format!(
                "sequence length {n} outside 1..={}",
                self.config.max_len
            )));
        }
        Ok(())
    }

    /// `PE(E_chord([k, E_q(quality) + E_r(root)]))` per step.
    pub fn embed_music(&self, tape: &mut Tape, tokens: &[usize], key: Key, pass: &mut Pass) -> Result<Var> {
        self.check_len(tokens.len())?;
        let rows = tokens.iter().map(|&t| embedding_rows(t)).collect::<Result<Vec<_>>>()?;
        let q_table = tape.param(self.layout.quality_emb);
        let r_table = tape.param(self.layout.root_emb);
        let eq = tape.gather(q_table, rows.iter().map(|r| r.0).collect());
        let er = tape.gather(r_table, rows.iter().map(|r| r.1).collect());
        let chord = tape.add(eq, er);
        let k = tape.constant(Matrix::filled(tokens.len(), 1, key_scalar(key)));
        let cat = tape.concat_cols(&[k, chord]);
        let proj = self.linear(tape, cat, self.layout.chord_proj);
        let x = self.add_positions(tape, proj);
        Ok(pass.drop(tape, x))
    }

    /// `PE(FC([scene_offset, motion, emotion, semantic]))` per step.
    pub fn embed_video(&self, tape: &mut Tape, features: &Matrix, pass: &mut Pass) -> Result<Var> {
        self.check_len(features.rows())?;
        if features.cols() != self.config.video_dim() {
            return Err(Error::Shape(format!(
                "video features have {} columns, model expects {}",
                features.cols(),
                self.config.video_dim()
            )));
        }
        let x = tape.constant(features.clone());
        let proj = self.linear(tape, x, self.layout.video_proj);
        let x = self.add_positions(tape, proj);
        Ok(pass.drop(tape, x))
    }

    #[allow(clippy::too_many_arguments)]
    fn multi_head(
        &self,
        tape: &mut Tape,
        x_q: Var,
        x_kv: Var,
        w: &AttnWeights,
        rel: Option<&[ParamId]>,
        mask: &AttnMask,
        pass: &mut Pass,
    ) -> Var {
        let dh = self.config.d_head();
        let q = self.linear(tape, x_q, w.q);
        let k = self.linear(tape, x_kv, w.k);
        let v = self.linear(tape, x_kv, w.v);
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let table = rel.map(|ids| (tape.param(ids[h]), self.config.max_rel_dist));
            let (out, probs) = relative_self_attention(tape, qh, kh, vh, table, mask);
            if let Some(trace) = pass.attention.as_mut() {
                trace.push(probs);
            }
            heads.push(out);
        }
        let cat = tape.concat_cols(&heads);
        self.linear(tape, cat, w.o)
    }

    fn feed_forward(&self, tape: &mut Tape, x: Var, ff: &FeedForward, pass: &mut Pass) -> Var {
        let h = self.linear(tape, x, ff.up);
        let h = tape.relu(h);
        let h = pass.drop(tape, h);
        self.linear(tape, h, ff.down)
    }

    /// Pre-norm encoder stack over the video embedding; `valid` marks real
    /// (non-pad) steps, which are the only keys attended to.
    pub fn encode(&self, tape: &mut Tape, video_emb: Var, valid: &[bool], pass: &mut Pass) -> Result<Var> {
        let n = tape.value(video_emb).rows();
        if valid.len() != n {
            return Err(Error::Shape(format!(
                "mask length {} != sequence length {n}",
                valid.len()
            )));
        }
        let mask = AttnMask::keys(n, valid);
        let mut x = video_emb;
        for layer in &self.layout.encoder {
            let h = self.norm(tape, x, layer.norm1);
            let h = self.multi_head(tape, h, h, &layer.attn, None, &mask, pass);
            let h = pass.drop(tape, h);
            x = tape.add(x, h);
            let h = self.norm(tape, x, layer.norm2);
            let h = self.feed_forward(tape, h, &layer.ff, pass);
            let h = pass.drop(tape, h);
            x = tape.add(x, h);
        }
        Ok(self.norm(tape, x, self.layout.enc_norm))
    }

    /// Decoder stack and output head; returns `n x vocab` logits. Step `t`
    /// sees music steps `<= t` and every valid memory step.
    pub fn decode(
        &self,
        tape: &mut Tape,
        music_emb: Var,
        memory: Var,
        memory_valid: &[bool],
        pass: &mut Pass,
    ) -> Result<Var> {
        let n = tape.value(music_emb).rows();
        let m = tape.value(memory).rows();
        if memory_valid.len() != m {
            return Err(Error::Shape(format!(
                "memory mask length {} != memory length {m}",
                memory_valid.len()
            )));
        }
        let causal = AttnMask::causal(n);
        let cross = AttnMask::keys(n, memory_valid);
        let mut x = music_emb;
        for layer in &self.layout.decoder {
            let rel = pass.relative.then_some(layer.rel.as_slice());
            let h = self.norm(tape, x, layer.norm1);
            let h = self.multi_head(tape, h, h, &layer.self_attn, rel, &causal, pass);
            let h = pass.drop(tape, h);
            x = tape.add(x, h);
            let h = self.norm(tape, x, layer.norm2);
            let h = self.multi_head(tape, h, memory, &layer.cross_attn, None, &cross, pass);
            let h = pass.drop(tape, h);
            x = tape.add(x, h);
            let h = self.norm(tape, x, layer.norm3);
            let h = self.feed_forward(tape, h, &layer.ff, pass);
            let h = pass.drop(tape, h);
            x = tape.add(x, h);
        }
        let x = self.norm(tape, x, self.layout.dec_norm);
        Ok(self.linear(tape, x, self.layout.head))
    }

    /// Full teacher-forced pass: decoder input tokens against video features.
    pub fn forward(
        &self,
        tape: &mut Tape,
        decoder_input: &[usize],
        key: Key,
        video: &Matrix,
        video_valid: &[bool],
        pass: &mut Pass,
    ) -> Result<Var> {
        let v = self.embed_video(tape, video, pass)?;
        let memory = self.encode(tape, v, video_valid, pass)?;
        let music = self.embed_music(tape, decoder_input, key, pass)?;
        self.decode(tape, music, memory, video_valid, pass)
    }

    /// Logits without building a gradient-carrying result for the caller.
    pub fn logits(&self, decoder_input: &[usize], key: Key, video: &Matrix, video_valid: &[bool]) -> Result<Matrix> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, decoder_input, key, video, video_valid, &mut Pass::eval())?;
        Ok(tape.value(out).clone())
    }

    /// Autoregressive generation, one chord per video step. The primer is
    /// copied verbatim; afterwards the best token is taken unless it would
    /// extend a run of identical chords (or silences) past the limit, in
    /// which case the runner-up is emitted. `PAD` and `SOS` are never emitted.
    pub fn generate(
        &self,
        video: &Matrix,
        key: Key,
        primer: &[ChordEvent],
        constraints: &GenerationConstraints,
        decoding: Decoding,
    ) -> Result<Generation> {
        let n = video.rows();
        self.check_len(n)?;
        if primer.len() >= n && n > 0 && !primer.is_empty() {
            return Err(Error::InvalidInput(format!(
                "primer of {} chords must be shorter than the video ({n} s)",
                primer.len()
            )));
        }
        if constraints.max_repeat_chord == 0 || constraints.max_repeat_silence == 0 {
            return Err(Error::InvalidInput("repeat limits must be >= 1".into()));
        }
        let valid = vec![true; n];
        let memory = {
            let mut tape = Tape::new(&self.params);
            let mut pass = Pass::eval();
            let v = self.embed_video(&mut tape, video, &mut pass)?;
            let mem = self.encode(&mut tape, v, &valid, &mut pass)?;
            tape.value(mem).clone()
        };
        let mut rng = match decoding {
            Decoding::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Decoding::Greedy => None,
        };

        let mut tokens = vec![ChordVocabulary::SOS];
        let mut out: Vec<usize> = Vec::with_capacity(n);
        let mut logits = Matrix::zeros(n, self.config.vocab_size);
        for t in 0..n {
            let step_logits = {
                let mut tape = Tape::new(&self.params);
                let mut pass = Pass::eval();
                let mem = tape.constant(memory.clone());
                let music = self.embed_music(&mut tape, &tokens, key, &mut pass)?;
                let z = self.decode(&mut tape, music, mem, &valid, &mut pass)?;
                tape.value(z).row(t).to_vec()
            };
            logits.row_mut(t).copy_from_slice(&step_logits);
            let chosen = if let Some(&p) = primer.get(t) {
                ChordVocabulary::event_id(p)
            } else {
                choose_token(&step_logits, &out, constraints, decoding, rng.as_mut())
            };
            out.push(chosen);
            tokens.push(chosen);
        }
        let chords = out
            .into_iter()
            .map(ChordVocabulary::event)
            .collect::<Result<Vec<_>>>()?;
        Ok(Generation { chords, logits })
    }
}

/// Length of the run of `last` at the end of `history`.
fn trailing_run(history: &[usize]) -> usize {
    match history.last() {
        None => 0,
        Some(&last) => history.iter().rev().take_while(|&&t| t == last).count(),
    }
}

fn choose_token(
    logits: &[f64],
    history: &[usize],
    constraints: &GenerationConstraints,
    decoding: Decoding,
    rng: Option<&mut ChaCha8Rng>,
) -> usize {
    let allowed = |id: usize| id != ChordVocabulary::PAD && id != ChordVocabulary::SOS;
    let blocked = history.last().copied().filter(|&last| {
        let limit = if last == ChordVocabulary::SILENCE {
            constraints.max_repeat_silence
        } else {
            constraints.max_repeat_chord
        };
        trailing_run(history) >= limit
    });
    match (decoding, rng) {
        (Decoding::Sample { temperature, .. }, Some(rng)) => {
            let t = temperature.max(1e-6);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits
                .iter()
                .enumerate()
                .map(|(id, &z)| {
                    if allowed(id) && Some(id) != blocked {
                        ((z - max) / t).exp()
                    } else {
                        0.0
                    }
                })
                .collect();
            WeightedIndex::new(&weights)
                .map(|d| d.sample(rng))
                .unwrap_or_else(|_| ranked(logits, allowed)[0])
        }
        _ => {
            let order = ranked(logits, allowed);
            if Some(order[0]) == blocked {
                order[1]
            } else {
                order[0]
            }
        }
    }
}

/// Token ids sorted by descending logit, ties to the lower id.
fn ranked(logits: &[f64], allowed: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..logits.len()).filter(|&i| allowed(i)).collect();
    ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::music::parse_progression;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers_enc: 1,
            n_layers_dec: 1,
            d_ff: 32,
            d_sem: 4,
            max_len: 40,
            max_rel_dist: 8,
            dropout: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for cfg in [
            tiny_config(),
            ModelConfig {
                n_layers_enc: 2,
                n_layers_dec: 3,
                n_heads: 4,
                ..tiny_config()
            },
            ModelConfig::small(16),
        ] {
            let model = AmtModel::new(cfg, 0).unwrap();
            assert_eq!(model.params().scalar_count(), cfg.parameter_count());
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(AmtModel::new(
            ModelConfig {
                n_heads: 3,
                ..tiny_config()
            },
            0
        )
        .is_err());
        assert!(AmtModel::new(
            ModelConfig {
                dropout: 1.0,
                ..tiny_config()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(3, 4);
        assert_eq!(pe.get(0, 0), 0.0);
        assert_eq!(pe.get(0, 1), 1.0);
        assert!((pe.get(2, 0) - 2f64.sin()).abs() < 1e-15);
        assert!((pe.get(2, 3) - (2.0 / 100.0f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn music_embedding_structure() {
        let model = AmtModel::new(tiny_config(), 1).unwrap();
        let c = ChordVocabulary::event_id(crate::music::parse_chord("C:maj").unwrap());
        let tokens = vec![c, 5, 9, 2, 1, c];
        let mut tape = Tape::new(model.params());
        let e = model
            .embed_music(&mut tape, &tokens, Key::C_MAJOR, &mut Pass::eval())
            .unwrap();
        let e = tape.value(e).clone();
        assert_eq!(e.shape(), (6, 16));
        let pe = positional_encoding(6, 16);
        for c in 0..16 {
            let diff = e.get(0, c) - e.get(5, c);
            assert!((diff - (pe.get(0, c) - pe.get(5, c))).abs() < 1e-12);
        }
        assert!(model
            .embed_music(&mut tape, &[159], Key::C_MAJOR, &mut Pass::eval())
            .is_err());
    }

    #[test]
    fn video_embedding_is_affine_before_positions() {
        let model = AmtModel::new(tiny_config(), 2).unwrap();
        let zeros = Matrix::zeros(3, 12);
        let mut tape = Tape::new(model.params());
        let z = model.embed_video(&mut tape, &zeros, &mut Pass::eval()).unwrap();
        let z = tape.value(z).clone();
        let pe = positional_encoding(3, 16);
        let bias = model
            .params()
            .get(model.params().find("embed.video.b").unwrap())
            .clone();
        for t in 0..3 {
            for c in 0..16 {
                assert!((z.get(t, c) - pe.get(t, c) - bias.data()[c]).abs() < 1e-12);
            }
        }
        // motion is column 1: its effect is linear in its value
        let mut one = zeros.clone();
        one.set(1, 1, 1.0);
        let mut two = zeros.clone();
        two.set(1, 1, 2.0);
        let y1 = model.embed_video(&mut tape, &one, &mut Pass::eval()).unwrap();
        let y2 = model.embed_video(&mut tape, &two, &mut Pass::eval()).unwrap();
        for c in 0..16 {
            let d1 = tape.value(y1).get(1, c) - z.get(1, c);
            let d2 = tape.value(y2).get(1, c) - z.get(1, c);
            assert!((d2 - 2.0 * d1).abs() < 1e-12);
        }
        assert!(model
            .embed_video(&mut tape, &Matrix::zeros(3, 11), &mut Pass::eval())
            .is_err());
    }

    #[test]
    fn relative_attention_with_zero_table_is_plain_attention() {
        let params = ParamStore::new();
        let mut tape = Tape::new(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = tape.constant(Matrix::randn(5, 4, 1.0, &mut rng));
        let k = tape.constant(Matrix::randn(5, 4, 1.0, &mut rng));
        let v = tape.constant(Matrix::randn(5, 4, 1.0, &mut rng));
        let zero = tape.constant(Matrix::zeros(2 * 3 - 1, 4));
        let mask = AttnMask::causal(5);
        let (a, pa) = relative_self_attention(&mut tape, q, k, v, Some((zero, 3)), &mask);
        let (b, _) = relative_self_attention(&mut tape, q, k, v, None, &mask);
        for (x, y) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let p = tape.value(pa);
        for i in 0..5 {
            for j in i + 1..5 {
                assert_eq!(p.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn relative_table_distinguishes_distance() {
        // two identical queries at positions 1 and 2 looking at key 0
        let params = ParamStore::new();
        let mut tape = Tape::new(&params);
        let q = tape.constant(Matrix::from_rows(&[vec![0.3, 0.1], vec![1.0, -0.5], vec![1.0, -0.5]]));
        let k = tape.constant(Matrix::from_rows(&[vec![0.2, 0.4], vec![0.0, 1.0], vec![0.5, 0.5]]));
        let table = tape.constant(Matrix::from_rows(&[
            vec![0.7, 0.0],
            vec![-0.4, 0.2],
            vec![0.1, 0.1],
            vec![9.0, 9.0],
            vec![9.0, 9.0],
        ]));
        let raw = tape.matmul_t(q, k);
        let rel = tape.rel_logits(q, table, 3);
        let total = tape.add(raw, rel);
        let s = tape.value(total);
        // equal content logits but offsets -1 and -2 pick different rows
        assert_eq!(tape.value(raw).get(1, 0), tape.value(raw).get(2, 0));
        assert!((s.get(1, 0) - (0.0 - 0.4 - 0.1)).abs() < 1e-12);
        assert!((s.get(2, 0) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn decoder_is_causal_and_memory_is_global() {
        let model = AmtModel::new(tiny_config(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let video = Matrix::randn(6, 12, 1.0, &mut rng);
        let valid = vec![true; 6];
        let tokens = vec![1, 10, 20, 30, 40, 50];
        let base = model.logits(&tokens, Key::C_MAJOR, &video, &valid).unwrap();
        assert_eq!(base.shape(), (6, 159));
        let mut changed = tokens.clone();
        changed[4] = 99;
        let alt = model.logits(&changed, Key::C_MAJOR, &video, &valid).unwrap();
        for t in 0..4 {
            assert_eq!(base.row(t), alt.row(t));
        }
        assert_ne!(base.row(4), alt.row(4));

        let mut moved = video.clone();
        moved.set(5, 3, moved.get(5, 3) + 1.0);
        let alt = model.logits(&tokens, Key::C_MAJOR, &moved, &valid).unwrap();
        for t in 0..6 {
            assert_ne!(base.row(t), alt.row(t));
        }
    }

    #[test]
    fn generation_honours_primer_and_is_deterministic() {
        let model = AmtModel::new(tiny_config(), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let video = Matrix::randn(12, 12, 1.0, &mut rng);
        let primer = parse_progression("C Am F G").unwrap();
        let c = GenerationConstraints::default();
        let a = model
            .generate(&video, Key::C_MAJOR, &primer, &c, Decoding::Greedy)
            .unwrap();
        let b = model
            .generate(&video, Key::C_MAJOR, &primer, &c, Decoding::Greedy)
            .unwrap();
        assert_eq!(a.chords.len(), 12);
        assert_eq!(&a.chords[..4], primer.as_slice());
        assert_eq!(a.chords, b.chords);
        let long: Vec<_> = std::iter::repeat_n(primer[0], 12).collect();
        assert!(model
            .generate(&video, Key::C_MAJOR, &long, &c, Decoding::Greedy)
            .is_err());
    }

    #[test]
    fn repeat_constraint_takes_runner_up() {
        let mut logits = vec![0.0; 159];
        logits[10] = 5.0;
        logits[11] = 4.0;
        logits[ChordVocabulary::PAD] = 100.0;
        logits[ChordVocabulary::SOS] = 90.0;
        let c = GenerationConstraints::default();
        assert_eq!(choose_token(&logits, &[10], &c, Decoding::Greedy, None), 10);
        assert_eq!(choose_token(&logits, &[3, 10, 10], &c, Decoding::Greedy, None), 11);
        logits[ChordVocabulary::SILENCE] = 50.0;
        assert_eq!(choose_token(&logits, &[2, 2], &c, Decoding::Greedy, None), 10);
        assert_eq!(choose_token(&logits, &[10, 2], &c, Decoding::Greedy, None), 2);
    }
}

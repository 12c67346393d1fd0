//! Full network assembly: tokenizer + L stacked layers + final norm +
//! classification head, with the published size presets, mixed TNT/standard
//! layer configurations, and position-encoding interpolation for resolution
//! changes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::block::{tnt_forward, vanilla_forward, TntBlockParams};
use crate::error::TntError;
use crate::nn::{BlockParams, LinearParams, LnParams, LN_EPS};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use crate::tokenizer::{embed_words, init_sentences, split_to_words, ImageInput, TokenizerParams};

// ── Configuration ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosEnc {
    pub sentence: bool,
    pub word: bool,
}

/// Complete architecture description. Layer indices in `tnt_block_indices`
/// are 1-based; layers outside the set are standard blocks over the
/// sentence stream only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TntConfig {
    pub image_h: usize,
    pub image_w: usize,
    /// Patch (visual sentence) side p.
    pub patch_size: usize,
    /// Sub-patch (visual word) side s.
    pub word_size: usize,
    pub depth: usize,
    pub inner_dim: usize,
    pub inner_heads: usize,
    pub outer_dim: usize,
    pub outer_heads: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
    pub tnt_block_indices: Vec<usize>,
    pub drop_path_rate: f64,
    pub se: bool,
    pub pos_enc: PosEnc,
    pub fusion_ln: bool,
    pub class_token_learnable: bool,
}

impl TntConfig {
    fn sized(
        image: usize,
        patch: usize,
        depth: usize,
        c: usize,
        ch: usize,
        d: usize,
        dh: usize,
        classes: usize,
    ) -> TntConfig {
        TntConfig {
            image_h: image,
            image_w: image,
            patch_size: patch,
            word_size: 4,
            depth,
            inner_dim: c,
            inner_heads: ch,
            outer_dim: d,
            outer_heads: dh,
            mlp_ratio: 4,
            n_classes: classes,
            tnt_block_indices: (1..=depth).collect(),
            drop_path_rate: 0.1,
            se: false,
            pos_enc: PosEnc { sentence: true, word: true },
            fusion_ln: true,
            class_token_learnable: true,
        }
    }

    pub fn tnt_ti() -> TntConfig {
        Self::sized(224, 16, 12, 12, 2, 192, 3, 1000)
    }

    pub fn tnt_s() -> TntConfig {
        Self::sized(224, 16, 12, 24, 4, 384, 6, 1000)
    }

    pub fn tnt_b() -> TntConfig {
        Self::sized(224, 16, 12, 40, 4, 640, 10, 1000)
    }

    /// Desk-scale preset, small enough for finite-difference checking in
    /// seconds: 32x32 images, p=8, s=4 (n=16, m=4), 4 layers, c=8, d=32.
    pub fn tnt_micro() -> TntConfig {
        let mut cfg = Self::sized(32, 8, 4, 8, 2, 32, 4, 10);
        cfg.word_size = 4;
        cfg
    }

    pub fn preset(name: &str) -> Option<TntConfig> {
        match name {
            "tnt-ti" => Some(Self::tnt_ti()),
            "tnt-s" => Some(Self::tnt_s()),
            "tnt-b" => Some(Self::tnt_b()),
            "tnt-micro" => Some(Self::tnt_micro()),
            _ => None,
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["tnt-ti", "tnt-s", "tnt-b", "tnt-micro"]
    }

    pub fn with_indices(mut self, indices: Vec<usize>) -> TntConfig {
        self.tnt_block_indices = indices;
        self
    }

    /// Number of sentences n = (H/p)(W/p).
    pub fn n(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size)
    }

    /// Words per sentence m = (p/s)^2.
    pub fn m(&self) -> usize {
        let per_side = self.patch_size / self.word_size;
        per_side * per_side
    }

    pub fn word_dim(&self) -> usize {
        self.word_size * self.word_size * 3
    }

    /// Patch grid (rows, cols).
    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_size, self.image_w / self.patch_size)
    }

    pub fn words_per_side(&self) -> usize {
        self.patch_size / self.word_size
    }

    pub fn is_tnt_layer(&self, index_1based: usize) -> bool {
        self.tnt_block_indices.contains(&index_1based)
    }

    pub fn validate(&self) -> Result<(), TntError> {
        let c = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(TntError::Config(msg.to_string()))
            }
        };
        crate::tokenizer::word_grid(self.image_h, self.image_w, self.patch_size, self.word_size)?;
        c(self.depth >= 1, "depth must be >= 1")?;
        c(self.inner_dim >= 1 && self.outer_dim >= 1, "dims must be >= 1")?;
        c(
            self.inner_heads >= 1 && self.inner_dim % self.inner_heads == 0,
            &format!("inner dim {} not divisible by {} heads", self.inner_dim, self.inner_heads),
        )?;
        c(
            self.outer_heads >= 1 && self.outer_dim % self.outer_heads == 0,
            &format!("outer dim {} not divisible by {} heads", self.outer_dim, self.outer_heads),
        )?;
        c(self.mlp_ratio >= 1, "mlp_ratio must be >= 1")?;
        c(self.n_classes >= 1, "n_classes must be >= 1")?;
        c(
            (0.0..1.0).contains(&self.drop_path_rate),
            &format!("drop_path_rate {} must lie in [0, 1)", self.drop_path_rate),
        )?;
        let mut seen = vec![false; self.depth + 1];
        for &i in &self.tnt_block_indices {
            c(
                (1..=self.depth).contains(&i),
                &format!("tnt_block_indices entry {i} outside 1..={}", self.depth),
            )?;
            c(!seen[i], &format!("duplicate tnt_block_indices entry {i}"))?;
            seen[i] = true;
        }
        if self.se {
            c(
                self.inner_dim % 4 == 0 && self.outer_dim % 4 == 0,
                "SE bottleneck (ratio 4) needs dims divisible by 4",
            )?;
        }
        Ok(())
    }
}

// ── Parameter tree ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub enum LayerParams<T> {
    Tnt(TntBlockParams<T>),
    /// Standard block over the sentence stream; named `outer` so mixed
    /// checkpoints keep one naming scheme.
    Vanilla(BlockParams<T>),
}

impl<T> LayerParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerParams<U> {
        match self {
            LayerParams::Tnt(p) => LayerParams::Tnt(p.map(f)),
            LayerParams::Vanilla(p) => LayerParams::Vanilla(p.map(f)),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        match self {
            LayerParams::Tnt(p) => p.visit(prefix, out),
            LayerParams::Vanilla(p) => p.visit(&format!("{prefix}.outer"), out),
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        match self {
            LayerParams::Tnt(p) => p.visit_mut(prefix, out),
            LayerParams::Vanilla(p) => p.visit_mut(&format!("{prefix}.outer"), out),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub tokenizer: TokenizerParams<T>,
    pub layers: Vec<LayerParams<T>>,
    pub norm: LnParams<T>,
    pub head: LinearParams<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            tokenizer: self.tokenizer.map(f),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            norm: self.norm.map(f),
            head: self.head.map(f),
        }
    }

    /// Named tensors in a fixed traversal order (layer indices 1-based).
    pub fn flatten(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.tokenizer.visit("tokenizer", &mut out);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("layers.{}", i + 1), &mut out);
        }
        self.norm.visit("norm", &mut out);
        self.head.visit("head", &mut out);
        out
    }

    pub fn flatten_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.tokenizer.visit_mut("tokenizer", &mut out);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("layers.{}", i + 1), &mut out);
        }
        self.norm.visit_mut("norm", &mut out);
        self.head.visit_mut("head", &mut out);
        out
    }
}

impl ModelParams<Tensor> {
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.flatten_mut().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.flatten().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Expected parameter names and shapes for a configuration, in the same
/// order the built model walks them. Single source for checkpoint
/// validation and the exhaustive complexity counter.
pub fn param_specs(config: &TntConfig) -> Vec<(String, Vec<usize>)> {
    let (c, d) = (config.inner_dim, config.outer_dim);
    let (n, m) = (config.n(), config.m());
    let r = config.mlp_ratio;
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();

    let linear = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, fi: usize, fo: usize| {
        out.push((format!("{prefix}.weight"), vec![fi, fo]));
        out.push((format!("{prefix}.bias"), vec![fo]));
    };
    let ln = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, dim: usize| {
        out.push((format!("{prefix}.gamma"), vec![dim]));
        out.push((format!("{prefix}.beta"), vec![dim]));
    };
    let block = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, dim: usize| {
        ln(out, &format!("{prefix}.ln1"), dim);
        for proj in ["wq", "wk", "wv", "wo"] {
            linear(out, &format!("{prefix}.msa.{proj}"), dim, dim);
        }
        ln(out, &format!("{prefix}.ln2"), dim);
        linear(out, &format!("{prefix}.mlp.fc1"), dim, dim * r);
        linear(out, &format!("{prefix}.mlp.fc2"), dim * r, dim);
    };

    linear(&mut out, "tokenizer.word_proj", config.word_dim(), c);
    if config.pos_enc.word {
        out.push(("tokenizer.word_pos".into(), vec![m, c]));
    }
    if config.pos_enc.sentence {
        out.push(("tokenizer.sentence_pos".into(), vec![n + 1, d]));
    }
    if config.class_token_learnable {
        out.push(("tokenizer.class_token".into(), vec![d]));
    }
    for l in 1..=config.depth {
        let prefix = format!("layers.{l}");
        if config.is_tnt_layer(l) {
            block(&mut out, &format!("{prefix}.inner"), c);
            if config.fusion_ln {
                ln(&mut out, &format!("{prefix}.fusion_ln"), m * c);
            }
            linear(&mut out, &format!("{prefix}.fusion"), m * c, d);
            block(&mut out, &format!("{prefix}.outer"), d);
            if config.se {
                linear(&mut out, &format!("{prefix}.se_word.fc1"), c, c / 4);
                linear(&mut out, &format!("{prefix}.se_word.fc2"), c / 4, c);
                linear(&mut out, &format!("{prefix}.se_sentence.fc1"), d, d / 4);
                linear(&mut out, &format!("{prefix}.se_sentence.fc2"), d / 4, d);
            }
        } else {
            block(&mut out, &format!("{prefix}.outer"), d);
        }
    }
    ln(&mut out, "norm", d);
    linear(&mut out, "head", d, config.n_classes);
    out
}

// ── Forward trace (introspection data) ───────────────────────────────────

/// Per-layer copies of attention maps and word state, captured during a
/// traced forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub is_tnt: bool,
    /// `[n, heads, m, m]`; absent for standard layers.
    pub inner_attn: Option<Tensor>,
    /// `[heads, n+1, n+1]`.
    pub outer_attn: Tensor,
    /// Word state `[n, m, c]` after this layer (unchanged by standard
    /// layers).
    pub words: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Patch grid (rows, cols).
    pub grid: (usize, usize),
    pub words_per_side: usize,
    /// Word projection output before the position encoding ("layer 0").
    pub stage0_words: Option<Tensor>,
    pub layers: Vec<LayerTrace>,
}

impl ForwardTrace {
    fn new(config: &TntConfig) -> Self {
        ForwardTrace {
            grid: config.grid(),
            words_per_side: config.words_per_side(),
            stage0_words: None,
            layers: Vec::new(),
        }
    }
}

// ── Model ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Model {
    pub config: TntConfig,
    pub params: ModelParams<Tensor>,
}

impl Model {
    /// Deterministic build: identical (config, seed) yields bit-identical
    /// parameters.
    pub fn build(config: &TntConfig, seed: u64) -> Result<Model, TntError> {
        config.validate()?;
        let mut rng = crate::rng::stream(seed, "init");
        let (c, d) = (config.inner_dim, config.outer_dim);
        let tokenizer = TokenizerParams::init(
            &mut rng,
            config.word_dim(),
            c,
            config.m(),
            config.n(),
            d,
            config.pos_enc.word,
            config.pos_enc.sentence,
            config.class_token_learnable,
        );
        let layers = (1..=config.depth)
            .map(|l| {
                if config.is_tnt_layer(l) {
                    LayerParams::Tnt(TntBlockParams::init(
                        &mut rng,
                        c,
                        config.inner_heads,
                        d,
                        config.outer_heads,
                        config.mlp_ratio,
                        config.m(),
                        config.drop_path_rate,
                        config.fusion_ln,
                        config.se,
                    ))
                } else {
                    LayerParams::Vanilla(BlockParams::init(
                        &mut rng,
                        d,
                        config.outer_heads,
                        config.mlp_ratio,
                        config.drop_path_rate,
                    ))
                }
            })
            .collect();
        let norm = LnParams::init(d);
        let head = LinearParams::init(&mut rng, d, config.n_classes);
        Ok(Model {
            config: config.clone(),
            params: ModelParams { tokenizer, layers, norm, head },
        })
    }

    /// Register every parameter as a tape leaf (in flatten order).
    pub fn bind(&self, tape: &mut Tape) -> ModelParams<TensorId> {
        self.params.map(&mut |t: &Tensor| tape.leaf(t.clone()))
    }

    /// Run the network on an already-bound tape. `rng` drives drop-path
    /// draws (consumed only when `training` with a positive rate).
    pub fn forward_bound<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &ModelParams<TensorId>,
        img: &ImageInput,
        training: bool,
        rng: &mut R,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<TensorId, TntError> {
        let cfg = &self.config;
        if img.height != cfg.image_h || img.width != cfg.image_w {
            return Err(TntError::Config(format!(
                "image {}x{} does not match configured {}x{}",
                img.height, img.width, cfg.image_h, cfg.image_w
            )));
        }
        let words_raw = split_to_words(img, cfg.patch_size, cfg.word_size)?;
        let words_const = tape.constant(words_raw);
        let emb = embed_words(tape, words_const, &bound.tokenizer)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.stage0_words = Some(tape.value(emb.pre_pos).clone());
        }
        let mut words = emb.words;
        let mut sentences = init_sentences(tape, &bound.tokenizer, cfg.n(), cfg.outer_dim)?;

        for layer in &bound.layers {
            match layer {
                LayerParams::Tnt(p) => {
                    let out = tnt_forward(tape, words, sentences, p, rng, training)?;
                    words = out.words;
                    sentences = out.sentences;
                    if let Some(tr) = trace.as_deref_mut() {
                        tr.layers.push(LayerTrace {
                            is_tnt: true,
                            inner_attn: Some(tape.value(out.inner_attn).clone()),
                            outer_attn: tape.value(out.outer_attn).clone(),
                            words: tape.value(words).clone(),
                        });
                    }
                }
                LayerParams::Vanilla(p) => {
                    let out = vanilla_forward(tape, sentences, p, rng, training)?;
                    sentences = out.out;
                    if let Some(tr) = trace.as_deref_mut() {
                        tr.layers.push(LayerTrace {
                            is_tnt: false,
                            inner_attn: None,
                            outer_attn: tape.value(out.attn).clone(),
                            words: tape.value(words).clone(),
                        });
                    }
                }
            }
        }

        let normed = tape.layer_norm(sentences, bound.norm.gamma, bound.norm.beta, LN_EPS)?;
        let class = tape.slice(normed, 0, 0, 1)?;
        let class = tape.reshape(class, vec![cfg.outer_dim])?;
        tape.linear(class, bound.head.weight, bound.head.bias)
    }

    /// Convenience forward returning the logits tensor.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        img: &ImageInput,
        training: bool,
        rng: &mut R,
    ) -> Result<Tensor, TntError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let logits = self.forward_bound(&mut tape, &bound, img, training, rng, None)?;
        Ok(tape.value(logits).clone())
    }

    /// Forward pass that also captures attention maps and word states.
    pub fn forward_traced<R: Rng + ?Sized>(
        &self,
        img: &ImageInput,
        training: bool,
        rng: &mut R,
    ) -> Result<(Tensor, ForwardTrace), TntError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let mut trace = ForwardTrace::new(&self.config);
        let logits =
            self.forward_bound(&mut tape, &bound, img, training, rng, Some(&mut trace))?;
        Ok((tape.value(logits).clone(), trace))
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Order- and bit-sensitive digest of all parameters.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (name, t) in self.params.flatten() {
            for b in name.as_bytes() {
                h = (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3);
            }
            for v in t.data() {
                h = (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Resample the sentence position encodings to a new resolution:
    /// rows 1..n are laid out on the old patch grid, bilinearly resampled
    /// (corner-aligned) to the new grid; the class-token row is copied.
    /// Word encodings are untouched (the word grid geometry is unchanged).
    pub fn interpolate_position_encodings(
        &self,
        new_h: usize,
        new_w: usize,
    ) -> Result<Model, TntError> {
        let cfg = &self.config;
        crate::tokenizer::word_grid(new_h, new_w, cfg.patch_size, cfg.word_size)?;
        let mut new_config = cfg.clone();
        new_config.image_h = new_h;
        new_config.image_w = new_w;
        let mut params = self.params.clone();
        if let Some(pos) = &self.params.tokenizer.sentence_pos {
            let (gh, gw) = cfg.grid();
            let (nh, nw) = (new_h / cfg.patch_size, new_w / cfg.patch_size);
            let d = cfg.outer_dim;
            let mut out = Tensor::zeros(vec![nh * nw + 1, d]);
            out.data_mut()[..d].copy_from_slice(&pos.data()[..d]);
            let src = &pos.data()[d..]; // [gh, gw, d] grid
            let sample = |y: f64, x: f64, ch: usize| -> f64 {
                let y0 = y.floor() as usize;
                let x0 = x.floor() as usize;
                let y1 = (y0 + 1).min(gh - 1);
                let x1 = (x0 + 1).min(gw - 1);
                let (ty, tx) = (y - y0 as f64, x - x0 as f64);
                let v = |yy: usize, xx: usize| src[(yy * gw + xx) * d + ch];
                (1.0 - ty) * ((1.0 - tx) * v(y0, x0) + tx * v(y0, x1))
                    + ty * ((1.0 - tx) * v(y1, x0) + tx * v(y1, x1))
            };
            for iy in 0..nh {
                for ix in 0..nw {
                    let sy = if nh > 1 { iy as f64 * (gh - 1) as f64 / (nh - 1) as f64 } else { 0.0 };
                    let sx = if nw > 1 { ix as f64 * (gw - 1) as f64 / (nw - 1) as f64 } else { 0.0 };
                    for ch in 0..d {
                        out.data_mut()[(1 + iy * nw + ix) * d + ch] = sample(sy, sx, ch);
                    }
                }
            }
            params.tokenizer.sentence_pos = Some(out);
        }
        Ok(Model { config: new_config, params })
    }
}

//! Image -> visual sentences -> visual words pipeline.
//!
//! A sentence is a p x p patch, a word an s x s sub-patch of it. Patches
//! enumerate in raster order over the patch grid, words in raster order
//! inside the patch, and each word is vectorized row-major over
//! (row, column, channel). The fusion-layer weights depend on this order,
//! so it is covered by tests and must not change.

use std::path::Path;

use rand::Rng;

use crate::error::TntError;
use crate::nn::{LinearParams, INIT_STD};
use crate::rng::trunc_normal;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Image pixels as normalized floats in [h][w][3] row-major order.
///
/// Raw 8-bit sources are mapped by the fixed affine `(v/255 - 0.5) / 0.5`;
/// float tensor sources are taken as already normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput {
    pub height: usize,
    pub width: usize,
    data: Vec<f64>,
}

impl ImageInput {
    pub fn from_normalized(height: usize, width: usize, data: Vec<f64>) -> Result<Self, TntError> {
        if data.len() != height * width * 3 {
            return Err(TntError::shape(
                "image",
                format!("{height}x{width}x3 needs {} values, got {}", height * width * 3, data.len()),
            ));
        }
        Ok(ImageInput { height, width, data })
    }

    /// Interpret a rank-3 `[h, w, 3]` tensor as an already-normalized image.
    pub fn from_tensor(t: &Tensor) -> Result<Self, TntError> {
        match t.shape() {
            [h, w, 3] => Self::from_normalized(*h, *w, t.data().to_vec()),
            other => Err(TntError::shape("image", format!("expected [h, w, 3], got {other:?}"))),
        }
    }

    /// Parse a binary PPM (P6, maxval 255) byte stream.
    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self, TntError> {
        let mut pos = 0usize;
        let mut token = |bytes: &[u8]| -> Result<String, TntError> {
            // Skip whitespace and '#' comments.
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    break;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(TntError::Format("ppm: truncated header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };

        if token(bytes)? != "P6" {
            return Err(TntError::Format("ppm: not a P6 file".into()));
        }
        let width: usize =
            token(bytes)?.parse().map_err(|_| TntError::Format("ppm: bad width".into()))?;
        let height: usize =
            token(bytes)?.parse().map_err(|_| TntError::Format("ppm: bad height".into()))?;
        let maxval: usize =
            token(bytes)?.parse().map_err(|_| TntError::Format("ppm: bad maxval".into()))?;
        if maxval != 255 {
            return Err(TntError::Format(format!("ppm: only maxval 255 supported, got {maxval}")));
        }
        pos += 1; // single whitespace after maxval
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(TntError::Format(format!(
                "ppm: expected {need} pixel bytes, got {}",
                bytes.len().saturating_sub(pos)
            )));
        }
        let data = bytes[pos..pos + need]
            .iter()
            .map(|&b| (f64::from(b) / 255.0 - 0.5) / 0.5)
            .collect();
        ImageInput::from_normalized(height, width, data)
    }

    pub fn from_ppm_file(path: &Path) -> Result<Self, TntError> {
        let bytes = std::fs::read(path).map_err(|e| TntError::io(path, e))?;
        Self::from_ppm_bytes(&bytes)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f64 {
        &mut self.data[(y * self.width + x) * 3 + c]
    }
}

/// Check the divisibility invariants and return (n, m).
pub fn word_grid(h: usize, w: usize, p: usize, s: usize) -> Result<(usize, usize), TntError> {
    if p == 0 || s == 0 || h == 0 || w == 0 || h % p != 0 || w % p != 0 || p % s != 0 {
        return Err(TntError::Config(format!(
            "image {h}x{w} must divide by patch size {p}, and {p} by sub-patch size {s}"
        )));
    }
    Ok(((h / p) * (w / p), (p / s) * (p / s)))
}

/// Split an image into vectorized visual words: `[n, m, s*s*3]`.
pub fn split_to_words(img: &ImageInput, p: usize, s: usize) -> Result<Tensor, TntError> {
    let (h, w) = (img.height, img.width);
    let (n, m) = word_grid(h, w, p, s)?;
    let wdim = s * s * 3;
    let grid_w = w / p;
    let words_per_side = p / s;
    let mut data = vec![0.0; n * m * wdim];
    for patch in 0..n {
        let (gy, gx) = (patch / grid_w, patch % grid_w);
        for word in 0..m {
            let (wy, wx) = (word / words_per_side, word % words_per_side);
            let base = (patch * m + word) * wdim;
            let mut k = 0;
            for dy in 0..s {
                for dx in 0..s {
                    let y = gy * p + wy * s + dy;
                    let x = gx * p + wx * s + dx;
                    for c in 0..3 {
                        data[base + k] = img.pixel(y, x, c);
                        k += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, m, wdim], data)
}

/// Inverse of [`split_to_words`]; reproduces the image bit-exactly.
pub fn assemble_from_words(
    words: &Tensor,
    h: usize,
    w: usize,
    p: usize,
    s: usize,
) -> Result<ImageInput, TntError> {
    let (n, m) = word_grid(h, w, p, s)?;
    let wdim = s * s * 3;
    if words.shape() != [n, m, wdim] {
        return Err(TntError::shape(
            "assemble",
            format!("expected [{n}, {m}, {wdim}], got {:?}", words.shape()),
        ));
    }
    let grid_w = w / p;
    let words_per_side = p / s;
    let mut data = vec![0.0; h * w * 3];
    for patch in 0..n {
        let (gy, gx) = (patch / grid_w, patch % grid_w);
        for word in 0..m {
            let (wy, wx) = (word / words_per_side, word % words_per_side);
            let base = (patch * m + word) * wdim;
            let mut k = 0;
            for dy in 0..s {
                for dx in 0..s {
                    let y = gy * p + wy * s + dy;
                    let x = gx * p + wx * s + dx;
                    for c in 0..3 {
                        data[(y * w + x) * 3 + c] = words.data()[base + k];
                        k += 1;
                    }
                }
            }
        }
    }
    ImageInput::from_normalized(h, w, data)
}

// ── Learnable tokenizer state ────────────────────────────────────────────

/// Word projection plus the two position encodings and the class token.
/// `word_pos` is a single `[m, c]` tensor shared by all sentences;
/// `sentence_pos` is `[(n+1), d]` (the class row gets an encoding too).
/// Optional fields are absent when the corresponding ablation switch or the
/// constant-class-token mode is active.
#[derive(Debug, Clone)]
pub struct TokenizerParams<T> {
    pub word_proj: LinearParams<T>,
    pub word_pos: Option<T>,
    pub sentence_pos: Option<T>,
    pub class_token: Option<T>,
}

impl<T> TokenizerParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> TokenizerParams<U> {
        TokenizerParams {
            word_proj: self.word_proj.map(f),
            word_pos: self.word_pos.as_ref().map(&mut *f),
            sentence_pos: self.sentence_pos.as_ref().map(&mut *f),
            class_token: self.class_token.as_ref().map(&mut *f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.word_proj.visit(&format!("{prefix}.word_proj"), out);
        if let Some(t) = &self.word_pos {
            out.push((format!("{prefix}.word_pos"), t));
        }
        if let Some(t) = &self.sentence_pos {
            out.push((format!("{prefix}.sentence_pos"), t));
        }
        if let Some(t) = &self.class_token {
            out.push((format!("{prefix}.class_token"), t));
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.word_proj.visit_mut(&format!("{prefix}.word_proj"), out);
        if let Some(t) = &mut self.word_pos {
            out.push((format!("{prefix}.word_pos"), t));
        }
        if let Some(t) = &mut self.sentence_pos {
            out.push((format!("{prefix}.sentence_pos"), t));
        }
        if let Some(t) = &mut self.class_token {
            out.push((format!("{prefix}.class_token"), t));
        }
    }
}

impl TokenizerParams<Tensor> {
    /// Truncated-normal init for projection and encodings; the class token
    /// starts at zero (but stays learnable unless disabled).
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        rng: &mut R,
        word_dim: usize,
        c: usize,
        m: usize,
        n: usize,
        d: usize,
        pos_word: bool,
        pos_sentence: bool,
        class_learnable: bool,
    ) -> Self {
        TokenizerParams {
            word_proj: LinearParams::init(rng, word_dim, c),
            word_pos: pos_word
                .then(|| Tensor::from_fn(vec![m, c], |_| trunc_normal(rng, INIT_STD))),
            sentence_pos: pos_sentence
                .then(|| Tensor::from_fn(vec![n + 1, d], |_| trunc_normal(rng, INIT_STD))),
            class_token: class_learnable.then(|| Tensor::zeros(vec![d])),
        }
    }
}

pub struct EmbeddedWords {
    /// `[n, m, c]` after adding the shared word position encoding.
    pub words: TensorId,
    /// Projection output before the position encoding (introspection only).
    pub pre_pos: TensorId,
}

/// `Y0^i = FC(Vec(x^i)) + E_word` for every sentence i, the same `E_word`
/// tensor each time.
pub fn embed_words(
    tape: &mut Tape,
    words: TensorId,
    params: &TokenizerParams<TensorId>,
) -> Result<EmbeddedWords, TntError> {
    let pre_pos = tape.linear(words, params.word_proj.weight, params.word_proj.bias)?;
    let with_pos = match params.word_pos {
        Some(pos) => tape.add(pre_pos, pos)?,
        None => pre_pos,
    };
    Ok(EmbeddedWords { words: with_pos, pre_pos })
}

/// `Z0 = concat(Z_class, zeros[n, d]) + E_sentence`; plain sentence rows
/// start as exact zeros before the encoding is added.
pub fn init_sentences(
    tape: &mut Tape,
    params: &TokenizerParams<TensorId>,
    n: usize,
    d: usize,
) -> Result<TensorId, TntError> {
    let class_row = match params.class_token {
        Some(class) => tape.reshape(class, vec![1, d])?,
        None => tape.constant(Tensor::zeros(vec![1, d])),
    };
    let rest = tape.constant(Tensor::zeros(vec![n, d]));
    let z0 = tape.concat(&[class_row, rest], 0)?;
    match params.sentence_pos {
        Some(pos) => tape.add(z0, pos),
        None => Ok(z0),
    }
}

//! The dual-stream layer: an inner transformer over the words of each
//! sentence (parameters shared across sentences), a linear fusion of the
//! flattened words into the matching sentence embedding, and an outer
//! transformer over class token + sentences. Mixed configurations use
//! [`vanilla_forward`] for layers outside the TNT index set.

use rand::Rng;

use crate::error::TntError;
use crate::nn::{block_forward, BlockOutput, BlockParams, LinearParams, LnParams, LN_EPS};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Squeeze-excite gate: mean over tokens, bottleneck MLP (ratio 4) with
/// GELU, sigmoid, then a per-dimension multiply of every embedding.
#[derive(Debug, Clone)]
pub struct SeParams<T> {
    pub fc1: LinearParams<T>,
    pub fc2: LinearParams<T>,
}

impl<T> SeParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> SeParams<U> {
        SeParams { fc1: self.fc1.map(f), fc2: self.fc2.map(f) }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.fc1.visit(&format!("{prefix}.fc1"), out);
        self.fc2.visit(&format!("{prefix}.fc2"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.fc1.visit_mut(&format!("{prefix}.fc1"), out);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), out);
    }
}

impl SeParams<Tensor> {
    pub fn init<R: Rng>(rng: &mut R, dim: usize) -> Self {
        assert!(dim % 4 == 0, "SE needs dim divisible by 4, got {dim}");
        SeParams {
            fc1: LinearParams::init(rng, dim, dim / 4),
            fc2: LinearParams::init(rng, dim / 4, dim),
        }
    }
}

/// One TNT layer. The single `inner` block instance serves all n sentences.
#[derive(Debug, Clone)]
pub struct TntBlockParams<T> {
    pub inner: BlockParams<T>,
    /// Normalization of the flattened words before the fusion FC
    /// (switchable; the complexity formulas count only the FC).
    pub fusion_ln: Option<LnParams<T>>,
    /// `[m*c, d]` projection of `Vec(Y^i)` into the sentence domain.
    pub fusion: LinearParams<T>,
    pub outer: BlockParams<T>,
    pub se_word: Option<SeParams<T>>,
    pub se_sentence: Option<SeParams<T>>,
}

impl<T> TntBlockParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> TntBlockParams<U> {
        TntBlockParams {
            inner: self.inner.map(f),
            fusion_ln: self.fusion_ln.as_ref().map(|ln| ln.map(f)),
            fusion: self.fusion.map(f),
            outer: self.outer.map(f),
            se_word: self.se_word.as_ref().map(|se| se.map(f)),
            se_sentence: self.se_sentence.as_ref().map(|se| se.map(f)),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.inner.visit(&format!("{prefix}.inner"), out);
        if let Some(ln) = &self.fusion_ln {
            ln.visit(&format!("{prefix}.fusion_ln"), out);
        }
        self.fusion.visit(&format!("{prefix}.fusion"), out);
        self.outer.visit(&format!("{prefix}.outer"), out);
        if let Some(se) = &self.se_word {
            se.visit(&format!("{prefix}.se_word"), out);
        }
        if let Some(se) = &self.se_sentence {
            se.visit(&format!("{prefix}.se_sentence"), out);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.inner.visit_mut(&format!("{prefix}.inner"), out);
        if let Some(ln) = &mut self.fusion_ln {
            ln.visit_mut(&format!("{prefix}.fusion_ln"), out);
        }
        self.fusion.visit_mut(&format!("{prefix}.fusion"), out);
        self.outer.visit_mut(&format!("{prefix}.outer"), out);
        if let Some(se) = &mut self.se_word {
            se.visit_mut(&format!("{prefix}.se_word"), out);
        }
        if let Some(se) = &mut self.se_sentence {
            se.visit_mut(&format!("{prefix}.se_sentence"), out);
        }
    }
}

impl TntBlockParams<Tensor> {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        rng: &mut R,
        c: usize,
        inner_heads: usize,
        d: usize,
        outer_heads: usize,
        ratio: usize,
        m: usize,
        drop_path_rate: f64,
        fusion_ln: bool,
        se: bool,
    ) -> Self {
        TntBlockParams {
            inner: BlockParams::init(rng, c, inner_heads, ratio, drop_path_rate),
            fusion_ln: fusion_ln.then(|| LnParams::init(m * c)),
            fusion: LinearParams::init(rng, m * c, d),
            outer: BlockParams::init(rng, d, outer_heads, ratio, drop_path_rate),
            se_word: se.then(|| SeParams::init(rng, c)),
            se_sentence: se.then(|| SeParams::init(rng, d)),
        }
    }
}

// ── Forward ──────────────────────────────────────────────────────────────

pub struct TntLayerOutput {
    /// Word state after the inner block (and word-level SE when enabled).
    pub words: TensorId,
    pub sentences: TensorId,
    /// `[n, heads, m, m]` inner attention maps.
    pub inner_attn: TensorId,
    /// `[heads, n+1, n+1]` outer attention maps.
    pub outer_attn: TensorId,
}

/// Word-level gate: per-sentence mean over the m words.
fn se_word_apply(
    tape: &mut Tape,
    words: TensorId,
    p: &SeParams<TensorId>,
) -> Result<TensorId, TntError> {
    let shape = tape.shape(words).to_vec(); // [n, m, c]
    let (n, m, c) = (shape[0], shape[1], shape[2]);
    let mean = tape.mean_axis(words, 1)?; // [n, c]
    let h = tape.linear(mean, p.fc1.weight, p.fc1.bias)?;
    let h = tape.gelu(h);
    let h = tape.linear(h, p.fc2.weight, p.fc2.bias)?;
    let gate = tape.sigmoid(h); // [n, c], values in (0, 1)
    let gate = tape.reshape(gate, vec![n, 1, c])?;
    let gate = tape.expand(gate, 1, m)?;
    tape.mul(words, gate)
}

/// Sentence-level gate: mean over all n+1 rows (class token included).
fn se_sentence_apply(
    tape: &mut Tape,
    sentences: TensorId,
    p: &SeParams<TensorId>,
) -> Result<TensorId, TntError> {
    let mean = tape.mean_axis(sentences, 0)?; // [d]
    let h = tape.linear(mean, p.fc1.weight, p.fc1.bias)?;
    let h = tape.gelu(h);
    let h = tape.linear(h, p.fc2.weight, p.fc2.bias)?;
    let gate = tape.sigmoid(h); // [d]
    tape.mul(sentences, gate)
}

/// Fusion step: sentence i receives `FC(Vec(Y^i))` for i = 1..n; the
/// class-token row is left untouched. `Vec` is the same row-major
/// word-then-channel flattening the tokenizer uses.
pub fn fuse_words_into_sentences(
    tape: &mut Tape,
    words: TensorId,
    sentences: TensorId,
    p: &TntBlockParams<TensorId>,
) -> Result<TensorId, TntError> {
    let wshape = tape.shape(words).to_vec();
    let (n, m, c) = (wshape[0], wshape[1], wshape[2]);
    let flat = tape.reshape(words, vec![n, m * c])?;
    let fused_in = match &p.fusion_ln {
        Some(ln) => tape.layer_norm(flat, ln.gamma, ln.beta, LN_EPS)?,
        None => flat,
    };
    let fused = tape.linear(fused_in, p.fusion.weight, p.fusion.bias)?; // [n, d]
    let class_row = tape.slice(sentences, 0, 0, 1)?;
    let rest = tape.slice(sentences, 0, 1, n)?;
    let rest = tape.add(rest, fused)?;
    tape.concat(&[class_row, rest], 0)
}

/// One TNT layer: inner block per sentence, fusion, outer block, with SE
/// gates after the inner and outer sub-blocks when enabled.
pub fn tnt_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    words: TensorId,
    sentences: TensorId,
    p: &TntBlockParams<TensorId>,
    rng: &mut R,
    training: bool,
) -> Result<TntLayerOutput, TntError> {
    let wshape = tape.shape(words).to_vec();
    let zshape = tape.shape(sentences).to_vec();
    if wshape.len() != 3 || zshape.len() != 2 || zshape[0] != wshape[0] + 1 {
        return Err(TntError::shape(
            "tnt_block",
            format!("words {wshape:?} vs sentences {zshape:?} (want [n, m, c] and [n+1, d])"),
        ));
    }
    let inner = block_forward(tape, words, &p.inner, rng, training)?;
    let mut y = inner.out;
    if let Some(se) = &p.se_word {
        y = se_word_apply(tape, y, se)?;
    }
    let z = fuse_words_into_sentences(tape, y, sentences, p)?;
    let outer = block_forward(tape, z, &p.outer, rng, training)?;
    let mut z_out = outer.out;
    if let Some(se) = &p.se_sentence {
        z_out = se_sentence_apply(tape, z_out, se)?;
    }
    Ok(TntLayerOutput { words: y, sentences: z_out, inner_attn: inner.attn, outer_attn: outer.attn })
}

/// Standard block over the n+1 sentence rows; word state passes through
/// untouched (the caller keeps its handle).
pub fn vanilla_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    sentences: TensorId,
    p: &BlockParams<TensorId>,
    rng: &mut R,
    training: bool,
) -> Result<BlockOutput, TntError> {
    block_forward(tape, sentences, p, rng, training)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_diff_check;
    use crate::rng::stream;

    const N: usize = 3;
    const M: usize = 4;
    const C: usize = 4;
    const D: usize = 8;

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut r = stream(seed, "block-test");
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    fn test_params(se: bool, fusion_ln: bool) -> TntBlockParams<Tensor> {
        let mut rng = stream(1, "init");
        TntBlockParams::init(&mut rng, C, 2, D, 2, 2, M, 0.0, fusion_ln, se)
    }

    fn run_layer(
        p: &TntBlockParams<Tensor>,
        words: &Tensor,
        sentences: &Tensor,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let bound = p.map(&mut |t: &Tensor| tape.leaf(t.clone()));
        let w = tape.constant(words.clone());
        let z = tape.constant(sentences.clone());
        let out = tnt_forward(&mut tape, w, z, &bound, &mut stream(0, "dp"), false).unwrap();
        (tape.value(out.words).data().to_vec(), tape.value(out.sentences).data().to_vec())
    }

    #[test]
    fn zero_fusion_reduces_to_pure_outer_step() {
        let mut p = test_params(false, true);
        p.fusion.weight = Tensor::zeros(vec![M * C, D]);
        p.fusion.bias = Tensor::zeros(vec![D]);
        let words = rand_tensor(vec![N, M, C], 2);
        let sentences = rand_tensor(vec![N + 1, D], 3);
        let (_, z_tnt) = run_layer(&p, &words, &sentences);

        let mut tape = Tape::new();
        let bound = p.outer.map(&mut |t: &Tensor| tape.leaf(t.clone()));
        let z = tape.constant(sentences.clone());
        let out = vanilla_forward(&mut tape, z, &bound, &mut stream(0, "dp"), false).unwrap();
        assert_eq!(z_tnt, tape.value(out.out).data());
    }

    #[test]
    fn class_token_row_receives_no_fusion() {
        let p = test_params(false, true);
        let words = rand_tensor(vec![N, M, C], 4);
        let sentences = rand_tensor(vec![N + 1, D], 5);
        let mut tape = Tape::new();
        let bound = p.map(&mut |t: &Tensor| tape.leaf(t.clone()));
        let w = tape.constant(words);
        let z = tape.constant(sentences.clone());
        let fused = fuse_words_into_sentences(&mut tape, w, z, &bound).unwrap();
        let out = tape.value(fused).data();
        assert_eq!(&out[..D], &sentences.data()[..D]);
        // and the other rows did move
        assert!(out[D..].iter().zip(&sentences.data()[D..]).any(|(a, b)| a != b));
    }

    #[test]
    fn sentence_permutation_equivariance() {
        let p = test_params(true, true);
        let words = rand_tensor(vec![N, M, C], 6);
        let sentences = rand_tensor(vec![N + 1, D], 7);
        let perm = [2usize, 0, 1]; // permutation of the n sentences
        let mut pw = Tensor::zeros(vec![N, M, C]);
        let mut pz = sentences.clone();
        for (dst, &src) in perm.iter().enumerate() {
            pw.data_mut()[dst * M * C..(dst + 1) * M * C]
                .copy_from_slice(&words.data()[src * M * C..(src + 1) * M * C]);
            let (d0, s0) = ((dst + 1) * D, (src + 1) * D);
            let src_row = sentences.data()[s0..s0 + D].to_vec();
            pz.data_mut()[d0..d0 + D].copy_from_slice(&src_row);
        }
        let (yw, yz) = run_layer(&p, &words, &sentences);
        let (pw_out, pz_out) = run_layer(&p, &pw, &pz);
        for (dst, &src) in perm.iter().enumerate() {
            for k in 0..M * C {
                let diff = (pw_out[dst * M * C + k] - yw[src * M * C + k]).abs();
                assert!(diff < 1e-10, "word diff {diff}");
            }
            for k in 0..D {
                let diff = (pz_out[(dst + 1) * D + k] - yz[(src + 1) * D + k]).abs();
                assert!(diff < 1e-10, "sentence diff {diff}");
            }
        }
        for k in 0..D {
            assert!((pz_out[k] - yz[k]).abs() < 1e-10, "class row moved");
        }
    }

    #[test]
    fn fusion_flattening_matches_row_major_order() {
        // Perturbing word j channel k of sentence i moves sentence i by
        // delta * fusion.weight[j*c + k, :], which pins the Vec() order.
        let p = test_params(false, false);
        let words = rand_tensor(vec![N, M, C], 8);
        let sentences = Tensor::zeros(vec![N + 1, D]);
        let fuse = |w: &Tensor| {
            let mut tape = Tape::new();
            let bound = p.map(&mut |t: &Tensor| tape.leaf(t.clone()));
            let wid = tape.constant(w.clone());
            let z = tape.constant(sentences.clone());
            let out = fuse_words_into_sentences(&mut tape, wid, z, &bound).unwrap();
            tape.value(out).data().to_vec()
        };
        let base = fuse(&words);
        let (i, j, k, delta) = (1usize, 2usize, 3usize, 0.5);
        let mut bumped = words.clone();
        bumped.data_mut()[(i * M + j) * C + k] += delta;
        let moved = fuse(&bumped);
        for row in 0..=N {
            for col in 0..D {
                let got = moved[row * D + col] - base[row * D + col];
                let expect = if row == i + 1 {
                    delta * p.fusion.weight.data()[(j * C + k) * D + col]
                } else {
                    0.0
                };
                assert!((got - expect).abs() < 1e-12, "row {row} col {col}");
            }
        }
    }

    #[test]
    fn se_gate_values_are_bounded() {
        let p = test_params(true, true);
        let words = rand_tensor(vec![N, M, C], 9);
        let sentences = rand_tensor(vec![N + 1, D], 10);
        let mut tape = Tape::new();
        let bound = p.map(&mut |t: &Tensor| tape.leaf(t.clone()));
        let w = tape.constant(words);
        let z = tape.constant(sentences);
        // Exercise the gates directly: outputs stay finite and the gate
        // multiplier keeps each dimension within the ungated magnitude.
        let gated = se_word_apply(&mut tape, w, bound.se_word.as_ref().unwrap()).unwrap();
        for (g, x) in tape.value(gated).data().iter().zip(tape.value(w).data()) {
            assert!(g.abs() < x.abs() || *x == 0.0);
        }
        let gated_z = se_sentence_apply(&mut tape, z, bound.se_sentence.as_ref().unwrap()).unwrap();
        for (g, x) in tape.value(gated_z).data().iter().zip(tape.value(z).data()) {
            assert!(g.abs() < x.abs() || *x == 0.0);
        }
    }

    #[test]
    fn full_block_gradient_check_all_parameter_groups() {
        let p = test_params(true, true);
        let words = rand_tensor(vec![2, M, C], 11);
        let sentences = rand_tensor(vec![3, D], 12);
        let mut named = Vec::new();
        p.visit("tnt", &mut named);
        let leaves: Vec<Tensor> = named.iter().map(|(_, t)| (*t).clone()).collect();
        let max_err = central_diff_check(&leaves, 1e-5, |tape, ids| {
            let mut it = ids.iter().copied();
            let bound = p.map(&mut |_| it.next().expect("enough ids"));
            let w = tape.constant(words.clone());
            let z = tape.constant(sentences.clone());
            let out = tnt_forward(tape, w, z, &bound, &mut stream(0, "dp"), false)?;
            let wz = tape.constant(rand_tensor(vec![3, D], 13));
            let ww = tape.constant(rand_tensor(vec![2, M, C], 14));
            let a = tape.mul(out.sentences, wz)?;
            let b = tape.mul(out.words, ww)?;
            let sa = tape.sum_all(a);
            let sb = tape.sum_all(b);
            tape.add(sa, sb)
        })
        .unwrap();
        assert!(max_err < 1e-4, "rel err {max_err}");
    }
}

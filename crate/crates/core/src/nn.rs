//! Transformer building blocks: multi-head self-attention, MLP, and the
//! pre-norm residual block with stochastic depth.
//!
//! Parameter structs are generic over their leaf type: `T = Tensor` for
//! stored weights, `T = TensorId` once bound to a tape. `map` and the
//! `visit` pair must walk fields in the same order; bindings rely on it.

use rand::Rng;

use crate::error::TntError;
use crate::rng::trunc_normal;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Epsilon inside the layer-norm square root.
pub const LN_EPS: f64 = 1e-5;

/// Std of the truncated-normal weight init (cut at +-2 std).
pub const INIT_STD: f64 = 0.02;

// ── Parameter structs ────────────────────────────────────────────────────

/// Affine map `x W + b`; `weight: [in, out]`, `bias: [out]`.
#[derive(Debug, Clone)]
pub struct LinearParams<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone)]
pub struct LnParams<T> {
    pub gamma: T,
    pub beta: T,
}

/// Q/K/V/output projections plus the head count; key, query and value all
/// use the full model dim, split into `heads` parts of dim/heads each.
#[derive(Debug, Clone)]
pub struct MsaParams<T> {
    pub wq: LinearParams<T>,
    pub wk: LinearParams<T>,
    pub wv: LinearParams<T>,
    pub wo: LinearParams<T>,
    pub heads: usize,
}

/// Two-layer MLP with hidden width `ratio * dim` and GELU in between.
#[derive(Debug, Clone)]
pub struct MlpParams<T> {
    pub fc1: LinearParams<T>,
    pub fc2: LinearParams<T>,
}

/// Pre-norm residual transformer block.
#[derive(Debug, Clone)]
pub struct BlockParams<T> {
    pub ln1: LnParams<T>,
    pub msa: MsaParams<T>,
    pub ln2: LnParams<T>,
    pub mlp: MlpParams<T>,
    pub drop_path_rate: f64,
}

impl<T> LinearParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LinearParams<U> {
        LinearParams { weight: f(&self.weight), bias: f(&self.bias) }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

impl<T> LnParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LnParams<U> {
        LnParams { gamma: f(&self.gamma), beta: f(&self.beta) }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.gamma"), &self.gamma));
        out.push((format!("{prefix}.beta"), &self.beta));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.gamma"), &mut self.gamma));
        out.push((format!("{prefix}.beta"), &mut self.beta));
    }
}

impl<T> MsaParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MsaParams<U> {
        MsaParams {
            wq: self.wq.map(f),
            wk: self.wk.map(f),
            wv: self.wv.map(f),
            wo: self.wo.map(f),
            heads: self.heads,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.wq.visit(&format!("{prefix}.wq"), out);
        self.wk.visit(&format!("{prefix}.wk"), out);
        self.wv.visit(&format!("{prefix}.wv"), out);
        self.wo.visit(&format!("{prefix}.wo"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.wq.visit_mut(&format!("{prefix}.wq"), out);
        self.wk.visit_mut(&format!("{prefix}.wk"), out);
        self.wv.visit_mut(&format!("{prefix}.wv"), out);
        self.wo.visit_mut(&format!("{prefix}.wo"), out);
    }
}

impl<T> MlpParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MlpParams<U> {
        MlpParams { fc1: self.fc1.map(f), fc2: self.fc2.map(f) }
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

impl<T> BlockParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BlockParams<U> {
        BlockParams {
            ln1: self.ln1.map(f),
            msa: self.msa.map(f),
            ln2: self.ln2.map(f),
            mlp: self.mlp.map(f),
            drop_path_rate: self.drop_path_rate,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.ln1.visit(&format!("{prefix}.ln1"), out);
        self.msa.visit(&format!("{prefix}.msa"), out);
        self.ln2.visit(&format!("{prefix}.ln2"), out);
        self.mlp.visit(&format!("{prefix}.mlp"), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), out);
        self.msa.visit_mut(&format!("{prefix}.msa"), out);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), out);
        self.mlp.visit_mut(&format!("{prefix}.mlp"), out);
    }
}

// ── Initialization ───────────────────────────────────────────────────────

impl LinearParams<Tensor> {
    pub fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        LinearParams {
            weight: Tensor::from_fn(vec![fan_in, fan_out], |_| trunc_normal(rng, INIT_STD)),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }
}

impl LnParams<Tensor> {
    pub fn init(dim: usize) -> Self {
        LnParams { gamma: Tensor::filled(vec![dim], 1.0), beta: Tensor::zeros(vec![dim]) }
    }
}

impl MsaParams<Tensor> {
    pub fn init<R: Rng>(rng: &mut R, dim: usize, heads: usize) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        MsaParams {
            wq: LinearParams::init(rng, dim, dim),
            wk: LinearParams::init(rng, dim, dim),
            wv: LinearParams::init(rng, dim, dim),
            wo: LinearParams::init(rng, dim, dim),
            heads,
        }
    }
}

impl MlpParams<Tensor> {
    pub fn init<R: Rng>(rng: &mut R, dim: usize, ratio: usize) -> Self {
        MlpParams {
            fc1: LinearParams::init(rng, dim, dim * ratio),
            fc2: LinearParams::init(rng, dim * ratio, dim),
        }
    }
}

impl BlockParams<Tensor> {
    pub fn init<R: Rng>(
        rng: &mut R,
        dim: usize,
        heads: usize,
        ratio: usize,
        drop_path_rate: f64,
    ) -> Self {
        BlockParams {
            ln1: LnParams::init(dim),
            msa: MsaParams::init(rng, dim, heads),
            ln2: LnParams::init(dim),
            mlp: MlpParams::init(rng, dim, ratio),
            drop_path_rate,
        }
    }
}

// ── Forward ──────────────────────────────────────────────────────────────

pub struct MsaOutput {
    pub out: TensorId,
    /// `[batch.., heads, seq, seq]`, each row a softmax distribution.
    pub attn: TensorId,
}

/// Scaled dot-product attention over the last two axes `[.., seq, dim]`,
/// heads computed in parallel then concatenated and output-projected.
pub fn msa_forward(
    tape: &mut Tape,
    x: TensorId,
    p: &MsaParams<TensorId>,
) -> Result<MsaOutput, TntError> {
    let shape = tape.shape(x).to_vec();
    let r = shape.len();
    if r < 2 {
        return Err(TntError::shape("msa", format!("input must be [.., seq, dim], got {shape:?}")));
    }
    let dim = shape[r - 1];
    if tape.shape(p.wq.weight) != [dim, dim] {
        return Err(TntError::shape(
            "msa",
            format!("input dim {dim} vs projection {:?}", tape.shape(p.wq.weight)),
        ));
    }
    let h = p.heads;
    let dh = dim / h;

    let q = tape.linear(x, p.wq.weight, p.wq.bias)?;
    let k = tape.linear(x, p.wk.weight, p.wk.bias)?;
    let v = tape.linear(x, p.wv.weight, p.wv.bias)?;

    // [B.., seq, dim] -> [B.., seq, h, dh] -> [B.., h, seq, dh]
    let mut head_shape = shape[..r - 1].to_vec();
    head_shape.extend([h, dh]);
    let swap_heads: Vec<usize> =
        (0..r - 2).chain([r - 1, r - 2, r]).collect();
    let split = |tape: &mut Tape, t: TensorId| -> Result<TensorId, TntError> {
        let t = tape.reshape(t, head_shape.clone())?;
        tape.permute(t, swap_heads.clone())
    };
    let qh = split(tape, q)?;
    let kh = split(tape, k)?;
    let vh = split(tape, v)?;

    // K^T per head: [B.., h, dh, seq]
    let kt_perm: Vec<usize> = (0..r - 1).chain([r, r - 1]).collect();
    let kt = tape.permute(kh, kt_perm)?;
    let scores = tape.matmul(qh, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let last = tape.shape(scores).len() - 1;
    let attn = tape.softmax(scores, last)?;

    let ctx = tape.matmul(attn, vh)?; // [B.., h, seq, dh]
    let ctx = tape.permute(ctx, swap_heads)?; // [B.., seq, h, dh]
    let merged = tape.reshape(ctx, shape)?;
    let out = tape.linear(merged, p.wo.weight, p.wo.bias)?;
    Ok(MsaOutput { out, attn })
}

pub fn mlp_forward(
    tape: &mut Tape,
    x: TensorId,
    p: &MlpParams<TensorId>,
) -> Result<TensorId, TntError> {
    let h = tape.linear(x, p.fc1.weight, p.fc1.bias)?;
    let h = tape.gelu(h);
    tape.linear(h, p.fc2.weight, p.fc2.bias)
}

/// Residual sum with stochastic depth: in training the branch is dropped
/// whole with probability `rate` and survivors are scaled by 1/(1-rate);
/// at inference the branch always applies unscaled.
fn residual_add<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: TensorId,
    branch: TensorId,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<TensorId, TntError> {
    if training && rate > 0.0 {
        if rng.gen::<f64>() < rate {
            return Ok(x);
        }
        let survivor = tape.scale(branch, 1.0 / (1.0 - rate));
        return tape.add(x, survivor);
    }
    tape.add(x, branch)
}

pub struct BlockOutput {
    pub out: TensorId,
    pub attn: TensorId,
}

/// Pre-norm residual composition:
/// `x' = x + MSA(LN(x)); out = x' + MLP(LN(x'))`.
pub fn block_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: TensorId,
    p: &BlockParams<TensorId>,
    rng: &mut R,
    training: bool,
) -> Result<BlockOutput, TntError> {
    let normed = tape.layer_norm(x, p.ln1.gamma, p.ln1.beta, LN_EPS)?;
    let msa = msa_forward(tape, normed, &p.msa)?;
    let x1 = residual_add(tape, x, msa.out, p.drop_path_rate, rng, training)?;
    let normed2 = tape.layer_norm(x1, p.ln2.gamma, p.ln2.beta, LN_EPS)?;
    let mlp = mlp_forward(tape, normed2, &p.mlp)?;
    let out = residual_add(tape, x1, mlp, p.drop_path_rate, rng, training)?;
    Ok(BlockOutput { out, attn: msa.attn })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_diff_check;
    use crate::rng::stream;
    use rand::RngCore;

    /// RngCore stub that always yields zero, forcing every drop-path draw
    /// below the rate (branch always dropped).
    struct ZeroRng;
    impl RngCore for ZeroRng {
        fn next_u32(&mut self) -> u32 {
            0
        }
        fn next_u64(&mut self) -> u64 {
            0
        }
        fn fill_bytes(&mut self, dest: &mut [u8]) {
            dest.fill(0);
        }
        fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
            dest.fill(0);
            Ok(())
        }
    }

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut r = stream(seed, "nn-test");
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    fn bind_block(tape: &mut Tape, p: &BlockParams<Tensor>) -> BlockParams<TensorId> {
        p.map(&mut |t: &Tensor| tape.leaf(t.clone()))
    }

    fn bind_msa(tape: &mut Tape, p: &MsaParams<Tensor>) -> MsaParams<TensorId> {
        p.map(&mut |t: &Tensor| tape.leaf(t.clone()))
    }

    #[test]
    fn single_token_attention_is_one() {
        let mut rng = stream(1, "init");
        let p = MsaParams::init(&mut rng, 8, 2);
        let mut tape = Tape::new();
        let bound = bind_msa(&mut tape, &p);
        let x = tape.constant(rand_tensor(vec![1, 8], 2));
        let out = msa_forward(&mut tape, x, &bound).unwrap();
        assert_eq!(tape.shape(out.attn), &[2, 1, 1]);
        for &v in tape.value(out.attn).data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output_uniform_maps() {
        let mut rng = stream(3, "init");
        let p = MsaParams::init(&mut rng, 6, 2); // biases are zero-init
        let mut tape = Tape::new();
        let bound = bind_msa(&mut tape, &p);
        let x = tape.constant(Tensor::zeros(vec![4, 6]));
        let out = msa_forward(&mut tape, x, &bound).unwrap();
        assert!(tape.value(out.out).data().iter().all(|&v| v == 0.0));
        for &v in tape.value(out.attn).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = stream(4, "init");
        let p = MsaParams::init(&mut rng, 8, 2);
        let mut tape = Tape::new();
        let bound = bind_msa(&mut tape, &p);
        let x = tape.constant(rand_tensor(vec![6, 8], 5));
        let out = msa_forward(&mut tape, x, &bound).unwrap();
        let attn = tape.value(out.attn);
        assert_eq!(attn.shape(), &[2, 6, 6]);
        for row in attn.data().chunks(6) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    /// Naive per-pair dot-product attention with explicit loops, independent
    /// of the tape path.
    fn msa_oracle(x: &Tensor, p: &MsaParams<Tensor>) -> Vec<f64> {
        let (t, dim) = (x.shape()[0], x.shape()[1]);
        let h = p.heads;
        let dh = dim / h;
        let proj = |w: &Tensor, b: &Tensor| -> Vec<f64> {
            let mut out = vec![0.0; t * dim];
            for i in 0..t {
                for j in 0..dim {
                    let mut acc = b.data()[j];
                    for k in 0..dim {
                        acc += x.data()[i * dim + k] * w.data()[k * dim + j];
                    }
                    out[i * dim + j] = acc;
                }
            }
            out
        };
        let q = proj(&p.wq.weight, &p.wq.bias);
        let k = proj(&p.wk.weight, &p.wk.bias);
        let v = proj(&p.wv.weight, &p.wv.bias);
        let mut merged = vec![0.0; t * dim];
        for head in 0..h {
            for i in 0..t {
                let mut logits = vec![0.0; t];
                for j in 0..t {
                    let mut dot = 0.0;
                    for e in 0..dh {
                        dot += q[i * dim + head * dh + e] * k[j * dim + head * dh + e];
                    }
                    logits[j] = dot / (dh as f64).sqrt();
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for e in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..t {
                        acc += exps[j] / z * v[j * dim + head * dh + e];
                    }
                    merged[i * dim + head * dh + e] = acc;
                }
            }
        }
        let mut out = vec![0.0; t * dim];
        for i in 0..t {
            for j in 0..dim {
                let mut acc = p.wo.bias.data()[j];
                for k2 in 0..dim {
                    acc += merged[i * dim + k2] * p.wo.weight.data()[k2 * dim + j];
                }
                out[i * dim + j] = acc;
            }
        }
        out
    }

    #[test]
    fn msa_matches_triple_loop_oracle() {
        let mut rng = stream(6, "init");
        let p = MsaParams::init(&mut rng, 8, 2);
        let x = rand_tensor(vec![4, 8], 7);
        let mut tape = Tape::new();
        let bound = bind_msa(&mut tape, &p);
        let xid = tape.constant(x.clone());
        let out = msa_forward(&mut tape, xid, &bound).unwrap();
        let expect = msa_oracle(&x, &p);
        for (a, b) in tape.value(out.out).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn forced_drop_path_is_identity() {
        let mut rng = stream(8, "init");
        let p = BlockParams::init(&mut rng, 8, 2, 4, 0.99);
        let x = rand_tensor(vec![3, 8], 9);
        let mut tape = Tape::new();
        let bound = bind_block(&mut tape, &p);
        let xid = tape.constant(x.clone());
        let out = block_forward(&mut tape, xid, &bound, &mut ZeroRng, true).unwrap();
        assert_eq!(tape.value(out.out).data(), x.data());
    }

    #[test]
    fn zero_drop_rate_training_equals_inference() {
        let mut rng = stream(10, "init");
        let p = BlockParams::init(&mut rng, 8, 2, 4, 0.0);
        let x = rand_tensor(vec![4, 8], 11);
        let run = |training: bool| {
            let mut tape = Tape::new();
            let bound = bind_block(&mut tape, &p);
            let xid = tape.constant(x.clone());
            let out = block_forward(&mut tape, xid, &bound, &mut stream(0, "dp"), training).unwrap();
            tape.value(out.out).data().to_vec()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let mut rng = stream(12, "init");
        let p = BlockParams::init(&mut rng, 6, 2, 4, 0.0);
        let x = rand_tensor(vec![5, 6], 13);
        let perm = [3usize, 0, 4, 1, 2];
        let mut permuted = Tensor::zeros(vec![5, 6]);
        for (dst, &src) in perm.iter().enumerate() {
            permuted.data_mut()[dst * 6..(dst + 1) * 6]
                .copy_from_slice(&x.data()[src * 6..(src + 1) * 6]);
        }
        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let bound = bind_block(&mut tape, &p);
            let xid = tape.constant(input.clone());
            let out = block_forward(&mut tape, xid, &bound, &mut ZeroRng, false).unwrap();
            tape.value(out.out).data().to_vec()
        };
        let base = run(&x);
        let shuffled = run(&permuted);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..6 {
                let diff = (shuffled[dst * 6 + c] - base[src * 6 + c]).abs();
                assert!(diff < 1e-10, "row {dst} col {c}: {diff}");
            }
        }
    }

    #[test]
    fn block_gradient_check() {
        let mut rng = stream(14, "init");
        let p = BlockParams::init(&mut rng, 4, 2, 2, 0.0);
        let x = rand_tensor(vec![3, 4], 15);
        let mut leaves: Vec<Tensor> = vec![x];
        let mut named = Vec::new();
        p.visit("block", &mut named);
        leaves.extend(named.iter().map(|(_, t)| (*t).clone()));
        let max_err = central_diff_check(&leaves, 1e-5, |tape, ids| {
            let mut it = ids[1..].iter().copied();
            let bound = p.map(&mut |_| it.next().expect("enough ids"));
            let out = block_forward(tape, ids[0], &bound, &mut ZeroRng, false)?;
            let w = tape.constant(rand_tensor(vec![3, 4], 99));
            let prod = tape.mul(out.out, w)?;
            Ok(tape.sum_all(prod))
        })
        .unwrap();
        assert!(max_err < 1e-4, "rel err {max_err}");
    }
}

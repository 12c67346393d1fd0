//! Central finite-difference verification of tape gradients.
//!
//! Two layers: a per-op battery over small random inputs, and a whole-model
//! sweep that samples entries from every parameter tensor. Both report named
//! pass/fail entries so a broken backward rule is called out by op name.

use crate::error::TntError;
use crate::model::{Model, TntConfig};
use crate::rng;
use crate::tape::{OpKind, Tape, TensorId};
use crate::tensor::Tensor;
use crate::tokenizer::ImageInput;
use crate::training;

use rand::Rng;

/// Default finite-difference step (64-bit floats).
pub const DEFAULT_STEP: f64 = 1e-5;

/// Guarded relative error: denominators below 1e-3 are floored, so
/// near-zero gradients are compared absolutely at `tol * 1e-3` scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

#[derive(Debug, Clone)]
pub struct CheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub checked: usize,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub step: f64,
    pub entries: Vec<CheckEntry>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(4).max(4);
        if self.step > 0.0 {
            out.push_str(&format!(
                "gradient check (central differences, step {:.1e})\n",
                self.step
            ));
        } else {
            out.push_str("oracle equivalence (absolute error)\n");
        }
        for e in &self.entries {
            out.push_str(&format!(
                "{} {:width$} err {:9.3e} tol {:7.1e} ({} entries)\n",
                if e.pass { "PASS" } else { "FAIL" },
                e.name,
                e.max_rel_err,
                e.tol,
                e.checked,
                width = width
            ));
        }
        let status = if self.passed() { "all passed" } else { "FAILURES present" };
        out.push_str(&format!("{} checks: {status}\n", self.entries.len()));
        out
    }
}

/// Compare tape gradients of `build`'s scalar output against central
/// differences over every entry of every leaf. Returns the max relative
/// error. `build` must be a pure function of the leaves.
pub fn central_diff_check<F>(leaves: &[Tensor], step: f64, build: F) -> Result<f64, TntError>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId, TntError>,
{
    central_diff_check_with_fault(leaves, step, None, build)
}

pub fn central_diff_check_with_fault<F>(
    leaves: &[Tensor],
    step: f64,
    fault: Option<OpKind>,
    build: F,
) -> Result<f64, TntError>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId, TntError>,
{
    let eval = |ls: &[Tensor]| -> Result<(f64, Vec<Vec<f64>>), TntError> {
        let mut tape = Tape::new();
        if let Some(k) = fault {
            tape.inject_backward_fault(k);
        }
        let ids: Vec<TensorId> = ls.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        tape.backward(loss)?;
        let grads = ids
            .iter()
            .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(id).numel()]))
            .collect();
        Ok((tape.value(loss).item(), grads))
    };
    let value_only = |ls: &[Tensor]| -> Result<f64, TntError> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = ls.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss).item())
    };

    let (_, grads) = eval(leaves)?;
    let mut work: Vec<Tensor> = leaves.to_vec();
    let mut max_err = 0.0f64;
    for l in 0..leaves.len() {
        for e in 0..leaves[l].numel() {
            let orig = work[l].data()[e];
            work[l].data_mut()[e] = orig + step;
            let fp = value_only(&work)?;
            work[l].data_mut()[e] = orig - step;
            let fm = value_only(&work)?;
            work[l].data_mut()[e] = orig;
            let fd = (fp - fm) / (2.0 * step);
            max_err = max_err.max(rel_err(grads[l][e], fd));
        }
    }
    Ok(max_err)
}

// ── Per-op battery ───────────────────────────────────────────────────────

fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "gradcheck-op");
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// Weighted scalar readout so reductions with flat gradients (softmax rows,
/// normalized slices) still exercise every input direction.
fn weighted_sum(tape: &mut Tape, x: TensorId, seed: u64) -> Result<TensorId, TntError> {
    let w = rand_tensor(tape.value(x).shape().to_vec(), seed.wrapping_add(0xabcd_ef01));
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    Ok(tape.sum_all(p))
}

/// Run the named finite-difference battery over every differentiable op.
/// `fault` flips the named backward rule, for verifying the harness itself.
pub fn check_op_gradients(step: f64, fault: Option<OpKind>) -> CheckReport {
    struct Case {
        name: &'static str,
        tol: f64,
        leaves: Vec<Tensor>,
        build: Box<dyn Fn(&mut Tape, &[TensorId]) -> Result<TensorId, TntError>>,
    }

    let mut cases: Vec<Case> = Vec::new();
    let mut case = |name: &'static str,
                    tol: f64,
                    leaves: Vec<Tensor>,
                    build: Box<dyn Fn(&mut Tape, &[TensorId]) -> Result<TensorId, TntError>>| {
        cases.push(Case { name, tol, leaves, build });
    };

    case(
        "matmul",
        1e-6,
        vec![rand_tensor(vec![5, 7], 1), rand_tensor(vec![7, 3], 2)],
        Box::new(|t, ids| {
            let y = t.matmul(ids[0], ids[1])?;
            weighted_sum(t, y, 1)
        }),
    );
    case(
        "matmul_batched",
        1e-6,
        vec![rand_tensor(vec![2, 3, 4], 3), rand_tensor(vec![2, 4, 2], 4)],
        Box::new(|t, ids| {
            let y = t.matmul(ids[0], ids[1])?;
            weighted_sum(t, y, 2)
        }),
    );
    case(
        "matmul_shared_weight",
        1e-6,
        vec![rand_tensor(vec![3, 2, 4], 5), rand_tensor(vec![4, 3], 6)],
        Box::new(|t, ids| {
            let y = t.matmul(ids[0], ids[1])?;
            weighted_sum(t, y, 3)
        }),
    );
    case(
        "linear",
        1e-6,
        vec![rand_tensor(vec![4, 3], 7), rand_tensor(vec![3, 5], 8), rand_tensor(vec![5], 9)],
        Box::new(|t, ids| {
            let y = t.linear(ids[0], ids[1], ids[2])?;
            weighted_sum(t, y, 4)
        }),
    );
    case(
        "add_broadcast",
        1e-4,
        vec![rand_tensor(vec![3, 2, 4], 10), rand_tensor(vec![2, 4], 11)],
        Box::new(|t, ids| {
            let y = t.add(ids[0], ids[1])?;
            weighted_sum(t, y, 5)
        }),
    );
    case(
        "mul_broadcast",
        1e-4,
        vec![rand_tensor(vec![3, 2, 4], 12), rand_tensor(vec![4], 13)],
        Box::new(|t, ids| {
            let y = t.mul(ids[0], ids[1])?;
            weighted_sum(t, y, 6)
        }),
    );
    case(
        "scale",
        1e-4,
        vec![rand_tensor(vec![6], 14)],
        Box::new(|t, ids| {
            let y = t.scale(ids[0], -1.7);
            weighted_sum(t, y, 7)
        }),
    );
    case(
        "gelu",
        1e-4,
        vec![rand_tensor(vec![2, 9], 15)],
        Box::new(|t, ids| {
            let y = t.gelu(ids[0]);
            weighted_sum(t, y, 8)
        }),
    );
    case(
        "sigmoid",
        1e-4,
        vec![rand_tensor(vec![8], 16)],
        Box::new(|t, ids| {
            let y = t.sigmoid(ids[0]);
            weighted_sum(t, y, 9)
        }),
    );
    case(
        "softmax",
        1e-4,
        vec![rand_tensor(vec![4, 6], 17)],
        Box::new(|t, ids| {
            let y = t.softmax(ids[0], 1)?;
            weighted_sum(t, y, 10)
        }),
    );
    case(
        "softmax_mid_axis",
        1e-4,
        vec![rand_tensor(vec![2, 4, 3], 18)],
        Box::new(|t, ids| {
            let y = t.softmax(ids[0], 1)?;
            weighted_sum(t, y, 11)
        }),
    );
    case(
        "log_softmax",
        1e-4,
        vec![rand_tensor(vec![3, 5], 19)],
        Box::new(|t, ids| {
            let y = t.log_softmax(ids[0], 1)?;
            weighted_sum(t, y, 12)
        }),
    );
    case(
        "layer_norm",
        1e-5,
        vec![rand_tensor(vec![3, 8], 20), rand_tensor(vec![8], 21), rand_tensor(vec![8], 22)],
        Box::new(|t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
            weighted_sum(t, y, 13)
        }),
    );
    case(
        "reshape_permute",
        1e-4,
        vec![rand_tensor(vec![2, 3, 4], 23)],
        Box::new(|t, ids| {
            let y = t.permute(ids[0], vec![2, 0, 1])?;
            let y = t.reshape(y, vec![6, 4])?;
            weighted_sum(t, y, 14)
        }),
    );
    case(
        "concat_slice_split",
        1e-4,
        vec![rand_tensor(vec![2, 3], 24), rand_tensor(vec![4, 3], 25)],
        Box::new(|t, ids| {
            let cat = t.concat(&[ids[0], ids[1]], 0)?;
            let parts = t.split(cat, 0, &[1, 3, 2])?;
            let mid = t.slice(parts[1], 1, 1, 2)?;
            let a = weighted_sum(t, mid, 15)?;
            let b = weighted_sum(t, parts[2], 16)?;
            t.add(a, b)
        }),
    );
    case(
        "reduce_sum_mean",
        1e-4,
        vec![rand_tensor(vec![3, 4, 2], 26)],
        Box::new(|t, ids| {
            let s = t.sum_axis(ids[0], 1)?;
            let m = t.mean_axis(ids[0], 0)?;
            let a = weighted_sum(t, s, 17)?;
            let b = weighted_sum(t, m, 18)?;
            t.add(a, b)
        }),
    );
    case(
        "expand",
        1e-4,
        vec![rand_tensor(vec![3, 1, 2], 27)],
        Box::new(|t, ids| {
            let y = t.expand(ids[0], 1, 4)?;
            weighted_sum(t, y, 19)
        }),
    );

    let entries = cases
        .into_iter()
        .map(|c| {
            let checked: usize = c.leaves.iter().map(Tensor::numel).sum();
            let result = central_diff_check_with_fault(&c.leaves, step, fault, c.build.as_ref());
            let (max_rel_err, pass) = match result {
                Ok(err) => (err, err < c.tol),
                Err(_) => (f64::INFINITY, false),
            };
            CheckEntry { name: c.name.to_string(), max_rel_err, tol: c.tol, checked, pass }
        })
        .collect();
    CheckReport { step, entries }
}

// ── Attention oracle equivalence ─────────────────────────────────────────

/// Naive per-pair dot-product attention: explicit loops over heads,
/// queries, keys and channels, sharing nothing with the tape path.
fn naive_msa(x: &Tensor, p: &crate::nn::MsaParams<Tensor>) -> Vec<f64> {
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
            for (j, l) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for e in 0..dh {
                    dot += q[i * dim + head * dh + e] * k[j * dim + head * dh + e];
                }
                *l = dot / (dh as f64).sqrt();
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for e in 0..dh {
                let mut acc = 0.0;
                for (j, ex) in exps.iter().enumerate() {
                    acc += ex / z * v[j * dim + head * dh + e];
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

/// Compare the tape attention against [`naive_msa`] over every
/// configuration with n_seq <= 6, dim <= 8, heads in {1, 2}.
pub fn check_msa_oracle(tol: f64) -> CheckReport {
    let mut entries = Vec::new();
    for heads in [1usize, 2] {
        for dim in [2usize, 4, 6, 8] {
            for t in 1..=6usize {
                let mut init_rng = rng::stream((heads * 100 + dim) as u64, "msa-oracle-init");
                let p = crate::nn::MsaParams::init(&mut init_rng, dim, heads);
                let x = rand_tensor(vec![t, dim], (t * 1000 + dim * 10 + heads) as u64);
                let mut tape = Tape::new();
                let bound = p.map(&mut |w: &Tensor| tape.leaf(w.clone()));
                let xid = tape.constant(x.clone());
                let (max_err, pass) = match crate::nn::msa_forward(&mut tape, xid, &bound) {
                    Ok(out) => {
                        let expect = naive_msa(&x, &p);
                        let err = tape
                            .value(out.out)
                            .data()
                            .iter()
                            .zip(&expect)
                            .map(|(a, b)| (a - b).abs())
                            .fold(0.0f64, f64::max);
                        (err, err < tol)
                    }
                    Err(_) => (f64::INFINITY, false),
                };
                entries.push(CheckEntry {
                    name: format!("msa_oracle t={t} dim={dim} h={heads}"),
                    max_rel_err: max_err,
                    tol,
                    checked: t * dim,
                    pass,
                });
            }
        }
    }
    CheckReport { step: 0.0, entries }
}

// ── Whole-model sweep ────────────────────────────────────────────────────

/// Check sampled entries of every parameter tensor of a built model against
/// central differences of the smoothed cross-entropy loss on one image.
/// `entries_per_tensor` caps the sweep so the whole suite stays in seconds.
pub fn check_model_gradients(
    config: &TntConfig,
    seed: u64,
    step: f64,
    tol: f64,
    entries_per_tensor: usize,
) -> Result<CheckReport, TntError> {
    let model = Model::build(config, seed)?;
    let mut data_rng = rng::stream(seed, "gradcheck-input");
    let hw = config.image_h * config.image_w * 3;
    let img = ImageInput::from_normalized(
        config.image_h,
        config.image_w,
        (0..hw).map(|_| data_rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let label = data_rng.gen_range(0..config.n_classes);

    let loss_value = |m: &Model| -> Result<f64, TntError> {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let logits = m.forward_bound(&mut tape, &bound, &img, false, &mut rng::stream(0, "unused"), None)?;
        let loss = training::smoothed_cross_entropy(&mut tape, logits, label, 0.1)?;
        Ok(tape.value(loss).item())
    };

    // Analytic gradients once.
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let logits =
        model.forward_bound(&mut tape, &bound, &img, false, &mut rng::stream(0, "unused"), None)?;
    let loss = training::smoothed_cross_entropy(&mut tape, logits, label, 0.1)?;
    tape.backward(loss)?;
    let named_ids = bound.flatten();
    let analytic: Vec<(String, Vec<f64>)> = named_ids
        .iter()
        .map(|(name, id)| {
            let g = tape
                .grad(**id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(**id).numel()]);
            (name.clone(), g)
        })
        .collect();
    drop(tape);

    let mut work = model.clone();
    let mut pick_rng = rng::stream(seed, "gradcheck-pick");
    let mut entries = Vec::new();
    for (name, grad) in &analytic {
        let numel = grad.len();
        let mut picks = vec![0usize];
        if numel > 1 {
            picks.push(numel - 1);
        }
        while picks.len() < entries_per_tensor.min(numel) {
            let c = pick_rng.gen_range(0..numel);
            if !picks.contains(&c) {
                picks.push(c);
            }
        }
        let mut max_rel = 0.0f64;
        for &e in &picks {
            let orig = {
                let t = work.params.tensor_mut(name).expect("parameter exists");
                let v = t.data()[e];
                t.data_mut()[e] = v + step;
                v
            };
            let fp = loss_value(&work)?;
            work.params.tensor_mut(name).expect("parameter exists").data_mut()[e] = orig - step;
            let fm = loss_value(&work)?;
            work.params.tensor_mut(name).expect("parameter exists").data_mut()[e] = orig;
            let fd = (fp - fm) / (2.0 * step);
            max_rel = max_rel.max(rel_err(grad[e], fd));
        }
        entries.push(CheckEntry {
            name: name.clone(),
            max_rel_err: max_rel,
            tol,
            checked: picks.len(),
            pass: max_rel < tol,
        });
    }
    Ok(CheckReport { step, entries })
}

//! Synthetic two-class task whose label is carried only by sub-patch
//! structure.
//!
//! Every 8x8 patch of a 32x32 image holds four 4x4 micro-texture tiles
//! (stripe orientation vertical or horizontal). The class picks one of two
//! complementary corner arrangements; both classes use the same multiset
//! of textures, and after generation each (patch, channel) is recentered
//! to exactly zero mean. Patch-level means therefore carry no label
//! information at all: solving the task requires resolving word content
//! and word position inside the patch.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::TntError;
use crate::rng;
use crate::tokenizer::ImageInput;

pub const IMAGE_SIDE: usize = 32;
pub const PATCH_SIDE: usize = 8;
pub const WORD_SIDE: usize = 4;

/// Regenerable from (seed, descriptor) bit-exactly.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub images: Vec<ImageInput>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub seed: u64,
    pub descriptor: String,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Identifies the generator + parameters for checkpoint/eval provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub task: String,
    pub n_samples: usize,
}

fn subpatch_sample(seed: u64, index: usize) -> (ImageInput, usize) {
    let mut r = rng::indexed_stream(seed, "subpatch", index as u64);
    let label = index % 2;
    let side = IMAGE_SIDE;
    let mut data = vec![0.0f64; side * side * 3];
    let grid = side / PATCH_SIDE;
    let words_per_side = PATCH_SIDE / WORD_SIDE;
    // Corner arrangement: class 0 puts vertical stripes on the main
    // diagonal, class 1 on the anti-diagonal. Same multiset either way.
    let pattern = [0u8, 1, 1, 0];
    for gy in 0..grid {
        for gx in 0..grid {
            let amp = r.gen_range(0.5..1.0);
            let mut patch = [[0.0f64; 3]; PATCH_SIDE * PATCH_SIDE];
            for word in 0..words_per_side * words_per_side {
                let horizontal = (pattern[word] as usize) ^ label == 1;
                let (wy, wx) = (word / words_per_side, word % words_per_side);
                for dy in 0..WORD_SIDE {
                    for dx in 0..WORD_SIDE {
                        let stripe = if horizontal { dy % 2 } else { dx % 2 };
                        let base = if stripe == 0 { amp } else { -amp };
                        let py = wy * WORD_SIDE + dy;
                        let px = wx * WORD_SIDE + dx;
                        for ch in 0..3 {
                            patch[py * PATCH_SIDE + px][ch] = base + 0.1 * r.sample::<f64, _>(rand_distr::StandardNormal);
                        }
                    }
                }
            }
            // Equalization: recenter each (patch, channel) to zero mean so
            // patch-level means are class-blind by construction.
            for ch in 0..3 {
                let mean: f64 = patch.iter().map(|px| px[ch]).sum::<f64>()
                    / (PATCH_SIDE * PATCH_SIDE) as f64;
                for px in patch.iter_mut() {
                    px[ch] -= mean;
                }
            }
            for py in 0..PATCH_SIDE {
                for px in 0..PATCH_SIDE {
                    let (y, x) = (gy * PATCH_SIDE + py, gx * PATCH_SIDE + px);
                    for ch in 0..3 {
                        data[(y * side + x) * 3 + ch] = patch[py * PATCH_SIDE + px][ch];
                    }
                }
            }
        }
    }
    (ImageInput::from_normalized(side, side, data).expect("sized buffer"), label)
}

/// Two-class 32x32 task determined by the 4x4-scale texture arrangement
/// inside each 8x8 patch; labels alternate so splits stay balanced.
pub fn make_subpatch_task(seed: u64, n_samples: usize) -> ToyDataset {
    #[cfg(feature = "parallel")]
    let samples: Vec<(ImageInput, usize)> =
        (0..n_samples).into_par_iter().map(|i| subpatch_sample(seed, i)).collect();
    #[cfg(not(feature = "parallel"))]
    let samples: Vec<(ImageInput, usize)> =
        (0..n_samples).map(|i| subpatch_sample(seed, i)).collect();
    let (images, labels) = samples.into_iter().unzip();
    ToyDataset {
        images,
        labels,
        n_classes: 2,
        seed,
        descriptor: format!("subpatch-v1:{n_samples}"),
    }
}

/// Disjoint train/heldout splits from one master seed.
pub fn train_heldout(seed: u64, n_train: usize, n_heldout: usize) -> (ToyDataset, ToyDataset) {
    (
        make_subpatch_task(rng::derive(seed, "task-train"), n_train),
        make_subpatch_task(rng::derive(seed, "task-heldout"), n_heldout),
    )
}

// ── Patch-mean control ───────────────────────────────────────────────────

/// Per-(patch, channel) means: the only information a patch-average model
/// can see.
pub fn patch_mean_features(img: &ImageInput, p: usize) -> Vec<f64> {
    let grid_h = img.height / p;
    let grid_w = img.width / p;
    let mut out = Vec::with_capacity(grid_h * grid_w * 3);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for dy in 0..p {
                    for dx in 0..p {
                        acc += img.pixel(gy * p + dy, gx * p + dx, ch);
                    }
                }
                out.push(acc / (p * p) as f64);
            }
        }
    }
    out
}

/// Logistic regression on patch-mean features: the degenerate baseline
/// that sees exactly what a words-never-fused model could.
pub fn patch_mean_classifier_accuracy(
    train: &ToyDataset,
    test: &ToyDataset,
    p: usize,
) -> Result<f64, TntError> {
    if train.is_empty() || test.is_empty() {
        return Err(TntError::Config("empty dataset".into()));
    }
    let feats: Vec<Vec<f64>> =
        train.images.iter().map(|img| patch_mean_features(img, p)).collect();
    let dim = feats[0].len();
    let mut w = vec![0.0f64; dim];
    let mut b = 0.0f64;
    let lr = 0.5;
    for _ in 0..200 {
        let mut gw = vec![0.0f64; dim];
        let mut gb = 0.0f64;
        for (x, &y) in feats.iter().zip(&train.labels) {
            let z: f64 = b + x.iter().zip(&w).map(|(xi, wi)| xi * wi).sum::<f64>();
            let pred = 1.0 / (1.0 + (-z).exp());
            let err = pred - y as f64;
            gb += err;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += err * xi;
            }
        }
        let inv = 1.0 / feats.len() as f64;
        b -= lr * gb * inv;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * g * inv;
        }
    }
    let mut correct = 0usize;
    for (img, &y) in test.images.iter().zip(&test.labels) {
        let x = patch_mean_features(img, p);
        let z: f64 = b + x.iter().zip(&w).map(|(xi, wi)| xi * wi).sum::<f64>();
        let pred = usize::from(z > 0.0);
        correct += usize::from(pred == y);
    }
    Ok(correct as f64 / test.len() as f64)
}

//! Attention-map and feature-map extraction.
//!
//! Exports are pure reads over a traced forward pass. Arrays go to a small
//! self-describing binary (`TNTA`: magic, u32 rank, u64 dims, little-endian
//! f64 data) and optionally to CSV for quick plotting (rank <= 2 as a plain
//! matrix, higher ranks in long `indices...,value` form).

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::TntError;
use crate::model::{ForwardTrace, Model};
use crate::tensor::Tensor;
use crate::tokenizer::ImageInput;

pub const TNTA_MAGIC: [u8; 4] = *b"TNTA";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnLevel {
    Inner,
    Outer,
}

/// Head selection: one head, or the mean over heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSel {
    Index(usize),
    Mean,
}

/// One exported attention matrix with its provenance. Row i of `matrix`
/// is the attention distribution of query i (row-stochastic).
#[derive(Debug, Clone)]
pub struct AttnDump {
    pub layer: usize,
    pub level: AttnLevel,
    pub sentence: Option<usize>,
    pub head: HeadSel,
    pub matrix: Tensor,
    /// Query coordinate metadata: word grid (inner) or patch grid (outer).
    pub grid: (usize, usize),
}

/// Class-token attention over the patch grid, heads averaged. The class
/// token's own weight is excluded from the grid and reported separately.
#[derive(Debug, Clone)]
pub struct ClassAttention {
    pub layer: usize,
    /// `[grid_h, grid_w]`, summing to 1 - self_weight.
    pub weights: Tensor,
    pub self_weight: f64,
}

fn traced(model: &Model, img: &ImageInput) -> Result<ForwardTrace, TntError> {
    let (_, trace) = model.forward_traced(img, false, &mut crate::rng::stream(0, "export"))?;
    Ok(trace)
}

fn layer_index(model: &Model, layer: usize) -> Result<usize, TntError> {
    if layer == 0 || layer > model.config.depth {
        return Err(TntError::Config(format!(
            "layer {layer} out of range 1..={}",
            model.config.depth
        )));
    }
    Ok(layer - 1)
}

/// Inner attention of one sentence at a TNT layer: an m x m matrix.
pub fn inner_attention(
    model: &Model,
    img: &ImageInput,
    layer: usize,
    sentence: usize,
    head: HeadSel,
) -> Result<AttnDump, TntError> {
    let li = layer_index(model, layer)?;
    if !model.config.is_tnt_layer(layer) {
        return Err(TntError::Config(format!(
            "layer {layer} is a standard block in this configuration (tnt_block_indices = \
             {:?}); inner attention exists only at TNT layers",
            model.config.tnt_block_indices
        )));
    }
    let n = model.config.n();
    if sentence >= n {
        return Err(TntError::Config(format!("sentence {sentence} out of range 0..{n}")));
    }
    let trace = traced(model, img)?;
    let attn = trace.layers[li].inner_attn.as_ref().expect("tnt layer has inner maps");
    let [_, heads, m, _] = attn.shape() else { unreachable!("inner attention is rank 4") };
    let (heads, m) = (*heads, *m);
    let matrix = select_head(attn, sentence, heads, m, head)?;
    Ok(AttnDump {
        layer,
        level: AttnLevel::Inner,
        sentence: Some(sentence),
        head,
        matrix,
        grid: (model.config.words_per_side(), model.config.words_per_side()),
    })
}

/// Outer attention at any layer: an (n+1) x (n+1) matrix.
pub fn outer_attention(
    model: &Model,
    img: &ImageInput,
    layer: usize,
    head: HeadSel,
) -> Result<AttnDump, TntError> {
    let li = layer_index(model, layer)?;
    let trace = traced(model, img)?;
    let attn = &trace.layers[li].outer_attn; // [h, n+1, n+1]
    let [heads, t, _] = attn.shape() else { unreachable!("outer attention is rank 3") };
    let (heads, t) = (*heads, *t);
    let matrix = select_head_3d(attn, heads, t, head)?;
    Ok(AttnDump {
        layer,
        level: AttnLevel::Outer,
        sentence: None,
        head,
        matrix,
        grid: model.config.grid(),
    })
}

fn select_head(
    attn: &Tensor,
    sentence: usize,
    heads: usize,
    m: usize,
    head: HeadSel,
) -> Result<Tensor, TntError> {
    let per_head = m * m;
    let base = sentence * heads * per_head;
    match head {
        HeadSel::Index(h) if h >= heads => {
            Err(TntError::Config(format!("head {h} out of range 0..{heads}")))
        }
        HeadSel::Index(h) => {
            let start = base + h * per_head;
            Tensor::new(vec![m, m], attn.data()[start..start + per_head].to_vec())
        }
        HeadSel::Mean => {
            let mut out = vec![0.0; per_head];
            for h in 0..heads {
                let start = base + h * per_head;
                for (o, v) in out.iter_mut().zip(&attn.data()[start..start + per_head]) {
                    *o += v / heads as f64;
                }
            }
            Tensor::new(vec![m, m], out)
        }
    }
}

fn select_head_3d(attn: &Tensor, heads: usize, t: usize, head: HeadSel) -> Result<Tensor, TntError> {
    let per_head = t * t;
    match head {
        HeadSel::Index(h) if h >= heads => {
            Err(TntError::Config(format!("head {h} out of range 0..{heads}")))
        }
        HeadSel::Index(h) => {
            Tensor::new(vec![t, t], attn.data()[h * per_head..(h + 1) * per_head].to_vec())
        }
        HeadSel::Mean => {
            let mut out = vec![0.0; per_head];
            for h in 0..heads {
                for (o, v) in out.iter_mut().zip(&attn.data()[h * per_head..(h + 1) * per_head]) {
                    *o += v / heads as f64;
                }
            }
            Tensor::new(vec![t, t], out)
        }
    }
}

/// Class-token query row at a layer, heads averaged, patch keys reshaped
/// to the grid; the self-attention weight is reported separately.
pub fn class_attention(
    model: &Model,
    img: &ImageInput,
    layer: usize,
) -> Result<ClassAttention, TntError> {
    let dump = outer_attention(model, img, layer, HeadSel::Mean)?;
    let (gh, gw) = model.config.grid();
    let t = model.config.n() + 1;
    let row = &dump.matrix.data()[..t]; // query 0 = class token
    let weights = Tensor::new(vec![gh, gw], row[1..].to_vec())?;
    Ok(ClassAttention { layer, weights, self_weight: row[0] })
}

/// Channel-averaged word embeddings: for each patch the m words reshaped
/// to the (p/s) x (p/s) grid, averaged over channels -> `[n, p/s, p/s]`.
/// Layer 0 is the patch projection before the word position encoding;
/// layers 1..=L are the word state after that full layer.
pub fn word_feature_maps(
    model: &Model,
    img: &ImageInput,
    layer: usize,
) -> Result<Tensor, TntError> {
    if layer > model.config.depth {
        return Err(TntError::Config(format!(
            "layer {layer} out of range 0..={}",
            model.config.depth
        )));
    }
    let trace = traced(model, img)?;
    let words = if layer == 0 {
        trace.stage0_words.as_ref().expect("trace records stage 0")
    } else {
        &trace.layers[layer - 1].words
    };
    let [n, m, c] = words.shape() else { unreachable!("word state is rank 3") };
    let (n, m, c) = (*n, *m, *c);
    let ps = model.config.words_per_side();
    debug_assert_eq!(ps * ps, m);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let base = (i * m + j) * c;
            out[i * m + j] = words.data()[base..base + c].iter().sum::<f64>() / c as f64;
        }
    }
    Tensor::new(vec![n, ps, ps], out)
}

// ── File formats ─────────────────────────────────────────────────────────

pub fn write_tnta(path: &Path, tensor: &Tensor) -> Result<(), TntError> {
    let file = std::fs::File::create(path).map_err(|e| TntError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| TntError::io(path, e);
    w.write_all(&TNTA_MAGIC).map_err(io_err)?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes()).map_err(io_err)?;
    for &d in tensor.shape() {
        w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
    }
    for v in tensor.data() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_tnta(path: &Path) -> Result<Tensor, TntError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| TntError::io(path, e))?;
    if bytes.len() < 8 || bytes[..4] != TNTA_MAGIC {
        return Err(TntError::Format("not a TNTA file".into()));
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut pos = 8;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        if pos + 8 > bytes.len() {
            return Err(TntError::Format("TNTA truncated in dims".into()));
        }
        shape.push(u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize);
        pos += 8;
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != pos + numel * 8 {
        return Err(TntError::Format(format!(
            "TNTA payload is {} bytes, dims {shape:?} imply {}",
            bytes.len() - pos,
            numel * 8
        )));
    }
    let data = bytes[pos..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data)
}

/// CSV emitter: rank <= 2 as a plain value matrix, higher ranks as long
/// `i0,i1,...,value` rows with a `#shape` header line.
pub fn write_csv(path: &Path, tensor: &Tensor) -> Result<(), TntError> {
    let file = std::fs::File::create(path).map_err(|e| TntError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| TntError::io(path, e);
    match tensor.rank() {
        0 | 1 => {
            let line =
                tensor.data().iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",");
            writeln!(w, "{line}").map_err(io_err)?;
        }
        2 => {
            let cols = tensor.shape()[1];
            for row in tensor.data().chunks(cols) {
                let line = row.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",");
                writeln!(w, "{line}").map_err(io_err)?;
            }
        }
        _ => {
            writeln!(w, "#shape,{}", tensor.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"))
                .map_err(io_err)?;
            let shape = tensor.shape().to_vec();
            let mut idx = vec![0usize; shape.len()];
            for v in tensor.data() {
                let coords = idx.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
                writeln!(w, "{coords},{v}").map_err(io_err)?;
                for axis in (0..shape.len()).rev() {
                    idx[axis] += 1;
                    if idx[axis] < shape[axis] {
                        break;
                    }
                    idx[axis] = 0;
                }
            }
        }
    }
    w.flush().map_err(io_err)
}

// ── Export entry points (compute + write) ────────────────────────────────

pub fn export_inner_attention(
    model: &Model,
    img: &ImageInput,
    layer: usize,
    sentence: usize,
    head: HeadSel,
    path: &Path,
) -> Result<AttnDump, TntError> {
    let dump = inner_attention(model, img, layer, sentence, head)?;
    write_tnta(path, &dump.matrix)?;
    Ok(dump)
}

pub fn export_outer_attention(
    model: &Model,
    img: &ImageInput,
    layer: usize,
    head: HeadSel,
    path: &Path,
) -> Result<AttnDump, TntError> {
    let dump = outer_attention(model, img, layer, head)?;
    write_tnta(path, &dump.matrix)?;
    Ok(dump)
}

pub fn export_class_attention(
    model: &Model,
    img: &ImageInput,
    layer: usize,
    path: &Path,
) -> Result<ClassAttention, TntError> {
    let dump = class_attention(model, img, layer)?;
    write_tnta(path, &dump.weights)?;
    Ok(dump)
}

pub fn export_word_feature_maps(
    model: &Model,
    img: &ImageInput,
    layer: usize,
    path: &Path,
) -> Result<Tensor, TntError> {
    let maps = word_feature_maps(model, img, layer)?;
    write_tnta(path, &maps)?;
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TntConfig;
    use crate::rng::stream;
    use rand::Rng;

    fn micro_model() -> Model {
        Model::build(&TntConfig::tnt_micro(), 1).unwrap()
    }

    fn rand_image(seed: u64) -> ImageInput {
        let mut r = stream(seed, "introspect-test");
        ImageInput::from_normalized(
            32,
            32,
            (0..32 * 32 * 3).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn assert_row_stochastic(matrix: &Tensor) {
        let cols = matrix.shape()[1];
        for row in matrix.data().chunks(cols) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn inner_and_outer_exports_are_row_stochastic() {
        let model = micro_model();
        let img = rand_image(2);
        for head in [HeadSel::Index(0), HeadSel::Index(1), HeadSel::Mean] {
            let dump = inner_attention(&model, &img, 1, 3, head).unwrap();
            assert_eq!(dump.matrix.shape(), &[4, 4]);
            assert_row_stochastic(&dump.matrix);
        }
        let outer = outer_attention(&model, &img, 2, HeadSel::Mean).unwrap();
        assert_eq!(outer.matrix.shape(), &[17, 17]);
        assert_row_stochastic(&outer.matrix);
    }

    #[test]
    fn sixteen_word_config_gives_16x16_matrix() {
        let mut cfg = TntConfig::tnt_micro();
        cfg.word_size = 2; // p=8, s=2 -> m = 16
        let model = Model::build(&cfg, 3).unwrap();
        let dump = inner_attention(&model, &rand_image(4), 1, 0, HeadSel::Mean).unwrap();
        assert_eq!(dump.matrix.shape(), &[16, 16]);
        assert_eq!(dump.grid, (4, 4));
    }

    #[test]
    fn non_tnt_layer_is_rejected_with_explanation() {
        let cfg = TntConfig::tnt_micro().with_indices(vec![1]);
        let model = Model::build(&cfg, 5).unwrap();
        let err =
            inner_attention(&model, &rand_image(6), 3, 0, HeadSel::Mean).unwrap_err().to_string();
        assert!(err.contains("standard block") && err.contains("[1]"), "{err}");
        // Outer attention still works at that layer.
        outer_attention(&model, &rand_image(6), 3, HeadSel::Mean).unwrap();
        // Bad indices fail cleanly too.
        assert!(inner_attention(&model, &rand_image(6), 1, 99, HeadSel::Mean).is_err());
        assert!(inner_attention(&model, &rand_image(6), 1, 0, HeadSel::Index(7)).is_err());
        assert!(outer_attention(&model, &rand_image(6), 0, HeadSel::Mean).is_err());
    }

    #[test]
    fn class_attention_sums_and_grid() {
        let model = micro_model();
        let dump = class_attention(&model, &rand_image(7), 1).unwrap();
        assert_eq!(dump.weights.shape(), &[4, 4]);
        let sum: f64 = dump.weights.data().iter().sum();
        assert!(sum <= 1.0 + 1e-12);
        assert!((sum + dump.self_weight - 1.0).abs() < 1e-9);
        // The published 224^2, p=16 geometry maps to a 14x14 grid.
        assert_eq!(TntConfig::tnt_s().grid(), (14, 14));
    }

    #[test]
    fn class_attention_is_near_uniform_at_init() {
        let model = micro_model();
        let dump = class_attention(&model, &rand_image(8), 1).unwrap();
        let mx = dump.weights.data().iter().cloned().fold(f64::MIN, f64::max);
        let mn = dump.weights.data().iter().cloned().fold(f64::MAX, f64::min);
        assert!(mx / mn < 1.5, "max/min ratio {}", mx / mn);
    }

    #[test]
    fn word_maps_shapes_and_constant_image() {
        let model = micro_model();
        let maps = word_feature_maps(&model, &rand_image(9), 2).unwrap();
        assert_eq!(maps.shape(), &[16, 2, 2]);

        let flat = ImageInput::from_normalized(32, 32, vec![0.25; 32 * 32 * 3]).unwrap();
        let maps0 = word_feature_maps(&model, &flat, 0).unwrap();
        let first = maps0.data()[0];
        for v in maps0.data() {
            assert!((v - first).abs() < 1e-12, "layer-0 map not constant");
        }
    }

    #[test]
    fn exports_are_pure_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let model = micro_model();
        let img = rand_image(10);
        let before = model.forward(&img, false, &mut stream(0, "dp")).unwrap();
        let p1 = dir.path().join("a.tnta");
        let p2 = dir.path().join("b.tnta");
        export_inner_attention(&model, &img, 1, 0, HeadSel::Index(0), &p1).unwrap();
        export_inner_attention(&model, &img, 1, 0, HeadSel::Index(0), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let after = model.forward(&img, false, &mut stream(0, "dp")).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn tnta_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tnta");
        let t = {
            let mut r = stream(11, "introspect-test");
            Tensor::from_fn(vec![3, 2, 4], |_| r.gen_range(-1.0..1.0))
        };
        write_tnta(&path, &t).unwrap();
        let back = read_tnta(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        let bad = dir.path().join("bad.tnta");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(read_tnta(&bad).is_err());
    }

    #[test]
    fn csv_formats() {
        let dir = tempfile::tempdir().unwrap();
        let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let path = dir.path().join("m.csv");
        write_csv(&path, &m).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "1,2\n3,4\n");

        let t = Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let path3 = dir.path().join("t.csv");
        write_csv(&path3, &t).unwrap();
        let text = std::fs::read_to_string(&path3).unwrap();
        assert!(text.starts_with("#shape,2x1x2\n"));
        assert!(text.contains("1,0,1,4"), "{text}");
    }
}

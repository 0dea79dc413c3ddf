//! Tokenisation, layout-aware OCR embeddings, instruction embeddings and
//! the frozen patch-transformer image encoder.

mod image;
mod tokenizer;

pub use image::{decode_idim, decode_ppm, encode_idim, encode_ppm, write_ppm, PageImage, IMAGE_SIZE};
pub use tokenizer::{
    Tokenizer, VocabConfig, BOS, BYTE_BASE, CONTINUATION, EOS, FIRST_LEARNED, PAD, PAGE, SEP,
};

use crate::error::{Error, Result};
use crate::nn::{Builder, LayerNorm, Linear, PreNormBlock};
use crate::schema::OcrToken;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub const COORD_BINS: usize = 1001;
pub const PATCH: usize = 16;
pub const PATCHES: usize = (IMAGE_SIZE / PATCH) * (IMAGE_SIZE / PATCH);

fn bin(coord: f64, extent: f64) -> usize {
    (1000.0 * coord / extent).round().clamp(0.0, 1000.0) as usize
}

/// Pixel box to integer bins on a 0..=1000 grid.
pub fn quantize_bbox(bbox: [f64; 4], page_w: f64, page_h: f64) -> [usize; 4] {
    assert!(page_w > 0.0 && page_h > 0.0, "page extent must be positive");
    [
        bin(bbox[0], page_w),
        bin(bbox[1], page_h),
        bin(bbox[2], page_w),
        bin(bbox[3], page_h),
    ]
}

/// Sub-word ids of one page's OCR, each carrying its source word's box.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OcrInputs {
    pub ids: Vec<usize>,
    pub boxes: Vec<[usize; 4]>,
}

impl OcrInputs {
    pub fn from_tokens(tokens: &[OcrToken], page_size: (u32, u32), tok: &Tokenizer) -> Self {
        let (w, h) = (page_size.0.max(1) as f64, page_size.1.max(1) as f64);
        let mut out = OcrInputs::default();
        for t in tokens {
            let b = quantize_bbox(t.bbox, w, h);
            for id in tok.encode(&t.text) {
                out.ids.push(id);
                out.boxes.push(b);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Lookup indices in summation order: x1, x2, y1, y2, height, width.
    pub fn spatial_indices(&self) -> [Vec<usize>; 6] {
        let mut out: [Vec<usize>; 6] = Default::default();
        for b in &self.boxes {
            out[0].push(b[0]);
            out[1].push(b[2]);
            out[2].push(b[1]);
            out[3].push(b[3]);
            out[4].push(b[3].saturating_sub(b[1]).min(1000));
            out[5].push(b[2].saturating_sub(b[0]).min(1000));
        }
        out
    }
}

/// Word, coordinate and instruction-position tables.
#[derive(Debug, Clone, Copy)]
pub struct EncoderTables {
    pub w_s: ParamId,
    pub w_x: ParamId,
    pub w_y: ParamId,
    pub w_h: ParamId,
    pub w_w: ParamId,
    pub w_pos: ParamId,
    pub dim: usize,
    pub max_instruction: usize,
}

impl EncoderTables {
    pub const PREFIX: &'static str = "encoder_tables";

    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, vocab: usize, dim: usize, max_instruction: usize) -> Self {
        Self {
            w_s: b.normal("W_s", &[vocab, dim]),
            w_x: b.normal("W_x", &[COORD_BINS, dim]),
            w_y: b.normal("W_y", &[COORD_BINS, dim]),
            w_h: b.normal("W_h", &[COORD_BINS, dim]),
            w_w: b.normal("W_w", &[COORD_BINS, dim]),
            w_pos: b.normal("W_pos", &[max_instruction, dim]),
            dim,
            max_instruction,
        }
    }

    /// `W_s[s] + W_x[x1] + W_x[x2] + W_y[y1] + W_y[y2] + W_h[h] + W_w[w]`
    /// per row, summed left to right.
    pub fn embed_ocr<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, ocr: &OcrInputs) -> Result<Var> {
        if ocr.ids.len() != ocr.boxes.len() {
            return Err(Error::shape("embed_ocr", format!("{} ids vs {} boxes", ocr.ids.len(), ocr.boxes.len())));
        }
        let mut z = g.param_rows(s, self.w_s, &ocr.ids)?;
        let tables = [self.w_x, self.w_x, self.w_y, self.w_y, self.w_h, self.w_w];
        for (table, idx) in tables.iter().zip(ocr.spatial_indices()) {
            let e = g.param_rows(s, *table, &idx)?;
            z = g.add(z, e)?;
        }
        Ok(z)
    }

    /// Word embeddings plus learned positions; no spatial terms.
    pub fn embed_instruction<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, ids: &[usize]) -> Result<Var> {
        if ids.len() > self.max_instruction {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.max_instruction,
            });
        }
        let words = g.param_rows(s, self.w_s, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.param_rows(s, self.w_pos, &positions)?;
        g.add(words, pos)
    }
}

/// 16x16 patches of a preprocessed image, one flattened patch per row.
pub fn patchify<T: Scalar>(img: &PageImage) -> Result<Tensor<T>> {
    let img = img.preprocess()?;
    let per_side = IMAGE_SIZE / PATCH;
    let width = PATCH * PATCH * 3;
    let mut data = Vec::with_capacity(PATCHES * width);
    for py in 0..per_side {
        for px in 0..per_side {
            for y in 0..PATCH {
                for x in 0..PATCH {
                    for c in 0..3 {
                        data.push(T::of(img.at(py * PATCH + y, px * PATCH + x, c) as f64));
                    }
                }
            }
        }
    }
    Tensor::matrix(PATCHES, width, data)
}

/// Small patch transformer producing `z_vis` with one row per patch.
#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub patch: Linear,
    pub pos: ParamId,
    pub blocks: Vec<PreNormBlock>,
    pub ln_f: LayerNorm,
}

impl VisionEncoder {
    pub const PREFIX: &'static str = "vision";

    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, dim: usize, blocks: usize, heads: usize) -> Result<Self> {
        let patch = Linear::new(b, "_patch", PATCH * PATCH * 3, dim);
        let pos = b.normal("pos", &[PATCHES, dim]);
        let blocks = (0..blocks)
            .map(|i| PreNormBlock::new(b, &format!("block{i}"), dim, heads, 4 * dim))
            .collect::<Result<Vec<_>>>()?;
        let ln_f = LayerNorm::new(b, "ln_f", dim);
        Ok(Self {
            patch,
            pos,
            blocks,
            ln_f,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, patches: Tensor<T>) -> Result<Var> {
        let x = g.constant(patches);
        let x = self.patch.forward(g, s, x)?;
        let pos = g.param(s, self.pos);
        let mut x = g.add(x, pos)?;
        for b in &self.blocks {
            x = b.forward(g, s, x, None)?;
        }
        self.ln_f.forward(g, s, x)
    }

    pub fn encode_image<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, img: &PageImage) -> Result<Var> {
        self.forward(g, s, patchify(img)?)
    }

    /// `z_vis` as a plain tensor, outside any training graph.
    pub fn encode_value<T: Scalar>(&self, s: &ParamStore<T>, img: &PageImage) -> Result<Tensor<T>> {
        self.forward_patches(s, patchify(img)?)
    }

    pub fn forward_patches<T: Scalar>(&self, s: &ParamStore<T>, patches: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let v = self.forward(&mut g, s, patches)?;
        Ok(g.value(v).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize_bbox([0.0, 0.0, 640.0, 480.0], 640.0, 480.0), [0, 0, 1000, 1000]);
        assert_eq!(quantize_bbox([320.0, 240.0, 320.0, 240.0], 640.0, 480.0), [500, 500, 500, 500]);
        assert_eq!(quantize_bbox([750.0, 29.0, 954.0, 94.0], 1000.0, 1000.0), [750, 29, 954, 94]);
        assert_eq!(quantize_bbox([-5.0, 0.0, 2000.0, 10.0], 1000.0, 1000.0), [0, 0, 1000, 10]);
    }

    fn tables(vocab: usize, d: usize) -> (ParamStore<f64>, EncoderTables) {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(9);
        let t = EncoderTables::new(&mut Builder::new(&mut store, &mut rng, 0.5, "encoder_tables"), vocab, d, 16);
        (store, t)
    }

    #[test]
    fn permuting_tokens_permutes_rows() {
        let (store, t) = tables(300, 4);
        let a = OcrInputs {
            ids: vec![270, 280, 290],
            boxes: vec![[1, 2, 30, 40], [100, 100, 200, 150], [0, 0, 1000, 1000]],
        };
        let b = OcrInputs {
            ids: vec![290, 270, 280],
            boxes: vec![a.boxes[2], a.boxes[0], a.boxes[1]],
        };
        let mut g = Graph::new();
        let za = t.embed_ocr(&mut g, &store, &a).unwrap();
        let zb = t.embed_ocr(&mut g, &store, &b).unwrap();
        let (za, zb) = (g.value(za), g.value(zb));
        assert_eq!(za.row(0), zb.row(1));
        assert_eq!(za.row(1), zb.row(2));
        assert_eq!(za.row(2), zb.row(0));
    }

    #[test]
    fn instruction_positions_zeroed_gives_word_rows() {
        let (mut store, t) = tables(300, 4);
        store.get_mut(t.w_pos).tensor.fill(0.0);
        let ids = [270, 5, 299];
        let mut g = Graph::new();
        let z = t.embed_instruction(&mut g, &store, &ids).unwrap();
        for (r, &id) in ids.iter().enumerate() {
            assert_eq!(g.value(z).row(r), store.get(t.w_s).tensor.row(id));
        }
        let e = t.embed_instruction(&mut g, &store, &[]).unwrap();
        assert_eq!(g.value(e).shape(), &[0, 4]);
        assert!(matches!(
            t.embed_instruction(&mut g, &store, &[5; 17]),
            Err(Error::SequenceTooLong { len: 17, max: 16 })
        ));
    }

    #[test]
    fn ocr_inputs_share_word_box() {
        let tok = Tokenizer::bytes_only();
        let toks = [OcrToken::new("ab", [10.0, 20.0, 30.0, 40.0])];
        let o = OcrInputs::from_tokens(&toks, (100, 100), &tok);
        assert_eq!(o.ids.len(), 2);
        assert_eq!(o.boxes, vec![[100, 200, 300, 400]; 2]);
        assert_eq!(o.spatial_indices()[4], vec![200, 200]);
    }

    fn vision() -> (ParamStore<f32>, VisionEncoder) {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(2);
        let v = VisionEncoder::new(&mut Builder::new(&mut store, &mut rng, 0.02, "vision"), 8, 2, 2).unwrap();
        (store, v)
    }

    #[test]
    fn vision_shape_and_determinism() {
        let (store, v) = vision();
        let zero = PageImage::filled(50, 70, 0.0);
        let a = v.encode_value(&store, &zero).unwrap();
        let b = v.encode_value(&store, &zero.clone()).unwrap();
        assert_eq!(a.shape(), &[PATCHES, 8]);
        assert_eq!(a, b);
        assert_eq!(PATCHES, 196);
    }

    #[test]
    fn moved_pixel_changes_output() {
        let (store, v) = vision();
        let mut p1 = PageImage::filled(IMAGE_SIZE, IMAGE_SIZE, 0.0);
        let mut p2 = p1.clone();
        for c in 0..3 {
            p1.set(3, 3, c, 1.0);
            p2.set(100, 180, c, 1.0);
        }
        let a = v.encode_value(&store, &p1).unwrap();
        let b = v.encode_value(&store, &p2).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn two_channel_image_rejected() {
        let (store, v) = vision();
        let img = PageImage::new(4, 4, 2, vec![0.0; 32]).unwrap();
        assert!(matches!(v.encode_value(&store, &img), Err(Error::Format(_))));
    }
}

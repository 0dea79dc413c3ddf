//! Small encoder-decoder language model. The encoder reads
//! `[h_doc; instruction; OCR]` with a learned segment tag per part; the
//! decoder is causal and its output head is tied to the token embedding.

use serde::{Deserialize, Serialize};

use crate::encoder::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::nn::{Attention, Builder, Ffn, LayerNorm, PreNormBlock};
use crate::tensor::{attention_mask, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

pub const SEG_DOC: usize = 0;
pub const SEG_INSTRUCTION: usize = 1;
pub const SEG_OCR: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub vocab: usize,
    pub dim: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub max_encoder_len: usize,
    pub max_decoder_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab: 2048,
            dim: 64,
            heads: 4,
            encoder_blocks: 2,
            decoder_blocks: 2,
            max_encoder_len: 1024,
            max_decoder_len: 64,
        }
    }
}

/// Causal self-attention, cross-attention to the encoder, feed-forward;
/// all pre-norm with residuals.
#[derive(Debug, Clone, Copy)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub cross: Attention,
    pub ln3: LayerNorm,
    pub ffn: Ffn,
}

impl DecoderBlock {
    fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                ln1: LayerNorm::new(b, "ln1", dim),
                attn: Attention::new(b, "attn", dim, heads)?,
                ln2: LayerNorm::new(b, "ln2", dim),
                cross: Attention::new(b, "cross", dim, heads)?,
                ln3: LayerNorm::new(b, "ln3", dim),
                ffn: Ffn::new(b, "ffn", dim, 4 * dim, dim),
            })
        })
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        x: Var,
        memory: Var,
        causal: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, s, x)?;
        let a = self.attn.forward(g, s, h, h, causal)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, s, x)?;
        let c = self.cross.forward(g, s, h, memory, None)?;
        let x = g.add(x, c)?;
        let h = self.ln3.forward(g, s, x)?;
        let f = self.ffn.forward(g, s, h)?;
        g.add(x, f)
    }
}

#[derive(Debug, Clone)]
pub struct Seq2SeqLm {
    pub cfg: LmConfig,
    pub embed: ParamId,
    pub segment: ParamId,
    pub pos_encoder: ParamId,
    pub pos_decoder: ParamId,
    pub encoder: Vec<PreNormBlock>,
    pub encoder_ln: LayerNorm,
    pub decoder: Vec<DecoderBlock>,
    pub decoder_ln: LayerNorm,
}

impl Seq2SeqLm {
    pub const PREFIX: &'static str = "lm";

    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, cfg: LmConfig) -> Result<Self> {
        let d = cfg.dim;
        let embed = b.normal("embed", &[cfg.vocab, d]);
        let segment = b.normal("segment", &[3, d]);
        let pos_encoder = b.normal("pos_encoder", &[cfg.max_encoder_len, d]);
        let pos_decoder = b.normal("pos_decoder", &[cfg.max_decoder_len, d]);
        let (encoder, encoder_ln) = b.scope("encoder", |b| -> Result<_> {
            let blocks = (0..cfg.encoder_blocks)
                .map(|i| PreNormBlock::new(b, &format!("block{i}"), d, cfg.heads, 4 * d))
                .collect::<Result<Vec<_>>>()?;
            Ok((blocks, LayerNorm::new(b, "ln_f", d)))
        })?;
        let (decoder, decoder_ln) = b.scope("decoder", |b| -> Result<_> {
            let blocks = (0..cfg.decoder_blocks)
                .map(|i| DecoderBlock::new(b, &format!("block{i}"), d, cfg.heads))
                .collect::<Result<Vec<_>>>()?;
            Ok((blocks, LayerNorm::new(b, "ln_f", d)))
        })?;
        Ok(Self {
            cfg,
            embed,
            segment,
            pos_encoder,
            pos_decoder,
            encoder,
            encoder_ln,
            decoder,
            decoder_ln,
        })
    }

    /// Encoder states for `[h_doc; instruction; ocr]`.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        h_doc: Var,
        instruction: &[usize],
        ocr: &[usize],
    ) -> Result<Var> {
        let m = g.value(h_doc).rows();
        let dc = g.value(h_doc).cols();
        if dc != self.cfg.dim {
            return Err(Error::shape("lm encode", format!("h_doc has {dc} columns, expected {}", self.cfg.dim)));
        }
        let len = m + instruction.len() + ocr.len();
        if len > self.cfg.max_encoder_len {
            return Err(Error::SequenceTooLong {
                len,
                max: self.cfg.max_encoder_len,
            });
        }
        if len == 0 {
            return Err(Error::shape("lm encode", "empty encoder input"));
        }
        let emb = g.param(s, self.embed);
        let mut parts = Vec::with_capacity(3);
        if m > 0 {
            parts.push(h_doc);
        }
        for ids in [instruction, ocr] {
            if !ids.is_empty() {
                parts.push(g.embedding(emb, ids)?);
            }
        }
        let x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };

        let mut segs = vec![SEG_DOC; m];
        segs.extend(std::iter::repeat(SEG_INSTRUCTION).take(instruction.len()));
        segs.extend(std::iter::repeat(SEG_OCR).take(ocr.len()));
        let seg_table = g.param(s, self.segment);
        let seg = g.embedding(seg_table, &segs)?;
        let pos_table = g.param(s, self.pos_encoder);
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.embedding(pos_table, &positions)?;
        let x = g.add(x, seg)?;
        let mut x = g.add(x, pos)?;
        for b in &self.encoder {
            x = b.forward(g, s, x, None)?;
        }
        self.encoder_ln.forward(g, s, x)
    }

    /// Next-token logits for every decoder position.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, memory: Var, input: &[usize]) -> Result<Var> {
        let n = input.len();
        if n > self.cfg.max_decoder_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.cfg.max_decoder_len,
            });
        }
        let emb = g.param(s, self.embed);
        let x = g.embedding(emb, input)?;
        let pos_table = g.param(s, self.pos_decoder);
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.embedding(pos_table, &positions)?;
        let mut x = g.add(x, pos)?;
        let causal = attention_mask::<T>(n, n, None, true);
        for b in &self.decoder {
            x = b.forward(g, s, x, memory, causal.as_ref())?;
        }
        let h = self.decoder_ln.forward(g, s, x)?;
        g.matmul_t(h, emb)
    }

    /// Teacher-forced decoder input: `BOS` followed by all but the last target.
    pub fn shift_right(targets: &[usize]) -> Vec<usize> {
        let mut input = Vec::with_capacity(targets.len());
        input.push(BOS);
        input.extend_from_slice(&targets[..targets.len().saturating_sub(1)]);
        input
    }

    /// Summed target NLL, the number of counted targets and the logits.
    pub fn loss_sum<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        h_doc: Var,
        instruction: &[usize],
        ocr: &[usize],
        targets: &[usize],
    ) -> Result<(Var, usize, Var)> {
        if targets.is_empty() {
            return Err(Error::NoTargets);
        }
        let memory = self.encode(g, s, h_doc, instruction, ocr)?;
        let logits = self.decode(g, s, memory, &Self::shift_right(targets))?;
        let (loss, count) = g.cross_entropy_sum(logits, targets, PAD)?;
        Ok((loss, count, logits))
    }

    /// Mean per-token NLL and the logits.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        h_doc: Var,
        instruction: &[usize],
        ocr: &[usize],
        targets: &[usize],
    ) -> Result<(Var, Var)> {
        let (sum, count, logits) = self.loss_sum(g, s, h_doc, instruction, ocr, targets)?;
        if count == 0 {
            return Err(Error::NoTargets);
        }
        Ok((g.scale(sum, 1.0 / count as f64), logits))
    }

    /// Greedy decoding; the returned ids exclude `EOS`.
    pub fn generate<T: Scalar>(
        &self,
        s: &ParamStore<T>,
        h_doc: &Tensor<T>,
        instruction: &[usize],
        ocr: &[usize],
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let h = g.constant(h_doc.clone());
        let memory = self.encode(&mut g, s, h, instruction, ocr)?;
        let memory = g.value(memory).clone();
        let mut input = vec![BOS];
        let mut out = Vec::new();
        let max_len = max_len.min(self.cfg.max_decoder_len);
        while out.len() < max_len {
            let mut step = Graph::new();
            let mem = step.constant(memory.clone());
            let logits = self.decode(&mut step, s, mem, &input)?;
            let last = step.value(logits).row(input.len() - 1);
            let next = argmax(last);
            if next == EOS {
                break;
            }
            out.push(next);
            input.push(next);
        }
        Ok(out)
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

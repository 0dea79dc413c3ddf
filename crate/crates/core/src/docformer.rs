//! Learnable query tokens bridging image features, instruction and OCR
//! embeddings into a fixed number of LM-ready document vectors.

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderTables, OcrInputs, PAGE};
use crate::error::{Error, Result};
use crate::nn::{key_mask, Attention, Builder, Ffn, LayerNorm};
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DocFormerConfig {
    pub tokens: usize,
    pub dim: usize,
    pub lm_dim: usize,
    pub blocks: usize,
    pub heads: usize,
}

impl Default for DocFormerConfig {
    fn default() -> Self {
        Self {
            tokens: 32,
            dim: 64,
            lm_dim: 64,
            blocks: 4,
            heads: 4,
        }
    }
}

/// Self-attention over all rows, cross-attention from the token rows to
/// the image, then a feed-forward layer; residual and post-norm each time.
#[derive(Debug, Clone, Copy)]
pub struct DocBlock {
    pub self_attn: Attention,
    pub ln1: LayerNorm,
    pub cross: Attention,
    pub ln2: LayerNorm,
    pub ffn: Ffn,
    pub ln3: LayerNorm,
}

impl DocBlock {
    fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                self_attn: Attention::new(b, "attn", dim, heads)?,
                ln1: LayerNorm::new(b, "ln1", dim),
                cross: Attention::new(b, "cross", dim, heads)?,
                ln2: LayerNorm::new(b, "ln2", dim),
                ffn: Ffn::new(b, "ffn", dim, 4 * dim, dim),
                ln3: LayerNorm::new(b, "ln3", dim),
            })
        })
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        x: Var,
        m: usize,
        z_vis: Var,
        mask: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let a = self.self_attn.forward(g, s, x, x, mask)?;
        let x = g.add(x, a)?;
        let x = self.ln1.forward(g, s, x)?;

        let rows = g.value(x).rows();
        let tok = g.slice_rows(x, 0, m)?;
        let c = self.cross.forward(g, s, tok, z_vis, None)?;
        let tok = g.add(tok, c)?;
        let tok = self.ln2.forward(g, s, tok)?;
        let x = if rows > m {
            let rest = g.slice_rows(x, m, rows - m)?;
            g.concat_rows(&[tok, rest])?
        } else {
            tok
        };

        let f = self.ffn.forward(g, s, x)?;
        let x = g.add(x, f)?;
        self.ln3.forward(g, s, x)
    }
}

#[derive(Debug, Clone)]
pub struct DocFormer {
    pub cfg: DocFormerConfig,
    pub tokens: ParamId,
    pub blocks: Vec<DocBlock>,
    pub proj: Ffn,
}

impl DocFormer {
    pub const PREFIX: &'static str = "docformer";

    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, cfg: DocFormerConfig) -> Result<Self> {
        if cfg.tokens == 0 {
            return Err(Error::Config("docformer needs at least one token".into()));
        }
        let tokens = b.normal("tokens", &[cfg.tokens, cfg.dim]);
        let blocks = (0..cfg.blocks)
            .map(|i| DocBlock::new(b, &format!("block{i}"), cfg.dim, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        let proj = Ffn::new(b, "proj", cfg.dim, 2 * cfg.dim, cfg.lm_dim);
        Ok(Self {
            cfg,
            tokens,
            blocks,
            proj,
        })
    }

    /// Overwrites the projection so that it maps `z` to itself exactly,
    /// using `gelu(x) - gelu(-x) = x`.
    pub fn set_identity_projection<T: Scalar>(&self, s: &mut ParamStore<T>) -> Result<()> {
        let d = self.cfg.dim;
        if d != self.cfg.lm_dim {
            return Err(Error::Config(format!("identity projection needs dim == lm_dim, got {d} and {}", self.cfg.lm_dim)));
        }
        let mut w1 = Tensor::zeros(&[d, 2 * d]);
        let mut w2 = Tensor::zeros(&[2 * d, d]);
        for i in 0..d {
            w1.row_mut(i)[i] = T::one();
            w1.row_mut(i)[d + i] = -T::one();
            w2.row_mut(i)[i] = T::one();
            w2.row_mut(d + i)[i] = -T::one();
        }
        s.get_mut(self.proj.l1.w).tensor = w1;
        s.get_mut(self.proj.l2.w).tensor = w2;
        for b in [self.proj.l1.b, self.proj.l2.b].into_iter().flatten() {
            s.get_mut(b).tensor.fill(T::zero());
        }
        Ok(())
    }

    /// `z_doc` for one page. `pad` flags rows of `[z_ins; z_ocr]` that must
    /// not be attended to.
    pub fn bridge<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        z_vis: Var,
        z_ins: Var,
        z_ocr: Var,
        pad: Option<&[bool]>,
    ) -> Result<Var> {
        let d = self.cfg.dim;
        for (what, v) in [("z_vis", z_vis), ("z_ins", z_ins), ("z_ocr", z_ocr)] {
            let c = g.value(v).cols();
            if c != d {
                return Err(Error::shape("bridge", format!("{what} has {c} columns, expected {d}")));
            }
        }
        let m = self.cfg.tokens;
        let tokens = g.param(s, self.tokens);
        let mut parts = vec![tokens];
        for v in [z_ins, z_ocr] {
            if g.value(v).rows() > 0 {
                parts.push(v);
            }
        }
        let mut x = if parts.len() == 1 { tokens } else { g.concat_rows(&parts)? };
        let rows = g.value(x).rows();

        let mask = match pad {
            Some(p) => {
                if p.len() != rows - m {
                    return Err(Error::shape("bridge", format!("pad mask has {} entries for {} rows", p.len(), rows - m)));
                }
                let mut blocked = vec![false; m];
                blocked.extend_from_slice(p);
                key_mask::<T>(rows, &blocked)
            }
            None => None,
        };
        for b in &self.blocks {
            x = b.forward(g, s, x, m, z_vis, mask.as_ref())?;
        }
        if rows > m {
            g.slice_rows(x, 0, m)
        } else {
            Ok(x)
        }
    }

    pub fn project<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, z_doc: Var) -> Result<Var> {
        self.proj.forward(g, s, z_doc)
    }

    /// Bridges and projects each page, then averages the projected
    /// embeddings. Returns the pooled `h_doc` and the OCR ids of all pages
    /// joined by the page separator.
    pub fn encode_pages<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        tables: &EncoderTables,
        pages: &[(Var, &OcrInputs)],
        instruction: &[usize],
    ) -> Result<(Var, Vec<usize>)> {
        if pages.is_empty() {
            return Err(Error::EmptyDocument);
        }
        let z_ins = tables.embed_instruction(g, s, instruction)?;
        let mut h = Vec::with_capacity(pages.len());
        let mut ids = Vec::new();
        for (i, (z_vis, ocr)) in pages.iter().enumerate() {
            let z_ocr = tables.embed_ocr(g, s, ocr)?;
            let z_doc = self.bridge(g, s, *z_vis, z_ins, z_ocr, None)?;
            h.push(self.project(g, s, z_doc)?);
            if i > 0 {
                ids.push(PAGE);
            }
            ids.extend_from_slice(&ocr.ids);
        }
        let pooled = if h.len() == 1 { h[0] } else { g.mean_of(&h)? };
        Ok((pooled, ids))
    }
}

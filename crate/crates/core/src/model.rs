//! Full model assembly: one parameter store holding the vision encoder,
//! the OCR/instruction tables, the Document-former and the LM.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::docformer::{DocFormer, DocFormerConfig};
use crate::encoder::{patchify, EncoderTables, OcrInputs, PageImage, Tokenizer, VisionEncoder, EOS};
use crate::error::{Error, Result};
use crate::ingest::Manifest;
use crate::lm::{LmConfig, Seq2SeqLm};
use crate::nn::Builder;
use crate::schema::{render_instruction, InstanceRecord, InstructionTemplate};
use crate::tensor::{
    encode_checkpoint, load_into, read_checkpoint, save_checkpoint, Graph, ParamStore, Scalar, SeededRng, Tensor, Var,
};

pub const CONFIG_FILE: &str = "model.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const WEIGHTS_FILE: &str = "weights.idrw";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Document-former and table width `d`.
    pub dim: usize,
    /// LM width `d_LLM`.
    pub lm_dim: usize,
    pub tokens: usize,
    pub heads: usize,
    pub docformer_blocks: usize,
    pub vision_blocks: usize,
    pub lm_encoder_blocks: usize,
    pub lm_decoder_blocks: usize,
    pub lm_heads: usize,
    pub max_instruction: usize,
    pub max_encoder_len: usize,
    pub max_decoder_len: usize,
    pub init_std: f64,
    pub identity_projection: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            lm_dim: 64,
            tokens: 32,
            heads: 4,
            docformer_blocks: 4,
            vision_blocks: 2,
            lm_encoder_blocks: 2,
            lm_decoder_blocks: 2,
            lm_heads: 4,
            max_instruction: 128,
            max_encoder_len: 1024,
            max_decoder_len: 64,
            init_std: 0.02,
            identity_projection: false,
        }
    }
}

impl ModelConfig {
    pub fn docformer(&self) -> DocFormerConfig {
        DocFormerConfig {
            tokens: self.tokens,
            dim: self.dim,
            lm_dim: self.lm_dim,
            blocks: self.docformer_blocks,
            heads: self.heads,
        }
    }

    pub fn lm(&self, vocab: usize) -> LmConfig {
        LmConfig {
            vocab,
            dim: self.lm_dim,
            heads: self.lm_heads,
            encoder_blocks: self.lm_encoder_blocks,
            decoder_blocks: self.lm_decoder_blocks,
            max_encoder_len: self.max_encoder_len,
            max_decoder_len: self.max_decoder_len,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub tokenizer: Tokenizer,
    pub store: ParamStore<T>,
    pub vision: VisionEncoder,
    pub tables: EncoderTables,
    pub docformer: DocFormer,
    pub lm: Seq2SeqLm,
}

impl<T: Scalar> Model<T> {
    /// Each part draws its initial weights from its own seeded stream, so
    /// changing one part's shape leaves the others' values alone.
    pub fn new(cfg: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let std = cfg.init_std;
        let vision = {
            let mut rng = SeededRng::derive(seed, VisionEncoder::PREFIX);
            let mut b = Builder::new(&mut store, &mut rng, std, VisionEncoder::PREFIX);
            VisionEncoder::new(&mut b, cfg.dim, cfg.vision_blocks, cfg.heads)?
        };
        let tables = {
            let mut rng = SeededRng::derive(seed, EncoderTables::PREFIX);
            let mut b = Builder::new(&mut store, &mut rng, std, EncoderTables::PREFIX);
            EncoderTables::new(&mut b, tokenizer.len(), cfg.dim, cfg.max_instruction)
        };
        let docformer = {
            let mut rng = SeededRng::derive(seed, DocFormer::PREFIX);
            let mut b = Builder::new(&mut store, &mut rng, std, DocFormer::PREFIX);
            DocFormer::new(&mut b, cfg.docformer())?
        };
        if cfg.identity_projection {
            docformer.set_identity_projection(&mut store)?;
        }
        let lm = {
            let mut rng = SeededRng::derive(seed, Seq2SeqLm::PREFIX);
            let mut b = Builder::new(&mut store, &mut rng, std, Seq2SeqLm::PREFIX);
            Seq2SeqLm::new(&mut b, cfg.lm(tokenizer.len()))?
        };
        Ok(Self {
            cfg,
            tokenizer,
            store,
            vision,
            tables,
            docformer,
            lm,
        })
    }

    /// Writes config, vocabulary and all weights into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join(CONFIG_FILE);
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&self.cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
        self.tokenizer.save(&dir.join(VOCAB_FILE))?;
        save_checkpoint(&self.store, &dir.join(WEIGHTS_FILE))
    }

    pub fn weights_bytes(&self, prefix: Option<&str>) -> Vec<u8> {
        encode_checkpoint(&self.store, prefix)
    }

    /// Builds the model from a saved directory. Weights missing from the
    /// file keep their seeded initial values.
    pub fn load(dir: &Path, seed: u64) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let cfg: ModelConfig = serde_json::from_str(&text)?;
        let tokenizer = Tokenizer::load(&dir.join(VOCAB_FILE))?;
        let mut model = Self::new(cfg, tokenizer, seed)?;
        model.load_weights(&dir.join(WEIGHTS_FILE))?;
        Ok(model)
    }

    /// Loads a checkpoint holding any subset of the parameters, in either
    /// precision.
    pub fn load_weights(&mut self, path: &Path) -> Result<usize> {
        let entries = read_checkpoint::<T>(path)?;
        load_into(&mut self.store, &entries)
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    pub fn copy_from<U: Scalar>(&mut self, other: &ParamStore<U>, prefix: &str) -> Result<usize> {
        let entries: Vec<_> = other
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(_, p)| (p.name.clone(), p.tensor.convert::<T>()))
            .collect();
        for (name, t) in &entries {
            let dst = self
                .store
                .by_name_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            if dst.tensor.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, source {:?}", dst.tensor.shape(), t.shape())));
            }
            dst.tensor = t.clone();
        }
        Ok(entries.len())
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        self.tokenizer.encode(text)
    }

    pub fn targets(&self, answer: &str) -> Vec<usize> {
        let mut t = self.tokenizer.encode(answer);
        t.truncate(self.cfg.max_decoder_len.saturating_sub(1));
        t.push(EOS);
        t
    }

    pub fn instruction_ids(&self, text: &str) -> Result<Vec<usize>> {
        let ids = self.tokenizer.encode(text);
        if ids.len() > self.cfg.max_instruction {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.cfg.max_instruction,
            });
        }
        Ok(ids)
    }

    pub fn z_vis(&self, img: &PageImage) -> Result<Tensor<T>> {
        self.vision.encode_value(&self.store, img)
    }

    /// Summed target NLL and target count for one example.
    pub fn loss_sum(
        &self,
        g: &mut Graph<T>,
        ex: &Example,
        instruction: &[usize],
        pages: &mut PageCache<T>,
        vision_in_graph: bool,
    ) -> Result<(Var, usize)> {
        let mut z = Vec::with_capacity(ex.pages.len());
        for p in &ex.pages {
            let v = if vision_in_graph {
                let patches = pages.patches(p)?;
                self.vision.forward(g, &self.store, patches)?
            } else {
                let t = pages.z_vis(self, p)?;
                g.constant(t)
            };
            z.push(v);
        }
        let inputs: Vec<(Var, &OcrInputs)> = z.into_iter().zip(&ex.ocr).collect();
        let (h, ocr_ids) = self.docformer.encode_pages(g, &self.store, &self.tables, &inputs, instruction)?;
        let (loss, count, _) = self.lm.loss_sum(g, &self.store, h, instruction, &ocr_ids, &ex.targets)?;
        Ok((loss, count))
    }

    /// Greedy answer for one example.
    pub fn predict(&self, ex: &Example, instruction: &[usize], pages: &mut PageCache<T>, max_len: usize) -> Result<String> {
        let mut g = Graph::new();
        let mut z = Vec::with_capacity(ex.pages.len());
        for p in &ex.pages {
            let t = pages.z_vis(self, p)?;
            z.push(g.constant(t));
        }
        let inputs: Vec<(Var, &OcrInputs)> = z.into_iter().zip(&ex.ocr).collect();
        let (h, ocr_ids) = self.docformer.encode_pages(&mut g, &self.store, &self.tables, &inputs, instruction)?;
        let h = g.value(h).clone();
        let ids = self.lm.generate(&self.store, &h, instruction, &ocr_ids, max_len)?;
        Ok(self.tokenizer.decode(&ids))
    }

    pub fn prepare(&self, id: &str, record: &InstanceRecord, base: &Path) -> Result<Example> {
        let ocr = record
            .ocr
            .iter()
            .zip(&record.page_sizes)
            .map(|(toks, &size)| OcrInputs::from_tokens(toks, size, &self.tokenizer))
            .collect();
        Ok(Example {
            id: id.to_string(),
            dataset_id: record.dataset_id.clone(),
            pages: record.pages.iter().map(|p| resolve(base, p)).collect(),
            ocr,
            targets: self.targets(record.answers.first().map(String::as_str).unwrap_or("")),
            record: record.clone(),
        })
    }

    /// Page paths are taken relative to the records file they came from,
    /// so a manifest saved elsewhere still finds its images.
    pub fn prepare_manifest(&self, manifest: &Manifest) -> Result<Vec<Example>> {
        let records = manifest.load_records()?;
        records
            .iter()
            .zip(&manifest.entries)
            .map(|((id, r), e)| {
                let file = manifest.resolve(&e.path);
                let base = file.parent().unwrap_or(&manifest.base_dir);
                self.prepare(id, r, base)
            })
            .collect()
    }
}

fn resolve(base: &Path, page: &str) -> PathBuf {
    let p = Path::new(page);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// One instance ready for the model: page paths, tokenised OCR per page
/// and answer targets ending in `EOS`.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub dataset_id: String,
    pub pages: Vec<PathBuf>,
    pub ocr: Vec<OcrInputs>,
    pub targets: Vec<usize>,
    pub record: InstanceRecord,
}

/// Page pixels and frozen-vision features, computed once per path.
#[derive(Default)]
pub struct PageCache<T> {
    z_vis: HashMap<PathBuf, Tensor<T>>,
    patches: HashMap<PathBuf, Tensor<T>>,
}

impl<T: Scalar> PageCache<T> {
    pub fn new() -> Self {
        Self {
            z_vis: HashMap::new(),
            patches: HashMap::new(),
        }
    }

    pub fn patches(&mut self, path: &Path) -> Result<Tensor<T>> {
        if let Some(p) = self.patches.get(path) {
            return Ok(p.clone());
        }
        let p = patchify::<T>(&PageImage::load(path)?)?;
        self.patches.insert(path.to_path_buf(), p.clone());
        Ok(p)
    }

    pub fn z_vis(&mut self, model: &Model<T>, path: &Path) -> Result<Tensor<T>> {
        if let Some(z) = self.z_vis.get(path) {
            return Ok(z.clone());
        }
        let img = PageImage::load(path)?;
        let z = model.vision.forward_patches(&model.store, patchify::<T>(&img)?)?;
        self.z_vis.insert(path.to_path_buf(), z.clone());
        Ok(z)
    }

    /// Forgets cached features, needed after vision weights change.
    pub fn clear_features(&mut self) {
        self.z_vis.clear();
    }
}

/// Instruction text for a record: a template drawn from the dataset's
/// compatible templates, or the intent followed by the query.
pub fn instruction_text(
    record: &InstanceRecord,
    templates: &BTreeMap<String, Vec<InstructionTemplate>>,
    rng: &mut SeededRng,
) -> Result<String> {
    let ins = &record.instruction;
    let usable: Vec<&InstructionTemplate> = templates
        .get(&record.dataset_id)
        .map(|ts| {
            ts.iter()
                .filter(|t| !t.needs_query() || ins.query.is_some())
                .filter(|t| !t.needs_options() || ins.options.as_ref().is_some_and(|o| !o.is_empty()))
                .collect()
        })
        .unwrap_or_default();
    if usable.is_empty() {
        return Ok(match &ins.query {
            Some(q) => format!("{} {q}", ins.intent),
            None => ins.intent.clone(),
        });
    }
    let t = usable[rng.below(usable.len())];
    render_instruction(t, ins.query.as_deref(), ins.options.as_deref())
}

/// Vocabulary over OCR, answers, queries, options and template text.
pub fn corpus_text(records: &[(String, InstanceRecord)], templates: &BTreeMap<String, Vec<InstructionTemplate>>) -> Vec<String> {
    let mut out = Vec::new();
    for (_, r) in records {
        for page in &r.ocr {
            out.extend(page.iter().map(|t| t.text.clone()));
        }
        out.extend(r.answers.iter().cloned());
        out.push(r.instruction.intent.clone());
        out.extend(r.instruction.query.iter().cloned());
        out.extend(r.instruction.options.iter().flatten().cloned());
    }
    for ts in templates.values() {
        out.extend(ts.iter().map(|t| t.text.replace("{query}", " ").replace("{options}", " ")));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{Instruction, OcrToken, Regime, Split, TaskCluster};

    fn record(query: Option<&str>, options: Option<Vec<String>>) -> InstanceRecord {
        InstanceRecord {
            dataset_id: "D".into(),
            task_cluster: TaskCluster::SinglePageQa,
            split: Split::HeldIn,
            regime: Regime::None,
            pages: vec!["p.ppm".into()],
            page_sizes: vec![(10, 10)],
            ocr: vec![vec![OcrToken::new("x", [0.0, 0.0, 1.0, 1.0])]],
            instruction: Instruction {
                intent: "Answer it.".into(),
                answer_style: None,
                query: query.map(String::from),
                options,
            },
            answers: vec!["x".into()],
        }
    }

    #[test]
    fn templates_filtered_by_available_fields() {
        let mut t = BTreeMap::new();
        t.insert(
            "D".to_string(),
            vec![
                InstructionTemplate::new("q", "Q: {query}", None),
                InstructionTemplate::new("o", "Pick {options} for {query}", None),
            ],
        );
        let mut rng = SeededRng::new(0);
        for _ in 0..20 {
            assert_eq!(instruction_text(&record(Some("why"), None), &t, &mut rng).unwrap(), "Q: why");
        }
        assert_eq!(instruction_text(&record(None, None), &t, &mut rng).unwrap(), "Answer it.");
        assert_eq!(
            instruction_text(&record(Some("why"), None), &BTreeMap::new(), &mut rng).unwrap(),
            "Answer it. why"
        );
    }

    #[test]
    fn parts_use_independent_streams() {
        let tok = Tokenizer::bytes_only();
        let small = ModelConfig {
            dim: 8,
            lm_dim: 8,
            tokens: 2,
            heads: 2,
            docformer_blocks: 1,
            vision_blocks: 1,
            lm_encoder_blocks: 1,
            lm_decoder_blocks: 1,
            lm_heads: 2,
            max_instruction: 8,
            max_encoder_len: 64,
            max_decoder_len: 8,
            ..Default::default()
        };
        let a = Model::<f64>::new(small.clone(), tok.clone(), 3).unwrap();
        let b = Model::<f64>::new(ModelConfig { tokens: 5, ..small }, tok, 3).unwrap();
        assert_eq!(a.weights_bytes(Some("lm.")), b.weights_bytes(Some("lm.")));
        assert_eq!(a.weights_bytes(Some("vision.")), b.weights_bytes(Some("vision.")));
        assert_ne!(a.weights_bytes(Some("docformer.")), b.weights_bytes(Some("docformer.")));
    }
}

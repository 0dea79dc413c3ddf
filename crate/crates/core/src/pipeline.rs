//! Glue used by the command line and the end-to-end tests: vocabulary
//! building, LM pretraining pairs and batch prediction.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::encoder::{OcrInputs, Tokenizer, VisionEncoder, VocabConfig, EOS, PAGE};
use crate::error::{Error, Result};
use crate::ingest::Manifest;
use crate::metrics::PredictionLine;
use crate::model::{corpus_text, instruction_text, Example, Model, ModelConfig, PageCache};
use crate::schema::{InstanceRecord, InstructionTemplate, Split};
use crate::synth::{self, Counts, GenSpec};
use crate::tensor::{finite_diff_check_reads, GradCheckReport, Graph, ParamStore, Scalar, SeededRng, Tensor};
use crate::trainer::PretrainPair;

pub const MASK_TOKEN: &str = "<mask>";

pub fn build_tokenizer(
    records: &[(String, InstanceRecord)],
    templates: &BTreeMap<String, Vec<InstructionTemplate>>,
    cfg: &VocabConfig,
) -> Tokenizer {
    let mut cfg = cfg.clone();
    if !cfg.reserved.iter().any(|r| r == MASK_TOKEN) {
        cfg.reserved.insert(0, MASK_TOKEN.to_string());
    }
    let text = corpus_text(records, templates);
    Tokenizer::build(text.iter().map(String::as_str), &cfg)
}

fn ocr_ids(tok: &Tokenizer, record: &InstanceRecord) -> Vec<usize> {
    let mut ids = Vec::new();
    for (p, page) in record.ocr.iter().enumerate() {
        if p > 0 {
            ids.push(PAGE);
        }
        for t in page {
            ids.extend(tok.encode(&t.text));
        }
    }
    ids
}

/// Two pairs per record. Answer copy: the gold answer sits in the
/// document slots and must be reproduced. Denoising: one OCR word is
/// replaced by the mask token and must be restored, with empty slots.
pub fn pretrain_pairs<T: Scalar>(
    model: &Model<T>,
    records: &[(String, InstanceRecord)],
    templates: &BTreeMap<String, Vec<InstructionTemplate>>,
    rng: &mut SeededRng,
) -> Result<Vec<PretrainPair>> {
    let tok = &model.tokenizer;
    let mask = tok.id(MASK_TOKEN);
    let mut out = Vec::with_capacity(records.len() * 2);
    for (_, r) in records {
        let answer = tok.encode(r.answers.first().map(String::as_str).unwrap_or(""));
        let mut targets = answer.clone();
        targets.push(EOS);
        let text = instruction_text(r, templates, rng)?;
        out.push(PretrainPair {
            doc: answer,
            instruction: model.instruction_ids(&text)?,
            ocr: ocr_ids(tok, r),
            targets,
        });

        let words: Vec<&str> = r.ocr.iter().flatten().map(|t| t.text.as_str()).collect();
        if let (Some(mask), false) = (mask, words.is_empty()) {
            let k = rng.below(words.len());
            let mut ocr = Vec::new();
            for (i, w) in words.iter().enumerate() {
                if i == k {
                    ocr.push(mask);
                } else {
                    ocr.extend(tok.encode(w));
                }
            }
            let mut targets = tok.encode(words[k]);
            targets.push(EOS);
            out.push(PretrainPair {
                doc: Vec::new(),
                instruction: Vec::new(),
                ocr,
                targets,
            });
        }
    }
    Ok(out)
}

/// Greedy predictions for `examples`, in input order. Each instance draws
/// its instruction template from a stream keyed by its id, so the result
/// does not depend on evaluation order or thread count.
pub fn predict_examples<T: Scalar>(
    model: &Model<T>,
    examples: &[Example],
    templates: &BTreeMap<String, Vec<InstructionTemplate>>,
    seed: u64,
    max_len: usize,
) -> Result<Vec<PredictionLine>> {
    examples
        .par_iter()
        .map(|ex| {
            let mut rng = SeededRng::derive(seed, &ex.id);
            let text = instruction_text(&ex.record, templates, &mut rng)?;
            let ids = model.instruction_ids(&text)?;
            let mut pages = PageCache::new();
            let prediction = model.predict(ex, &ids, &mut pages, max_len)?;
            Ok(PredictionLine {
                instance_id: ex.id.clone(),
                prediction,
            })
        })
        .collect()
}

/// Predictions for the held-out part of a manifest.
pub fn predict_held_out<T: Scalar>(model: &Model<T>, manifest: &Manifest, seed: u64, max_len: usize) -> Result<Vec<PredictionLine>> {
    let held_out = manifest.with_entries(
        manifest
            .entries
            .iter()
            .filter(|e| e.split == Split::HeldOut)
            .cloned()
            .collect(),
    );
    let examples = model.prepare_manifest(&held_out)?;
    predict_examples(model, &examples, &manifest.templates, seed, max_len)
}

/// Finite-difference check of the full training loss on one short
/// generated two-page instance, in f64. Every parameter except the frozen image
/// encoder is checked.
pub fn gradcheck(cfg: &ModelConfig, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let spec = GenSpec {
        seed,
        counts: Counts {
            multi_page: 1,
            ..Counts::none()
        },
        fields_per_page: 3,
        ..Default::default()
    };
    let corpus = synth::build(&spec)?;
    let (record, images) = corpus.records.first().ok_or(Error::EmptyCorpus)?;
    let records = vec![(record.dataset_id.clone(), record.clone())];
    let vocab = VocabConfig {
        min_freq: 1,
        ..Default::default()
    };
    let tok = build_tokenizer(&records, &corpus.templates, &vocab);
    let mut model = Model::<f64>::new(cfg.clone(), tok, seed)?;

    let z_vis = images.iter().map(|img| model.z_vis(img)).collect::<Result<Vec<Tensor<f64>>>>()?;
    let ocr: Vec<OcrInputs> = record
        .ocr
        .iter()
        .zip(&record.page_sizes)
        .map(|(t, &size)| OcrInputs::from_tokens(t, size, &model.tokenizer))
        .collect();
    let text = instruction_text(record, &corpus.templates, &mut SeededRng::derive(seed, "gradcheck"))?;
    let ins = model.instruction_ids(&text)?;
    let targets = model.targets(record.answers.first().map(String::as_str).unwrap_or(""));

    let frozen = format!("{}.", VisionEncoder::PREFIX);
    for p in model.store.iter_mut() {
        p.trainable = !p.name.starts_with(&frozen);
    }
    let Model { store, tables, docformer, lm, .. } = &mut model;
    let loss = |s: &ParamStore<f64>, g: &mut Graph<f64>| -> Result<_> {
        let inputs: Vec<_> = z_vis.iter().zip(&ocr).map(|(z, o)| (g.constant(z.clone()), o)).collect();
        let (h, ids) = docformer.encode_pages(g, s, tables, &inputs, &ins)?;
        let (sum, count, _) = lm.loss_sum(g, s, h, &ins, &ids, &targets)?;
        Ok(g.scale(sum, 1.0 / count as f64))
    };

    store.zero_grads();
    let mut g = Graph::new();
    let l = loss(store, &mut g)?;
    g.backward_into(l, store)?;
    finite_diff_check_reads(
        store,
        |s| {
            let mut g = Graph::new();
            let l = loss(s, &mut g)?;
            Ok((g.value(l).item(), g.reads()))
        },
        eps,
    )
}

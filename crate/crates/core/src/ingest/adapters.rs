//! Source layouts that can be converted into unified records.

use std::collections::BTreeMap;
use std::io::{BufRead, Read};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;
use walkdir::WalkDir;

use super::registry::DatasetInfo;
use super::rephrase::rephrase_query;
use crate::error::{Error, Result};
use crate::schema::{
    AnswerStyle, InstanceRecord, Instruction, InstructionTemplate, OcrToken, Regime, Split,
    TaskCluster,
};

/// Records read from one source file, in file order. Page references are
/// relative to the source directory.
#[derive(Debug, Clone)]
pub struct SourceUnit {
    pub path: PathBuf,
    pub records: Vec<InstanceRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct SourceBatch {
    pub units: Vec<SourceUnit>,
    pub templates: BTreeMap<String, Vec<InstructionTemplate>>,
    pub datasets: Vec<DatasetInfo>,
}

type Reader = fn(&Path) -> Result<SourceBatch>;

pub struct Adapter {
    pub id: &'static str,
    pub layout: &'static str,
    reader: Option<Reader>,
}

impl Adapter {
    pub fn is_implemented(&self) -> bool {
        self.reader.is_some()
    }

    pub fn read(&self, dir: &Path) -> Result<SourceBatch> {
        match self.reader {
            Some(f) => f(dir),
            None => Err(Error::AdapterNotImplemented {
                id: self.id.to_string(),
                layout: self.layout.to_string(),
            }),
        }
    }
}

const STUBS: [(&str, &str); 28] = [
    ("docile", "annotations/*.json (DocILE field annotations) + pdfs/*.pdf"),
    ("klc", "DUE layout: document.jsonl + documents_content.jsonl + pdfs/"),
    ("deepform", "DUE layout: document.jsonl + documents_content.jsonl + pdfs/"),
    ("pwc", "DUE layout: document.jsonl + documents_content.jsonl + pdfs/"),
    ("wildreceipt", "wildreceipt/{train,test}.txt JSON lines + image_files/"),
    ("sroie", "box/*.txt (8-point quads) + entities/*.txt + img/*.jpg"),
    ("visualmrc", "data/{train,dev,test}.jsonl + screenshot/"),
    ("websrc", "<domain>/<site>/dataset.csv + processed_data/*.png"),
    ("ocrvqa", "dataset.json + images/"),
    ("docvqa", "{train,val,test}_v1.0.json + documents/ + ocr_results/"),
    ("hw-squad", "annotations.json + images/"),
    ("tat-dqa", "tatdqa_dataset_{train,dev,test}.json + docs/"),
    ("wtq", "DUE layout: document.jsonl + documents_content.jsonl + pdfs/"),
    ("iconqa", "problems.json + <split>/<task>/<id>/image.png"),
    ("ai2d", "questions/*.json + images/ + annotations/"),
    ("scienceqa", "problems.json + images/<split>/<id>/image.png"),
    ("textbookqa", "tqa_v1_{train,val,test}.json + question_images/"),
    ("infographicvqa", "infographicVQA_{train,val,test}_v1.0.json + images/ + ocr/"),
    ("chartqa", "{train,val,test}/{human,augmented}.json + png/ + annotations/"),
    ("slidevqa", "annotations/qa/*.jsonl + images/<deck>/*.jpg"),
    ("dude", "2023-03-23_DUDE_gt_test_PUBLIC.json + PDF/ + OCR/"),
    ("tabfact", "DUE layout: document.jsonl + documents_content.jsonl + pdfs/"),
    ("llavar", "chat_llavar.json + images/"),
    ("rvl-cdip", "labels/{train,val,test}.txt + images/"),
    ("scicap", "SciCap-Caption-All/<split>/*.json + SciCap-No-Subfig-Img/"),
    ("screen2words", "screen_summaries.csv + combined/*.jpg + *.json view hierarchy"),
    ("docbank", "DocBank_500K_txt/*.txt (token x0 y0 x1 y1 r g b font label) + ori_img/"),
    ("doclaynet", "COCO/{train,val,test}.json + PNG/ + JSON/ (text cells)"),
];

pub fn registry() -> Vec<Adapter> {
    let mut out = vec![
        Adapter {
            id: "synthetic",
            layout: "registry.json, templates.json, records/**/*.jsonl (one record per line), pages/*.ppm",
            reader: Some(read_synthetic),
        },
        Adapter {
            id: "funsd",
            layout: "annotations/<doc>.json ({\"form\": [{text, box, label, words}]}) + images/<doc>.png",
            reader: Some(read_funsd),
        },
        Adapter {
            id: "cord",
            layout: "json/<doc>.json ({\"valid_line\": [{category, words: [{quad, text}]}], meta.image_size}) + image/<doc>.png",
            reader: Some(read_cord),
        },
    ];
    out.extend(STUBS.iter().map(|&(id, layout)| Adapter {
        id,
        layout,
        reader: None,
    }));
    out
}

pub fn find(adapter_id: &str) -> Result<Adapter> {
    registry()
        .into_iter()
        .find(|a| a.id == adapter_id)
        .ok_or_else(|| Error::UnknownAdapter(adapter_id.to_string()))
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            Error::io(path, e.into())
        })?;
        if entry.file_type().is_file() && entry.path().extension().is_some_and(|x| x == ext) {
            out.push(entry.into_path());
        }
    }
    out.sort();
    Ok(out)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        // serde reports 1-based line and column; recover the byte offset
        let offset: usize = text
            .split_inclusive('\n')
            .take(e.line().saturating_sub(1))
            .map(str::len)
            .sum::<usize>()
            + e.column().saturating_sub(1);
        Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            offset: offset as u64,
            message: e.to_string(),
        }
    })
}

/// Reads one-record-per-line JSONL, reporting line and byte offset of failures.
pub fn read_jsonl_records(path: &Path, strict: bool) -> Result<Vec<InstanceRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    let mut offset = 0u64;
    let mut line_no = 0usize;
    let mut buf = String::new();
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let line = buf.trim_end_matches(['\n', '\r']);
        if !line.trim().is_empty() {
            let rec = InstanceRecord::from_json_line(line, strict).map_err(|message| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                offset,
                message,
            })?;
            out.push(rec);
        }
        offset += n as u64;
    }
    Ok(out)
}

fn read_synthetic(dir: &Path) -> Result<SourceBatch> {
    let registry_path = dir.join("registry.json");
    let datasets: Vec<DatasetInfo> = if registry_path.exists() {
        read_json(&registry_path)?
    } else {
        Vec::new()
    };
    let templates_path = dir.join("templates.json");
    let templates = if templates_path.exists() {
        read_json(&templates_path)?
    } else {
        BTreeMap::new()
    };
    let files = sorted_files(&dir.join("records"), "jsonl")?;
    let units = files
        .par_iter()
        .map(|p| {
            Ok(SourceUnit {
                path: p.clone(),
                records: read_jsonl_records(p, true)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SourceBatch {
        units,
        templates,
        datasets,
    })
}

/// Width and height from a PNG header.
pub fn png_size(path: &Path) -> Result<(u32, u32)> {
    let mut head = [0u8; 24];
    std::fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut head))
        .map_err(|e| Error::io(path, e))?;
    if &head[..8] != b"\x89PNG\r\n\x1a\n" || &head[12..16] != b"IHDR" {
        return Err(Error::Format(format!("{}: not a PNG file", path.display())));
    }
    let w = u32::from_be_bytes(head[16..20].try_into().unwrap());
    let h = u32::from_be_bytes(head[20..24].try_into().unwrap());
    Ok((w, h))
}

/// Instruction templates used for the two KIE source layouts.
pub fn kie_templates() -> Vec<InstructionTemplate> {
    let style = Some(AnswerStyle::SpanList);
    [
        "List every \"{query}\" entity that appears in the document, separated by \",\".",
        "Which spans of this document are labelled \"{query}\"? Give them as a comma separated list.",
        "Read the document and extract all values of the field \"{query}\".",
        "Find the text belonging to the category \"{query}\" in the document. Answer with spans separated by \",\".",
        "Extract the \"{query}\" entities from the document image and its OCR text.",
    ]
    .iter()
    .enumerate()
    .map(|(i, t)| InstructionTemplate::new(format!("kie-{i}"), *t, style))
    .collect()
}

fn kie_record(
    dataset: &str,
    page: String,
    size: (u32, u32),
    ocr: Vec<OcrToken>,
    label: &str,
    spans: &[String],
) -> InstanceRecord {
    InstanceRecord {
        dataset_id: dataset.to_string(),
        task_cluster: TaskCluster::Kie,
        split: Split::HeldOut,
        regime: Regime::CrossDataset,
        pages: vec![page],
        page_sizes: vec![size],
        ocr: vec![ocr],
        instruction: Instruction {
            intent: format!("Extract the {label} entities from the document."),
            answer_style: Some(AnswerStyle::SpanList),
            query: Some(label.to_string()),
            options: None,
        },
        answers: vec![spans.join(", ")],
    }
}

#[derive(Deserialize)]
struct FunsdDoc {
    form: Vec<FunsdEntity>,
}

#[derive(Deserialize)]
struct FunsdEntity {
    text: String,
    label: String,
    #[serde(default)]
    words: Vec<FunsdWord>,
}

#[derive(Deserialize)]
struct FunsdWord {
    text: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

fn read_funsd(dir: &Path) -> Result<SourceBatch> {
    let files = sorted_files(&dir.join("annotations"), "json")?;
    let units = files
        .par_iter()
        .map(|path| {
            let doc: FunsdDoc = read_json(path)?;
            let stem = path.file_stem().unwrap_or_default().to_string_lossy();
            let page = format!("images/{stem}.png");
            let size = png_size(&dir.join(&page))?;
            let ocr: Vec<OcrToken> = doc
                .form
                .iter()
                .flat_map(|e| &e.words)
                .filter(|w| !w.text.trim().is_empty())
                .map(|w| OcrToken::new(w.text.trim(), w.bbox))
                .collect();
            let mut by_label: Vec<(String, Vec<String>)> = Vec::new();
            for e in &doc.form {
                let text = e.text.trim();
                if text.is_empty() {
                    continue;
                }
                // "other" has no readable counterpart and is kept as-is
                let label = match e.label.as_str() {
                    "other" => "other".to_string(),
                    raw => rephrase_query("FUNSD", raw).map_err(|err| Error::Instance {
                        id: path.display().to_string(),
                        source: Box::new(err),
                    })?,
                };
                match by_label.iter_mut().find(|(l, _)| *l == label) {
                    Some((_, spans)) => spans.push(text.to_string()),
                    None => by_label.push((label, vec![text.to_string()])),
                }
            }
            let records = by_label
                .iter()
                .map(|(label, spans)| kie_record("FUNSD", page.clone(), size, ocr.clone(), label, spans))
                .collect();
            Ok(SourceUnit {
                path: path.clone(),
                records,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(kie_batch("FUNSD", units))
}

#[derive(Deserialize)]
struct CordDoc {
    valid_line: Vec<CordLine>,
    meta: CordMeta,
}

#[derive(Deserialize)]
struct CordMeta {
    image_size: CordSize,
}

#[derive(Deserialize)]
struct CordSize {
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct CordLine {
    category: String,
    words: Vec<CordWord>,
}

#[derive(Deserialize)]
struct CordWord {
    quad: CordQuad,
    text: String,
}

#[derive(Deserialize)]
struct CordQuad {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    x3: f64,
    y3: f64,
    x4: f64,
    y4: f64,
}

impl CordQuad {
    fn bbox(&self) -> [f64; 4] {
        let xs = [self.x1, self.x2, self.x3, self.x4];
        let ys = [self.y1, self.y2, self.y3, self.y4];
        let min = |v: [f64; 4]| v.iter().copied().fold(f64::INFINITY, f64::min).max(0.0);
        let max = |v: [f64; 4]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(0.0);
        [min(xs), min(ys), max(xs), max(ys)]
    }
}

fn read_cord(dir: &Path) -> Result<SourceBatch> {
    let files = sorted_files(&dir.join("json"), "json")?;
    let units = files
        .par_iter()
        .map(|path| {
            let doc: CordDoc = read_json(path)?;
            let stem = path.file_stem().unwrap_or_default().to_string_lossy();
            let page = format!("image/{stem}.png");
            let size = (doc.meta.image_size.width, doc.meta.image_size.height);
            let mut ocr = Vec::new();
            let mut by_label: Vec<(String, Vec<String>)> = Vec::new();
            for line in &doc.valid_line {
                let words: Vec<&CordWord> = line.words.iter().filter(|w| !w.text.trim().is_empty()).collect();
                if words.is_empty() {
                    continue;
                }
                ocr.extend(words.iter().map(|w| OcrToken::new(w.text.trim(), w.quad.bbox())));
                let label = rephrase_query("CORD", &line.category).map_err(|err| Error::Instance {
                    id: path.display().to_string(),
                    source: Box::new(err),
                })?;
                let text = words.iter().map(|w| w.text.trim()).collect::<Vec<_>>().join(" ");
                match by_label.iter_mut().find(|(l, _)| *l == label) {
                    Some((_, spans)) => spans.push(text),
                    None => by_label.push((label, vec![text])),
                }
            }
            let records = by_label
                .iter()
                .map(|(label, spans)| kie_record("CORD", page.clone(), size, ocr.clone(), label, spans))
                .collect();
            Ok(SourceUnit {
                path: path.clone(),
                records,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(kie_batch("CORD", units))
}

fn kie_batch(dataset: &str, units: Vec<SourceUnit>) -> SourceBatch {
    SourceBatch {
        units,
        templates: BTreeMap::from([(dataset.to_string(), kie_templates())]),
        datasets: Vec::new(),
    }
}

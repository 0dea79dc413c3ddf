//! Deterministic toy corpus: text laid out on a character grid, rendered
//! as filled cells, with exact OCR boxes and answers known by construction.
//! Output is the directory layout read by the `synthetic` adapter.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{quantize_bbox, write_ppm, PageImage};
use crate::error::{Error, Result};
use crate::ingest::DatasetInfo;
use crate::metrics::Metric;
use crate::schema::{AnswerStyle, InstanceRecord, Instruction, InstructionTemplate, OcrToken, Regime, Split, TaskCluster};
use crate::tensor::SeededRng;

pub const CELL_W: u32 = 5;
pub const CELL_H: u32 = 9;
pub const LINE_H: u32 = 12;
pub const MARGIN: u32 = 6;

const FIELDS: [&str; 16] = [
    "invoice_no", "date", "total", "vendor", "phone", "city", "account", "amount", "due", "ref", "code", "item", "qty",
    "price", "tax", "zip",
];
const RECEIPT_FIELDS: [&str; 8] = ["store", "cashier", "subtotal", "change", "paid", "table", "server", "tip"];
const CLASSES: [&str; 5] = ["invoice", "receipt", "letter", "report", "memo"];
const SYLLABLES: [&str; 20] = [
    "ka", "mo", "ri", "tu", "le", "sa", "no", "vi", "pe", "do", "gu", "fa", "zo", "hi", "ne", "bu", "ta", "wi", "ro", "ly",
];

/// Instance counts per generator kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Counts {
    pub kie: usize,
    pub extractive_qa: usize,
    pub option_qa: usize,
    pub yes_no: usize,
    pub multi_page: usize,
    pub classification: usize,
    pub dla: usize,
    pub held_out_kie: usize,
    pub held_out_qa: usize,
    pub held_out_numeric: usize,
    pub held_out_nli: usize,
    pub held_out_multi_page: usize,
}

impl Default for Counts {
    fn default() -> Self {
        Self {
            kie: 24,
            extractive_qa: 24,
            option_qa: 24,
            yes_no: 24,
            multi_page: 24,
            classification: 24,
            dla: 24,
            held_out_kie: 8,
            held_out_qa: 8,
            held_out_numeric: 8,
            held_out_nli: 8,
            held_out_multi_page: 8,
        }
    }
}

impl Counts {
    pub fn none() -> Self {
        Self {
            kie: 0,
            extractive_qa: 0,
            option_qa: 0,
            yes_no: 0,
            multi_page: 0,
            classification: 0,
            dla: 0,
            held_out_kie: 0,
            held_out_qa: 0,
            held_out_numeric: 0,
            held_out_nli: 0,
            held_out_multi_page: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSpec {
    pub seed: u64,
    pub counts: Counts,
    /// Distinct filler words used as values.
    pub vocab_size: usize,
    pub page_width: u32,
    pub page_height: u32,
    pub max_pages: usize,
    /// Key/value lines per page.
    pub fields_per_page: usize,
    /// Probability of swapping two adjacent characters in an OCR word.
    pub noise: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            counts: Counts::default(),
            vocab_size: 200,
            page_width: 224,
            page_height: 224,
            max_pages: 2,
            fields_per_page: 5,
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Kie,
    ExtractiveQa,
    OptionQa,
    YesNo,
    MultiPage,
    Classification,
    Dla,
    Numeric,
}

struct DatasetPlan {
    info: DatasetInfo,
    kind: Kind,
    count: usize,
    fields: &'static [&'static str],
    intent: &'static str,
    style: AnswerStyle,
    templates: Vec<InstructionTemplate>,
}

fn templates(prefix: &str, style: AnswerStyle, texts: &[&str]) -> Vec<InstructionTemplate> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| InstructionTemplate::new(format!("{prefix}-{i}"), *t, Some(style)))
        .collect()
}

fn qa_templates(prefix: &str) -> Vec<InstructionTemplate> {
    templates(
        prefix,
        AnswerStyle::ExtractiveSpan,
        &[
            "Answer using words from the page: {query}",
            "Question about this document: {query} Reply with the exact text.",
            "{query} Copy the answer from the document.",
            "Read the page and answer: {query}",
            "Look at the document. {query}",
        ],
    )
}

fn kie_templates(prefix: &str) -> Vec<InstructionTemplate> {
    templates(
        prefix,
        AnswerStyle::SpanList,
        &[
            "Extract every value of the field {query} from this page.",
            "Which text on the page belongs to {query}? List all spans.",
            "Return the {query} entries of the document.",
            "Find the spans labelled {query}.",
            "List the values tagged {query}, separated by commas.",
        ],
    )
}

fn plans(c: &Counts) -> Vec<DatasetPlan> {
    use Kind::*;
    let held_in = |id: &str, cluster, metric| DatasetInfo::new(id, cluster, Split::HeldIn, Regime::None, metric);
    let held_out = |id: &str, cluster, regime, metric| DatasetInfo::new(id, cluster, Split::HeldOut, regime, metric);
    vec![
        DatasetPlan {
            info: held_in("SynKIE", TaskCluster::Kie, Metric::EntityF1),
            kind: Kie,
            count: c.kie,
            fields: &FIELDS,
            intent: "Extract the requested field.",
            style: AnswerStyle::SpanList,
            templates: kie_templates("synkie"),
        },
        DatasetPlan {
            info: held_in("SynQA", TaskCluster::SinglePageQa, Metric::Anls),
            kind: ExtractiveQa,
            count: c.extractive_qa,
            fields: &FIELDS,
            intent: "Answer the question from the page.",
            style: AnswerStyle::ExtractiveSpan,
            templates: qa_templates("synqa"),
        },
        DatasetPlan {
            info: held_in("SynChoice", TaskCluster::SinglePageQaDiscrete, Metric::Accuracy),
            kind: OptionQa,
            count: c.option_qa,
            fields: &FIELDS,
            intent: "Pick the correct option.",
            style: AnswerStyle::OptionSelection,
            templates: templates(
                "synchoice",
                AnswerStyle::OptionSelection,
                &[
                    "{query} Choose one of {options}.",
                    "Which option answers \"{query}\"? Options: {options}.",
                    "Select from {options}: {query}",
                    "{query} The answer is one of {options}.",
                    "Given the document, pick {options} for this question: {query}",
                ],
            ),
        },
        DatasetPlan {
            info: held_in("SynNLI", TaskCluster::DocumentNli, Metric::Accuracy),
            kind: YesNo,
            count: c.yes_no,
            fields: &FIELDS,
            intent: "Decide whether the statement holds.",
            style: AnswerStyle::YesNo,
            templates: templates(
                "synnli",
                AnswerStyle::YesNo,
                &[
                    "Is this statement supported by the page: {query}? Answer {options}.",
                    "Statement: {query}. Does the document agree? Reply {options}.",
                    "Check the claim \"{query}\" against the document and answer {options}.",
                    "True or false, answered with {options}: {query}",
                    "Does the page say that {query}? Say {options}.",
                ],
            ),
        },
        DatasetPlan {
            info: held_in("SynMulti", TaskCluster::MultiPageQa, Metric::ExactMatch),
            kind: MultiPage,
            count: c.multi_page,
            fields: &FIELDS,
            intent: "Answer using both pages.",
            style: AnswerStyle::ExtractiveSpan,
            templates: qa_templates("synmulti"),
        },
        DatasetPlan {
            info: held_in("SynClass", TaskCluster::Classification, Metric::Accuracy),
            kind: Classification,
            count: c.classification,
            fields: &FIELDS,
            intent: "Classify the document type.",
            style: AnswerStyle::OptionSelection,
            templates: templates(
                "synclass",
                AnswerStyle::OptionSelection,
                &[
                    "What kind of document is this? Pick from {options}.",
                    "Classify the page as one of {options}.",
                    "Document type, chosen from {options}?",
                    "Which category fits this document best: {options}?",
                    "Assign one label from {options} to the page.",
                ],
            ),
        },
        DatasetPlan {
            info: held_in("SynDLA", TaskCluster::Dla, Metric::Anls),
            kind: Dla,
            count: c.dla,
            fields: &FIELDS,
            intent: "Locate the layout regions.",
            style: AnswerStyle::FreeForm,
            templates: templates(
                "syndla",
                AnswerStyle::FreeForm,
                &[
                    "Find every layout region on the page and give each as Label [x1, y1, x2, y2].",
                    "Detect the Title, Text and Table regions with their boxes.",
                    "List the regions of this page with bounding boxes.",
                    "Where are the layout blocks? Answer as Label [x1, y1, x2, y2].",
                    "Give the label and box of each region, separated by semicolons.",
                ],
            ),
        },
        DatasetPlan {
            info: held_out("SynReceipt", TaskCluster::Kie, Regime::CrossDataset, Metric::EntityF1),
            kind: Kie,
            count: c.held_out_kie,
            fields: &RECEIPT_FIELDS,
            intent: "Extract the requested field.",
            style: AnswerStyle::SpanList,
            templates: kie_templates("synreceipt"),
        },
        DatasetPlan {
            info: held_out("SynInfo", TaskCluster::SinglePageQaVisual, Regime::CrossTask, Metric::Anls),
            kind: ExtractiveQa,
            count: c.held_out_qa,
            fields: &FIELDS,
            intent: "Answer the question from the page.",
            style: AnswerStyle::ExtractiveSpan,
            templates: qa_templates("syninfo"),
        },
        DatasetPlan {
            info: held_out("SynChart", TaskCluster::SinglePageQaDiscreteVisual, Regime::CrossTask, Metric::RelaxedAccuracy),
            kind: Numeric,
            count: c.held_out_numeric,
            fields: &FIELDS,
            intent: "Read the number asked for.",
            style: AnswerStyle::ExtractiveSpan,
            templates: qa_templates("synchart"),
        },
        DatasetPlan {
            info: held_out("SynFact", TaskCluster::DocumentNli, Regime::CrossTask, Metric::Accuracy),
            kind: YesNo,
            count: c.held_out_nli,
            fields: &FIELDS,
            intent: "Decide whether the statement holds.",
            style: AnswerStyle::YesNo,
            templates: templates(
                "synfact",
                AnswerStyle::YesNo,
                &[
                    "Is it true that {query}? Answer {options}.",
                    "Verify against the page: {query}. Reply {options}.",
                    "Claim: {query}. Supported? {options}",
                    "Based on the document, {query}? Say {options}.",
                    "Answer {options}: does the page state {query}?",
                ],
            ),
        },
        DatasetPlan {
            info: held_out("SynSlides", TaskCluster::MultiPageQa, Regime::CrossDomain, Metric::ExactMatch),
            kind: MultiPage,
            count: c.held_out_multi_page,
            fields: &FIELDS,
            intent: "Answer using both pages.",
            style: AnswerStyle::ExtractiveSpan,
            templates: qa_templates("synslides"),
        },
    ]
}

/// Text placed on a page in reading order, one line at a time.
#[derive(Debug, Clone)]
pub struct Layout {
    pub width: u32,
    pub height: u32,
    pub tokens: Vec<OcrToken>,
    line: u32,
}

impl Layout {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            tokens: Vec::new(),
            line: 0,
        }
    }

    fn lines_left(&self) -> u32 {
        (self.height.saturating_sub(2 * MARGIN) / LINE_H).saturating_sub(self.line)
    }

    /// Places `words` on the next line, wrapping when they do not fit.
    /// Returns the token index range used.
    pub fn line(&mut self, words: &[&str]) -> Result<std::ops::Range<usize>> {
        let start = self.tokens.len();
        let mut x = MARGIN;
        for w in words {
            let wpx = w.chars().count() as u32 * CELL_W;
            if x > MARGIN && x + wpx > self.width - MARGIN {
                self.line += 1;
                x = MARGIN;
            }
            if self.lines_left() == 0 || wpx > self.width - 2 * MARGIN {
                return Err(Error::Config(format!("page {}x{} too small for its text", self.width, self.height)));
            }
            let y = MARGIN + self.line * LINE_H;
            self.tokens.push(OcrToken::new(
                *w,
                [x as f64, y as f64, (x + wpx) as f64, (y + CELL_H) as f64],
            ));
            x += wpx + CELL_W;
        }
        self.line += 1;
        Ok(start..self.tokens.len())
    }

    pub fn skip(&mut self) {
        self.line += 1;
    }

    /// One filled cell per character on a white page. Cell shade depends
    /// on the character, so different text gives different pixels.
    pub fn render(&self) -> PageImage {
        let mut img = PageImage::filled(self.height as usize, self.width as usize, 1.0);
        for t in &self.tokens {
            let [x1, y1, _, y2] = t.bbox;
            for (i, c) in t.text.chars().enumerate() {
                let shade = 0.1 + 0.5 * ((c as u32 % 7) as f32 / 7.0);
                let cx = x1 as usize + i * CELL_W as usize;
                for y in y1 as usize..y2 as usize {
                    for x in cx..cx + CELL_W as usize - 1 {
                        for ch in 0..3 {
                            img.set(y, x, ch, if ch == 2 { shade * 0.5 } else { shade });
                        }
                    }
                }
            }
        }
        img
    }
}

struct Gen<'a> {
    spec: &'a GenSpec,
    rng: SeededRng,
    words: &'a [String],
}

fn union_box(tokens: &[OcrToken]) -> [f64; 4] {
    let mut b = [f64::INFINITY, f64::INFINITY, 0.0, 0.0];
    for t in tokens {
        b[0] = b[0].min(t.bbox[0]);
        b[1] = b[1].min(t.bbox[1]);
        b[2] = b[2].max(t.bbox[2]);
        b[3] = b[3].max(t.bbox[3]);
    }
    b
}

impl Gen<'_> {
    fn word(&mut self) -> String {
        self.words[self.rng.below(self.words.len())].clone()
    }

    fn distinct_words(&mut self, n: usize) -> Vec<String> {
        let mut out: Vec<String> = Vec::with_capacity(n);
        while out.len() < n {
            let w = self.word();
            if !out.contains(&w) {
                out.push(w);
            }
        }
        out
    }

    fn pick_fields(&mut self, fields: &[&'static str], n: usize) -> Vec<&'static str> {
        let mut f = fields.to_vec();
        self.rng.shuffle(&mut f);
        f.truncate(n.min(fields.len()));
        f
    }

    fn number(&mut self) -> String {
        let v = self.rng.below(9000) + 100;
        if self.rng.below(2) == 0 {
            format!("{v}")
        } else {
            format!("{}.{}", v / 10, v % 10)
        }
    }

    fn kv_page(&mut self, fields: &[&'static str], values: &[String]) -> Result<Layout> {
        let mut page = Layout::new(self.spec.page_width, self.spec.page_height);
        for (k, v) in fields.iter().zip(values) {
            page.line(&[k, v])?;
        }
        Ok(page)
    }

    fn noisy(&mut self, mut page: Layout) -> Layout {
        if self.spec.noise > 0.0 {
            for t in &mut page.tokens {
                let mut chars: Vec<char> = t.text.chars().collect();
                if chars.len() > 1 && self.rng.uniform() < self.spec.noise {
                    let i = self.rng.below(chars.len() - 1);
                    chars.swap(i, i + 1);
                    t.text = chars.into_iter().collect();
                }
            }
        }
        page
    }

    /// Pages, query, options and answers for one instance.
    fn instance(&mut self, plan: &DatasetPlan) -> Result<(Vec<Layout>, Option<String>, Option<Vec<String>>, Vec<String>)> {
        let n = self.spec.fields_per_page.max(3);
        let out = match plan.kind {
            Kind::Kie => {
                let fields = self.pick_fields(plan.fields, n);
                let values = self.distinct_words(fields.len());
                let page = self.kv_page(&fields, &values)?;
                let i = self.rng.below(fields.len());
                (vec![page], Some(fields[i].to_string()), None, vec![values[i].clone()])
            }
            Kind::ExtractiveQa | Kind::OptionQa | Kind::Numeric => {
                let fields = self.pick_fields(plan.fields, n);
                let values: Vec<String> = if plan.kind == Kind::Numeric {
                    (0..fields.len()).map(|_| self.number()).collect()
                } else {
                    self.distinct_words(fields.len())
                };
                let page = self.kv_page(&fields, &values)?;
                let i = self.rng.below(fields.len());
                let query = format!("what is the {}?", fields[i]);
                let options = (plan.kind == Kind::OptionQa).then(|| {
                    let mut o: Vec<String> = values.iter().take(3.min(values.len())).cloned().collect();
                    if !o.contains(&values[i]) {
                        o[0] = values[i].clone();
                    }
                    self.rng.shuffle(&mut o);
                    o
                });
                (vec![page], Some(query), options, vec![values[i].clone()])
            }
            Kind::YesNo => {
                let fields = self.pick_fields(plan.fields, n);
                let values = self.distinct_words(fields.len());
                let page = self.kv_page(&fields, &values)?;
                let i = self.rng.below(fields.len());
                let truth = self.rng.below(2) == 0;
                let stated = if truth { values[i].clone() } else { values[(i + 1) % values.len()].clone() };
                let query = format!("the {} is {stated}", fields[i]);
                let answer = if truth { "yes" } else { "no" };
                (vec![page], Some(query), Some(vec!["yes".into(), "no".into()]), vec![answer.into()])
            }
            Kind::MultiPage => {
                if self.spec.max_pages < 2 {
                    return Err(Error::Config("multi-page instances need max_pages >= 2".into()));
                }
                let fields = self.pick_fields(plan.fields, n);
                let first = self.distinct_words(fields.len());
                let mut second = self.distinct_words(fields.len());
                // page-two values never repeat page-one values
                for v in second.iter_mut() {
                    while first.contains(v) {
                        *v = self.word();
                    }
                }
                let p1 = self.kv_page(&fields, &first)?;
                let mut order: Vec<usize> = (0..fields.len()).collect();
                self.rng.shuffle(&mut order);
                let f2: Vec<&'static str> = order.iter().map(|&j| fields[j]).collect();
                let v2: Vec<String> = order.iter().map(|&j| second[j].clone()).collect();
                let p2 = self.kv_page(&f2, &v2)?;
                let i = self.rng.below(fields.len());
                let query = format!("what is the {} on page one and on page two?", fields[i]);
                (vec![p1, p2], Some(query), None, vec![format!("{} {}", first[i], second[i])])
            }
            Kind::Classification => {
                let class = CLASSES[self.rng.below(CLASSES.len())];
                let fields = self.pick_fields(plan.fields, n - 1);
                let values = self.distinct_words(fields.len());
                let mut page = Layout::new(self.spec.page_width, self.spec.page_height);
                page.line(&[class])?;
                for (k, v) in fields.iter().zip(&values) {
                    page.line(&[k, v])?;
                }
                let options = CLASSES.iter().map(|c| c.to_string()).collect();
                (vec![page], None, Some(options), vec![class.to_string()])
            }
            Kind::Dla => {
                let mut page = Layout::new(self.spec.page_width, self.spec.page_height);
                let mut regions: Vec<(&str, std::ops::Range<usize>)> = Vec::new();
                let mut kinds = ["Title", "Text", "Table"];
                self.rng.shuffle(&mut kinds);
                for kind in kinds {
                    let start = page.tokens.len();
                    match kind {
                        "Title" => {
                            let w = self.word();
                            page.line(&[&w])?;
                        }
                        "Text" => {
                            for _ in 0..2 {
                                let ws = self.distinct_words(4);
                                let refs: Vec<&str> = ws.iter().map(String::as_str).collect();
                                page.line(&refs)?;
                            }
                        }
                        _ => {
                            for _ in 0..2 {
                                let nums: Vec<String> = (0..3).map(|_| self.number()).collect();
                                let refs: Vec<&str> = nums.iter().map(String::as_str).collect();
                                page.line(&refs)?;
                            }
                        }
                    }
                    regions.push((kind, start..page.tokens.len()));
                    page.skip();
                }
                let (w, h) = (page.width as f64, page.height as f64);
                let answer = regions
                    .iter()
                    .map(|(kind, r)| {
                        let b = quantize_bbox(union_box(&page.tokens[r.clone()]), w, h);
                        format!("{kind} [{}, {}, {}, {}]", b[0], b[1], b[2], b[3])
                    })
                    .collect::<Vec<_>>()
                    .join("; ");
                (vec![page], None, None, vec![answer])
            }
        };
        Ok(out)
    }
}

/// Filler vocabulary of `n` distinct syllable words. The list does not
/// depend on the corpus seed, so corpora of different seeds share words.
pub fn filler_words(n: usize) -> Vec<String> {
    let mut rng = SeededRng::derive(0, "filler-words");
    let mut out: Vec<String> = Vec::with_capacity(n);
    let mut seen = std::collections::HashSet::new();
    let mut attempts = 0;
    while out.len() < n {
        let syl = 2 + rng.below(2) + attempts / 10_000;
        let w: String = (0..syl).map(|_| SYLLABLES[rng.below(SYLLABLES.len())]).collect();
        if seen.insert(w.clone()) {
            out.push(w);
        } else {
            attempts += 1;
        }
    }
    out
}

/// Summary of what `generate` wrote.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct GenSummary {
    pub instances: BTreeMap<String, usize>,
    pub pages: usize,
}

/// In-memory corpus: dataset registry entries, templates and records with
/// their rendered pages.
pub struct Corpus {
    pub datasets: Vec<DatasetInfo>,
    pub templates: BTreeMap<String, Vec<InstructionTemplate>>,
    pub records: Vec<(InstanceRecord, Vec<PageImage>)>,
}

pub fn build(spec: &GenSpec) -> Result<Corpus> {
    if spec.vocab_size < 8 {
        return Err(Error::Config("vocab_size must be at least 8".into()));
    }
    let words = filler_words(spec.vocab_size);
    let mut corpus = Corpus {
        datasets: Vec::new(),
        templates: BTreeMap::new(),
        records: Vec::new(),
    };
    for plan in plans(&spec.counts) {
        corpus.datasets.push(plan.info.clone());
        corpus.templates.insert(plan.info.id.clone(), plan.templates.clone());
        let mut g = Gen {
            spec,
            rng: SeededRng::derive(spec.seed, &plan.info.id),
            words: &words,
        };
        for n in 0..plan.count {
            let (pages, query, options, answers) = g.instance(&plan)?;
            let pages: Vec<Layout> = pages.into_iter().map(|p| g.noisy(p)).collect();
            let id = &plan.info.id;
            let record = InstanceRecord {
                dataset_id: id.clone(),
                task_cluster: plan.info.cluster,
                split: plan.info.split,
                regime: plan.info.regime,
                pages: (0..pages.len()).map(|p| format!("pages/{id}/{n:06}_{p}.ppm")).collect(),
                page_sizes: pages.iter().map(|p| (p.width, p.height)).collect(),
                ocr: pages.iter().map(|p| p.tokens.clone()).collect(),
                instruction: Instruction {
                    intent: plan.intent.to_string(),
                    answer_style: Some(plan.style),
                    query,
                    options,
                },
                answers,
            };
            corpus.records.push((record, pages.iter().map(Layout::render).collect()));
        }
    }
    Ok(corpus)
}

/// Writes the corpus for `spec` under `out`.
pub fn generate(spec: &GenSpec, out: &Path) -> Result<GenSummary> {
    let corpus = build(spec)?;
    let io = |p: &Path, e| Error::io(p, e);
    std::fs::create_dir_all(out.join("records")).map_err(|e| io(out, e))?;
    let reg = out.join("registry.json");
    std::fs::write(&reg, serde_json::to_string_pretty(&corpus.datasets)?).map_err(|e| io(&reg, e))?;
    let tpl = out.join("templates.json");
    std::fs::write(&tpl, serde_json::to_string_pretty(&corpus.templates)?).map_err(|e| io(&tpl, e))?;

    let mut summary = GenSummary::default();
    let mut lines: BTreeMap<String, String> = BTreeMap::new();
    for (record, images) in &corpus.records {
        for (rel, img) in record.pages.iter().zip(images) {
            let path = out.join(rel);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
            }
            write_ppm(img, &path)?;
            summary.pages += 1;
        }
        let buf = lines.entry(record.dataset_id.clone()).or_default();
        let _ = writeln!(buf, "{}", record.to_json_line());
        *summary.instances.entry(record.dataset_id.clone()).or_insert(0) += 1;
    }
    for (id, text) in lines {
        let path = out.join("records").join(format!("{id}.jsonl"));
        std::fs::write(&path, text).map_err(|e| io(&path, e))?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::validate_instance;

    fn only(f: impl FnOnce(&mut Counts)) -> GenSpec {
        let mut counts = Counts::none();
        f(&mut counts);
        GenSpec {
            counts,
            ..Default::default()
        }
    }

    #[test]
    fn extractive_only() {
        let c = build(&only(|c| c.extractive_qa = 8)).unwrap();
        assert_eq!(c.records.len(), 8);
        for (r, _) in &c.records {
            assert_eq!(r.dataset_id, "SynQA");
            let words: Vec<&str> = r.ocr[0].iter().map(|t| t.text.as_str()).collect();
            assert!(words.contains(&r.answers[0].as_str()));
        }
    }

    #[test]
    fn every_default_instance_validates() {
        let c = build(&GenSpec::default()).unwrap();
        assert_eq!(c.records.len(), 7 * 24 + 5 * 8);
        for (r, imgs) in &c.records {
            assert!(validate_instance(r).is_valid(), "{:?}", validate_instance(r));
            assert_eq!(imgs.len(), r.pages.len());
        }
        for ts in c.templates.values() {
            assert!(ts.len() >= 5);
        }
    }

    #[test]
    fn rendered_cells_match_boxes() {
        let c = build(&only(|c| c.kie = 1)).unwrap();
        let (r, imgs) = &c.records[0];
        let t = &r.ocr[0][0];
        let [x1, y1, _, _] = t.bbox;
        assert!(imgs[0].at(y1 as usize, x1 as usize, 0) < 1.0);
        assert_eq!(imgs[0].at(y1 as usize - 1, x1 as usize, 0), 1.0);
        assert_eq!(imgs[0].at(0, 0, 0), 1.0);
    }

    #[test]
    fn multi_page_answer_needs_both_pages() {
        let c = build(&only(|c| c.multi_page = 6)).unwrap();
        for (r, _) in &c.records {
            assert_eq!(r.pages.len(), 2);
            let parts: Vec<&str> = r.answers[0].split(' ').collect();
            let page_words = |p: usize| r.ocr[p].iter().map(|t| t.text.clone()).collect::<Vec<_>>();
            assert!(page_words(0).contains(&parts[0].to_string()));
            assert!(!page_words(0).contains(&parts[1].to_string()));
            assert!(page_words(1).contains(&parts[1].to_string()));
        }
    }

    #[test]
    fn dla_boxes_on_thousand_grid() {
        let c = build(&only(|c| c.dla = 3)).unwrap();
        for (r, _) in &c.records {
            let a = &r.answers[0];
            assert_eq!(a.matches('[').count(), 3, "{a}");
            assert!(a.contains("Title [") && a.contains("Table ["));
        }
    }

    #[test]
    fn options_contain_answer() {
        let c = build(&only(|c| {
            c.option_qa = 10;
            c.classification = 5;
            c.yes_no = 5;
        }))
        .unwrap();
        for (r, _) in &c.records {
            let o = r.instruction.options.as_ref().unwrap();
            assert!(o.contains(&r.answers[0]));
        }
    }
}

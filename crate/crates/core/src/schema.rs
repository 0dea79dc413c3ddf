//! Unified instruction-task record format, validation and instruction templates.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskCluster {
    #[serde(rename = "KIE")]
    Kie,
    #[serde(rename = "SinglePageQA")]
    SinglePageQa,
    #[serde(rename = "SinglePageQADiscrete")]
    SinglePageQaDiscrete,
    #[serde(rename = "SinglePageQAVisual")]
    SinglePageQaVisual,
    #[serde(rename = "SinglePageQADiscreteVisual")]
    SinglePageQaDiscreteVisual,
    #[serde(rename = "MultiPageQA")]
    MultiPageQa,
    #[serde(rename = "DocumentNLI")]
    DocumentNli,
    Dialogue,
    Captioning,
    Classification,
    #[serde(rename = "DLA")]
    Dla,
    #[serde(rename = "ITM")]
    Itm,
}

impl TaskCluster {
    pub const ALL: [TaskCluster; 12] = [
        TaskCluster::Kie,
        TaskCluster::SinglePageQa,
        TaskCluster::SinglePageQaDiscrete,
        TaskCluster::SinglePageQaVisual,
        TaskCluster::SinglePageQaDiscreteVisual,
        TaskCluster::MultiPageQa,
        TaskCluster::DocumentNli,
        TaskCluster::Dialogue,
        TaskCluster::Captioning,
        TaskCluster::Classification,
        TaskCluster::Dla,
        TaskCluster::Itm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskCluster::Kie => "KIE",
            TaskCluster::SinglePageQa => "SinglePageQA",
            TaskCluster::SinglePageQaDiscrete => "SinglePageQADiscrete",
            TaskCluster::SinglePageQaVisual => "SinglePageQAVisual",
            TaskCluster::SinglePageQaDiscreteVisual => "SinglePageQADiscreteVisual",
            TaskCluster::MultiPageQa => "MultiPageQA",
            TaskCluster::DocumentNli => "DocumentNLI",
            TaskCluster::Dialogue => "Dialogue",
            TaskCluster::Captioning => "Captioning",
            TaskCluster::Classification => "Classification",
            TaskCluster::Dla => "DLA",
            TaskCluster::Itm => "ITM",
        }
    }
}

impl fmt::Display for TaskCluster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerStyle {
    ExtractiveSpan,
    SpanList,
    FreeForm,
    OptionSelection,
    YesNo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    HeldIn,
    HeldOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    None,
    CrossDataset,
    CrossTask,
    CrossDomain,
}

impl Regime {
    pub const HELD_OUT: [Regime; 3] = [Regime::CrossDataset, Regime::CrossTask, Regime::CrossDomain];

    pub fn name(self) -> &'static str {
        match self {
            Regime::None => "none",
            Regime::CrossDataset => "cross_dataset",
            Regime::CrossTask => "cross_task",
            Regime::CrossDomain => "cross_domain",
        }
    }
}

/// One OCR token with its box `[x1, y1, x2, y2]` in page pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcrToken {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

impl OcrToken {
    pub fn new(text: impl Into<String>, bbox: [f64; 4]) -> Self {
        Self {
            text: text.into(),
            bbox,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instruction {
    pub intent: String,
    #[serde(default)]
    pub answer_style: Option<AnswerStyle>,
    #[serde(default)]
    pub query: Option<String>,
    #[serde(default)]
    pub options: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub dataset_id: String,
    pub task_cluster: TaskCluster,
    pub split: Split,
    pub regime: Regime,
    pub pages: Vec<String>,
    pub page_sizes: Vec<(u32, u32)>,
    pub ocr: Vec<Vec<OcrToken>>,
    pub instruction: Instruction,
    pub answers: Vec<String>,
}

const RECORD_FIELDS: [&str; 9] = [
    "dataset_id",
    "task_cluster",
    "split",
    "regime",
    "pages",
    "page_sizes",
    "ocr",
    "instruction",
    "answers",
];

impl InstanceRecord {
    /// Parses one JSONL line. Unknown top-level fields are an error when
    /// `strict`, otherwise dropped with a warning.
    pub fn from_json_line(line: &str, strict: bool) -> std::result::Result<Self, String> {
        let mut value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let obj = value
            .as_object_mut()
            .ok_or_else(|| "record is not a JSON object".to_string())?;
        let unknown: Vec<String> = obj
            .keys()
            .filter(|k| !RECORD_FIELDS.contains(&k.as_str()))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            if strict {
                return Err(format!("unknown field(s): {}", unknown.join(", ")));
            }
            log::warn!("ignoring unknown field(s): {}", unknown.join(", "));
            for k in &unknown {
                obj.remove(k);
            }
        }
        serde_json::from_value(value).map_err(|e| e.to_string())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serialises")
    }

    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    /// All OCR texts in page order, space separated.
    pub fn ocr_text(&self) -> String {
        self.ocr
            .iter()
            .flatten()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn mentions(&self, needle: &str) -> bool {
        self.violations.iter().any(|v| v.contains(needle))
    }
}

pub fn validate_instance(record: &InstanceRecord) -> ValidationReport {
    let mut v = Vec::new();
    if record.dataset_id.trim().is_empty() {
        v.push("dataset_id is empty".to_string());
    }
    let (np, no, ns) = (record.pages.len(), record.ocr.len(), record.page_sizes.len());
    if np == 0 {
        v.push("document has no pages".to_string());
    }
    if np != no || np != ns {
        v.push(format!(
            "page/OCR arity mismatch: {np} pages, {no} OCR lists, {ns} page sizes"
        ));
    }
    for (p, &(w, h)) in record.page_sizes.iter().enumerate() {
        if w == 0 || h == 0 {
            v.push(format!("page {p}: size {w}x{h} is degenerate"));
        }
    }
    for (p, tokens) in record.ocr.iter().enumerate() {
        for (i, t) in tokens.iter().enumerate() {
            let [x1, y1, x2, y2] = t.bbox;
            if t.text.is_empty() {
                v.push(format!("page {p} token {i}: text is empty"));
            }
            if t.bbox.iter().any(|c| !c.is_finite() || *c < 0.0) {
                v.push(format!("page {p} token {i}: negative or non-finite coordinate"));
            }
            if x1 > x2 {
                v.push(format!("page {p} token {i}: x1 ≤ x2 violated ({x1} > {x2})"));
            }
            if y1 > y2 {
                v.push(format!("page {p} token {i}: y1 ≤ y2 violated ({y1} > {y2})"));
            }
        }
    }
    let ins = &record.instruction;
    if ins.intent.trim().is_empty() {
        v.push("instruction intent is empty".to_string());
    }
    if ins.answer_style == Some(AnswerStyle::OptionSelection)
        && ins.options.as_ref().map_or(true, |o| o.is_empty())
    {
        v.push("option_selection instruction has no options".to_string());
    }
    if record.answers.is_empty() {
        v.push("answers list is empty".to_string());
    }
    ValidationReport { violations: v }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionTemplate {
    pub template_id: String,
    pub text: String,
    #[serde(default)]
    pub answer_style: Option<AnswerStyle>,
}

const QUERY_SLOT: &str = "{query}";
const OPTIONS_SLOT: &str = "{options}";

impl InstructionTemplate {
    pub fn new(id: impl Into<String>, text: impl Into<String>, style: Option<AnswerStyle>) -> Self {
        Self {
            template_id: id.into(),
            text: text.into(),
            answer_style: style,
        }
    }

    pub fn needs_query(&self) -> bool {
        self.text.contains(QUERY_SLOT)
    }

    pub fn needs_options(&self) -> bool {
        self.text.contains(OPTIONS_SLOT)
    }

    /// Placeholder and emptiness problems, if any.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.text.trim().is_empty() {
            out.push(format!("template {}: text is empty", self.template_id));
        }
        for slot in [QUERY_SLOT, OPTIONS_SLOT] {
            if self.text.matches(slot).count() > 1 {
                out.push(format!("template {}: {slot} appears more than once", self.template_id));
            }
        }
        out
    }
}

/// Uniform draw from a non-empty template list.
pub fn select_template<'a>(
    templates: &'a [InstructionTemplate],
    rng: &mut SeededRng,
) -> Result<&'a InstructionTemplate> {
    if templates.is_empty() {
        return Err(Error::EmptyTemplateSet);
    }
    Ok(&templates[rng.below(templates.len())])
}

/// `["a", "b", "c"]` renders as `"a", "b" or "c"`.
pub fn render_options(options: &[String]) -> String {
    let quoted: Vec<String> = options.iter().map(|o| format!("\"{o}\"")).collect();
    match quoted.len() {
        0 => String::new(),
        1 => quoted[0].clone(),
        n => format!("{} or {}", quoted[..n - 1].join(", "), quoted[n - 1]),
    }
}

pub fn render_instruction(
    template: &InstructionTemplate,
    query: Option<&str>,
    options: Option<&[String]>,
) -> Result<String> {
    let q = match template.needs_query() {
        true => Some(query.ok_or(Error::MissingField("query"))?),
        false => None,
    };
    let o = match template.needs_options() {
        true => Some(render_options(
            options
                .filter(|o| !o.is_empty())
                .ok_or(Error::MissingField("options"))?,
        )),
        false => None,
    };
    // single left-to-right pass so substituted text is never rescanned
    let mut out = String::with_capacity(template.text.len());
    let mut rest = template.text.as_str();
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let (Some(q), true) = (q, tail.starts_with(QUERY_SLOT)) {
            out.push_str(q);
            rest = &tail[QUERY_SLOT.len()..];
        } else if let (Some(o), true) = (&o, tail.starts_with(OPTIONS_SLOT)) {
            out.push_str(o);
            rest = &tail[OPTIONS_SLOT.len()..];
        } else {
            out.push('{');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    if out.trim().is_empty() {
        return Err(Error::MissingField("text"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record() -> InstanceRecord {
        InstanceRecord {
            dataset_id: "SynthKIE".into(),
            task_cluster: TaskCluster::Kie,
            split: Split::HeldIn,
            regime: Regime::None,
            pages: vec!["p0.ppm".into()],
            page_sizes: vec![(100, 50)],
            ocr: vec![vec![OcrToken::new("total", [10.0, 10.0, 40.0, 20.0])]],
            instruction: Instruction {
                intent: "Extract the value for the key".into(),
                answer_style: Some(AnswerStyle::ExtractiveSpan),
                query: Some("total_price".into()),
                options: None,
            },
            answers: vec!["total".into()],
        }
    }

    #[test]
    fn well_formed_record_is_valid() {
        assert!(validate_instance(&record()).is_valid());
    }

    #[test]
    fn inverted_box_reported() {
        let mut r = record();
        r.ocr[0][0].bbox = [10.0, 10.0, 5.0, 20.0];
        let rep = validate_instance(&r);
        assert!(rep.mentions("x1 ≤ x2 violated"), "{rep:?}");
    }

    #[test]
    fn arity_mismatch_reported() {
        let mut r = record();
        r.pages.push("p1.ppm".into());
        r.page_sizes.push((100, 50));
        assert!(validate_instance(&r).mentions("arity"));
    }

    #[test]
    fn option_selection_needs_options() {
        let mut r = record();
        r.instruction.answer_style = Some(AnswerStyle::OptionSelection);
        assert!(!validate_instance(&r).is_valid());
        r.instruction.options = Some(vec!["a".into()]);
        assert!(validate_instance(&r).is_valid());
    }

    #[test]
    fn json_field_names() {
        let line = record().to_json_line();
        for f in RECORD_FIELDS {
            assert!(line.contains(&format!("\"{f}\"")), "{f} missing in {line}");
        }
        assert!(line.contains("\"box\""));
        assert!(line.contains("\"task_cluster\":\"KIE\""));
        assert!(line.contains("\"answer_style\":\"extractive_span\""));
        let back = InstanceRecord::from_json_line(&line, true).unwrap();
        assert_eq!(back, record());
    }

    #[test]
    fn unknown_fields_strict_vs_lenient() {
        let mut v: serde_json::Value = serde_json::from_str(&record().to_json_line()).unwrap();
        v["extra"] = serde_json::json!(1);
        let line = v.to_string();
        assert!(InstanceRecord::from_json_line(&line, true).is_err());
        assert_eq!(InstanceRecord::from_json_line(&line, false).unwrap(), record());
    }

    #[test]
    fn singleton_template_always_selected() {
        let t = vec![InstructionTemplate::new("t0", "Only one.", None)];
        let mut rng = SeededRng::new(3);
        for _ in 0..10 {
            assert_eq!(select_template(&t, &mut rng).unwrap().template_id, "t0");
        }
    }

    #[test]
    fn empty_template_set_rejected() {
        let mut rng = SeededRng::new(0);
        assert!(matches!(select_template(&[], &mut rng), Err(Error::EmptyTemplateSet)));
    }

    #[test]
    fn template_selection_is_uniform() {
        let t: Vec<_> = (0..5)
            .map(|i| InstructionTemplate::new(format!("t{i}"), "x", None))
            .collect();
        let mut rng = SeededRng::new(42);
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            let id = &select_template(&t, &mut rng).unwrap().template_id;
            counts[id[1..].parse::<usize>().unwrap()] += 1;
        }
        for c in counts {
            assert!((1800..=2200).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn renders_query_template() {
        let t = InstructionTemplate::new(
            "ai2d",
            "Answer shortly the following question \"{query}\" based on the document.",
            Some(AnswerStyle::ExtractiveSpan),
        );
        let s = render_instruction(&t, Some("Which is the most narrow in this diagram?"), None).unwrap();
        assert_eq!(
            s,
            "Answer shortly the following question \"Which is the most narrow in this diagram?\" based on the document."
        );
    }

    #[test]
    fn placeholder_free_template_unchanged() {
        let t = InstructionTemplate::new("plain", "Classify the document.", None);
        assert_eq!(render_instruction(&t, None, None).unwrap(), "Classify the document.");
    }

    #[test]
    fn yes_no_options_rendered() {
        let t = InstructionTemplate::new(
            "tabfact",
            "Answers are selected from given options {options}.",
            Some(AnswerStyle::YesNo),
        );
        let opts = vec!["yes".to_string(), "no".to_string()];
        let s = render_instruction(&t, None, Some(&opts)).unwrap();
        assert!(s.contains("\"yes\" or \"no\""), "{s}");
        assert_eq!(
            render_options(&["a".into(), "b".into(), "c".into()]),
            "\"a\", \"b\" or \"c\""
        );
    }

    #[test]
    fn missing_query_is_an_error() {
        let t = InstructionTemplate::new("q", "Q: {query}", None);
        assert!(matches!(render_instruction(&t, None, None), Err(Error::MissingField("query"))));
        let t = InstructionTemplate::new("o", "Pick {options}", None);
        assert!(matches!(render_instruction(&t, None, Some(&[])), Err(Error::MissingField("options"))));
    }

    #[test]
    fn duplicate_placeholder_flagged() {
        let t = InstructionTemplate::new("d", "{query} and {query}", None);
        assert_eq!(t.problems().len(), 1);
    }
}

//! Answer metrics and the held-out evaluation harness.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Manifest;
use crate::schema::{InstanceRecord, Regime, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    EntityF1,
    RelaxedAccuracy,
    Anls,
    Accuracy,
    ExactMatch,
    RougeL,
}

impl Metric {
    pub fn label(self) -> &'static str {
        match self {
            Metric::EntityF1 => "eF1",
            Metric::RelaxedAccuracy => "RAcc",
            Metric::Anls => "ANLS",
            Metric::Accuracy => "Acc",
            Metric::ExactMatch => "EM",
            Metric::RougeL => "ROUGE-L",
        }
    }
}

pub const ANLS_THRESHOLD: f64 = 0.5;
pub const RELAXED_TOLERANCE: f64 = 0.05;

/// Lowercase, drop punctuation and the articles a/an/the, collapse spaces.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let stripped: String = lowered
        .chars()
        .filter(|c| !(c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace())))
        .collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn tokens(text: &str) -> Vec<String> {
    normalize_answer(text)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn anls_single(pred: &str, gold: &str, tau: f64) -> f64 {
    let p = pred.trim().to_lowercase();
    let g = gold.trim().to_lowercase();
    let longest = p.chars().count().max(g.chars().count());
    if longest == 0 {
        return 1.0;
    }
    let nl = levenshtein(&p, &g) as f64 / longest as f64;
    if nl < tau {
        1.0 - nl
    } else {
        0.0
    }
}

pub fn anls(pred: &str, golds: &[String], tau: f64) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::EmptyGolds);
    }
    Ok(golds
        .iter()
        .map(|g| anls_single(pred, g, tau))
        .fold(0.0, f64::max))
}

pub fn exact_match(pred: &str, golds: &[String]) -> f64 {
    let p = normalize_answer(pred);
    if golds.iter().any(|g| normalize_answer(g) == p) {
        1.0
    } else {
        0.0
    }
}

fn token_f1_single(pred: &str, gold: &str) -> f64 {
    let p = tokens(pred);
    let g = tokens(gold);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut bag: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *bag.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &p {
        if let Some(c) = bag.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn token_f1(pred: &str, golds: &[String]) -> f64 {
    golds
        .iter()
        .map(|g| token_f1_single(pred, g))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged entity counts; feed one instance at a time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EntityCounts {
    pub true_pos: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl EntityCounts {
    pub fn add<S: AsRef<str>>(&mut self, pred: &BTreeSet<(S, S)>, gold: &BTreeSet<(S, S)>) {
        let norm = |s: &BTreeSet<(S, S)>| -> BTreeSet<(String, String)> {
            s.iter()
                .map(|(t, l)| (normalize_answer(t.as_ref()), normalize_answer(l.as_ref())))
                .collect()
        };
        let p = norm(pred);
        let g = norm(gold);
        self.true_pos += p.intersection(&g).count();
        self.predicted += p.len();
        self.gold += g.len();
    }

    pub fn prf(&self) -> Prf {
        if self.predicted == 0 && self.gold == 0 {
            return Prf {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let precision = ratio(self.true_pos, self.predicted);
        let recall = ratio(self.true_pos, self.gold);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Entity P/R/F1 over `(text, label)` sets after normalisation.
pub fn entity_f1<S: AsRef<str>>(pred: &BTreeSet<(S, S)>, gold: &BTreeSet<(S, S)>) -> Prf {
    let mut c = EntityCounts::default();
    c.add(pred, gold);
    c.prf()
}

fn parse_number(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn relaxed_accuracy(pred: &str, gold: &str) -> f64 {
    let ok = match (parse_number(pred), parse_number(gold)) {
        (Some(p), Some(g)) if g == 0.0 => p == 0.0,
        (Some(p), Some(g)) => (p - g).abs() <= RELAXED_TOLERANCE * g.abs(),
        _ => normalize_answer(pred) == normalize_answer(gold),
    };
    if ok {
        1.0
    } else {
        0.0
    }
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Lowercased, punctuation-free words. Articles are kept: ROUGE-L scores
/// word order, and dropping words would distort the subsequence.
fn rouge_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|w| w.chars().filter(|c| !c.is_ascii_punctuation()).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn rouge_l(pred: &str, gold: &str) -> f64 {
    let p = rouge_tokens(pred);
    let g = rouge_tokens(gold);
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&p, &g);
    if lcs == 0 {
        return 0.0;
    }
    let precision = lcs as f64 / p.len() as f64;
    let recall = lcs as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Entity set of a KIE answer: spans separated by ", " tagged with the query label.
pub fn kie_entities(answer: &str, label: &str) -> BTreeSet<(String, String)> {
    answer
        .split(", ")
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| (s.to_string(), label.to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub metric: Metric,
    pub regime: Regime,
    pub instances: usize,
    pub primary: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub datasets: BTreeMap<String, DatasetScore>,
    pub regimes: BTreeMap<String, f64>,
    pub held_out_avg: Option<f64>,
    pub held_out_f1_avg: Option<f64>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

fn score_dataset(metric: Metric, items: &[(&str, &InstanceRecord, &str)]) -> Result<(f64, f64)> {
    let n = items.len().max(1) as f64;
    let f1 = items
        .iter()
        .map(|(_, r, p)| token_f1(p, &r.answers))
        .sum::<f64>()
        / n;
    let primary = match metric {
        Metric::EntityF1 => {
            let mut counts = EntityCounts::default();
            for (id, r, p) in items {
                let label = r.instruction.query.as_deref().unwrap_or("");
                let scope = |set: BTreeSet<(String, String)>| -> BTreeSet<(String, String)> {
                    set.into_iter().map(|(t, l)| (t, format!("{id} {l}"))).collect()
                };
                let gold = scope(kie_entities(r.answers.first().map_or("", |a| a), label));
                counts.add(&scope(kie_entities(p, label)), &gold);
            }
            counts.prf().f1
        }
        Metric::Anls => {
            let mut s = 0.0;
            for (_, r, p) in items {
                s += anls(p, &r.answers, ANLS_THRESHOLD)?;
            }
            s / n
        }
        Metric::RelaxedAccuracy => {
            items
                .iter()
                .map(|(_, r, p)| r.answers.iter().map(|g| relaxed_accuracy(p, g)).fold(0.0, f64::max))
                .sum::<f64>()
                / n
        }
        Metric::Accuracy | Metric::ExactMatch => {
            items.iter().map(|(_, r, p)| exact_match(p, &r.answers)).sum::<f64>() / n
        }
        Metric::RougeL => {
            items
                .iter()
                .map(|(_, r, p)| r.answers.iter().map(|g| rouge_l(p, g)).fold(0.0, f64::max))
                .sum::<f64>()
                / n
        }
    };
    Ok((primary, f1))
}

/// Scores held-out instances. `metrics` maps dataset id to its primary metric.
pub fn evaluate_records(
    records: &[(String, InstanceRecord)],
    metrics: &BTreeMap<String, Metric>,
    predictions: &HashMap<String, String>,
) -> Result<EvalReport> {
    let held_out: Vec<&(String, InstanceRecord)> = records
        .iter()
        .filter(|(_, r)| r.split == Split::HeldOut)
        .collect();
    let missing: Vec<String> = held_out
        .iter()
        .filter(|(id, _)| !predictions.contains_key(id))
        .map(|(id, _)| id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPrediction(missing));
    }
    let mut by_dataset: BTreeMap<&str, Vec<(&str, &InstanceRecord, &str)>> = BTreeMap::new();
    for (id, r) in &held_out {
        by_dataset.entry(r.dataset_id.as_str()).or_default().push((
            id.as_str(),
            r,
            predictions[id].as_str(),
        ));
    }
    let mut datasets = BTreeMap::new();
    for (ds, items) in &by_dataset {
        let metric = *metrics
            .get(*ds)
            .ok_or_else(|| Error::UnknownDataset(ds.to_string()))?;
        let (primary, f1) = score_dataset(metric, items)?;
        datasets.insert(
            ds.to_string(),
            DatasetScore {
                metric,
                regime: items[0].1.regime,
                instances: items.len(),
                primary,
                f1,
            },
        );
    }
    let mut regimes = BTreeMap::new();
    for regime in Regime::HELD_OUT {
        let scores: Vec<f64> = datasets
            .values()
            .filter(|d| d.regime == regime)
            .map(|d| d.primary)
            .collect();
        if let Some(m) = mean(&scores) {
            regimes.insert(regime.name().to_string(), m);
        }
    }
    let primaries: Vec<f64> = datasets.values().map(|d| d.primary).collect();
    let f1s: Vec<f64> = datasets.values().map(|d| d.f1).collect();
    Ok(EvalReport {
        datasets,
        regimes,
        held_out_avg: mean(&primaries),
        held_out_f1_avg: mean(&f1s),
    })
}

pub fn evaluate(manifest: &Manifest, predictions: &HashMap<String, String>) -> Result<EvalReport> {
    let records = manifest.load_records()?;
    let metrics = manifest
        .datasets
        .iter()
        .map(|(id, d)| (id.clone(), d.metric))
        .collect();
    evaluate_records(&records, &metrics, predictions)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub instance_id: String,
    pub prediction: String,
}

pub fn read_predictions(path: &Path) -> Result<HashMap<String, String>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    let mut offset = 0u64;
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let len = line.len() as u64 + 1;
        if !line.trim().is_empty() {
            let p: PredictionLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                offset,
                message: e.to_string(),
            })?;
            out.insert(p.instance_id, p.prediction);
        }
        offset += len;
    }
    Ok(out)
}

impl EvalReport {
    /// Plain-text table with scores scaled to percentages.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<28} {:<14} {:<8} {:>8} {:>8} {:>6}", "dataset", "regime", "metric", "score", "F1", "n");
        for (id, d) in &self.datasets {
            let _ = writeln!(
                s,
                "{:<28} {:<14} {:<8} {:>8.1} {:>8.1} {:>6}",
                id,
                d.regime.name(),
                d.metric.label(),
                100.0 * d.primary,
                100.0 * d.f1,
                d.instances
            );
        }
        for (regime, v) in &self.regimes {
            let _ = writeln!(s, "{:<28} {:>33.1}", format!("avg {regime}"), 100.0 * v);
        }
        if let (Some(a), Some(f)) = (self.held_out_avg, self.held_out_f1_avg) {
            let _ = writeln!(s, "{:<28} {:>33.1} {:>8.1}", "held-out avg", 100.0 * a, 100.0 * f);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_answer("The Red Car."), "red car");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("  7,824 "), "7824");
        assert_eq!(normalize_answer("an  apple\tA day"), "apple day");
    }

    #[test]
    fn anls_examples() {
        assert_eq!(anls("forty two", &g(&["forty two"]), 0.5).unwrap(), 1.0);
        assert!((anls("fourty two", &g(&["forty two"]), 0.5).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(anls("cat", &g(&["dog"]), 0.5).unwrap(), 0.0);
        assert!(matches!(anls("x", &[], 0.5), Err(Error::EmptyGolds)));
    }

    #[test]
    fn em_examples() {
        assert_eq!(exact_match("The cat", &g(&["cat"])), 1.0);
        assert_eq!(exact_match("cats", &g(&["cat"])), 0.0);
        assert_eq!(exact_match("7,824", &g(&["7824"])), 1.0);
    }

    #[test]
    fn token_f1_examples() {
        assert_eq!(token_f1("red car", &g(&["red car"])), 1.0);
        assert!((token_f1("red car is fast", &g(&["red car"])) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_f1("blue bus", &g(&["red car"])), 0.0);
        assert_eq!(token_f1("", &g(&[""])), 1.0);
        assert_eq!(token_f1("", &g(&["x"])), 0.0);
    }

    #[test]
    fn entity_f1_examples() {
        let set = |xs: &[(&str, &str)]| -> BTreeSet<(String, String)> {
            xs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
        };
        let gold = set(&[("total", "PRICE")]);
        let r = entity_f1(&gold, &gold);
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let r = entity_f1(&set(&[("total", "PRICE"), ("abc", "NAME")]), &gold);
        assert_eq!((r.precision, r.recall), (0.5, 1.0));
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
        let r = entity_f1(&set(&[]), &gold);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn relaxed_accuracy_examples() {
        assert_eq!(relaxed_accuracy("10.2", "10"), 1.0);
        assert_eq!(relaxed_accuracy("23%", "23%"), 1.0);
        assert_eq!(relaxed_accuracy("0.001", "0"), 0.0);
        assert_eq!(relaxed_accuracy("0", "0"), 1.0);
        assert_eq!(relaxed_accuracy("105", "100"), 1.0);
        assert_eq!(relaxed_accuracy("105.0001", "100"), 0.0);
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l("a b c d", "a b c d"), 1.0);
        assert!((rouge_l("a b c d", "a c d") - 6.0 / 7.0).abs() < 1e-12);
        assert_eq!(rouge_l("The end.", "the END"), 1.0);
        assert_eq!(rouge_l("p q", "r s"), 0.0);
        assert_eq!(rouge_l("", "r s"), 0.0);
    }

    fn rec(ds: &str, regime: Regime, query: Option<&str>, answer: &str) -> InstanceRecord {
        use crate::schema::*;
        InstanceRecord {
            dataset_id: ds.into(),
            task_cluster: TaskCluster::SinglePageQa,
            split: Split::HeldOut,
            regime,
            pages: vec!["p".into()],
            page_sizes: vec![(10, 10)],
            ocr: vec![vec![]],
            instruction: Instruction {
                intent: "q".into(),
                query: query.map(str::to_string),
                ..Default::default()
            },
            answers: vec![answer.into()],
        }
    }

    fn fixture() -> (Vec<(String, InstanceRecord)>, BTreeMap<String, Metric>) {
        let records = vec![
            ("f/0".to_string(), rec("F", Regime::CrossDataset, Some("key"), "alpha, beta")),
            ("f/1".to_string(), rec("F", Regime::CrossDataset, Some("key"), "gamma")),
            ("c/0".to_string(), rec("C", Regime::CrossTask, None, "10")),
            ("c/1".to_string(), rec("C", Regime::CrossTask, None, "40")),
            ("s/0".to_string(), rec("S", Regime::CrossDomain, None, "red car")),
        ];
        let metrics = [
            ("F".to_string(), Metric::EntityF1),
            ("C".to_string(), Metric::RelaxedAccuracy),
            ("S".to_string(), Metric::ExactMatch),
        ]
        .into_iter()
        .collect();
        (records, metrics)
    }

    #[test]
    fn perfect_predictions_score_one() {
        let (records, metrics) = fixture();
        let preds = records
            .iter()
            .map(|(id, r)| (id.clone(), r.answers[0].clone()))
            .collect();
        let rep = evaluate_records(&records, &metrics, &preds).unwrap();
        assert!(rep.datasets.values().all(|d| d.primary == 1.0 && d.f1 == 1.0));
        assert_eq!(rep.held_out_avg, Some(1.0));
        assert_eq!(rep.regimes.len(), 3);
    }

    #[test]
    fn empty_predictions_score_zero() {
        let (records, metrics) = fixture();
        let preds = records.iter().map(|(id, _)| (id.clone(), String::new())).collect();
        let rep = evaluate_records(&records, &metrics, &preds).unwrap();
        assert!(rep.datasets.values().all(|d| d.primary == 0.0 && d.f1 == 0.0));
        assert_eq!(rep.held_out_avg, Some(0.0));
    }

    #[test]
    fn mixed_predictions_average() {
        let (records, metrics) = fixture();
        let preds: HashMap<String, String> = [
            ("f/0", "alpha, delta"),
            ("f/1", "gamma"),
            ("c/0", "10.4"),
            ("c/1", "50"),
            ("s/0", "The red car"),
        ]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        let rep = evaluate_records(&records, &metrics, &preds).unwrap();
        // F: tp 2, pred 3, gold 3 -> 2/3; C: 1/2; S: 1
        let f = rep.datasets["F"].primary;
        let c = rep.datasets["C"].primary;
        let s = rep.datasets["S"].primary;
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!((c, s), (0.5, 1.0));
        assert!((rep.held_out_avg.unwrap() - (2.0 / 3.0 + 0.5 + 1.0) / 3.0).abs() < 1e-12);
        assert_eq!(rep.regimes["cross_task"], 0.5);
    }

    #[test]
    fn missing_predictions_listed() {
        let (records, metrics) = fixture();
        let preds = HashMap::from([("f/0".to_string(), "x".to_string())]);
        match evaluate_records(&records, &metrics, &preds) {
            Err(Error::MissingPrediction(ids)) => assert_eq!(ids.len(), 4),
            other => panic!("{other:?}"),
        }
    }
}

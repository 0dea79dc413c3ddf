//! Source conversion, query rephrasing, splits, balanced sampling and corpus
//! statistics.

pub mod adapters;
mod registry;
mod rephrase;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{validate_instance, InstanceRecord, InstructionTemplate, Regime, Split};
use crate::tensor::SeededRng;

pub use registry::{assign_split, DatasetInfo, Registry};
pub use rephrase::{rephrase_query, RephraseTable};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_CAP: usize = 5000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Records file, relative to the manifest's directory unless absolute.
    pub path: String,
    pub line: usize,
    pub offset: u64,
    pub dataset_id: String,
    pub split: Split,
    pub regime: Regime,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub counts: BTreeMap<String, usize>,
    #[serde(default)]
    pub datasets: BTreeMap<String, DatasetInfo>,
    #[serde(default)]
    pub templates: BTreeMap<String, Vec<InstructionTemplate>>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn tally(entries: &[ManifestEntry]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for e in entries {
        *counts.entry(e.dataset_id.clone()).or_insert(0) += 1;
    }
    counts
}

impl Manifest {
    pub fn new(
        entries: Vec<ManifestEntry>,
        datasets: BTreeMap<String, DatasetInfo>,
        templates: BTreeMap<String, Vec<InstructionTemplate>>,
        base_dir: PathBuf,
    ) -> Self {
        let counts = tally(&entries);
        Self {
            entries,
            counts,
            datasets,
            templates,
            base_dir,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Counts match entry tallies and no dataset appears under two splits.
    pub fn check(&self) -> Result<()> {
        if tally(&self.entries) != self.counts {
            return Err(Error::Format("manifest counts disagree with entries".into()));
        }
        let mut splits: HashMap<&str, Split> = HashMap::new();
        for e in &self.entries {
            if *splits.entry(&e.dataset_id).or_insert(e.split) != e.split {
                return Err(Error::Format(format!("dataset {} has two splits", e.dataset_id)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.check()?;
        Ok(m)
    }

    /// Writes the manifest. Entry paths stay relative when the target lives
    /// in the same directory, otherwise they are made absolute.
    pub fn save(&self, path: &Path) -> Result<()> {
        let target_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let same_dir = canonical(&target_dir) == canonical(&self.base_dir);
        let mut out = self.clone();
        if !same_dir {
            for e in &mut out.entries {
                if Path::new(&e.path).is_relative() {
                    e.path = canonical(&self.base_dir).join(&e.path).to_string_lossy().into_owned();
                }
            }
        }
        let json = serde_json::to_string_pretty(&out)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Reads every entry's record, each records file once.
    pub fn load_records(&self) -> Result<Vec<(String, InstanceRecord)>> {
        let mut files: HashMap<&str, Vec<InstanceRecord>> = HashMap::new();
        for e in &self.entries {
            if !files.contains_key(e.path.as_str()) {
                let path = self.resolve(&e.path);
                files.insert(e.path.as_str(), adapters::read_jsonl_records(&path, false)?);
            }
        }
        self.entries
            .iter()
            .map(|e| {
                let recs = &files[e.path.as_str()];
                let rec = recs.get(e.line.wrapping_sub(1)).ok_or_else(|| Error::Index {
                    what: "records file lines",
                    index: e.line,
                    size: recs.len(),
                })?;
                Ok((e.id.clone(), rec.clone()))
            })
            .collect()
    }

    pub fn with_entries(&self, entries: Vec<ManifestEntry>) -> Self {
        Manifest::new(
            entries,
            self.datasets.clone(),
            self.templates.clone(),
            self.base_dir.clone(),
        )
    }
}

fn canonical(p: &Path) -> PathBuf {
    let p = if p.as_os_str().is_empty() { Path::new(".") } else { p };
    p.canonicalize().unwrap_or_else(|_| p.to_path_buf())
}

/// Caps each held-in dataset at `cap` entries drawn without replacement.
/// Held-out datasets pass through untouched; surviving entries keep their
/// original order.
pub fn balanced_sample(manifest: &Manifest, cap: usize, rng: &mut SeededRng) -> Result<Manifest> {
    if cap == 0 {
        return Err(Error::Config("sample cap must be at least 1".into()));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        if e.split == Split::HeldIn {
            groups.entry(e.dataset_id.as_str()).or_default().push(i);
        }
    }
    let mut dropped: HashSet<usize> = HashSet::new();
    for idx in groups.values_mut() {
        let n = idx.len();
        if n <= cap {
            continue;
        }
        // Fisher-Yates prefix: positions [0, cap) become a uniform sample
        for i in 0..cap {
            let j = i + rng.below(n - i);
            idx.swap(i, j);
        }
        dropped.extend(idx[cap..].iter().copied());
    }
    let entries = manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(i, _)| !dropped.contains(i))
        .map(|(_, e)| e.clone())
        .collect();
    Ok(manifest.with_entries(entries))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population statistics; zero for an empty sample.
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub template_words: MeanStd,
    pub templates_per_dataset: MeanStd,
    pub ocr_words: MeanStd,
    pub answer_words: MeanStd,
    pub datasets: usize,
    pub clusters: usize,
    pub instances: usize,
}

fn words(s: &str) -> f64 {
    s.split_whitespace().count() as f64
}

/// Statistics over whitespace-separated words. OCR words are counted per
/// instance across all pages; answer words over every gold answer.
pub fn compute_stats(manifest: &Manifest) -> Result<StatsReport> {
    let records = manifest.load_records()?;
    Ok(stats_of(&records, &manifest.templates))
}

pub fn stats_of(
    records: &[(String, InstanceRecord)],
    templates: &BTreeMap<String, Vec<InstructionTemplate>>,
) -> StatsReport {
    let template_words: Vec<f64> = templates.values().flatten().map(|t| words(&t.text)).collect();
    let per_dataset: Vec<f64> = templates.values().map(|t| t.len() as f64).collect();
    let ocr: Vec<f64> = records
        .iter()
        .map(|(_, r)| r.ocr.iter().flatten().map(|t| words(&t.text)).sum())
        .collect();
    let answers: Vec<f64> = records
        .iter()
        .flat_map(|(_, r)| r.answers.iter().map(|a| words(a)))
        .collect();
    let datasets: BTreeSet<&str> = records.iter().map(|(_, r)| r.dataset_id.as_str()).collect();
    let clusters: BTreeSet<_> = records.iter().map(|(_, r)| r.task_cluster).collect();
    StatsReport {
        template_words: MeanStd::of(&template_words),
        templates_per_dataset: MeanStd::of(&per_dataset),
        ocr_words: MeanStd::of(&ocr),
        answer_words: MeanStd::of(&answers),
        datasets: datasets.len(),
        clusters: clusters.len(),
        instances: records.len(),
    }
}

fn flat_page_name(rel: &str) -> String {
    rel.replace(['/', '\\'], "__")
}

/// Converts a source directory with the named adapter into
/// `out_dir/records.jsonl`, `out_dir/manifest.json` and copied page images
/// under `out_dir/pages/`.
pub fn convert_dataset(adapter_id: &str, source_dir: &Path, out_dir: &Path) -> Result<Manifest> {
    let adapter = adapters::find(adapter_id)?;
    let batch = adapter.read(source_dir)?;
    let mut registry = Registry::standard();
    for d in &batch.datasets {
        registry.register(d.clone());
    }
    let mut units = batch.units;
    units.sort_by(|a, b| a.path.cmp(&b.path));

    std::fs::create_dir_all(out_dir.join("pages")).map_err(|e| Error::io(out_dir, e))?;
    let records_path = out_dir.join(RECORDS_FILE);
    let mut writer = std::io::BufWriter::new(
        std::fs::File::create(&records_path).map_err(|e| Error::io(&records_path, e))?,
    );
    let mut entries = Vec::new();
    let mut per_dataset: BTreeMap<String, usize> = BTreeMap::new();
    let mut datasets = BTreeMap::new();
    let mut copied: HashSet<String> = HashSet::new();
    let mut offset = 0u64;
    for unit in units {
        for (k, mut rec) in unit.records.into_iter().enumerate() {
            let info = registry.get(&rec.dataset_id)?.clone();
            rec.split = info.split;
            rec.regime = info.regime;
            let ordinal = per_dataset.entry(rec.dataset_id.clone()).or_insert(0);
            let id = format!("{}/{:06}", rec.dataset_id, *ordinal);
            *ordinal += 1;
            let report = validate_instance(&rec);
            if !report.is_valid() {
                return Err(Error::InvalidRecord {
                    id: format!("{id} ({} #{k})", unit.path.display()),
                    violations: report.violations,
                });
            }
            for page in rec.pages.iter_mut() {
                let flat = flat_page_name(page);
                if copied.insert(flat.clone()) {
                    let src = source_dir.join(&*page);
                    let dst = out_dir.join("pages").join(&flat);
                    std::fs::copy(&src, &dst).map_err(|e| Error::io(&src, e))?;
                }
                *page = format!("pages/{flat}");
            }
            let line = rec.to_json_line();
            writeln!(writer, "{line}").map_err(|e| Error::io(&records_path, e))?;
            entries.push(ManifestEntry {
                id,
                path: RECORDS_FILE.to_string(),
                line: entries.len() + 1,
                offset,
                dataset_id: rec.dataset_id.clone(),
                split: info.split,
                regime: info.regime,
            });
            offset += line.len() as u64 + 1;
            datasets.insert(info.id.clone(), info);
        }
    }
    writer.flush().map_err(|e| Error::io(&records_path, e))?;
    if entries.is_empty() {
        log::warn!("adapter {adapter_id} found no records under {}", source_dir.display());
    }
    let templates = batch
        .templates
        .into_iter()
        .filter(|(k, _)| datasets.contains_key(k))
        .collect();
    let manifest = Manifest::new(entries, datasets, templates, out_dir.to_path_buf());
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::InstructionTemplate;

    fn entries(ds: &str, split: Split, n: usize) -> Vec<ManifestEntry> {
        (0..n)
            .map(|i| ManifestEntry {
                id: format!("{ds}/{i:06}"),
                path: RECORDS_FILE.into(),
                line: i + 1,
                offset: 0,
                dataset_id: ds.into(),
                split,
                regime: if split == Split::HeldIn { Regime::None } else { Regime::CrossTask },
            })
            .collect()
    }

    fn manifest(parts: &[(&str, Split, usize)]) -> Manifest {
        let e = parts.iter().flat_map(|&(d, s, n)| entries(d, s, n)).collect();
        Manifest::new(e, BTreeMap::new(), BTreeMap::new(), PathBuf::new())
    }

    #[test]
    fn sampling_caps_held_in_only() {
        let m = manifest(&[
            ("Big", Split::HeldIn, 12_000),
            ("Small", Split::HeldIn, 3_000),
            ("TabFact", Split::HeldOut, 12_740),
        ]);
        let s = balanced_sample(&m, DEFAULT_CAP, &mut SeededRng::new(7)).unwrap();
        assert_eq!(s.counts["Big"], 5_000);
        assert_eq!(s.counts["Small"], 3_000);
        assert_eq!(s.counts["TabFact"], 12_740);
        s.check().unwrap();
    }

    #[test]
    fn sampling_is_idempotent_and_a_subset() {
        let m = manifest(&[("A", Split::HeldIn, 50), ("B", Split::HeldOut, 5)]);
        let once = balanced_sample(&m, 20, &mut SeededRng::new(1)).unwrap();
        let twice = balanced_sample(&once, 20, &mut SeededRng::new(1)).unwrap();
        assert_eq!(once.entries, twice.entries);
        let ids: HashSet<_> = m.entries.iter().map(|e| &e.id).collect();
        assert!(once.entries.iter().all(|e| ids.contains(&e.id)));
        assert!(balanced_sample(&m, 0, &mut SeededRng::new(1)).is_err());
    }

    #[test]
    fn template_word_stats() {
        let mut templates = BTreeMap::new();
        templates.insert(
            "X".to_string(),
            vec![
                InstructionTemplate::new("a", "one two three four", None),
                InstructionTemplate::new("b", "one two three four five six", None),
            ],
        );
        let s = stats_of(&[], &templates);
        assert_eq!(s.template_words, MeanStd { mean: 5.0, std: 1.0 });
        assert_eq!(s.templates_per_dataset, MeanStd { mean: 2.0, std: 0.0 });
    }

    #[test]
    fn check_catches_bad_counts() {
        let mut m = manifest(&[("A", Split::HeldIn, 3)]);
        m.counts.insert("A".into(), 4);
        assert!(m.check().is_err());
    }
}

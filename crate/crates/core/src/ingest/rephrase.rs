use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::Deserialize;

use crate::error::{Error, Result};

const BUILTIN: &str = include_str!("../../resources/rephrase.json");

/// Raw KIE label to readable query, per dataset. Entries keep file order.
#[derive(Debug, Clone, Deserialize)]
pub struct RephraseTable {
    pub version: u32,
    pub datasets: BTreeMap<String, Vec<(String, String)>>,
}

impl RephraseTable {
    pub fn builtin() -> &'static RephraseTable {
        static TABLE: OnceLock<RephraseTable> = OnceLock::new();
        TABLE.get_or_init(|| serde_json::from_str(BUILTIN).expect("embedded rephrase table parses"))
    }

    pub fn entries(&self, dataset_id: &str) -> Option<&[(String, String)]> {
        self.datasets.get(dataset_id).map(Vec::as_slice)
    }

    pub fn lookup(&self, dataset_id: &str, raw_label: &str) -> Result<&str> {
        let entries = self
            .entries(dataset_id)
            .ok_or_else(|| Error::UnknownDataset(dataset_id.to_string()))?;
        entries
            .iter()
            .find(|(raw, _)| raw == raw_label)
            .map(|(_, canon)| canon.as_str())
            .ok_or_else(|| Error::UnknownLabel {
                dataset: dataset_id.to_string(),
                label: raw_label.to_string(),
                valid: entries.iter().map(|(raw, _)| raw.clone()).collect(),
            })
    }
}

pub fn rephrase_query(dataset_id: &str, raw_label: &str) -> Result<String> {
    RephraseTable::builtin()
        .lookup(dataset_id, raw_label)
        .map(str::to_string)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn examples() {
        assert_eq!(rephrase_query("FUNSD", "header").unwrap(), "title");
        assert_eq!(
            rephrase_query("CORD", "menu.vatyn").unwrap(),
            "menu_whether_price_tax_includes"
        );
        match rephrase_query("CORD", "banana") {
            Err(Error::UnknownLabel { valid, .. }) => assert_eq!(valid.len(), 30),
            other => panic!("{other:?}"),
        }
        assert!(matches!(rephrase_query("DocVQA", "x"), Err(Error::UnknownDataset(_))));
    }

    #[test]
    fn injective_per_dataset() {
        let t = RephraseTable::builtin();
        assert_eq!(t.version, 1);
        for (ds, entries) in &t.datasets {
            let raws: HashSet<_> = entries.iter().map(|e| &e.0).collect();
            let canon: HashSet<_> = entries.iter().map(|e| &e.1).collect();
            assert_eq!(raws.len(), entries.len(), "{ds}");
            assert_eq!(canon.len(), entries.len(), "{ds}");
        }
        assert_eq!(t.entries("FUNSD").unwrap().len(), 3);
        assert_eq!(t.entries("CORD").unwrap().len(), 30);
    }
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::schema::{Regime, Split, TaskCluster};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub id: String,
    pub cluster: TaskCluster,
    pub split: Split,
    pub regime: Regime,
    pub metric: Metric,
}

impl DatasetInfo {
    pub fn new(id: &str, cluster: TaskCluster, split: Split, regime: Regime, metric: Metric) -> Self {
        Self {
            id: id.to_string(),
            cluster,
            split,
            regime,
            metric,
        }
    }

    fn held_in(id: &str, cluster: TaskCluster, metric: Metric) -> Self {
        Self::new(id, cluster, Split::HeldIn, Regime::None, metric)
    }

    fn held_out(id: &str, cluster: TaskCluster, regime: Regime, metric: Metric) -> Self {
        Self::new(id, cluster, Split::HeldOut, regime, metric)
    }
}

/// Known datasets keyed by id. Starts from the 30 source datasets; corpora
/// may register more.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    datasets: BTreeMap<String, DatasetInfo>,
}

impl Registry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn standard() -> Self {
        use Metric::*;
        use Regime::*;
        use TaskCluster::*;
        let mut r = Self::empty();
        let list = [
            DatasetInfo::held_in("DocILE", Kie, EntityF1),
            DatasetInfo::held_in("KLC", Kie, EntityF1),
            DatasetInfo::held_in("Deepform", Kie, EntityF1),
            DatasetInfo::held_out("FUNSD", Kie, CrossDataset, EntityF1),
            DatasetInfo::held_in("PWC", Kie, EntityF1),
            DatasetInfo::held_in("Wildreceipt", Kie, EntityF1),
            DatasetInfo::held_out("CORD", Kie, CrossDataset, EntityF1),
            DatasetInfo::held_in("SROIE", Kie, EntityF1),
            DatasetInfo::held_in("VisualMRC", SinglePageQa, RougeL),
            DatasetInfo::held_in("WebSRC", SinglePageQa, ExactMatch),
            DatasetInfo::held_in("OCRVQA", SinglePageQa, ExactMatch),
            DatasetInfo::held_in("DocVQA", SinglePageQa, Anls),
            DatasetInfo::held_in("HW-SQuAD", SinglePageQa, ExactMatch),
            DatasetInfo::held_in("TAT-DQA", SinglePageQaDiscrete, ExactMatch),
            DatasetInfo::held_in("WTQ", SinglePageQaDiscrete, Accuracy),
            DatasetInfo::held_in("IconQA", SinglePageQaVisual, Accuracy),
            DatasetInfo::held_in("AI2D", SinglePageQaVisual, Accuracy),
            DatasetInfo::held_in("ScienceQA", SinglePageQaVisual, Accuracy),
            DatasetInfo::held_in("TextbookQA", SinglePageQaVisual, Accuracy),
            DatasetInfo::held_out("InfographicVQA", SinglePageQaDiscreteVisual, CrossTask, Anls),
            DatasetInfo::held_out("ChartQA", SinglePageQaDiscreteVisual, CrossTask, RelaxedAccuracy),
            DatasetInfo::held_out("SlideVQA", MultiPageQa, CrossDomain, ExactMatch),
            DatasetInfo::held_out("DUDE", MultiPageQa, CrossDomain, Anls),
            DatasetInfo::held_out("TabFact", DocumentNli, CrossTask, Accuracy),
            DatasetInfo::held_in("LLaVAR", Dialogue, RougeL),
            DatasetInfo::held_in("RVL-CDIP", Classification, Accuracy),
            DatasetInfo::held_in("SciCap", Captioning, RougeL),
            DatasetInfo::held_in("Screen2Words", Captioning, RougeL),
            DatasetInfo::held_in("DocBank", Dla, ExactMatch),
            DatasetInfo::held_in("DocLaynet", Dla, ExactMatch),
        ];
        for d in list {
            r.register(d);
        }
        r
    }

    /// Adds or replaces a dataset.
    pub fn register(&mut self, info: DatasetInfo) {
        self.datasets.insert(info.id.clone(), info);
    }

    pub fn get(&self, id: &str) -> Result<&DatasetInfo> {
        self.datasets
            .get(id)
            .ok_or_else(|| Error::UnknownDataset(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.datasets.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &DatasetInfo> {
        self.datasets.values()
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }

    pub fn assign_split(&self, id: &str) -> Result<(Split, Regime)> {
        self.get(id).map(|d| (d.split, d.regime))
    }
}

/// Split and regime of a dataset in the standard registry.
pub fn assign_split(dataset_id: &str) -> Result<(Split, Regime)> {
    Registry::standard().assign_split(dataset_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(assign_split("FUNSD").unwrap(), (Split::HeldOut, Regime::CrossDataset));
        assert_eq!(assign_split("DocVQA").unwrap(), (Split::HeldIn, Regime::None));
        assert_eq!(assign_split("SlideVQA").unwrap(), (Split::HeldOut, Regime::CrossDomain));
        assert!(matches!(assign_split("MNIST"), Err(Error::UnknownDataset(_))));
    }

    #[test]
    fn held_in_have_no_regime() {
        for d in Registry::standard().iter() {
            assert_eq!(d.split == Split::HeldIn, d.regime == Regime::None, "{}", d.id);
        }
    }

    #[test]
    fn user_registration() {
        let mut r = Registry::standard();
        r.register(DatasetInfo::new(
            "synth_qa",
            TaskCluster::SinglePageQa,
            Split::HeldIn,
            Regime::None,
            Metric::Anls,
        ));
        assert_eq!(r.len(), 31);
        assert_eq!(r.assign_split("synth_qa").unwrap().0, Split::HeldIn);
    }
}

//! Modality graphs, paired samples, rater labels and patient-disjoint splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The two stain roles. `A` is the 13-class (H&E-like) modality, `B` the
/// 5-class (trichrome-like) one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    A,
    B,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::A => 0,
            Modality::B => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::A),
            1 => Some(Modality::B),
            _ => None,
        }
    }

    /// Segmentation class count of the heatmaps for this modality.
    pub fn classes(self) -> usize {
        match self {
            Modality::A => 13,
            Modality::B => 5,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Modality::A => Modality::B,
            Modality::B => Modality::A,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Modality::A => "A",
            Modality::B => "B",
        }
    }
}

/// Ordinal endpoints with their class counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Endpoint {
    #[serde(alias = "fibrosis")]
    Fibrosis,
    #[serde(alias = "ballooning")]
    Ballooning,
    #[serde(alias = "lobular_inflammation")]
    LobularInflammation,
    #[serde(alias = "steatosis")]
    Steatosis,
}

impl Endpoint {
    pub const ALL: [Endpoint; 4] = [
        Endpoint::Ballooning,
        Endpoint::LobularInflammation,
        Endpoint::Steatosis,
        Endpoint::Fibrosis,
    ];

    pub fn num_classes(self) -> usize {
        match self {
            Endpoint::Fibrosis => 5,
            Endpoint::Ballooning => 3,
            Endpoint::LobularInflammation => 4,
            Endpoint::Steatosis => 4,
        }
    }

    /// Development-set bin counts of slide-level scores.
    pub fn dev_bin_counts(self) -> &'static [f64] {
        match self {
            Endpoint::Fibrosis => &[239.0, 379.0, 536.0, 1575.0, 2012.0],
            Endpoint::Ballooning => &[990.0, 1301.0, 2878.0],
            Endpoint::LobularInflammation => &[181.0, 1433.0, 1840.0, 1714.0],
            Endpoint::Steatosis => &[580.0, 3783.0, 636.0, 184.0],
        }
    }

    /// Held-out test-set bin counts of slide-level scores.
    pub fn test_bin_counts(self) -> &'static [f64] {
        match self {
            Endpoint::Fibrosis => &[81.0, 402.0, 466.0, 789.0, 95.0],
            Endpoint::Ballooning => &[319.0, 727.0, 793.0],
            Endpoint::LobularInflammation => &[98.0, 1011.0, 664.0, 67.0],
            Endpoint::Steatosis => &[81.0, 580.0, 626.0, 553.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Endpoint::Fibrosis => "Fibrosis",
            Endpoint::Ballooning => "Ballooning",
            Endpoint::LobularInflammation => "LobularInflammation",
            Endpoint::Steatosis => "Steatosis",
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase();
        match norm.as_str() {
            "fibrosis" => Ok(Endpoint::Fibrosis),
            "ballooning" => Ok(Endpoint::Ballooning),
            "lobularinflammation" => Ok(Endpoint::LobularInflammation),
            "steatosis" => Ok(Endpoint::Steatosis),
            _ => Err(Error::Labels(format!("unknown endpoint `{s}`"))),
        }
    }
}

/// Node-attributed directed graph for one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalGraph {
    pub modality: Modality,
    /// `N×d` node features.
    pub features: Tensor,
    /// Directed `(src, dst)` pairs.
    pub edges: Vec<(u32, u32)>,
    /// Spatial node positions in pixel units.
    pub centroids: Vec<[f64; 2]>,
    /// Out-degree every node was wired with.
    pub k: u32,
}

impl ModalGraph {
    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Checks every structural invariant, naming the first one that fails.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.features.shape().len() != 2 {
            return Err(Error::Validation("features must be a matrix".into()));
        }
        if self.centroids.len() != n {
            return Err(Error::Validation(format!(
                "centroid count {} != node count {n}",
                self.centroids.len()
            )));
        }
        if !self.features.is_finite() {
            return Err(Error::Validation("node features contain NaN or infinity".into()));
        }
        let mut out_degree = vec![0u32; n];
        for &(s, d) in &self.edges {
            if s as usize >= n || d as usize >= n {
                return Err(Error::Validation(format!("edge index out of range: ({s}, {d}) with {n} nodes")));
            }
            if s == d {
                return Err(Error::Validation(format!("self-loop on node {s}")));
            }
            out_degree[s as usize] += 1;
        }
        if let Some((node, &deg)) = out_degree.iter().enumerate().find(|(_, &d)| d != self.k) {
            return Err(Error::Validation(format!(
                "out-degree of node {node} is {deg}, expected k = {}",
                self.k
            )));
        }
        Ok(())
    }

    /// Relabels nodes: new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> ModalGraph {
        let n = self.num_nodes();
        let mut inverse = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let rows: Vec<Vec<f64>> = perm.iter().map(|&old| self.features.row_slice(old).to_vec()).collect();
        let features = if n == 0 {
            self.features.clone()
        } else {
            Tensor::from_rows(&rows).expect("uniform rows")
        };
        ModalGraph {
            modality: self.modality,
            features,
            edges: self
                .edges
                .iter()
                .map(|&(s, d)| (inverse[s as usize] as u32, inverse[d as usize] as u32))
                .collect(),
            centroids: perm.iter().map(|&old| self.centroids[old]).collect(),
            k: self.k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaterLabel {
    pub rater_id: String,
    pub endpoint: Endpoint,
    pub score: u8,
}

impl RaterLabel {
    pub fn validate(&self) -> Result<()> {
        if usize::from(self.score) >= self.endpoint.num_classes() {
            return Err(Error::Labels(format!(
                "score {} outside 0..{} for {}",
                self.score,
                self.endpoint.num_classes(),
                self.endpoint
            )));
        }
        Ok(())
    }
}

/// Identity of one paired sample.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleKey {
    pub patient_id: String,
    pub timepoint: u32,
}

impl SampleKey {
    pub fn new(patient_id: impl Into<String>, timepoint: u32) -> Self {
        Self {
            patient_id: patient_id.into(),
            timepoint,
        }
    }

    /// Stable string id, also used as the file stem on disk.
    pub fn id(&self) -> String {
        format!("{}_t{}", self.patient_id, self.timepoint)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub key: SampleKey,
    pub graph_a: ModalGraph,
    pub graph_b: ModalGraph,
    pub labels: Vec<RaterLabel>,
}

impl PairedSample {
    pub fn id(&self) -> String {
        self.key.id()
    }

    pub fn validate(&self) -> Result<()> {
        if self.graph_a.modality == self.graph_b.modality {
            return Err(Error::Validation(format!(
                "sample {} pairs two graphs of modality {:?}",
                self.id(),
                self.graph_a.modality
            )));
        }
        self.graph_a.validate()?;
        self.graph_b.validate()?;
        self.labels.iter().try_for_each(RaterLabel::validate)
    }

    pub fn labels_for(&self, endpoint: Endpoint) -> impl Iterator<Item = &RaterLabel> {
        self.labels.iter().filter(move |l| l.endpoint == endpoint)
    }

    /// Graph of the requested modality.
    pub fn graph(&self, modality: Modality) -> &ModalGraph {
        if self.graph_a.modality == modality {
            &self.graph_a
        } else {
            &self.graph_b
        }
    }
}

/// Sample ids per split.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    /// Checks that the id sets and the patient sets behind them are pairwise
    /// disjoint. `patient_of` maps a sample id to its patient.
    pub fn validate(&self, patient_of: impl Fn(&str) -> Option<String>) -> Result<()> {
        let parts = [("train", &self.train), ("val", &self.val), ("test", &self.test)];
        let mut id_owner: BTreeMap<&str, &str> = BTreeMap::new();
        let mut patient_owner: BTreeMap<String, &str> = BTreeMap::new();
        for (name, ids) in parts {
            for id in ids {
                if let Some(prev) = id_owner.insert(id, name) {
                    return Err(Error::Validation(format!("sample {id} appears in both {prev} and {name}")));
                }
                let patient =
                    patient_of(id).ok_or_else(|| Error::Validation(format!("unknown sample id {id}")))?;
                if let Some(prev) = patient_owner.get(&patient) {
                    if *prev != name {
                        return Err(Error::Validation(format!(
                            "patient {patient} appears in both {prev} and {name}"
                        )));
                    }
                }
                patient_owner.insert(patient, name);
            }
        }
        Ok(())
    }
}

/// Partitions patients (not samples) into train/val/test.
///
/// Patient counts per split come from largest-remainder rounding of
/// `fractions`, so each split is within one patient of its target; every
/// split gets at least one patient. Deterministic for a fixed seed.
pub fn split_by_patient(keys: &[SampleKey], fractions: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|&f| !(f > 0.0)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "split fractions must be positive and sum to 1, got {fr:?}"
        )));
    }
    let patients: Vec<&str> = keys
        .iter()
        .map(|k| k.patient_id.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let p = patients.len();
    if p < 3 {
        return Err(Error::Contract(format!("need at least 3 distinct patients to split, got {p}")));
    }

    let ideal: Vec<f64> = fr.iter().map(|f| f * p as f64).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut remaining = p - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[i] += 1;
        remaining -= 1;
    }
    for i in 0..3 {
        if counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            counts[donor] -= 1;
            counts[i] = 1;
        }
    }

    let mut shuffled = patients.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let mut assignment: BTreeMap<&str, usize> = BTreeMap::new();
    let mut cursor = 0;
    for (split, &count) in counts.iter().enumerate() {
        for &pid in &shuffled[cursor..cursor + count] {
            assignment.insert(pid, split);
        }
        cursor += count;
    }

    let mut out = DatasetSplit::default();
    let mut sorted: Vec<&SampleKey> = keys.iter().collect();
    sorted.sort();
    for key in sorted {
        let bucket = match assignment[key.patient_id.as_str()] {
            0 => &mut out.train,
            1 => &mut out.val,
            _ => &mut out.test,
        };
        bucket.push(key.id());
    }
    Ok(out)
}

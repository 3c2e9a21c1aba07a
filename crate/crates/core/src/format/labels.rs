//! Rater label table: `patient_id,timepoint,rater_id,endpoint,score`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Endpoint, RaterLabel, SampleKey};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub patient_id: String,
    pub timepoint: u32,
    pub rater_id: String,
    pub endpoint: String,
    pub score: u8,
}

pub type LabelTable = BTreeMap<SampleKey, Vec<RaterLabel>>;

pub fn to_rows(table: &LabelTable) -> Vec<LabelRow> {
    table
        .iter()
        .flat_map(|(key, labels)| {
            labels.iter().map(move |l| LabelRow {
                patient_id: key.patient_id.clone(),
                timepoint: key.timepoint,
                rater_id: l.rater_id.clone(),
                endpoint: l.endpoint.name().to_string(),
                score: l.score,
            })
        })
        .collect()
}

pub fn encode(table: &LabelTable) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in to_rows(table) {
        w.serialize(row).map_err(|e| Error::Labels(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Labels(e.to_string()))
}

pub fn decode(bytes: &[u8]) -> Result<LabelTable> {
    let mut r = csv::Reader::from_reader(bytes);
    let mut table = LabelTable::new();
    for (i, row) in r.deserialize::<LabelRow>().enumerate() {
        let row = row.map_err(|e| Error::Labels(format!("row {}: {e}", i + 1)))?;
        let label = RaterLabel {
            rater_id: row.rater_id,
            endpoint: row.endpoint.parse()?,
            score: row.score,
        };
        label
            .validate()
            .map_err(|e| Error::Labels(format!("row {}: {e}", i + 1)))?;
        table
            .entry(SampleKey::new(row.patient_id, row.timepoint))
            .or_default()
            .push(label);
    }
    Ok(table)
}

pub fn write_labels(table: &LabelTable, path: &Path) -> Result<()> {
    super::write_file(path, &encode(table)?)
}

pub fn read_labels(path: &Path) -> Result<LabelTable> {
    decode(&super::read_file(path)?)
}

/// Every distinct rater id in the table, sorted.
pub fn raters(table: &LabelTable, endpoint: Endpoint) -> Vec<String> {
    let mut ids: Vec<String> = table
        .values()
        .flatten()
        .filter(|l| l.endpoint == endpoint)
        .map(|l| l.rater_id.clone())
        .collect();
    ids.sort();
    ids.dedup();
    ids
}

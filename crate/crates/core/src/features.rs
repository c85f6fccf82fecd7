//! Feature vectors of dissimilarities to a fixed reference set.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::dissim::{DissimRecord, N_DISSIM};
use crate::error::{Error, Result};
use crate::seeds::rng_for;
use crate::surface::{Provenance, SurfaceDataset};

/// Dissimilarity indices (1-based) of the reduced feature set.
pub const REDUCED: [usize; 3] = [1, 2, 9];
pub const ALL: [usize; N_DISSIM] = [1, 2, 3, 4, 5, 6, 7, 8, 9];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SelectionRule {
    RandomFromClass { label: String, originals_only: bool },
    AllTraining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub ids: Vec<String>,
    pub selection_seed: u64,
    pub selection_rule: SelectionRule,
}

/// Draws `r` reference ids. Chosen ids keep dataset order.
pub fn select_reference(dataset: &SurfaceDataset, rule: SelectionRule, r: usize, seed: u64) -> Result<ReferenceSet> {
    let pool: Vec<&str> = match &rule {
        SelectionRule::RandomFromClass { label, originals_only } => dataset
            .entries
            .iter()
            .filter(|e| &e.label == label && (!originals_only || e.provenance == Provenance::Original))
            .map(|e| e.surface.id())
            .collect(),
        SelectionRule::AllTraining => dataset.entries.iter().map(|e| e.surface.id()).collect(),
    };
    if r == 0 || pool.len() < r {
        return Err(Error::Insufficient(format!(
            "reference size {r} from a pool of {}",
            pool.len()
        )));
    }
    let tag = match &rule {
        SelectionRule::RandomFromClass { label, .. } => label.as_str(),
        SelectionRule::AllTraining => "*",
    };
    let ids = if r == pool.len() {
        pool.iter().map(|s| s.to_string()).collect()
    } else {
        let mut rng = rng_for(seed, tag, "reference");
        let mut idx = sample(&mut rng, pool.len(), r).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i].to_string()).collect()
    };
    Ok(ReferenceSet {
        ids,
        selection_seed: seed,
        selection_rule: rule,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Column {
    /// 1-based dissimilarity index.
    pub dissim: usize,
    /// Position in the reference set.
    pub reference: usize,
}

impl Column {
    pub fn name(&self) -> String {
        format!("D{}@ref{}", self.dissim, self.reference)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub row_ids: Vec<String>,
    pub labels: Vec<String>,
    pub columns: Vec<Column>,
    /// Row-major, `NaN` where a record is missing or did not converge.
    pub values: Vec<Vec<f64>>,
    pub complete: Vec<bool>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    /// The complete rows only.
    pub fn complete_rows(&self) -> FeatureMatrix {
        let keep: Vec<usize> = (0..self.n_rows()).filter(|&i| self.complete[i]).collect();
        let dropped = self.n_rows() - keep.len();
        if dropped > 0 {
            log::info!("dropping {dropped} incomplete feature rows");
        }
        FeatureMatrix {
            row_ids: keep.iter().map(|&i| self.row_ids[i].clone()).collect(),
            labels: keep.iter().map(|&i| self.labels[i].clone()).collect(),
            columns: self.columns.clone(),
            values: keep.iter().map(|&i| self.values[i].clone()).collect(),
            complete: vec![true; keep.len()],
        }
    }

    /// Column indices grouped by dissimilarity index, in `dissims` order.
    pub fn groups_by_dissim(&self) -> Vec<(usize, Vec<usize>)> {
        let mut order: Vec<usize> = Vec::new();
        let mut map: HashMap<usize, Vec<usize>> = HashMap::new();
        for (k, c) in self.columns.iter().enumerate() {
            if !map.contains_key(&c.dissim) {
                order.push(c.dissim);
            }
            map.entry(c.dissim).or_default().push(k);
        }
        order.into_iter().map(|d| (d, map.remove(&d).unwrap_or_default())).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,label");
        for c in &self.columns {
            let _ = write!(s, ",{}", c.name());
        }
        s.push('\n');
        for ((id, label), row) in self.row_ids.iter().zip(&self.labels).zip(&self.values) {
            let _ = write!(s, "{id},{label}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::parse(path, 1, "empty feature file"))?;
        let mut columns = Vec::new();
        for name in header.split(',').skip(2) {
            let parsed = name
                .strip_prefix('D')
                .and_then(|r| r.split_once("@ref"))
                .and_then(|(d, j)| Some(Column { dissim: d.parse().ok()?, reference: j.parse().ok()? }));
            columns.push(parsed.ok_or_else(|| Error::parse(path, 1, format!("bad column {name:?}")))?);
        }
        let mut m = FeatureMatrix {
            row_ids: Vec::new(),
            labels: Vec::new(),
            columns,
            values: Vec::new(),
            complete: Vec::new(),
        };
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 2 + m.columns.len() {
                return Err(Error::parse(path, i + 1, "column count mismatch"));
            }
            let row = cols[2..]
                .iter()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            m.complete.push(row.iter().all(|v| v.is_finite()));
            m.row_ids.push(cols[0].to_string());
            m.labels.push(cols[1].to_string());
            m.values.push(row);
        }
        Ok(m)
    }
}

/// `value(S, (i, j)) = D_i(S, REF_j)` for every dataset entry, columns
/// ordered by dissimilarity index first. In strict mode a missing or
/// unconverged pair is an error; otherwise the row is marked incomplete.
pub fn build_features(
    dataset: &SurfaceDataset,
    reference: &ReferenceSet,
    records: &[DissimRecord],
    dissims: &[usize],
    strict: bool,
) -> Result<FeatureMatrix> {
    if dissims.is_empty() || dissims.iter().any(|d| !(1..=N_DISSIM).contains(d)) {
        return Err(Error::InvalidArgument(format!("bad dissimilarity selection {dissims:?}")));
    }
    let by_pair: HashMap<(&str, &str), &DissimRecord> = records
        .iter()
        .map(|r| ((r.source_id.as_str(), r.target_id.as_str()), r))
        .collect();
    let columns: Vec<Column> = dissims
        .iter()
        .flat_map(|&d| (0..reference.ids.len()).map(move |j| Column { dissim: d, reference: j }))
        .collect();
    let mut m = FeatureMatrix {
        row_ids: Vec::new(),
        labels: Vec::new(),
        columns,
        values: Vec::new(),
        complete: Vec::new(),
    };
    for e in &dataset.entries {
        let id = e.surface.id();
        let mut row = Vec::with_capacity(m.columns.len());
        let mut complete = true;
        for c in &m.columns {
            let rid = reference.ids[c.reference].as_str();
            match by_pair.get(&(id, rid)) {
                Some(r) if r.converged => row.push(r.d[c.dissim - 1]),
                _ if strict => return Err(Error::MissingPair(id.to_string(), rid.to_string())),
                _ => {
                    row.push(f64::NAN);
                    complete = false;
                }
            }
        }
        m.row_ids.push(id.to_string());
        m.labels.push(e.label.clone());
        m.values.push(row);
        m.complete.push(complete);
    }
    Ok(m)
}

/// Every `(entry, reference)` pair needed for the feature matrix.
pub fn feature_pairs(dataset: &SurfaceDataset, reference: &ReferenceSet) -> Vec<(String, String)> {
    dataset
        .entries
        .iter()
        .flat_map(|e| reference.ids.iter().map(move |r| (e.surface.id().to_string(), r.clone())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthParams, CLOSED};

    fn small() -> SurfaceDataset {
        generate(&SynthParams {
            n_closed: 6,
            n_gapped: 3,
            ring_size: 8,
            ring_count: 3,
            ..Default::default()
        })
        .unwrap()
    }

    fn rule() -> SelectionRule {
        SelectionRule::RandomFromClass {
            label: CLOSED.into(),
            originals_only: true,
        }
    }

    #[test]
    fn reference_selection() {
        let ds = small();
        let a = select_reference(&ds, rule(), 3, 1).unwrap();
        assert_eq!(a, select_reference(&ds, rule(), 3, 1).unwrap());
        assert_eq!(select_reference(&ds, rule(), 6, 1).unwrap().ids.len(), 6);
        assert!(select_reference(&ds, rule(), 7, 1).is_err());
        let differ = (2..20).any(|s| select_reference(&ds, rule(), 3, s).unwrap().ids != a.ids);
        assert!(differ);
    }

    #[test]
    fn matrix_layout_and_round_trip() {
        let ds = small();
        let reference = select_reference(&ds, rule(), 2, 5).unwrap();
        let mut records = Vec::new();
        for (s, t) in feature_pairs(&ds, &reference) {
            let v = s.len() as f64 + if t == reference.ids[0] { 0.0 } else { 0.5 };
            records.push(DissimRecord {
                source_id: s,
                target_id: t,
                d: std::array::from_fn(|i| v + i as f64),
                kin: 0.0,
                converged: true,
            });
        }
        records.pop();
        let m = build_features(&ds, &reference, &records, &[1, 9], false).unwrap();
        assert_eq!(m.n_cols(), 4);
        assert_eq!(m.columns[1], Column { dissim: 1, reference: 1 });
        assert_eq!(m.columns[2], Column { dissim: 9, reference: 0 });
        let s0 = ds.entries[0].surface.id().len() as f64;
        assert_eq!(m.values[0], vec![s0, s0 + 0.5, s0 + 8.0, s0 + 8.5]);
        assert!(!m.complete[m.n_rows() - 1]);
        assert_eq!(m.complete_rows().n_rows(), m.n_rows() - 1);
        assert!(build_features(&ds, &reference, &records, &[1], true).is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.csv");
        m.save(&p).unwrap();
        let back = FeatureMatrix::load(&p).unwrap();
        assert_eq!(back.columns, m.columns);
        assert_eq!(back.complete, m.complete);
        assert_eq!(back.values[0], m.values[0]);
    }
}

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{MasqError, Result};
use crate::numerics::Matrix;
use crate::smoothing::{collect_channel_stats, ChannelStats};

/// Name of an input modality. `text` is the base modality whose smoothed
/// weight is the single stored quantized matrix.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModalityId(String);

impl ModalityId {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        let valid = !name.is_empty()
            && name
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-');
        if !valid {
            return Err(MasqError::invalid(
                "ModalityId::new",
                format!("`{name}` must be non-empty lowercase ascii"),
            ));
        }
        Ok(Self(name))
    }

    pub fn text() -> Self {
        Self("text".into())
    }

    pub fn vision() -> Self {
        Self("vision".into())
    }

    pub fn audio() -> Self {
        Self("audio".into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_text(&self) -> bool {
        self.0 == "text"
    }
}

impl TryFrom<String> for ModalityId {
    type Error = MasqError;

    fn try_from(s: String) -> Result<Self> {
        Self::new(s)
    }
}

impl From<ModalityId> for String {
    fn from(m: ModalityId) -> Self {
        m.0
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Modality-tagged activation batches feeding one linear layer, with cached
/// per-channel ranges `R^m_i = max_t |x^m_{t,i}|`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    d_in: usize,
    batches: BTreeMap<ModalityId, Vec<Matrix>>,
    ranges: BTreeMap<ModalityId, Vec<f64>>,
}

impl CalibrationSet {
    pub fn new(d_in: usize) -> Self {
        Self {
            d_in,
            batches: BTreeMap::new(),
            ranges: BTreeMap::new(),
        }
    }

    pub fn from_batches(d_in: usize, batches: BTreeMap<ModalityId, Vec<Matrix>>) -> Result<Self> {
        let mut set = Self::new(d_in);
        for (m, list) in batches {
            set.batches.entry(m.clone()).or_default();
            set.ranges.entry(m.clone()).or_insert_with(|| vec![0.0; d_in]);
            for b in list {
                set.push(m.clone(), b)?;
            }
        }
        Ok(set)
    }

    pub fn push(&mut self, modality: ModalityId, batch: Matrix) -> Result<()> {
        if batch.cols() != self.d_in {
            return Err(MasqError::dims(
                "CalibrationSet::push",
                format!("batch has {} channels, layer expects {}", batch.cols(), self.d_in),
            ));
        }
        let range = self
            .ranges
            .entry(modality.clone())
            .or_insert_with(|| vec![0.0; self.d_in]);
        for row in batch.row_iter() {
            for (r, v) in range.iter_mut().zip(row) {
                *r = r.max(v.abs());
            }
        }
        self.batches.entry(modality).or_default().push(batch);
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn modalities(&self) -> impl Iterator<Item = &ModalityId> {
        self.batches.keys()
    }

    pub fn contains(&self, m: &ModalityId) -> bool {
        self.batches.contains_key(m)
    }

    pub fn batches(&self, m: &ModalityId) -> Result<&[Matrix]> {
        let list = self
            .batches
            .get(m)
            .ok_or_else(|| MasqError::UnknownModality(m.to_string()))?;
        if list.is_empty() {
            return Err(MasqError::EmptyModality(m.to_string()));
        }
        Ok(list)
    }

    /// All batches of one modality stacked row-wise.
    pub fn stacked(&self, m: &ModalityId) -> Result<Matrix> {
        let list = self.batches(m)?;
        Matrix::vstack(&list.iter().collect::<Vec<_>>())
    }

    pub fn range(&self, m: &ModalityId) -> Result<&[f64]> {
        self.batches(m)?;
        Ok(&self.ranges[m])
    }

    pub fn token_count(&self, m: &ModalityId) -> usize {
        self.batches
            .get(m)
            .map_or(0, |l| l.iter().map(Matrix::rows).sum())
    }

    pub fn channel_stats(&self, m: &ModalityId, w: &Matrix) -> Result<ChannelStats> {
        collect_channel_stats(&self.stacked(m)?, w)
    }
}

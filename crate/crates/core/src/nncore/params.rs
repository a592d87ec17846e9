//! Named parameter and gradient containers.
//!
//! A [`ParameterSet`] is an ordered list of named tensors. Every tensor carries
//! an [`EntryKind`] so aggregation can tell batch-norm state apart from dense
//! weights, and so the optimizer knows which tensors are trainable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntryKind {
    DenseWeight,
    DenseBias,
    BnGain,
    BnBias,
    BnRunningMean,
    BnRunningVar,
}

impl EntryKind {
    pub fn is_bn(self) -> bool {
        matches!(
            self,
            EntryKind::BnGain | EntryKind::BnBias | EntryKind::BnRunningMean | EntryKind::BnRunningVar
        )
    }

    /// Running statistics are state, not parameters: they receive no gradient.
    pub fn is_trainable(self) -> bool {
        !matches!(self, EntryKind::BnRunningMean | EntryKind::BnRunningVar)
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            EntryKind::DenseWeight => 0,
            EntryKind::DenseBias => 1,
            EntryKind::BnGain => 2,
            EntryKind::BnBias => 3,
            EntryKind::BnRunningMean => 4,
            EntryKind::BnRunningVar => 5,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => EntryKind::DenseWeight,
            1 => EntryKind::DenseBias,
            2 => EntryKind::BnGain,
            3 => EntryKind::BnBias,
            4 => EntryKind::BnRunningMean,
            5 => EntryKind::BnRunningVar,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    /// Row-major values.
    pub data: Vec<f64>,
}

impl ParamEntry {
    pub fn new(name: impl Into<String>, kind: EntryKind, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { name: name.into(), kind, shape, data }
    }

    pub fn is_bn(&self) -> bool {
        self.kind.is_bn()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    pub entries: Vec<ParamEntry>,
}

impl ParameterSet {
    pub fn new(entries: Vec<ParamEntry>) -> Self {
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.iter_mut().find(|e| e.name == name)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(ParamEntry::len).sum()
    }

    pub fn has_bn(&self) -> bool {
        self.entries.iter().any(ParamEntry::is_bn)
    }

    /// Same names, kinds and shapes in the same order.
    pub fn same_structure(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.kind == b.kind && a.shape == b.shape)
    }

    pub fn check_structure(&self, other: &ParameterSet) -> Result<()> {
        if self.same_structure(other) {
            Ok(())
        } else {
            Err(Error::Structure(format!(
                "parameter sets differ: [{}] vs [{}]",
                self.describe(),
                other.describe()
            )))
        }
    }

    fn describe(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}{:?}", e.name, e.shape))
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Copies of every batch-norm entry, in order.
    pub fn bn_entries(&self) -> Vec<ParamEntry> {
        self.entries.iter().filter(|e| e.is_bn()).cloned().collect()
    }

    /// Overwrite batch-norm entries by name with the supplied ones.
    pub fn splice_bn(&mut self, bn: &[ParamEntry]) -> Result<()> {
        for src in bn {
            let dst = self
                .get_mut(&src.name)
                .ok_or_else(|| Error::Structure(format!("no entry named `{}`", src.name)))?;
            if !dst.is_bn() || dst.shape != src.shape {
                return Err(Error::Structure(format!("cannot splice `{}`", src.name)));
            }
            dst.data.clone_from(&src.data);
        }
        Ok(())
    }

    /// Zero-valued gradient container matching the trainable entries.
    pub fn zero_grad(&self) -> GradientSet {
        GradientSet {
            entries: self
                .entries
                .iter()
                .filter(|e| e.kind.is_trainable())
                .map(|e| GradEntry { name: e.name.clone(), shape: e.shape.clone(), data: vec![0.0; e.len()] })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Gradients for every trainable tensor of a [`ParameterSet`], in entry order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientSet {
    pub entries: Vec<GradEntry>,
}

impl GradientSet {
    pub fn get(&self, name: &str) -> Option<&GradEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.entries.iter().flat_map(|e| e.data.iter())
    }

    /// Global L2 norm over all entries.
    pub fn l2_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for e in &mut self.entries {
            for v in &mut e.data {
                *v *= factor;
            }
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Structure("gradient sets have different entry counts".into()));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Structure(format!("gradient entry `{}` vs `{}`", a.name, b.name)));
            }
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }
}

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Record, SiloDataset};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

pub const DEFAULT_VAL_FRACTION: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub test_year: i32,
    pub val_fraction: f64,
}

impl SplitPlan {
    pub fn new(test_year: i32) -> Self {
        Self { test_year, val_fraction: DEFAULT_VAL_FRACTION }
    }
}

/// Year-forward split: the test set is the test year, train and validation
/// come from strictly earlier years. Records from later years are left out.
pub fn split(ds: &SiloDataset, plan: &SplitPlan, seed: u64) -> Result<(SiloDataset, SiloDataset, SiloDataset)> {
    if !(plan.val_fraction > 0.0 && plan.val_fraction < 1.0) {
        return Err(Error::InvalidInput(format!("val_fraction {} outside (0, 1)", plan.val_fraction)));
    }
    let mut test = ds.empty_like();
    let mut earlier: Vec<Record> = Vec::new();
    for r in &ds.records {
        if r.year == plan.test_year {
            test.records.push(r.clone());
        } else if r.year < plan.test_year {
            earlier.push(r.clone());
        }
    }
    if test.records.is_empty() {
        return Err(Error::NoTestRecords { silo: ds.silo_id.clone(), year: plan.test_year });
    }
    if earlier.is_empty() {
        return Err(Error::EmptyData(format!(
            "silo `{}` has no records before {}",
            ds.silo_id, plan.test_year
        )));
    }
    let mut r = rng::substream(seed, &[tag::SPLIT, rng::hash_str(&ds.silo_id), plan.test_year as u64]);
    earlier.shuffle(&mut r);
    let n_val = (plan.val_fraction * earlier.len() as f64).floor() as usize;
    let mut val = ds.empty_like();
    let mut train = ds.empty_like();
    train.records = earlier.split_off(n_val);
    val.records = earlier;
    Ok((train, val, test))
}

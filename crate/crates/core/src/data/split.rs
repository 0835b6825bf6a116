use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SegSample, SplitIds};
use crate::error::{Error, Result};

/// How to partition a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    /// Fraction of the training part whose masks are kept.
    pub labeled_ratio: f64,
    pub seed: u64,
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            labeled_ratio: 0.2,
            seed: 0,
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.labeled_ratio > 0.0 && self.labeled_ratio <= 1.0) {
            return Err(Error::Invalid(format!(
                "labeled_ratio {} outside (0, 1]",
                self.labeled_ratio
            )));
        }
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&p| !(0.0..=1.0).contains(&p))
            || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Invalid(format!(
                "train/val/test proportions {parts:?} must be in [0, 1] and sum to 1"
            )));
        }
        if self.train <= 0.0 {
            return Err(Error::Invalid("train proportion must be positive".into()));
        }
        Ok(())
    }
}

/// A partitioned dataset. Unlabeled samples carry no mask.
#[derive(Clone, Debug, Default)]
pub struct Split {
    pub labeled: Vec<SegSample>,
    pub unlabeled: Vec<SegSample>,
    pub val: Vec<SegSample>,
    pub test: Vec<SegSample>,
}

impl Split {
    pub fn ids(&self) -> SplitIds {
        let ids = |v: &[SegSample]| v.iter().map(|s| s.id.clone()).collect();
        SplitIds {
            labeled: ids(&self.labeled),
            unlabeled: ids(&self.unlabeled),
            val: ids(&self.val),
            test: ids(&self.test),
        }
    }
}

/// Seeded shuffle then partition.
///
/// Samples without a mask can only be unlabeled and go straight to that pool;
/// the masked ones are divided into train/val/test, and the first
/// `round(labeled_ratio * n_train)` training samples keep their masks.
pub fn split(samples: &[SegSample], spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let (masked, unmasked): (Vec<&SegSample>, Vec<&SegSample>) =
        samples.iter().partition(|s| s.mask.is_some());
    let n = masked.len();
    let n_val = (n as f64 * spec.val).round() as usize;
    let n_test = (n as f64 * spec.test).round() as usize;
    let n_train = n.saturating_sub(n_val + n_test);
    let n_labeled = (n_train as f64 * spec.labeled_ratio).round() as usize;
    if n_labeled == 0
        || (spec.val > 0.0 && n_val == 0)
        || (spec.test > 0.0 && n_test == 0)
        || n_val + n_test >= n
    {
        return Err(Error::Invalid(format!(
            "{n} masked samples cannot fill train/val/test = {}/{}/{} with labeled ratio {}",
            spec.train, spec.val, spec.test, spec.labeled_ratio
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let pick = |range: std::ops::Range<usize>| -> Vec<&SegSample> {
        order[range].iter().map(|&i| masked[i]).collect()
    };
    let train = pick(0..n_train);
    let mut out = Split {
        labeled: train[..n_labeled].iter().map(|s| (*s).clone()).collect(),
        unlabeled: train[n_labeled..].iter().map(|s| s.withhold_mask()).collect(),
        val: pick(n_train..n_train + n_val).into_iter().cloned().collect(),
        test: pick(n_train + n_val..n).into_iter().cloned().collect(),
    };
    out.unlabeled.extend(unmasked.iter().map(|s| s.withhold_mask()));
    for s in out.labeled.iter_mut().chain(&mut out.val).chain(&mut out.test) {
        s.is_labeled = true;
    }
    Ok(out)
}

/// Partition following explicit id lists. Masks of unlabeled ids are dropped.
pub fn split_from_ids(samples: &[SegSample], ids: &SplitIds) -> Result<Split> {
    let by_id: HashMap<&str, &SegSample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let take = |list: &[String], keep_mask: bool| -> Result<Vec<SegSample>> {
        list.iter()
            .map(|id| {
                let s = by_id
                    .get(id.as_str())
                    .ok_or_else(|| Error::Invalid(format!("split lists unknown id `{id}`")))?;
                if !keep_mask {
                    return Ok(s.withhold_mask());
                }
                if s.mask.is_none() {
                    return Err(Error::Invalid(format!("`{id}` needs a mask for its split")));
                }
                let mut s = (*s).clone();
                s.is_labeled = true;
                Ok(s)
            })
            .collect()
    };
    let out = Split {
        labeled: take(&ids.labeled, true)?,
        unlabeled: take(&ids.unlabeled, false)?,
        val: take(&ids.val, true)?,
        test: take(&ids.test, true)?,
    };
    if out.labeled.is_empty() {
        return Err(Error::Invalid("split has no labeled samples".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Raster;

    fn samples(n: usize) -> Vec<SegSample> {
        (0..n)
            .map(|i| SegSample {
                id: format!("s{i:03}"),
                image: Raster::filled(2, 2, 3, i as f32 / n as f32),
                mask: Some(Raster::filled(2, 2, 1, 1.0)),
                is_labeled: true,
            })
            .collect()
    }

    fn train_only(ratio: f64) -> SplitSpec {
        SplitSpec {
            labeled_ratio: ratio,
            seed: 3,
            train: 1.0,
            val: 0.0,
            test: 0.0,
        }
    }

    #[test]
    fn twenty_eighty() {
        let s = split(&samples(100), &train_only(0.2)).unwrap();
        assert_eq!((s.labeled.len(), s.unlabeled.len()), (20, 80));
        assert!(s.unlabeled.iter().all(|u| u.mask.is_none() && !u.is_labeled));
    }

    #[test]
    fn full_ratio_has_no_unlabeled() {
        let s = split(&samples(10), &train_only(1.0)).unwrap();
        assert_eq!(s.labeled.len(), 10);
        assert!(s.unlabeled.is_empty());
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let data = samples(50);
        let a = split(&data, &SplitSpec::default()).unwrap().ids();
        let b = split(&data, &SplitSpec::default()).unwrap().ids();
        assert_eq!(a, b);
        let c = split(&data, &SplitSpec { seed: 9, ..Default::default() }).unwrap().ids();
        assert_ne!(a, c);
        assert_eq!(a.labeled.len() + a.unlabeled.len() + a.val.len() + a.test.len(), 50);
    }

    #[test]
    fn impossible_proportions() {
        assert!(split(&samples(2), &SplitSpec::default()).is_err());
        let bad = SplitSpec {
            train: 0.5,
            val: 0.2,
            test: 0.2,
            ..Default::default()
        };
        assert!(split(&samples(100), &bad).is_err());
    }

    #[test]
    fn id_lists_round_trip() {
        let data = samples(20);
        let s = split(&data, &SplitSpec::default()).unwrap();
        let again = split_from_ids(&data, &s.ids()).unwrap();
        assert_eq!(again.ids(), s.ids());
        assert!(again.unlabeled.iter().all(|u| u.mask.is_none()));
    }
}

//! Step and mixing-pair logs with CSV serialization.
//!
//! The pair log keeps one record per modality mix so the shared-pair
//! contract (a single (i, j, lambda) driving every modality in a step)
//! stays checkable after the fact.

use std::fmt::Write as _;

use crate::error::Result;

/// Which modality consumed a mixing decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixUse {
    Point,
    Image,
    Text,
    MixedCloud,
}

impl MixUse {
    pub fn tag(self) -> &'static str {
        match self {
            MixUse::Point => "P",
            MixUse::Image => "I",
            MixUse::Text => "T",
            MixUse::MixedCloud => "M",
        }
    }
}

/// One per-modality mixing record inside a training step.
#[derive(Debug, Clone)]
pub struct MixRecord {
    pub step: u64,
    pub used_for: MixUse,
    pub i: usize,
    pub j: usize,
    pub lambda: f64,
    /// Mask popcount and mask length, for input-level mixes only.
    pub mask: Option<(usize, usize)>,
}

/// One optimizer step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub stage: u8,
    pub loss: f64,
    pub tau: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct StepLog {
    pub steps: Vec<StepRecord>,
    pub mixes: Vec<MixRecord>,
}

impl StepLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// steps CSV: epoch, step, stage, loss, tau, lr
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("epoch,step,stage,loss,tau,lr\n");
        for s in &self.steps {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                s.epoch, s.step, s.stage, s.loss, s.tau, s.lr
            )
            .expect("string write");
        }
        out
    }

    /// pairs CSV: step, i, j, lambda, n_from_first, N (mask fields empty for
    /// feature-level mixes). One row per (step, sample): the per-modality
    /// copies collapse onto the canonical record, preferring the mask-
    /// carrying one where input-level mixing ran.
    pub fn pairs_csv(&self) -> String {
        use std::collections::BTreeMap;
        let mut canonical: BTreeMap<(u64, usize), &MixRecord> = BTreeMap::new();
        for m in &self.mixes {
            canonical
                .entry((m.step, m.i))
                .and_modify(|cur| {
                    if cur.mask.is_none() && m.mask.is_some() {
                        *cur = m;
                    }
                })
                .or_insert(m);
        }
        let mut out = String::from("step,i,j,lambda,n_from_first,N\n");
        for ((step, i), m) in canonical {
            match m.mask {
                Some((ones, n)) => writeln!(out, "{},{},{},{},{},{}", step, i, m.j, m.lambda, ones, n),
                None => writeln!(out, "{},{},{},{},,", step, i, m.j, m.lambda),
            }
            .expect("string write");
        }
        out
    }

    pub fn write_csvs(&self, steps_path: &std::path::Path, pairs_path: &std::path::Path) -> Result<()> {
        std::fs::write(steps_path, self.steps_csv())?;
        std::fs::write(pairs_path, self.pairs_csv())?;
        Ok(())
    }

    /// Verify that every modality record of every (step, i) carries the
    /// identical (j, lambda). Returns the number of step/sample groups.
    pub fn check_shared_pairs(&self) -> std::result::Result<usize, String> {
        use std::collections::BTreeMap;
        let mut groups: BTreeMap<(u64, usize), Vec<&MixRecord>> = BTreeMap::new();
        for m in &self.mixes {
            groups.entry((m.step, m.i)).or_default().push(m);
        }
        for ((step, i), records) in &groups {
            let first = records[0];
            for r in records {
                if r.j != first.j || r.lambda != first.lambda {
                    return Err(format!(
                        "step {step} sample {i}: {} has (j={}, lambda={}) but {} has (j={}, lambda={})",
                        first.used_for.tag(),
                        first.j,
                        first.lambda,
                        r.used_for.tag(),
                        r.j,
                        r.lambda
                    ));
                }
            }
        }
        Ok(groups.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_pair_check_accepts_consistent_records() {
        let mut log = StepLog::new();
        for used in [MixUse::Point, MixUse::Image, MixUse::Text] {
            log.mixes.push(MixRecord {
                step: 1,
                used_for: used,
                i: 0,
                j: 3,
                lambda: 0.25,
                mask: None,
            });
        }
        assert_eq!(log.check_shared_pairs().unwrap(), 1);
    }

    #[test]
    fn shared_pair_check_rejects_mismatch() {
        let mut log = StepLog::new();
        log.mixes.push(MixRecord {
            step: 1,
            used_for: MixUse::Point,
            i: 0,
            j: 3,
            lambda: 0.25,
            mask: None,
        });
        log.mixes.push(MixRecord {
            step: 1,
            used_for: MixUse::Text,
            i: 0,
            j: 2,
            lambda: 0.25,
            mask: None,
        });
        assert!(log.check_shared_pairs().is_err());
    }

    #[test]
    fn csv_shapes() {
        let mut log = StepLog::new();
        log.steps.push(StepRecord {
            epoch: 0,
            step: 1,
            stage: 1,
            loss: 0.5,
            tau: 0.07,
            lr: 1e-3,
        });
        log.mixes.push(MixRecord {
            step: 1,
            used_for: MixUse::Point,
            i: 0,
            j: 1,
            lambda: 0.75,
            mask: Some((3, 4)),
        });
        let steps = log.steps_csv();
        assert!(steps.starts_with("epoch,step,stage,loss,tau,lr\n"));
        assert!(steps.contains("0,1,1,0.5,0.07,0.001"));
        let pairs = log.pairs_csv();
        assert!(pairs.contains("1,0,1,0.75,3,4"));
    }
}

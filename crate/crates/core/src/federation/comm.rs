use crate::error::{Error, Result};

/// How often sources synchronize with the target node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommRounds {
    /// `r >= 1`: each epoch is split into `r` equal stages, one sync each.
    PerEpoch(u32),
    /// `r < 1`: sync after every `1 / r` full local epochs.
    EveryEpochs(u32),
}

impl CommRounds {
    /// Parses a positive rate `r`; `r >= 1` must be an integer and `r < 1`
    /// must be the reciprocal of one.
    pub fn from_rate(r: f64) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("communication rate {r} is not an integer or 1/integer"));
        if !(r > 0.0 && r.is_finite()) {
            return Err(bad());
        }
        if r >= 1.0 {
            let n = r.round();
            if (r - n).abs() > 1e-9 {
                return Err(bad());
            }
            Ok(CommRounds::PerEpoch(n as u32))
        } else {
            let every = (1.0 / r).round();
            if (1.0 / r - every).abs() > 1e-6 {
                return Err(bad());
            }
            Ok(CommRounds::EveryEpochs(every as u32))
        }
    }

    pub fn rate(self) -> f64 {
        match self {
            CommRounds::PerEpoch(n) => f64::from(n),
            CommRounds::EveryEpochs(e) => 1.0 / f64::from(e),
        }
    }
}

/// One synchronization point of the schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncPoint {
    pub index: usize,
    /// Epoch position where the stage starts (fractional for `r > 1`).
    pub start: f64,
    /// Epoch count completed once this sync is done, if it closes an epoch.
    pub closes_epoch: Option<usize>,
    /// Length of the local stage in epochs.
    pub span: f64,
}

pub fn sync_schedule(epochs: usize, rounds: CommRounds) -> Vec<SyncPoint> {
    let mut out = Vec::new();
    match rounds {
        CommRounds::PerEpoch(n) => {
            let n = n as usize;
            for t in 0..epochs {
                for s in 0..n {
                    out.push(SyncPoint {
                        index: out.len(),
                        start: t as f64 + s as f64 / n as f64,
                        closes_epoch: (s + 1 == n).then_some(t + 1),
                        span: 1.0 / n as f64,
                    });
                }
            }
        }
        CommRounds::EveryEpochs(e) => {
            let e = e as usize;
            let mut t = 0;
            while t < epochs {
                let span = e.min(epochs - t);
                out.push(SyncPoint {
                    index: out.len(),
                    start: t as f64,
                    closes_epoch: Some(t + span),
                    span: span as f64,
                });
                t += span;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncRecord {
    pub sync: usize,
    /// Epoch index (0-based) in which the sync happens.
    pub epoch: usize,
    pub bytes_per_source: Vec<usize>,
}

impl SyncRecord {
    pub fn total_bytes(&self) -> usize {
        self.bytes_per_source.iter().sum()
    }
}

/// Every model upload from sources to the target node.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommunicationLog {
    pub records: Vec<SyncRecord>,
}

impl CommunicationLog {
    pub fn uploads(&self) -> usize {
        self.records.iter().map(|r| r.bytes_per_source.len()).sum()
    }

    pub fn total_bytes(&self) -> usize {
        self.records.iter().map(SyncRecord::total_bytes).sum()
    }

    pub fn syncs(&self) -> usize {
        self.records.len()
    }
}

//! Throughput estimation and QP ladder selection.

use crate::manifest::QpLevel;

pub const DEFAULT_SAFETY: f64 = 0.8;
const EWMA_WEIGHT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandwidthEstimate {
    /// Smoothed throughput in bytes per second (0 before the first sample).
    pub ewma: f64,
    /// Throughput of the most recent download.
    pub last: f64,
    pub last_download_secs: f64,
    pub safety_factor: f64,
    pub samples: usize,
}

impl BandwidthEstimate {
    pub fn new(safety_factor: f64) -> Self {
        Self {
            ewma: 0.0,
            last: 0.0,
            last_download_secs: 0.0,
            safety_factor,
            samples: 0,
        }
    }

    pub fn add_sample(&mut self, bytes: u64, secs: f64) {
        let rate = bytes as f64 / secs.max(1e-6);
        self.ewma = if self.samples == 0 { rate } else { EWMA_WEIGHT * rate + (1.0 - EWMA_WEIGHT) * self.ewma };
        self.last = rate;
        self.last_download_secs = secs;
        self.samples += 1;
    }

    /// Bytes per second used for decisions: the smaller of the EWMA and the last
    /// sample, so a drop is acted on at the next segment. Infinite before any sample.
    pub fn throughput(&self) -> f64 {
        if self.samples == 0 {
            f64::INFINITY
        } else {
            self.ewma.min(self.last)
        }
    }
}

impl Default for BandwidthEstimate {
    fn default() -> Self {
        Self::new(DEFAULT_SAFETY)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AbrDecision {
    pub qp: u32,
    /// Index into the ladder.
    pub level: usize,
    /// No level fits the budget; the highest QP was chosen.
    pub stall_risk: bool,
}

/// Lowest QP whose mean frame bytes × fps fit in `safety × throughput`.
pub fn select_for_throughput(throughput: f64, safety: f64, ladder: &[QpLevel], fps: f64) -> AbrDecision {
    assert!(!ladder.is_empty(), "ABR needs a nonempty ladder");
    let budget = safety * throughput;
    match ladder.iter().position(|l| l.mean_frame_bytes() * fps <= budget) {
        Some(i) => AbrDecision {
            qp: ladder[i].qp,
            level: i,
            stall_risk: false,
        },
        None => {
            let i = ladder.len() - 1;
            AbrDecision {
                qp: ladder[i].qp,
                level: i,
                stall_risk: true,
            }
        }
    }
}

pub fn abr_select(est: &BandwidthEstimate, ladder: &[QpLevel], fps: f64) -> AbrDecision {
    select_for_throughput(est.throughput(), est.safety_factor, ladder, fps)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn paper_ladder() -> Vec<QpLevel> {
        [(16, 247.52), (20, 173.59), (24, 121.97), (28, 87.95), (32, 68.35)]
            .iter()
            .map(|&(qp, kb)| QpLevel {
                qp,
                gop_bytes: vec![],
                mean_frame_kb: kb,
            })
            .collect()
    }

    #[test]
    fn six_megabytes_selects_qp24() {
        let d = select_for_throughput(6e6, 0.8, &paper_ladder(), 30.0);
        assert_eq!((d.qp, d.stall_risk), (24, false));
    }

    #[test]
    fn unconstrained_selects_lowest_qp() {
        assert_eq!(abr_select(&BandwidthEstimate::default(), &paper_ladder(), 30.0).qp, 16);
        assert_eq!(select_for_throughput(1e12, 0.8, &paper_ladder(), 30.0).qp, 16);
    }

    #[test]
    fn starved_link_flags_stall_risk() {
        let d = select_for_throughput(10e3, 0.8, &paper_ladder(), 30.0);
        assert_eq!((d.qp, d.stall_risk), (32, true));
    }

    #[test]
    fn estimate_reacts_to_a_drop_immediately() {
        let mut e = BandwidthEstimate::default();
        e.add_sample(6_000_000, 1.0);
        e.add_sample(6_000_000, 1.0);
        e.add_sample(1_500_000, 1.0);
        assert_eq!(e.throughput(), 1.5e6);
        assert!(e.ewma > 1.5e6);
    }
}

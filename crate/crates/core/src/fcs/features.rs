//! Outcome features that make the period imputation models compatible with
//! a lagged time-to-event model.

use crate::cohort::CohortDataset;

/// Per-subject, per-period outcome features (rows are subjects, columns periods).
#[derive(Debug, Clone, PartialEq)]
pub struct EventFeatures {
    pub lag: usize,
    /// Event indicator feature.
    pub indicator: Vec<Vec<f64>>,
    /// Cumulative discrete baseline hazard over the at-risk part of the
    /// `lag` subsequent periods; only present for `lag > 1`.
    pub cumulative_hazard: Option<Vec<Vec<f64>>>,
}

/// Whether the subject is still in the risk set in 1-based period `k`.
fn at_risk(event_period: usize, k: usize) -> bool {
    k <= event_period
}

/// Per-period event rate among subjects at risk, from the null discrete-time
/// model (no covariates).
pub fn discrete_baseline_hazard(cohort: &CohortDataset) -> Vec<f64> {
    let n_periods = cohort.grid.n_periods();
    let mut events = vec![0usize; n_periods];
    let mut risk = vec![0usize; n_periods];
    for s in &cohort.subjects {
        let ep = s.event_period();
        for k in 1..=n_periods {
            if at_risk(ep, k) {
                risk[k - 1] += 1;
            }
        }
        if s.event && (1..=n_periods).contains(&ep) {
            events[ep - 1] += 1;
        }
    }
    events
        .iter()
        .zip(&risk)
        .map(|(&e, &r)| if r > 0 { e as f64 / r as f64 } else { 0.0 })
        .collect()
}

/// Builds the outcome features for a lag-`lag` substantive model.
///
/// - `lag == 0`: indicator of an event in period `j` itself.
/// - `lag >= 1`: indicator of an event in periods `j+1 ..= j+lag`; for
///   `lag > 1` also the cumulative baseline hazard over those periods in
///   which the subject is still at risk.
pub fn build_event_features(cohort: &CohortDataset, lag: usize) -> EventFeatures {
    let n_periods = cohort.grid.n_periods();
    let hazard = (lag > 1).then(|| discrete_baseline_hazard(cohort));
    let mut indicator = Vec::with_capacity(cohort.subjects.len());
    let mut cumulative = hazard.as_ref().map(|_| Vec::with_capacity(cohort.subjects.len()));
    for s in &cohort.subjects {
        let ep = s.event_period();
        let row: Vec<f64> = (1..=n_periods)
            .map(|j| {
                let hit = if lag == 0 {
                    ep == j
                } else {
                    ep > j && ep <= j + lag
                };
                f64::from(u8::from(s.event && hit))
            })
            .collect();
        indicator.push(row);
        if let (Some(h), Some(cum)) = (hazard.as_ref(), cumulative.as_mut()) {
            let row: Vec<f64> = (1..=n_periods)
                .map(|j| {
                    (j + 1..=(j + lag).min(n_periods))
                        .filter(|&k| at_risk(ep, k))
                        .map(|k| h[k - 1])
                        .sum()
                })
                .collect();
            cum.push(row);
        }
    }
    EventFeatures {
        lag,
        indicator,
        cumulative_hazard: cumulative,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{PeriodGrid, SubjectRecord};

    fn cohort(rows: &[(bool, f64)], j: usize) -> CohortDataset {
        let subjects = rows
            .iter()
            .enumerate()
            .map(|(i, &(event, time))| SubjectRecord {
                id: i as u64,
                female: false,
                older: false,
                marker: vec![None; j],
                event,
                time,
                omit: false,
                latent: None,
            })
            .collect();
        CohortDataset::new(PeriodGrid::new(j).unwrap(), subjects, "t").unwrap()
    }

    #[test]
    fn lag_one_flags_preceding_period() {
        let c = cohort(&[(true, 3.4), (false, 7.0)], 7);
        let f = build_event_features(&c, 1);
        assert_eq!(f.indicator[0], vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(f.indicator[1].iter().all(|&d| d == 0.0));
        assert!(f.cumulative_hazard.is_none());
    }

    #[test]
    fn current_value_flags_own_period() {
        let c = cohort(&[(true, 3.4)], 7);
        let f = build_event_features(&c, 0);
        assert_eq!(f.indicator[0], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn lag_four_window_matches_enumeration() {
        let c = cohort(&[(true, 5.5)], 7);
        let f = build_event_features(&c, 4);
        // enumerate windows {j+1..j+4} containing period 6
        let expected: Vec<f64> = (1..=7usize)
            .map(|j| {
                let window: Vec<usize> = (j + 1..=j + 4).collect();
                f64::from(u8::from(window.contains(&6)))
            })
            .collect();
        assert_eq!(f.indicator[0], expected);
        assert_eq!(expected, vec![0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn cumulative_hazard_stops_at_exit() {
        // subject 0 fails in period 3; others censored at 4
        let c = cohort(&[(true, 2.5), (false, 4.0), (false, 4.0), (false, 4.0)], 4);
        let h = discrete_baseline_hazard(&c);
        assert_eq!(h, vec![0.0, 0.0, 0.25, 0.0]);
        let f = build_event_features(&c, 2);
        let cum = f.cumulative_hazard.unwrap();
        // period 1 window {2, 3}: at risk in both
        assert_eq!(cum[0][0], 0.25);
        // period 3 window {4}: subject 0 no longer at risk
        assert_eq!(cum[0][2], 0.0);
        assert_eq!(cum[1][1], 0.25);
    }
}

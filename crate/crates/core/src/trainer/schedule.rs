use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    #[default]
    Exponential,
}

/// Temperature schedule resolved to absolute steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TauSchedule {
    pub kind: ScheduleKind,
    pub tau_init: f64,
    pub tau_min: f64,
    /// Step at which the exponential schedule reaches `tau_min`.
    pub horizon: u64,
}

/// `tau_init` for a constant schedule; otherwise
/// `max(tau_min, tau_init·r^step)` with `r = (tau_min/tau_init)^(1/horizon)`.
pub fn temperature(step: u64, schedule: &TauSchedule) -> f64 {
    match schedule.kind {
        ScheduleKind::Constant => schedule.tau_init,
        ScheduleKind::Exponential => {
            if step >= schedule.horizon {
                return schedule.tau_min;
            }
            let progress = step as f64 / schedule.horizon as f64;
            let tau = schedule.tau_init * (schedule.tau_min / schedule.tau_init).powf(progress);
            tau.max(schedule.tau_min)
        }
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    fn exp(horizon: u64) -> TauSchedule {
        TauSchedule { kind: ScheduleKind::Exponential, tau_init: 1.0, tau_min: 0.1, horizon }
    }

    #[test]
    fn endpoints_and_midpoint() {
        let s = exp(1000);
        assert_eq!(temperature(0, &s), 1.0);
        assert_eq!(temperature(1000, &s), 0.1);
        assert_eq!(temperature(5000, &s), 0.1);
        assert_abs_diff_eq!(temperature(500, &s), 10f64.powf(-0.5), epsilon = 1e-12);
    }

    #[test]
    fn constant_ignores_step() {
        let s = TauSchedule { kind: ScheduleKind::Constant, ..exp(10) };
        assert_eq!(temperature(7, &s), 1.0);
    }

    proptest! {
        #[test]
        fn non_increasing(a in 0u64..3000, b in 0u64..3000, horizon in 1u64..2000) {
            let s = exp(horizon);
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(temperature(hi, &s) <= temperature(lo, &s));
            prop_assert!(temperature(hi, &s) >= 0.1);
        }
    }
}

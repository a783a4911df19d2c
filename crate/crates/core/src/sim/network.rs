//! Partial-synchrony delivery model.
//!
//! A message sent at `t >= GST` arrives in `(t, t + δ]`; one sent before GST
//! arrives in `(t, GST + δ]`. Within those windows the adversary picks the
//! delay. Links are reliable: nothing is dropped.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::types::Time;

/// How the adversary places a delivery inside its legal window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayPolicy {
    /// Latest legal instant.
    Max,
    /// Earliest legal instant.
    Min,
    /// Uniformly random over the window.
    #[default]
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkModel {
    pub gst: Time,
    pub delta: Time,
    #[serde(default)]
    pub pre_gst: DelayPolicy,
    #[serde(default)]
    pub post_gst: DelayPolicy,
}

/// Delay policies before and after GST, as given in a scenario.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkPolicy {
    #[serde(default)]
    pub pre_gst: DelayPolicy,
    #[serde(default)]
    pub post_gst: DelayPolicy,
}

impl NetworkModel {
    pub fn with_policy(gst: Time, delta: Time, policy: NetworkPolicy) -> Self {
        NetworkModel {
            gst,
            delta,
            pre_gst: policy.pre_gst,
            post_gst: policy.post_gst,
        }
    }

    pub fn new(gst: Time, delta: Time) -> Self {
        NetworkModel {
            gst,
            delta,
            pre_gst: DelayPolicy::Uniform,
            post_gst: DelayPolicy::Uniform,
        }
    }

    /// Legal delivery window `[lo, hi]` for a send at `now`.
    pub fn window(&self, now: Time) -> (Time, Time) {
        if now >= self.gst {
            (now + 1, now + self.delta)
        } else {
            (now + 1, self.gst + self.delta)
        }
    }
}

/// Delivery time chosen by `policy` for a message sent at `now`.
pub fn adversary_deliver_schedule<R: Rng + ?Sized>(now: Time, model: &NetworkModel, rng: &mut R) -> Time {
    let policy = if now >= model.gst {
        model.post_gst
    } else {
        model.pre_gst
    };
    let (lo, hi) = model.window(now);
    match policy {
        DelayPolicy::Max => hi,
        DelayPolicy::Min => lo,
        DelayPolicy::Uniform => rng.random_range(lo..=hi),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn post_gst_send_lands_within_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = NetworkModel::new(1000, 10);
        for _ in 0..1000 {
            let t = adversary_deliver_schedule(1005, &model, &mut rng);
            assert!(t > 1005 && t <= 1015);
        }
    }

    #[test]
    fn pre_gst_send_lands_by_gst_plus_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = NetworkModel::new(1000, 10);
        for _ in 0..1000 {
            let t = adversary_deliver_schedule(900, &model, &mut rng);
            assert!(t > 900 && t <= 1010);
        }
    }

    #[test]
    fn worst_case_policy_picks_the_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = NetworkModel {
            pre_gst: DelayPolicy::Max,
            post_gst: DelayPolicy::Max,
            ..NetworkModel::new(1000, 10)
        };
        assert_eq!(adversary_deliver_schedule(900, &model, &mut rng), 1010);
        assert_eq!(adversary_deliver_schedule(1005, &model, &mut rng), 1015);
        let eager = NetworkModel {
            pre_gst: DelayPolicy::Min,
            post_gst: DelayPolicy::Min,
            ..model
        };
        assert_eq!(adversary_deliver_schedule(900, &eager, &mut rng), 901);
    }

    proptest! {
        #[test]
        fn every_policy_respects_the_model(
            gst in 0u64..500, delta in 1u64..50, now in 0u64..1000, seed in any::<u64>(),
            pre in prop_oneof![Just(DelayPolicy::Max), Just(DelayPolicy::Min), Just(DelayPolicy::Uniform)],
            post in prop_oneof![Just(DelayPolicy::Max), Just(DelayPolicy::Min), Just(DelayPolicy::Uniform)],
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = NetworkModel { gst, delta, pre_gst: pre, post_gst: post };
            let t = adversary_deliver_schedule(now, &model, &mut rng);
            prop_assert!(t > now);
            if now >= gst {
                prop_assert!(t <= now + delta);
            } else {
                prop_assert!(t <= gst + delta);
            }
        }
    }
}

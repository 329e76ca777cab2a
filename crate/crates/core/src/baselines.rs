//! Comparison policies, each a [`TeEngine`] with a fixed set of knobs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::te::{
    Admission, ApPolicy, Knobs, Planner, PlanningInput, RateControl, RoutePolicy, TeEngine, TeParams, TePlan,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PolicyId {
    NaiveMesh,
    FlowSchedRate,
    ApSelect,
    /// The full engine.
    CentralRouting,
    HopCount,
    Manhattan,
    TwoFourAboveCanopy,
}

impl PolicyId {
    pub const ALL: [PolicyId; 7] = [
        PolicyId::NaiveMesh,
        PolicyId::FlowSchedRate,
        PolicyId::ApSelect,
        PolicyId::CentralRouting,
        PolicyId::HopCount,
        PolicyId::Manhattan,
        PolicyId::TwoFourAboveCanopy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyId::NaiveMesh => "naive",
            PolicyId::FlowSchedRate => "flowsched",
            PolicyId::ApSelect => "apselect",
            PolicyId::CentralRouting => "central",
            PolicyId::HopCount => "hopcount",
            PolicyId::Manhattan => "manhattan",
            PolicyId::TwoFourAboveCanopy => "twofour",
        }
    }

    pub fn knobs(self) -> Knobs {
        let slack = Knobs {
            admission: Admission::Slack,
            rates: RateControl::Enforced,
            ap: ApPolicy::Contention,
            routing: RoutePolicy::MinHopRandom,
            above_canopy_24: false,
        };
        match self {
            PolicyId::NaiveMesh => Knobs {
                admission: Admission::Immediate,
                rates: RateControl::Uncontrolled,
                ap: ApPolicy::Nearest,
                routing: RoutePolicy::MinHopRandom,
                above_canopy_24: false,
            },
            PolicyId::FlowSchedRate => Knobs { ap: ApPolicy::Nearest, ..slack },
            PolicyId::ApSelect | PolicyId::Manhattan => slack,
            PolicyId::CentralRouting => Knobs::FULL,
            PolicyId::HopCount => Knobs { routing: RoutePolicy::MinHopLowestId, ..slack },
            PolicyId::TwoFourAboveCanopy => Knobs { above_canopy_24: true, ..Knobs::FULL },
        }
    }
}

impl fmt::Display for PolicyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("unknown policy {0:?}")]
pub struct UnknownPolicy(pub String);

impl FromStr for PolicyId {
    type Err = UnknownPolicy;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let k = s.to_ascii_lowercase().replace(['-', '_'], "");
        Ok(match k.as_str() {
            "naive" | "naivemesh" => PolicyId::NaiveMesh,
            "flowsched" | "flowschedrate" => PolicyId::FlowSchedRate,
            "apselect" => PolicyId::ApSelect,
            "central" | "centralrouting" => PolicyId::CentralRouting,
            "hopcount" => PolicyId::HopCount,
            "manhattan" => PolicyId::Manhattan,
            "twofour" | "twofourabovecanopy" => PolicyId::TwoFourAboveCanopy,
            _ => return Err(UnknownPolicy(s.to_string())),
        })
    }
}

impl TryFrom<String> for PolicyId {
    type Error = UnknownPolicy;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<PolicyId> for String {
    fn from(p: PolicyId) -> String {
        p.as_str().to_string()
    }
}

pub fn planner_for(policy: PolicyId, params: TeParams) -> TeEngine {
    TeEngine::new(params, policy.knobs())
}

pub fn naive_plan(input: &PlanningInput<'_>, params: TeParams) -> TePlan {
    planner_for(PolicyId::NaiveMesh, params).plan(input)
}

pub fn hopcount_plan(input: &PlanningInput<'_>, params: TeParams) -> TePlan {
    planner_for(PolicyId::HopCount, params).plan(input)
}

pub fn twofour_plan(input: &PlanningInput<'_>, params: TeParams) -> TePlan {
    planner_for(PolicyId::TwoFourAboveCanopy, params).plan(input)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for p in PolicyId::ALL {
            assert_eq!(p.as_str().parse::<PolicyId>().unwrap(), p);
            let j = serde_json::to_string(&p).unwrap();
            assert_eq!(serde_json::from_str::<PolicyId>(&j).unwrap(), p);
        }
        assert_eq!("Central-Routing".parse::<PolicyId>().unwrap(), PolicyId::CentralRouting);
        assert!("ospf".parse::<PolicyId>().is_err());
    }

    #[test]
    fn knob_ladder() {
        assert_eq!(PolicyId::CentralRouting.knobs(), Knobs::FULL);
        assert_eq!(PolicyId::Manhattan.knobs(), PolicyId::ApSelect.knobs());
        assert_eq!(planner_for(PolicyId::NaiveMesh, TeParams::default()).period(), 1);
        assert_eq!(planner_for(PolicyId::FlowSchedRate, TeParams::default()).period(), 5);
    }
}

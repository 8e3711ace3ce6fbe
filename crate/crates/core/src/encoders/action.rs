//! The structured therapy action grammar and its canonical text form.
//!
//! Canonical form, one space between tokens, fixed order:
//!
//! ```text
//! chemo=<tmz|ccnu> <agent>_dose=<1-3> <agent>_cycles=<1-6>   | chemo=none
//! radio=<ebrt_standard|ebrt_hypofractionated> <kind>_dose=<1-3> | radio=none
//! brachy=<yes|no>
//! immuno=<pembrolizumab|none>
//! add=<bevacizumab|none>
//! interval_days=<14|28|42>
//! ```
//!
//! Parameter keys carry the agent name so that changing a drug moves more
//! text features than changing its dose.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::EncodeError;

pub const DOSE_LEVELS: std::ops::RangeInclusive<u8> = 1..=3;
pub const CYCLES: std::ops::RangeInclusive<u8> = 1..=6;
/// Allowed cycle intervals in days.
pub const INTERVAL_GRID: [u32; 3] = [14, 28, 42];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChemoAgent {
    Tmz,
    Ccnu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadioKind {
    EbrtStandard,
    EbrtHypofractionated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImmunoAgent {
    Pembrolizumab,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AddAgent {
    Bevacizumab,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Chemo {
    pub agent: ChemoAgent,
    pub dose_level: u8,
    pub cycles: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Radio {
    pub kind: RadioKind,
    pub dose_level: u8,
}

/// Drug or modality identity, the unit used by safety rules and by
/// component-level precision/recall.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agent {
    Tmz,
    Ccnu,
    EbrtStandard,
    EbrtHypofractionated,
    Brachytherapy,
    Pembrolizumab,
    Bevacizumab,
}

impl Agent {
    pub const ALL: [Agent; 7] = [
        Agent::Tmz,
        Agent::Ccnu,
        Agent::EbrtStandard,
        Agent::EbrtHypofractionated,
        Agent::Brachytherapy,
        Agent::Pembrolizumab,
        Agent::Bevacizumab,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Agent::Tmz => "tmz",
            Agent::Ccnu => "ccnu",
            Agent::EbrtStandard => "ebrt_standard",
            Agent::EbrtHypofractionated => "ebrt_hypofractionated",
            Agent::Brachytherapy => "brachytherapy",
            Agent::Pembrolizumab => "pembrolizumab",
            Agent::Bevacizumab => "bevacizumab",
        }
    }
}

impl fmt::Display for Agent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl ChemoAgent {
    pub fn name(self) -> &'static str {
        match self {
            ChemoAgent::Tmz => "tmz",
            ChemoAgent::Ccnu => "ccnu",
        }
    }

    pub fn agent(self) -> Agent {
        match self {
            ChemoAgent::Tmz => Agent::Tmz,
            ChemoAgent::Ccnu => Agent::Ccnu,
        }
    }

    pub const ALL: [ChemoAgent; 2] = [ChemoAgent::Tmz, ChemoAgent::Ccnu];
}

impl RadioKind {
    pub fn name(self) -> &'static str {
        match self {
            RadioKind::EbrtStandard => "ebrt_standard",
            RadioKind::EbrtHypofractionated => "ebrt_hypofractionated",
        }
    }

    pub fn agent(self) -> Agent {
        match self {
            RadioKind::EbrtStandard => Agent::EbrtStandard,
            RadioKind::EbrtHypofractionated => Agent::EbrtHypofractionated,
        }
    }

    pub const ALL: [RadioKind; 2] = [RadioKind::EbrtStandard, RadioKind::EbrtHypofractionated];
}

/// One structured treatment: chemotherapy, external radiotherapy,
/// brachytherapy, immunotherapy and an additional agent, plus the cycle
/// interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TherapyAction {
    pub chemo: Option<Chemo>,
    pub radio: Option<Radio>,
    pub brachy: bool,
    pub immuno: Option<ImmunoAgent>,
    pub add: Option<AddAgent>,
    pub interval_days: u32,
}

impl TherapyAction {
    /// Every bound the action violates; empty when it belongs to the grammar.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.chemo.is_none()
            && self.radio.is_none()
            && !self.brachy
            && self.immuno.is_none()
            && self.add.is_none()
        {
            out.push("at least one component must be active".to_string());
        }
        if let Some(c) = self.chemo {
            if !DOSE_LEVELS.contains(&c.dose_level) {
                out.push(format!("chemo dose_level {} outside 1..=3", c.dose_level));
            }
            if !CYCLES.contains(&c.cycles) {
                out.push(format!("chemo cycles {} outside 1..=6", c.cycles));
            }
        }
        if let Some(r) = self.radio {
            if !DOSE_LEVELS.contains(&r.dose_level) {
                out.push(format!("radio dose_level {} outside 1..=3", r.dose_level));
            }
        }
        if !INTERVAL_GRID.contains(&self.interval_days) {
            out.push(format!(
                "interval_days {} not in {:?}",
                self.interval_days, INTERVAL_GRID
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<(), EncodeError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(EncodeError::InvalidAction(v))
        }
    }

    /// Active drug/modality identities in a fixed order.
    pub fn agents(&self) -> Vec<Agent> {
        let mut out = Vec::with_capacity(5);
        if let Some(c) = self.chemo {
            out.push(c.agent.agent());
        }
        if let Some(r) = self.radio {
            out.push(r.kind.agent());
        }
        if self.brachy {
            out.push(Agent::Brachytherapy);
        }
        if self.immuno.is_some() {
            out.push(Agent::Pembrolizumab);
        }
        if self.add.is_some() {
            out.push(Agent::Bevacizumab);
        }
        out
    }

    pub fn uses(&self, agent: Agent) -> bool {
        self.agents().contains(&agent)
    }

    pub fn canonical_text(&self) -> String {
        let mut parts: Vec<String> = Vec::with_capacity(9);
        match self.chemo {
            Some(c) => {
                let n = c.agent.name();
                parts.push(format!("chemo={n}"));
                parts.push(format!("{n}_dose={}", c.dose_level));
                parts.push(format!("{n}_cycles={}", c.cycles));
            }
            None => parts.push("chemo=none".into()),
        }
        match self.radio {
            Some(r) => {
                let n = r.kind.name();
                parts.push(format!("radio={n}"));
                parts.push(format!("{n}_dose={}", r.dose_level));
            }
            None => parts.push("radio=none".into()),
        }
        parts.push(format!("brachy={}", if self.brachy { "yes" } else { "no" }));
        parts.push(format!(
            "immuno={}",
            if self.immuno.is_some() { "pembrolizumab" } else { "none" }
        ));
        parts.push(format!(
            "add={}",
            if self.add.is_some() { "bevacizumab" } else { "none" }
        ));
        parts.push(format!("interval_days={}", self.interval_days));
        parts.join(" ")
    }

    /// Strict inverse of [`TherapyAction::canonical_text`]; the result is
    /// also checked against the grammar bounds.
    pub fn parse_canonical(text: &str) -> Result<Self, EncodeError> {
        let mut tokens = text.split(' ').peekable();
        let mut next = |what: &str| -> Result<(String, String), EncodeError> {
            let tok = tokens
                .next()
                .ok_or_else(|| EncodeError::Parse(format!("missing {what}")))?;
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| EncodeError::Parse(format!("expected key=value for {what}, got {tok:?}")))?;
            Ok((k.to_string(), v.to_string()))
        };
        let expect_key = |got: &str, want: &str| -> Result<(), EncodeError> {
            if got == want {
                Ok(())
            } else {
                Err(EncodeError::Parse(format!("expected key {want:?}, got {got:?}")))
            }
        };
        let num = |v: &str, what: &str| -> Result<u32, EncodeError> {
            v.parse::<u32>()
                .map_err(|_| EncodeError::Parse(format!("{what} is not an integer: {v:?}")))
        };
        let small = |v: &str, what: &str| -> Result<u8, EncodeError> {
            u8::try_from(num(v, what)?).map_err(|_| EncodeError::Parse(format!("{what} out of range: {v}")))
        };

        let (k, v) = next("chemo")?;
        expect_key(&k, "chemo")?;
        let chemo = match v.as_str() {
            "none" => None,
            name => {
                let agent = ChemoAgent::ALL
                    .into_iter()
                    .find(|a| a.name() == name)
                    .ok_or_else(|| EncodeError::Parse(format!("unknown chemo agent {name:?}")))?;
                let (k, v) = next("chemo dose")?;
                expect_key(&k, &format!("{name}_dose"))?;
                let dose_level = small(&v, "chemo dose")?;
                let (k, v) = next("chemo cycles")?;
                expect_key(&k, &format!("{name}_cycles"))?;
                let cycles = small(&v, "chemo cycles")?;
                Some(Chemo {
                    agent,
                    dose_level,
                    cycles,
                })
            }
        };
        let (k, v) = next("radio")?;
        expect_key(&k, "radio")?;
        let radio = match v.as_str() {
            "none" => None,
            name => {
                let kind = RadioKind::ALL
                    .into_iter()
                    .find(|r| r.name() == name)
                    .ok_or_else(|| EncodeError::Parse(format!("unknown radio kind {name:?}")))?;
                let (k, v) = next("radio dose")?;
                expect_key(&k, &format!("{name}_dose"))?;
                Some(Radio {
                    kind,
                    dose_level: small(&v, "radio dose")?,
                })
            }
        };
        let (k, v) = next("brachy")?;
        expect_key(&k, "brachy")?;
        let brachy = match v.as_str() {
            "yes" => true,
            "no" => false,
            other => return Err(EncodeError::Parse(format!("brachy must be yes/no, got {other:?}"))),
        };
        let (k, v) = next("immuno")?;
        expect_key(&k, "immuno")?;
        let immuno = match v.as_str() {
            "pembrolizumab" => Some(ImmunoAgent::Pembrolizumab),
            "none" => None,
            other => return Err(EncodeError::Parse(format!("unknown immuno agent {other:?}"))),
        };
        let (k, v) = next("add")?;
        expect_key(&k, "add")?;
        let add = match v.as_str() {
            "bevacizumab" => Some(AddAgent::Bevacizumab),
            "none" => None,
            other => return Err(EncodeError::Parse(format!("unknown additional agent {other:?}"))),
        };
        let (k, v) = next("interval_days")?;
        expect_key(&k, "interval_days")?;
        let interval_days = num(&v, "interval_days")?;
        if let Some(extra) = tokens.next() {
            return Err(EncodeError::Parse(format!("trailing token {extra:?}")));
        }
        let action = TherapyAction {
            chemo,
            radio,
            brachy,
            immuno,
            add,
            interval_days,
        };
        action.validate()?;
        Ok(action)
    }

    /// The full finite grammar in a fixed enumeration order.
    pub fn grammar() -> Vec<TherapyAction> {
        let mut chemos = vec![None];
        for agent in ChemoAgent::ALL {
            for dose_level in DOSE_LEVELS {
                for cycles in CYCLES {
                    chemos.push(Some(Chemo {
                        agent,
                        dose_level,
                        cycles,
                    }));
                }
            }
        }
        let mut radios = vec![None];
        for kind in RadioKind::ALL {
            for dose_level in DOSE_LEVELS {
                radios.push(Some(Radio { kind, dose_level }));
            }
        }
        let mut out = Vec::with_capacity(chemos.len() * radios.len() * 8 * INTERVAL_GRID.len());
        for &chemo in &chemos {
            for &radio in &radios {
                for brachy in [false, true] {
                    for immuno in [None, Some(ImmunoAgent::Pembrolizumab)] {
                        for add in [None, Some(AddAgent::Bevacizumab)] {
                            for interval_days in INTERVAL_GRID {
                                let a = TherapyAction {
                                    chemo,
                                    radio,
                                    brachy,
                                    immuno,
                                    add,
                                    interval_days,
                                };
                                if a.violations().is_empty() {
                                    out.push(a);
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

impl fmt::Display for TherapyAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_text())
    }
}

/// A finite set of admissible actions: the whole grammar or a restriction of it.
#[derive(Clone, Debug)]
pub struct ActionSpace {
    actions: Vec<TherapyAction>,
    members: HashSet<TherapyAction>,
}

impl ActionSpace {
    pub fn full() -> Self {
        Self::from_valid(TherapyAction::grammar())
    }

    /// Restricts to the given actions (deduplicated, order preserved).
    pub fn restricted(actions: Vec<TherapyAction>) -> Result<Self, EncodeError> {
        if actions.is_empty() {
            return Err(EncodeError::Config("action space must not be empty".into()));
        }
        for a in &actions {
            a.validate()?;
        }
        Ok(Self::from_valid(actions))
    }

    fn from_valid(actions: Vec<TherapyAction>) -> Self {
        let mut members = HashSet::with_capacity(actions.len());
        let actions = actions.into_iter().filter(|a| members.insert(*a)).collect();
        ActionSpace { actions, members }
    }

    pub fn contains(&self, a: &TherapyAction) -> bool {
        self.members.contains(a)
    }

    pub fn actions(&self) -> &[TherapyAction] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

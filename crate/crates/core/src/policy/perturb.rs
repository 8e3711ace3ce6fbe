use rand::Rng;

use crate::encoders::{
    AddAgent, Chemo, ChemoAgent, ImmunoAgent, Radio, RadioKind, TherapyAction, CYCLES, DOSE_LEVELS, INTERVAL_GRID,
};

/// Parameters used when a component is switched on by a neighbor move.
const DEFAULT_DOSE: u8 = 2;
const DEFAULT_CYCLES: u8 = 3;

#[derive(Clone, Copy, PartialEq, Eq)]
enum DoseTarget {
    Chemo,
    Radio,
}

/// Interval moved by ±25% and snapped outward onto the grid (up: ceiling,
/// down: floor); `None` when that leaves the grid.
fn shifted_interval(days: u32, up: bool) -> Option<u32> {
    let target = days as f64 * if up { 1.25 } else { 0.75 };
    if up {
        INTERVAL_GRID.iter().copied().find(|&g| g as f64 >= target)
    } else {
        INTERVAL_GRID.iter().rev().copied().find(|&g| g as f64 <= target)
    }
}

/// `value + delta` if it stays within `range`.
fn step(value: u8, delta: i8, range: &std::ops::RangeInclusive<u8>) -> Option<u8> {
    value.checked_add_signed(delta).filter(|v| range.contains(v))
}

fn dose_variants(a: &TherapyAction, target: DoseTarget) -> Vec<TherapyAction> {
    let mut out = Vec::new();
    for delta in [1i8, -1] {
        let mut v = *a;
        let level = match target {
            DoseTarget::Chemo => v.chemo.as_mut().map(|c| &mut c.dose_level),
            DoseTarget::Radio => v.radio.as_mut().map(|r| &mut r.dose_level),
        };
        let Some(level) = level else { continue };
        let Some(next) = step(*level, delta, &DOSE_LEVELS) else { continue };
        *level = next;
        out.push(v);
    }
    out
}

fn schedule_variants(a: &TherapyAction) -> Vec<TherapyAction> {
    let mut out = Vec::new();
    if let Some(c) = a.chemo {
        for delta in [1i8, -1] {
            if let Some(cycles) = step(c.cycles, delta, &CYCLES) {
                out.push(TherapyAction {
                    chemo: Some(Chemo { cycles, ..c }),
                    ..*a
                });
            }
        }
    }
    for up in [true, false] {
        if let Some(days) = shifted_interval(a.interval_days, up).filter(|&d| d != a.interval_days) {
            out.push(TherapyAction {
                interval_days: days,
                ..*a
            });
        }
    }
    out
}

/// Variants differing from `a` in exactly one of: dose level ±1, cycles ±1,
/// interval ±25%. When both chemotherapy and radiotherapy are active, `rng`
/// picks whose dose moves. At most six variants; `a` itself is excluded.
pub fn perturb<R: Rng + ?Sized>(a: &TherapyAction, rng: &mut R) -> Vec<TherapyAction> {
    let target = match (a.chemo.is_some(), a.radio.is_some()) {
        (true, true) => Some(if rng.random_bool(0.5) { DoseTarget::Chemo } else { DoseTarget::Radio }),
        (true, false) => Some(DoseTarget::Chemo),
        (false, true) => Some(DoseTarget::Radio),
        (false, false) => None,
    };
    let mut out = target.map(|t| dose_variants(a, t)).unwrap_or_default();
    out.extend(schedule_variants(a));
    out
}

/// Every perturbation (both dose targets) plus every single-component swap.
pub fn neighbors(a: &TherapyAction) -> Vec<TherapyAction> {
    let mut out = dose_variants(a, DoseTarget::Chemo);
    out.extend(dose_variants(a, DoseTarget::Radio));
    out.extend(schedule_variants(a));

    let (dose, cycles) = a.chemo.map_or((DEFAULT_DOSE, DEFAULT_CYCLES), |c| (c.dose_level, c.cycles));
    let chemo_options = std::iter::once(None).chain(ChemoAgent::ALL.into_iter().map(|agent| {
        Some(Chemo {
            agent,
            dose_level: dose,
            cycles,
        })
    }));
    for chemo in chemo_options {
        if chemo.map(|c| c.agent) != a.chemo.map(|c| c.agent) {
            out.push(TherapyAction { chemo, ..*a });
        }
    }
    let rdose = a.radio.map_or(DEFAULT_DOSE, |r| r.dose_level);
    let radio_options = std::iter::once(None).chain(
        RadioKind::ALL
            .into_iter()
            .map(|kind| Some(Radio { kind, dose_level: rdose })),
    );
    for radio in radio_options {
        if radio.map(|r| r.kind) != a.radio.map(|r| r.kind) {
            out.push(TherapyAction { radio, ..*a });
        }
    }
    out.push(TherapyAction { brachy: !a.brachy, ..*a });
    out.push(TherapyAction {
        immuno: if a.immuno.is_some() { None } else { Some(ImmunoAgent::Pembrolizumab) },
        ..*a
    });
    out.push(TherapyAction {
        add: if a.add.is_some() { None } else { Some(AddAgent::Bevacizumab) },
        ..*a
    });
    out.retain(|v| v.violations().is_empty());
    let mut seen = std::collections::HashSet::new();
    out.retain(|v| seen.insert(*v));
    out
}

use std::path::Path;

use twm_core::encoders::{AddAgent, ChemoAgent, RadioKind, Sex};
use twm_core::synthcohort::{import_cohort, validate_cohort_file, write_cohort};

fn fixture() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/two_patients.jsonl"))
}

#[test]
fn hand_written_file_parses_to_the_documented_records() {
    let c = import_cohort(fixture()).unwrap();
    assert_eq!((c.latent_tokens, c.token_width), (2, 2));
    assert_eq!(c.patients.len(), 2);

    let a = &c.patients[0];
    assert_eq!(a.id, "a01");
    assert_eq!(a.profile.age, 54.0);
    assert_eq!(a.profile.sex, Sex::Female);
    assert_eq!(a.profile.biomarkers["mgmt_methylation"], 0.5);
    assert_eq!(a.visits[1].latent.tokens().to_rows(), vec![vec![0.75, -0.5], vec![0.25, 0.0]]);
    assert_eq!(a.visits[1].latent.timestamp(), Some(90.0));
    let chemo = a.actions[0].chemo.unwrap();
    assert_eq!((chemo.agent, chemo.dose_level, chemo.cycles), (ChemoAgent::Tmz, 2, 6));
    assert_eq!(a.actions[0].radio.unwrap().kind, RadioKind::EbrtStandard);
    assert!(a.survival.event);

    let b = &c.patients[1];
    assert_eq!(b.visits.len(), 3);
    assert_eq!(b.visits[0].latent.timestamp(), None);
    assert_eq!(b.actions[1].add, Some(AddAgent::Bevacizumab));
    assert!(!b.survival.event);

    let pairs = c.pairs_of(&[0, 1]);
    let got: Vec<(f64, f64, bool, Option<bool>)> = pairs.iter().map(|p| (p.dt, p.time, p.event, p.one_year)).collect();
    assert_eq!(
        got,
        vec![
            (90.0, 310.0, true, Some(true)),
            (30.0, 870.0, false, Some(false)),
            (180.0, 690.0, false, Some(false)),
        ]
    );
    // The second pair of b02 sees the prior radiotherapy and its first action.
    assert_eq!(pairs[2].profile.treatment_history.len(), 2);
    assert_eq!(pairs[2].profile.treatment_history[1], b.actions[0]);
}

#[test]
fn hand_written_file_summary_and_byte_identical_rewrite() {
    let s = validate_cohort_file(fixture()).unwrap();
    assert_eq!((s.patients, s.visits, s.pairs, s.events), (2, 5, 3, 1));
    let c = import_cohort(fixture()).unwrap();
    let mut buf = Vec::new();
    write_cohort(&c, &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), std::fs::read_to_string(fixture()).unwrap());
}

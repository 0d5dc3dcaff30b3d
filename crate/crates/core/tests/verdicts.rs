use gnv_core::backend::mock::{judge_components, MockScript};
use gnv_core::backend::procedural::{render, Generator};
use gnv_core::backend::{Backend, Role};
use gnv_core::image::RgbaImage;
use gnv_core::prompts;
use gnv_core::validation::{
    parse_verdict, validate_instance, Decision, Outcome, ValidationVerdict, ValidatorSettings,
};

use Outcome::{Fail, Meet, NotApplicable as Na};

const ORANGE: &str = include_str!("golden/orange.txt");
const CLOCK: &str = include_str!("golden/clock.txt");
const BIRTHDAY: &str = include_str!("golden/birthday_card.txt");
const PANCAKE: &str = include_str!("golden/pancake.txt");

fn vision(replies: &[&str]) -> Backend {
    Backend::from_script(
        Role::MockVision,
        MockScript {
            replies: replies.iter().map(|s| s.to_string()).collect(),
            ..MockScript::default()
        },
    )
    .unwrap()
}

fn system(category: &str) -> String {
    prompts::substitute_category(prompts::VALIDATION_OPTIMIZED, category)
}

fn asset() -> RgbaImage {
    render(Generator::Disk, 64, 64, 3, 0)
}

#[test]
fn orange_transcript() {
    let v = parse_verdict(ORANGE, "orange").unwrap();
    assert_eq!(v.outcomes(), [Fail, Meet, Meet, Meet]);
    assert_eq!(v.decision, Decision::FilterOut);
    assert!(v.consistent);
    assert!(v.description.contains("orange"));
}

#[test]
fn clock_transcript() {
    let v = parse_verdict(CLOCK, "clock").unwrap();
    assert_eq!(v.outcomes(), [Meet, Meet, Meet, Fail]);
    assert_eq!(v.decision, Decision::FilterOut);
    assert!(v.consistent);
}

#[test]
fn pancake_transcript_has_two_not_applicable() {
    let v = parse_verdict(PANCAKE, "pancake").unwrap();
    assert_eq!(v.outcomes(), [Fail, Na, Na, Meet]);
    assert_eq!(v.decision, Decision::FilterOut);
    assert!(v.consistent);
}

#[test]
fn birthday_card_conclusion_conflicts_with_result() {
    let v = parse_verdict(BIRTHDAY, "birthday card").unwrap();
    assert_eq!(v.outcomes(), [Fail, Meet, Na, Meet]);
    assert_eq!(v.decision, Decision::FilterOut);
    assert!(!v.consistent);
}

#[test]
fn raw_transcript_kept_verbatim() {
    for (t, c) in [
        (ORANGE, "orange"),
        (CLOCK, "clock"),
        (BIRTHDAY, "birthday card"),
        (PANCAKE, "pancake"),
    ] {
        assert_eq!(parse_verdict(t, c).unwrap().raw_transcript, t);
    }
}

#[test]
fn vision_mock_returns_orange_byte_identical() {
    let b = vision(&[ORANGE]);
    let req = gnv_core::backend::ChatRequest::new(
        system("orange"),
        "Category: orange",
        Default::default(),
    );
    assert_eq!(b.vision_chat(&asset(), &req).unwrap(), ORANGE);
}

#[test]
fn validate_instance_orange_and_clock() {
    let s = ValidatorSettings::default();
    let v = validate_instance(
        &asset(),
        "orange",
        &system("orange"),
        &vision(&[ORANGE]),
        &s,
    )
    .unwrap();
    assert_eq!(v.outcomes(), [Fail, Meet, Meet, Meet]);
    assert_eq!(v.decision, Decision::FilterOut);
    let v = validate_instance(&asset(), "clock", &system("clock"), &vision(&[CLOCK]), &s).unwrap();
    assert_eq!(v.outcomes(), [Meet, Meet, Meet, Fail]);
}

#[test]
fn garbage_twice_fails_closed() {
    let b = vision(&["no idea", "still no idea"]);
    let v = validate_instance(
        &asset(),
        "cup",
        &system("cup"),
        &b,
        &ValidatorSettings::default(),
    )
    .unwrap();
    assert_eq!(v.decision, Decision::FilterOut);
    assert!(!v.consistent);
    assert!(v.unparseable);
    assert!(v.raw_transcript.contains("no idea") && v.raw_transcript.contains("still no idea"));
    assert_eq!(b.invocations().len(), 2);
}

#[test]
fn garbage_then_valid_uses_retry() {
    let b = vision(&["no idea", ORANGE]);
    let v = validate_instance(
        &asset(),
        "orange",
        &system("orange"),
        &b,
        &ValidatorSettings::default(),
    )
    .unwrap();
    assert!(!v.unparseable);
    assert_eq!(v.outcomes(), [Fail, Meet, Meet, Meet]);
}

#[test]
fn image_sent_flattened_over_black() {
    let img = asset();
    let b = vision(&[ORANGE]);
    validate_instance(
        &img,
        "orange",
        &system("orange"),
        &b,
        &ValidatorSettings::default(),
    )
    .unwrap();
    let sent = b.invocations()[0].image_sha256.clone().unwrap();
    assert_eq!(sent, img.flatten_over_black().pixel_digest());
    assert_ne!(sent, img.pixel_digest());
}

#[test]
fn placeholder_in_system_prompt_is_rejected() {
    let r = validate_instance(
        &asset(),
        "cup",
        prompts::VALIDATION_OPTIMIZED,
        &vision(&[ORANGE]),
        &ValidatorSettings::default(),
    );
    assert!(r.is_err());
    let r = validate_instance(
        &asset(),
        " ",
        &system("cup"),
        &vision(&[ORANGE]),
        &ValidatorSettings::default(),
    );
    assert!(r.is_err());
}

#[test]
fn judge_transcripts_parse_consistently() {
    for (kind, keep) in [
        (Generator::Disk, true),
        (Generator::TwoDisks, false),
        (Generator::Empty, false),
    ] {
        let flat = render(kind, 128, 128, 11, 0).flatten_over_black();
        let t = judge_components(&flat, "kite");
        let v = parse_verdict(&t, "kite").unwrap();
        assert_eq!(v.is_keep(), keep, "{kind:?}");
        assert!(v.consistent, "{kind:?}");
    }
}

#[test]
fn keep_requires_keep_token() {
    // every criterion met, but the final line never says Keep
    let t = ORANGE.replace("Result:** Fail", "Result:** Meet");
    let v = parse_verdict(&t, "orange").unwrap();
    assert_eq!(v.outcomes(), [Meet; 4]);
    assert_eq!(v.decision, Decision::FilterOut);
    assert!(!v.consistent);
}

#[test]
fn sidecar_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let v = parse_verdict(PANCAKE, "pancake").unwrap();
    let path = v.write_sidecar(dir.path(), "000007").unwrap();
    assert!(path.ends_with("000007.verdict.json"));
    let back = ValidationVerdict::read_sidecar(&path).unwrap();
    assert_eq!(back, v);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(json["final"], "FilterOut");
    assert_eq!(json["criteria"].as_array().unwrap().len(), 4);
}

//! Prompt golden files, empty-evidence rendering and verdict parsing.
//!
//! Regenerate the golden files with `UPDATE_GOLDEN=1 cargo test --test protocol`.

use std::path::PathBuf;

use trustvl_core::{DistortionType, Label};
use trustvl_pipeline::{parse_verdict, EvidenceBundle, PromptBuilder, PromptStyle};

pub struct GoldenCase {
    pub file: &'static str,
    pub style: PromptStyle,
    pub distortion: DistortionType,
    pub claim: &'static str,
    pub direct: &'static [&'static str],
    pub inverse: &'static [&'static str],
    pub context: &'static [&'static str],
}

pub const CASES: [GoldenCase; 4] = [
    GoldenCase {
        file: "full_textual.txt",
        style: PromptStyle::Full,
        distortion: DistortionType::Textual,
        claim: "the river flooded near harbor",
        direct: &["the river receded near harbor", "weather news from harbor"],
        inverse: &["photo of the weather scene"],
        context: &["harbor officials reported calm water"],
    },
    GoldenCase {
        file: "full_visual_empty.txt",
        style: PromptStyle::Full,
        distortion: DistortionType::Visual,
        claim: "the striker scored near campus",
        direct: &[],
        inverse: &[],
        context: &[],
    },
    GoldenCase {
        file: "compact_cross_modal.txt",
        style: PromptStyle::Compact,
        distortion: DistortionType::CrossModal,
        claim: "  the market opened near downtown ",
        direct: &["the market opened near downtown"],
        inverse: &["photo of the football scene", "photo of the weather scene"],
        context: &[],
    },
    GoldenCase {
        file: "compact_unknown.txt",
        style: PromptStyle::Compact,
        distortion: DistortionType::Unknown,
        claim: "the museum closed near uptown",
        direct: &[],
        inverse: &["photo of the museum scene"],
        context: &[],
    },
];

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

pub fn render(case: &GoldenCase) -> String {
    let bundle = EvidenceBundle::from_texts("g", &strings(case.direct), &strings(case.inverse), &strings(case.context)).unwrap();
    PromptBuilder::new(case.style).assemble(case.claim, &bundle, case.distortion)
}

#[test]
fn prompts_match_golden_files() {
    let dir = golden_dir();
    for case in &CASES {
        let got = render(case);
        let path = dir.join(case.file);
        if std::env::var_os("UPDATE_GOLDEN").is_some() {
            std::fs::create_dir_all(&dir).unwrap();
            std::fs::write(&path, &got).unwrap();
        }
        let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(got, want, "{}", case.file);
    }
}

#[test]
fn empty_lists_render_the_literal_sentence() {
    let p = render(&CASES[1]);
    for kind in ["direct", "inverse", "context"] {
        assert!(p.contains(&format!("There is no {kind} evidence.")), "{kind} missing in\n{p}");
    }
    let p = render(&CASES[3]);
    assert!(p.contains("Direct Evidence: There is no direct evidence.\n"));
    assert!(!p.contains("There is no inverse evidence."));
}

#[test]
fn verdicts_are_case_sensitive_and_terminal() {
    let ok = [
        ("Step 5 - final: it matches Real", Label::Real),
        ("so the claim is Fake.", Label::Fake),
        ("Fake\n", Label::Fake),
        ("Real!  ", Label::Real),
    ];
    for (text, want) in ok {
        assert_eq!(parse_verdict(text).map(|v| v.label), Ok(want), "{text:?}");
    }
    for text in ["real", "FAKE", "the claim is fake", "Real but unsure", "Unreal", "Fakes", "", "Real Fake maybe"] {
        assert!(parse_verdict(text).is_err(), "{text:?} should be rejected");
    }
}

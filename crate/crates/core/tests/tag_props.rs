use labrun_core::crosslink::{parse_tag, Stage, TagError, TagParts};
use proptest::prelude::*;

fn segment() -> impl Strategy<Value = String> {
    "[a-z0-9][a-z0-9_.]{0,7}"
}

fn stage() -> impl Strategy<Value = Stage> {
    prop_oneof![
        Just(Stage::Submission),
        Just(Stage::Accepted),
        Just(Stage::Internal),
        (1u32..10_000).prop_map(Stage::Revision),
    ]
}

fn tag_parts() -> impl Strategy<Value = TagParts> {
    (
        segment(),
        segment(),
        stage(),
        proptest::option::of(proptest::collection::vec(segment(), 1..4)),
    )
        .prop_map(|(idea, venue, stage, suffix)| TagParts {
            idea,
            venue,
            stage,
            suffix: suffix.map(|s| s.join("-")),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn parse_inverts_format(parts in tag_parts()) {
        let text = parts.to_string();
        let back = parse_tag(&text).unwrap();
        prop_assert_eq!(&back, &parts);
        prop_assert_eq!(back.to_string(), text);
    }

    #[test]
    fn parsing_ignores_case(parts in tag_parts()) {
        let upper = parts.to_string().to_ascii_uppercase();
        prop_assert_eq!(parse_tag(&upper).unwrap(), parts);
    }

    #[test]
    fn empty_segment_always_rejected(parts in tag_parts(), at in any::<prop::sample::Index>()) {
        let text = parts.to_string();
        let dashes: Vec<usize> = text.match_indices('-').map(|(i, _)| i).collect();
        let i = dashes[at.index(dashes.len())];
        let broken = format!("{}-{}", &text[..i], &text[i..]);
        prop_assert!(matches!(parse_tag(&broken), Err(TagError::EmptySegment { .. })), "{}", broken);
    }
}

#[test]
fn fixed_vectors() {
    let sub = parse_tag("ccs-jcp-submission").unwrap();
    assert_eq!(
        sub,
        TagParts {
            idea: "ccs".into(),
            venue: "jcp".into(),
            stage: Stage::Submission,
            suffix: None
        }
    );
    assert_eq!(parse_tag("ccs-jcp-revision-2").unwrap().stage, Stage::Revision(2));
    let err = parse_tag("ccs--submission").unwrap_err();
    assert!(err.to_string().contains("empty segment"));
}

mod support;

use proptest::prelude::*;
use stagehand_core::dsl::{format, parse_str};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn plan_matches_oracle(sc in support::plan_oracle::scenario()) {
        if let Err(msg) = support::plan_oracle::check(&sc) {
            prop_assert!(false, "{}", msg);
        }
    }

    #[test]
    fn topo_order_respects_edges(d in support::dag::dag()) {
        if let Err(msg) = support::dag::check(&d) {
            prop_assert!(false, "{}", msg);
        }
        if let Err(msg) = support::dag::check_cycle(&d) {
            prop_assert!(false, "{}", msg);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn format_parse_round_trip(doc in support::docgen::document()) {
        let text = format(&doc);
        let parsed = parse_str(&text, "gen.fl");
        prop_assert!(parsed.is_ok(), "{:?}\n{}", parsed.err(), text);
        let parsed = parsed.unwrap();
        prop_assert_eq!(&parsed, &doc);
        let again = format(&parsed);
        prop_assert_eq!(&again, &text);
        prop_assert_eq!(parse_str(&again, "gen.fl").unwrap(), parsed);
    }
}

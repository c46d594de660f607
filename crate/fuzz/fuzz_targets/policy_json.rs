#![no_main]

use deepo_lqt::io::{covariance_policy_to_json, gain_policy_to_json, parse_policy_json, PolicyDoc};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(doc) = parse_policy_json(text) {
        let written = match &doc {
            PolicyDoc::Gain(p) => gain_policy_to_json(p),
            PolicyDoc::Covariance(p) => covariance_policy_to_json(p),
        };
        assert_eq!(parse_policy_json(&written).expect("written policy parses"), doc);
    }
});

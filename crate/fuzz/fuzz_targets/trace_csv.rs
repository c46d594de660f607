#![no_main]

use deepo_lqt::io::{parse_trace_csv, trace_to_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_trace_csv(text) {
        let again = parse_trace_csv(&trace_to_csv(&records)).expect("written trace parses");
        assert_eq!(records, again);
    }
});

#![no_main]

use deepo_lqt::io::{dataset_to_json, parse_dataset_json};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ds) = parse_dataset_json(text) {
        let again = parse_dataset_json(&dataset_to_json(&ds)).expect("written dataset parses");
        assert_eq!(ds, again);
        // Downstream constructors must fail cleanly, never panic.
        let _ = deepo_lqt::param::build_data_matrices(&ds);
        let _ = deepo_lqt::plant::check_pe(&ds);
    }
});

#![no_main]

use deepo_cli::config::{parse_override_args, ExperimentConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let args: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
    if let Ok(pairs) = parse_override_args(&args) {
        if let Ok(cfg) = ExperimentConfig::paper().with_overrides(&pairs) {
            let _ = cfg.resolve();
        }
    }
});

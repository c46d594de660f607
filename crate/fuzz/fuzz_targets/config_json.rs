#![no_main]

use deepo_cli::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_json_str(text) {
        if let Ok(resolved) = cfg.resolve() {
            let echo = resolved.to_json_pretty();
            let again = ExperimentConfig::from_json_str(&echo).expect("echoed config parses");
            assert_eq!(again.resolve().expect("echoed config resolves").to_json_pretty(), echo);
        }
    }
});

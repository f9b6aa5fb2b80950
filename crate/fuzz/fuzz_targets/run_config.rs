#![no_main]

use libfuzzer_sys::fuzz_target;
use mamoc_cli::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_toml(text) {
        // The echo must reload to the same configuration.
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use stnhcl::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text) {
        let again = RunConfig::parse(&cfg.render()).unwrap();
        assert_eq!(again.render(), cfg.render());
    }
});

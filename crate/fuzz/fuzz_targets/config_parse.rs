#![no_main]

use arzdelay::io::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_toml(text) {
        // anything accepted must also pass the standalone checks
        cfg.validate().expect("accepted config fails validation");
        assert_eq!(cfg.digest(), cfg.clone().digest());
    }
});

//! Feed arbitrary text to the experiment-configuration parser.
//!
//! Malformed or hostile JSON must come back as an error, never a panic.
//! Anything accepted must survive a serialize/parse round trip unchanged
//! (the echo embedded in artifacts depends on that).

#![no_main]

use libfuzzer_sys::fuzz_target;
use ulbq::config::ExperimentConfig;

fuzz_target!(|text: &str| {
    let Ok(cfg) = ExperimentConfig::from_json(text) else {
        return;
    };
    let echoed = cfg.to_json();
    let again = ExperimentConfig::from_json(&echoed).expect("config echo must parse");
    assert_eq!(again.to_json(), echoed, "config echo must be a fixed point");
});

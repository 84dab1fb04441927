//! Feed arbitrary bytes to the checkpoint container parser.
//!
//! The parser must reject malformed input with an error — never panic,
//! overflow, or allocate unboundedly — and anything it accepts must
//! re-serialize canonically: encode(parse(x)) parses back to the same
//! container, and encoding is a fixed point from then on.

#![no_main]

use libfuzzer_sys::fuzz_target;
use ulbq::checkpoint::Container;

fuzz_target!(|data: &[u8]| {
    let Ok(container) = Container::from_bytes(data) else {
        return;
    };
    let bytes = container.to_bytes();
    let again = Container::from_bytes(&bytes).expect("canonical encoding must parse");
    assert_eq!(again, container, "parse(encode(c)) must reproduce c");
    assert_eq!(again.to_bytes(), bytes, "encoding must be a fixed point");

    // Decoding entry points reachable from an accepted container must also
    // be panic-free for every record kind.
    for record in &container.records {
        match record.bits {
            0 => {}
            32 => {
                let _ = record.dense_values();
            }
            _ => {
                let _ = record.dequantized();
            }
        }
    }
});

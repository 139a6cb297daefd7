#![no_main]

use libfuzzer_sys::fuzz_target;
use lrelab::relations::{parse_category, serialize_category, Group};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cat) = parse_category("fuzz.txt", "fuzz", Group::Lexicographic, text) {
        let again = parse_category("fuzz.txt", "fuzz", Group::Lexicographic, &serialize_category(&cat))
            .expect("serialized category parses");
        assert_eq!(again, cat);
    }
});

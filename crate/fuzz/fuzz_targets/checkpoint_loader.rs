#![no_main]

use libfuzzer_sys::fuzz_target;
use lrelab::model::checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = checkpoint::from_bytes(data) {
        let bytes = checkpoint::to_container(&params).to_bytes();
        let again = checkpoint::from_bytes(&bytes).expect("written checkpoint loads");
        assert_eq!(again.to_bytes(), params.to_bytes());
    }
});

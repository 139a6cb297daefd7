#![no_main]

use libfuzzer_sys::fuzz_target;
use lrelab::lre::RelationalOperator;

fuzz_target!(|data: &[u8]| {
    if let Ok(op) = RelationalOperator::from_bytes(data) {
        let again = RelationalOperator::from_bytes(&op.to_bytes()).expect("written operator loads");
        assert_eq!(again, op);
        let s = vec![0.5; op.dim()];
        let _ = op.apply(&s);
    }
});

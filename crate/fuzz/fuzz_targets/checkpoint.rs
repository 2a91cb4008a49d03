#![no_main]

use libfuzzer_sys::fuzz_target;
use stylemask::model::{decode_checkpoint, decode_raw, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    let _ = decode_raw(data);
    if let Ok(model) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&model).expect("decoded model re-encodes");
        let again = decode_checkpoint(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(encode_checkpoint(&again).unwrap(), bytes);
    }
});

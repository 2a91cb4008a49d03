#![no_main]

use libfuzzer_sys::fuzz_target;
use stylemask::data_synth::StyleSet;
use stylemask::lora::SiteId;
use stylemask::model::{tokenize_prompt, VOCAB};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let styles = StyleSet::builtin(4).expect("builtin styles");
    if let Ok(p) = tokenize_prompt(text, &styles) {
        assert!(p.style_id < styles.len());
        assert!(p.ids.iter().all(|&id| id <= VOCAB.len()));
    }
    if let Some(site) = SiteId::parse(text) {
        assert_eq!(SiteId::parse(&site.to_string()), Some(site));
    }
});

//! Replays the fuzz corpus, plus truncated and bit-flipped variants, through
//! every parser and checks round trips.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylemask::data_synth::{DatasetManifest, StyleSet};
use stylemask::lora::SiteId;
use stylemask::model::{decode_checkpoint, decode_raw, encode_checkpoint, tokenize_prompt, VOCAB};
use stylemask::trainer::TrainConfig;

fn corpus(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "empty corpus {}", dir.display());
    files.into_iter().map(|p| std::fs::read(p).unwrap()).collect()
}

/// Seeds plus every prefix length sample and random single-byte corruptions.
fn variants(target: &str) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(target.len() as u64);
    let mut out = Vec::new();
    for seed in corpus(target) {
        out.push(seed.clone());
        for k in 0..16 {
            out.push(seed[..seed.len() * k / 16].to_vec());
        }
        for _ in 0..64 {
            let mut v = seed.clone();
            if !v.is_empty() {
                let i = rng.random_range(0..v.len());
                v[i] ^= 1 << rng.random_range(0..8);
            }
            out.push(v);
        }
    }
    out
}

#[test]
fn checkpoint_decoder() {
    let seeds = corpus("checkpoint");
    assert!(seeds.iter().any(|s| decode_checkpoint(s).is_ok()), "no valid checkpoint seed");
    for data in variants("checkpoint") {
        let _ = decode_raw(&data);
        if let Ok(model) = decode_checkpoint(&data) {
            let bytes = encode_checkpoint(&model).unwrap();
            let again = decode_checkpoint(&bytes).unwrap();
            assert_eq!(encode_checkpoint(&again).unwrap(), bytes);
        }
    }
}

#[test]
fn train_config_toml() {
    let mut parsed = 0;
    for data in variants("config") {
        let Ok(text) = std::str::from_utf8(&data) else { continue };
        if let Ok(c) = TrainConfig::from_toml(text) {
            parsed += 1;
            let again = TrainConfig::from_toml(&c.to_toml()).unwrap();
            assert_eq!(again, c);
        }
    }
    assert!(parsed > 0);
}

#[test]
fn dataset_manifest_json() {
    let mut parsed = 0;
    for data in variants("manifest") {
        if let Ok(m) = DatasetManifest::parse(&data) {
            parsed += 1;
            assert_eq!(DatasetManifest::parse(m.to_json().as_bytes()).unwrap(), m);
        }
    }
    assert!(parsed > 0);
}

#[test]
fn prompt_tokenizer_and_site_names() {
    let styles = StyleSet::builtin(4).unwrap();
    let mut tokenized = 0;
    for data in variants("tokenizer") {
        let Ok(text) = std::str::from_utf8(&data) else { continue };
        if let Ok(p) = tokenize_prompt(text, &styles) {
            tokenized += 1;
            assert!(p.style_id < styles.len());
            assert!(p.ids.iter().all(|&id| id <= VOCAB.len()));
            assert!(!p.style_positions.is_empty());
        }
        if let Some(site) = SiteId::parse(text) {
            assert_eq!(SiteId::parse(&site.to_string()), Some(site));
        }
    }
    assert!(tokenized > 0);
}

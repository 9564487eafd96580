//! The checked-in fuzz seeds must parse and roundtrip, so the fuzzers
//! start from inputs that reach past the first validation step.

use std::path::PathBuf;

use volta_core::data::{FeatureDataset, Role};
use volta_core::experiment::ExperimentConfig;
use volta_core::VoltaModel;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn binary_feature_seeds() {
    for (p, bytes) in seeds("features_binary") {
        let ds = FeatureDataset::from_binary(&bytes, Role::Test).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(ds.to_binary().unwrap(), bytes);
    }
}

#[test]
fn csv_feature_seeds() {
    for (p, bytes) in seeds("features_csv") {
        let text = String::from_utf8(bytes).unwrap();
        let ds = FeatureDataset::from_csv(&text, None, Role::Train).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        let again = FeatureDataset::from_csv(&ds.to_csv(), Some(ds.classes()), Role::Train).unwrap();
        assert_eq!(ds.features(), again.features());
        assert_eq!(ds.labels(), again.labels());
    }
}

#[test]
fn config_seeds() {
    for (p, bytes) in seeds("experiment_config") {
        let text = String::from_utf8(bytes).unwrap();
        ExperimentConfig::from_json_str(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
}

#[test]
fn checkpoint_seeds() {
    for (p, bytes) in seeds("checkpoint") {
        let m = VoltaModel::from_json_slice(&bytes).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(VoltaModel::from_json_slice(m.to_json().unwrap().as_bytes()).unwrap(), m);
    }
}

fn mutate(mut bytes: Vec<u8>, edits: &[(usize, u8, u8)]) -> Vec<u8> {
    for &(pos, byte, op) in edits {
        let i = if bytes.is_empty() { 0 } else { pos % bytes.len() };
        match op % 3 {
            0 if !bytes.is_empty() => bytes[i] = byte,
            1 => bytes.insert(i.min(bytes.len()), byte),
            _ if !bytes.is_empty() => {
                bytes.truncate(i);
            }
            _ => {}
        }
    }
    bytes
}

mod mutated {
    use proptest::prelude::*;

    use super::*;

    fn edits() -> impl Strategy<Value = Vec<(usize, u8, u8)>> {
        proptest::collection::vec((any::<usize>(), any::<u8>(), any::<u8>()), 1..6)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn binary_parser_never_panics(i in 0usize..8, e in edits()) {
            let s = seeds("features_binary");
            let bytes = mutate(s[i % s.len()].1.clone(), &e);
            if let Ok(ds) = FeatureDataset::from_binary(&bytes, Role::Test) {
                let again = FeatureDataset::from_binary(&ds.to_binary().unwrap(), Role::Test).unwrap();
                prop_assert_eq!(ds, again);
            }
        }

        #[test]
        fn csv_parser_never_panics(i in 0usize..8, e in edits()) {
            let s = seeds("features_csv");
            let bytes = mutate(s[i % s.len()].1.clone(), &e);
            if let Ok(text) = std::str::from_utf8(&bytes) {
                if let Ok(ds) = FeatureDataset::from_csv(text, None, Role::Train) {
                    let again = FeatureDataset::from_csv(&ds.to_csv(), Some(ds.classes()), Role::Train).unwrap();
                    prop_assert_eq!(ds.features(), again.features());
                }
            }
        }

        #[test]
        fn config_parser_never_panics(i in 0usize..8, e in edits()) {
            let s = seeds("experiment_config");
            let bytes = mutate(s[i % s.len()].1.clone(), &e);
            if let Ok(text) = std::str::from_utf8(&bytes) {
                let _ = ExperimentConfig::from_json_str(text);
            }
        }

        #[test]
        fn checkpoint_parser_never_panics(i in 0usize..8, e in edits()) {
            let s = seeds("checkpoint");
            let bytes = mutate(s[i % s.len()].1.clone(), &e);
            if let Ok(m) = VoltaModel::from_json_slice(&bytes) {
                prop_assert_eq!(VoltaModel::from_json_slice(m.to_json().unwrap().as_bytes()).unwrap(), m);
            }
        }
    }
}

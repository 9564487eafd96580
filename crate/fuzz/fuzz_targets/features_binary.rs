#![no_main]

use libfuzzer_sys::fuzz_target;
use volta_core::data::{FeatureDataset, Role};

fuzz_target!(|data: &[u8]| {
    let Ok(ds) = FeatureDataset::from_binary(data, Role::Test) else {
        return;
    };
    let bytes = ds.to_binary().expect("parsed dataset re-encodes");
    let again = FeatureDataset::from_binary(&bytes, Role::Test).expect("roundtrip");
    assert_eq!(ds, again);
});

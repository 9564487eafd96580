#![no_main]

use libfuzzer_sys::fuzz_target;
use volta_core::data::{FeatureDataset, Role};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(ds) = FeatureDataset::from_csv(text, None, Role::Train) else {
        return;
    };
    let again = FeatureDataset::from_csv(&ds.to_csv(), Some(ds.classes()), Role::Train).expect("roundtrip");
    assert_eq!(ds.features(), again.features());
    assert_eq!(ds.labels(), again.labels());
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use volta_core::VoltaModel;

fuzz_target!(|data: &[u8]| {
    let Ok(model) = VoltaModel::from_json_slice(data) else {
        return;
    };
    let json = model.to_json().expect("valid model serializes");
    let again = VoltaModel::from_json_slice(json.as_bytes()).expect("roundtrip");
    assert_eq!(model, again);
});

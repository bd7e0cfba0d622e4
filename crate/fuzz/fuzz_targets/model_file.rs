#![no_main]

use libfuzzer_sys::fuzz_target;
use radpos::classifier::VoxelClassifierModel;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = VoxelClassifierModel::from_bytes(data) {
        let again = VoxelClassifierModel::from_bytes(&model.to_bytes()).expect("re-encoded model loads");
        assert_eq!(again.to_bytes(), model.to_bytes());
    }
});

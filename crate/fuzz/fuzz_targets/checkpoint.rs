#![no_main]
use isoformer::model::{checkpoint_bytes, model_from_checkpoint_bytes, IsoFormerModel};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|bytes: &[u8]| {
    if let Ok(model) = model_from_checkpoint_bytes::<f32>(bytes) {
        let again: IsoFormerModel<f32> = model_from_checkpoint_bytes(&checkpoint_bytes(&model)).unwrap();
        assert_eq!(checkpoint_bytes(&again), checkpoint_bytes(&model));
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // any byte string must either parse cleanly or return an error; the
    // manifest shapes must agree with the tensor payloads on success
    if let Ok(ckpt) = evtexture::io::parse_checkpoint(data) {
        for (name, shape, values) in &ckpt.tensors {
            assert!(!name.is_empty());
            assert_eq!(values.len(), shape.iter().product::<usize>());
        }
    }
});

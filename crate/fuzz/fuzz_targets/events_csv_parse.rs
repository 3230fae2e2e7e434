#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(stream) = evtexture::io::parse_events_csv(text, 64, 64) {
        let encoded = evtexture::io::encode_events_csv(&stream);
        let again =
            evtexture::io::parse_events_csv(&encoded, 64, 64).expect("re-encoded CSV must parse");
        assert_eq!(stream.len(), again.len());
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // parsing must never panic; accepted streams must round-trip
    if let Ok(stream) = evtexture::io::parse_evt1(data) {
        let bytes = evtexture::io::encode_evt1(&stream);
        let again = evtexture::io::parse_evt1(&bytes).expect("re-encoded stream must parse");
        assert_eq!(stream.events, again.events);
        assert_eq!((stream.width, stream.height), (again.width, again.height));
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(bins) = evtexture::io::parse_voxel_array(data) {
        let bytes = evtexture::io::encode_voxel_array(&bins);
        let again = evtexture::io::parse_voxel_array(&bytes).expect("re-encoded array must parse");
        assert_eq!(bins.dim(), again.dim());
    }
});

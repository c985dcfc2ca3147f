#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(mesh) = gdanet::pointcloud::parse_off(text) {
            let _ = mesh.sample_surface(16, 0);
        }
    }
});

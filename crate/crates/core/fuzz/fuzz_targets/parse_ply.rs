#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok((cloud, scalars)) = gdanet::pointcloud::parse_ply(text) {
            // Whatever parses must survive a write/parse round trip.
            let out = gdanet::pointcloud::write_ply(&cloud, scalars.as_deref()).unwrap();
            gdanet::pointcloud::parse_ply(&out).unwrap();
        }
    }
});

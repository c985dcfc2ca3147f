//! Replays the checked-in fuzz seeds, their prefixes and single-byte edits
//! through the parsers and the checkpoint decoder; none may panic.

use std::path::Path;

use gdanet::model::decode_checkpoint;
use gdanet::pointcloud::{parse_off, parse_ply, parse_xyz, write_ply};

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut files: Vec<_> = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert!(!files.is_empty(), "no seeds in {}", dir.display());
    files.iter().map(|f| std::fs::read(f).unwrap()).collect()
}

// The seed, every prefix and a few deterministic byte edits.
fn variants(seed: &[u8]) -> Vec<Vec<u8>> {
    let mut out: Vec<Vec<u8>> = (0..=seed.len()).map(|n| seed[..n].to_vec()).collect();
    for (i, b) in [b'0', b'9', b'-', b'\n', b' ', 0xff].iter().enumerate() {
        for pos in (i..seed.len()).step_by(7) {
            let mut v = seed.to_vec();
            v[pos] = *b;
            out.push(v);
        }
    }
    out
}

fn text_inputs(target: &str) -> Vec<String> {
    seeds(target)
        .iter()
        .flat_map(|s| variants(s))
        .filter_map(|v| String::from_utf8(v).ok())
        .collect()
}

#[test]
fn xyz_seeds() {
    let mut parsed = 0;
    for text in text_inputs("parse_xyz") {
        parsed += usize::from(parse_xyz(&text).is_ok());
    }
    assert!(parsed > 0);
}

#[test]
fn ply_seeds_round_trip() {
    let mut parsed = 0;
    for text in text_inputs("parse_ply") {
        if let Ok((cloud, scalars)) = parse_ply(&text) {
            let again = parse_ply(&write_ply(&cloud, scalars.as_deref()).unwrap()).unwrap();
            assert_eq!(again.0.n_points(), cloud.n_points());
            parsed += 1;
        }
    }
    assert!(parsed > 0);
}

#[test]
fn off_seeds() {
    let mut parsed = 0;
    for text in text_inputs("parse_off") {
        if let Ok(mesh) = parse_off(&text) {
            let _ = mesh.sample_surface(16, 0);
            parsed += 1;
        }
    }
    assert!(parsed > 0);
}

#[test]
fn checkpoint_seeds() {
    let mut decoded = 0;
    for seed in seeds("decode_checkpoint") {
        // Prefixes of a megabyte-scale file would be slow; edits suffice.
        for v in variants(&seed).into_iter().step_by(3) {
            decoded += usize::from(decode_checkpoint::<f32>(&v).is_ok());
            let _ = decode_checkpoint::<f64>(&v);
        }
    }
    assert!(decoded > 0);
}

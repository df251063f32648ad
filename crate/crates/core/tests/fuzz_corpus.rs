//! Replays the checked-in fuzz corpus, plus truncated and bit-flipped
//! variants of each seed, through the parser entry points.

use std::path::{Path, PathBuf};

use fedmogp::checkpoint::{decode_payload, encode_payload, Checkpoint};
use fedmogp::config::ExperimentConfig;
use fedmogp::data::{parse_task_csv, Manifest};
use fedmogp::mogp::TaskKind;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

fn variants(bytes: &[u8]) -> Vec<Vec<u8>> {
    let mut v = Vec::new();
    for cut in [0, 1, bytes.len() / 3, bytes.len() / 2, bytes.len().saturating_sub(1)] {
        v.push(bytes[..cut.min(bytes.len())].to_vec());
    }
    for i in (0..bytes.len()).step_by((bytes.len() / 16).max(1)) {
        for mask in [0x01, 0x80, 0xff] {
            let mut b = bytes.to_vec();
            b[i] ^= mask;
            v.push(b);
        }
    }
    v
}

fn text(bytes: &[u8]) -> Option<&str> {
    std::str::from_utf8(bytes).ok()
}

#[test]
fn config_corpus() {
    for (path, bytes) in seeds("config") {
        let cfg = ExperimentConfig::from_toml_str(text(&bytes).unwrap());
        assert!(cfg.is_ok(), "{}: {cfg:?}", path.display());
        for v in variants(&bytes) {
            if let Some(t) = text(&v) {
                if let Ok(cfg) = ExperimentConfig::from_toml_str(t) {
                    cfg.validate().unwrap();
                }
            }
        }
    }
}

#[test]
fn manifest_corpus() {
    for (path, bytes) in seeds("manifest") {
        let m = Manifest::parse(text(&bytes).unwrap(), &path);
        assert!(m.is_ok(), "{}: {m:?}", path.display());
        for v in variants(&bytes) {
            if let Some(t) = text(&v) {
                let _ = Manifest::parse(t, &path);
            }
        }
    }
}

#[test]
fn csv_corpus() {
    for (path, bytes) in seeds("csv") {
        let kind = if path.to_string_lossy().contains("task1") { TaskKind::Classification } else { TaskKind::Regression };
        let parsed = parse_task_csv(text(&bytes).unwrap(), &path, kind);
        assert!(parsed.is_ok(), "{}: {parsed:?}", path.display());
        for v in variants(&bytes) {
            if let Some(t) = text(&v) {
                for kind in [TaskKind::Regression, TaskKind::Classification] {
                    if let Ok((x, y, _)) = parse_task_csv(t, &path, kind) {
                        assert_eq!(x.len(), y.len());
                    }
                }
            }
        }
    }
}

#[test]
fn checkpoint_corpus() {
    for (path, bytes) in seeds("checkpoint") {
        let cp = Checkpoint::decode(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(Checkpoint::decode(&cp.encode().unwrap()).unwrap().rounds_completed, cp.rounds_completed);
        for v in variants(&bytes) {
            let _ = Checkpoint::decode(&v);
        }
    }
}

#[test]
fn payload_corpus() {
    for (path, bytes) in seeds("payload") {
        let p = decode_payload(&bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(decode_payload(&encode_payload(&p).unwrap()).unwrap(), p);
        for v in variants(&bytes) {
            let _ = decode_payload(&v);
        }
    }
}

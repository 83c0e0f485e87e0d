use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_strata"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn strata")
}

pub fn scene_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenes").join(name)
}

fn files(dir: &Path, out: &mut Vec<PathBuf>) {
    let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            files(&p, out);
        } else {
            out.push(p);
        }
    }
}

/// SHA-256 over every relative path and file content under `dir`, in sorted order.
pub fn tree_hash(dir: &Path) -> String {
    let mut all = Vec::new();
    files(dir, &mut all);
    let mut h = Sha256::new();
    for p in all {
        h.update(p.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update([0]);
        h.update(std::fs::read(&p).unwrap());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

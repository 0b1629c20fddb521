//! Run manifests and versioned output directories.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use tpgn_core::bench::versioned_path;
use tpgn_core::Result;

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug)]
pub struct RunManifest {
    pub command: String,
    pub entries: Vec<(String, String)>,
    /// SHA-256 of the settings, hashed as a git blob of their text form.
    pub hash: String,
    pub out_dir: PathBuf,
}

fn settings_text(command: &str, entries: &[(String, String)]) -> String {
    let mut text = format!("command={command}\n");
    for (k, v) in entries {
        text.push_str(&format!("{k}={v}\n"));
    }
    text
}

pub fn content_hash(command: &str, entries: &[(String, String)]) -> String {
    let text = settings_text(command, entries);
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", text.len()).as_bytes());
    h.update(text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    /// Picks `root/<command>-<hash prefix>` (or its first free `.vN`
    /// sibling), creates it and writes the manifest there.
    pub fn create(command: &str, entries: Vec<(String, String)>, root: &Path) -> Result<Self> {
        let hash = content_hash(command, &entries);
        let out_dir = versioned_path(&root.join(format!("{command}-{}", &hash[..12])));
        fs::create_dir_all(&out_dir)?;
        let manifest = RunManifest { command: command.to_string(), entries, hash, out_dir };
        let mut f = fs::File::create(manifest.out_dir.join(MANIFEST_FILE))?;
        f.write_all(settings_text(command, &manifest.entries).as_bytes())?;
        writeln!(f, "hash={}", manifest.hash)?;
        writeln!(f, "out_dir={}", manifest.out_dir.display())?;
        Ok(manifest)
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out_dir.join(file)
    }
}

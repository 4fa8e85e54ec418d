use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Content hash of one input: a SHA-256 over `blob <len>\0<bytes>`, or over the
/// sorted `<hash> <relative path>` lines of a directory's files.
pub fn content_hash(path: &Path) -> std::io::Result<String> {
    if path.is_dir() {
        let mut lines = Vec::new();
        let mut stack = vec![path.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir)? {
                let p = entry?.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(path).unwrap_or(&p).to_string_lossy().into_owned();
                    lines.push(format!("{} {rel}\n", content_hash(&p)?));
                }
            }
        }
        lines.sort();
        Ok(format!("{:x}", Sha256::digest(lines.concat().as_bytes())))
    } else {
        let bytes = std::fs::read(path)?;
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", bytes.len()).as_bytes());
        h.update(&bytes);
        Ok(format!("{:x}", h.finalize()))
    }
}

#[derive(Debug, Serialize)]
pub struct InputEntry {
    pub path: PathBuf,
    pub sha256: String,
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Option<PathBuf>,
    pub inputs: Vec<InputEntry>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    /// Hash over the command, its arguments and every input hash.
    pub content_hash: String,
}

impl RunManifest {
    pub fn new(command: &str, config: Option<&Path>, inputs: &[&Path], seed: Option<u64>) -> std::io::Result<Self> {
        let args: Vec<String> = std::env::args().skip(1).collect();
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(InputEntry {
                    path: p.to_path_buf(),
                    sha256: content_hash(p)?,
                })
            })
            .collect::<std::io::Result<Vec<_>>>()?;
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        for a in &args {
            h.update(b"\0");
            h.update(a.as_bytes());
        }
        for i in &inputs {
            h.update(b"\n");
            h.update(i.sha256.as_bytes());
        }
        Ok(RunManifest {
            command: command.to_string(),
            args,
            config: config.map(Path::to_path_buf),
            inputs,
            outputs: Vec::new(),
            seed,
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            content_hash: format!("{:x}", h.finalize()),
        })
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("manifest serialises"))
    }
}

/// `<file>.manifest.json` beside a file output, `run_manifest.json` inside a directory output.
pub fn manifest_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join("run_manifest.json")
    } else {
        let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        output.with_file_name(name)
    }
}

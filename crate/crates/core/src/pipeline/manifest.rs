use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// What one stage read, wrote and measured. Stored as tab-separated lines
/// after a `manifest v1` header; paths under the run directory are relative
/// to it so that two runs in different directories compare equal.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub stage: String,
    pub params: Vec<(String, String)>,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<(String, String)>,
    pub metrics: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(stage: &str) -> Self {
        Manifest {
            stage: stage.to_string(),
            ..Manifest::default()
        }
    }

    pub fn metric(&self, name: &str) -> Option<&str> {
        self.metrics.iter().find(|(k, _)| k == name).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("manifest v1\nstage\t{}\n", self.stage);
        for (tag, list) in [
            ("param", &self.params),
            ("input", &self.inputs),
            ("output", &self.outputs),
            ("metric", &self.metrics),
        ] {
            for (k, v) in list {
                out.push_str(&format!("{tag}\t{k}\t{v}\n"));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            kind: "manifest",
            detail,
        };
        let mut lines = text.lines();
        match lines.next() {
            Some("manifest v1") => {}
            Some(h) if h.starts_with("manifest ") => {
                return Err(Error::Version {
                    kind: "manifest",
                    found: h["manifest ".len()..].to_string(),
                })
            }
            _ => return Err(bad("missing header".into())),
        }
        let mut m = Manifest::default();
        for line in lines {
            let parts: Vec<&str> = line.splitn(3, '\t').collect();
            match parts.as_slice() {
                ["stage", name] => m.stage = name.to_string(),
                [tag, k, v] => {
                    let list = match *tag {
                        "param" => &mut m.params,
                        "input" => &mut m.inputs,
                        "output" => &mut m.outputs,
                        "metric" => &mut m.metrics,
                        _ => return Err(bad(format!("unknown record '{tag}'"))),
                    };
                    list.push((k.to_string(), v.to_string()));
                }
                _ => return Err(bad(format!("bad line '{line}'"))),
            }
        }
        if m.stage.is_empty() {
            return Err(bad("no stage record".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::invalid(format!(
                "{} exists: another pipeline is using this directory (delete the file if it is stale)",
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut m = Manifest::new("vocab");
        m.params.push(("seed".into(), "3".into()));
        m.inputs.push(("/data/a b.txt".into(), "00".into()));
        m.outputs.push(("vocab.bpe".into(), "ff".into()));
        m.metrics.push(("perplexity".into(), "12.5".into()));
        let back = Manifest::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.metric("perplexity"), Some("12.5"));
        assert!(matches!(Manifest::from_text("manifest v9\n"), Err(Error::Version { .. })));
        assert!(Manifest::from_text("manifest v1\nbogus\tx\ty\n").is_err());
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn digest_of_known_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        std::fs::write(&p, b"abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}

//! Explicit dataset download with checksum verification. Nothing else in the
//! crate touches the network.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use sha2::{Digest, Sha256};

use crate::data::{MNIST_FILES, MNIST_SHA256};
use crate::error::{Error, Result};

pub const MNIST_MIRROR: &str = "https://storage.googleapis.com/cvdf-datasets/mnist";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Checks each MNIST file in `dir` against its known digest. Returns the
/// names of files that are missing or differ.
pub fn verify_mnist(dir: &Path) -> Vec<&'static str> {
    MNIST_FILES
        .iter()
        .zip(MNIST_SHA256)
        .filter(|(name, want)| {
            fs::read(dir.join(name))
                .map(|b| sha256_hex(&b) != *want)
                .unwrap_or(true)
        })
        .map(|(name, _)| *name)
        .collect()
}

fn download(url: &str) -> Result<Vec<u8>> {
    let fail = |e: ureq::Error| Error::data(url, e.to_string());
    let mut resp = ureq::get(url).call().map_err(fail)?;
    resp.body_mut()
        .with_config()
        .limit(256 << 20)
        .read_to_vec()
        .map_err(fail)
}

/// Downloads any MNIST file in `dir` that is missing or fails its checksum.
pub fn fetch_mnist(dir: &Path, mirror: &str) -> Result<Vec<&'static str>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let todo = verify_mnist(dir);
    for name in &todo {
        let url = format!("{mirror}/{name}.gz");
        let gz = download(&url)?;
        let mut raw = Vec::new();
        GzDecoder::new(gz.as_slice())
            .read_to_end(&mut raw)
            .map_err(|e| Error::data(&url, format!("gunzip: {e}")))?;
        let want = MNIST_SHA256[MNIST_FILES.iter().position(|f| f == name).unwrap()];
        let got = sha256_hex(&raw);
        if got != want {
            return Err(Error::data(
                &url,
                format!("checksum mismatch: got {got}, expected {want}"),
            ));
        }
        let path = dir.join(name);
        fs::write(&path, raw).map_err(|e| Error::io(&path, e))?;
    }
    Ok(todo)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn empty_dir_needs_everything() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(verify_mnist(dir.path()).len(), 4);
    }
}

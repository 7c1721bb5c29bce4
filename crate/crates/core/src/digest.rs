//! SHA-256 content digests.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

pub const ALGORITHM: &str = "sha-256";

/// A content digest over exact bytes. `hex` is 64 lowercase hex chars.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Digest {
    pub algorithm: String,
    pub hex: String,
}

impl Digest {
    pub fn of_bytes(bytes: &[u8]) -> Digest {
        Digest {
            algorithm: ALGORITHM.to_string(),
            hex: hex::encode(Sha256::digest(bytes)),
        }
    }

    pub fn of_file(path: &Path) -> io::Result<Digest> {
        Ok(Digest::of_bytes(&fs::read(path)?))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sha256:{}", self.hex)
    }
}

use alloc::string::String;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const ROUNDS: u32 = 10_000;

/// Salted, iterated SHA-256 of a password. The salt is supplied by the caller
/// since the core has no randomness source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PasswordHash {
    pub salt: String,
    pub hash: String,
}

fn derive(salt: &str, password: &str) -> [u8; 32] {
    let mut digest: [u8; 32] = Sha256::new().chain_update(salt.as_bytes()).chain_update(password.as_bytes()).finalize().into();
    for _ in 1..ROUNDS {
        digest = Sha256::new().chain_update(salt.as_bytes()).chain_update(digest).finalize().into();
    }
    digest
}

pub fn hash_password(salt: &str, password: &str) -> PasswordHash {
    PasswordHash { salt: salt.into(), hash: hex::encode(derive(salt, password)) }
}

pub fn verify_password(stored: &PasswordHash, password: &str) -> bool {
    let candidate = hex::encode(derive(&stored.salt, password));
    constant_time_eq(candidate.as_bytes(), stored.hash.as_bytes())
}

/// Comparison whose running time depends only on the longer input's length.
pub fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    let len = a.len().max(b.len());
    let mut diff = (a.len() ^ b.len()) as u64;
    for i in 0..len {
        let x = a.get(i).copied().unwrap_or(0);
        let y = b.get(i).copied().unwrap_or(0);
        diff |= u64::from(x ^ y);
    }
    core::hint::black_box(diff) == 0
}

use rand::RngCore;
use sha2::{Digest, Sha256};

/// Salted one-way mapping from annotator ids to public handles.
#[derive(Clone)]
pub struct Pseudonymizer {
    salt: Vec<u8>,
}

impl std::fmt::Debug for Pseudonymizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pseudonymizer").finish_non_exhaustive()
    }
}

impl Pseudonymizer {
    pub fn new(salt: impl Into<Vec<u8>>) -> Self {
        Pseudonymizer { salt: salt.into() }
    }

    /// Fresh 32-byte salt from the OS generator.
    pub fn random() -> Self {
        let mut salt = vec![0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut salt);
        Pseudonymizer { salt }
    }

    pub fn pseudonym(&self, annotator_id: &str) -> String {
        let mut h = Sha256::new();
        h.update((self.salt.len() as u64).to_le_bytes());
        h.update(&self.salt);
        h.update(annotator_id.as_bytes());
        let digest = h.finalize();
        format!("anon-{}", hex::encode(&digest[..8]))
    }
}

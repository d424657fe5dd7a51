//! Local keystore mapping rating-matrix rows to Ed25519 signing keys.
//!
//! Keys are generated from a seeded RNG so demo ledgers are reproducible.
//! The file holds secret keys in plain hex; it is a fixture format, not a
//! wallet.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ed25519_dalek::SigningKey;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::{PublicKey, Registry};
use crate::rng;

#[derive(Debug, Clone)]
pub struct UserKey {
    pub user_index: usize,
    pub signing_key: SigningKey,
}

impl UserKey {
    pub fn public_key(&self) -> PublicKey {
        self.signing_key.verifying_key().to_bytes()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Keystore {
    keys: BTreeMap<usize, UserKey>,
}

impl Keystore {
    /// Deterministic keys for users `0..n_users`.
    pub fn generate(n_users: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed);
        let keys = (0..n_users)
            .map(|u| {
                let mut secret = [0u8; 32];
                rng.fill_bytes(&mut secret);
                let key = UserKey {
                    user_index: u,
                    signing_key: SigningKey::from_bytes(&secret),
                };
                (u, key)
            })
            .collect();
        Keystore { keys }
    }

    pub fn get(&self, user: usize) -> Result<&UserKey> {
        self.keys.get(&user).ok_or(Error::UnregisteredUser(user))
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &UserKey> {
        self.keys.values()
    }

    pub fn registry(&self) -> Registry {
        self.keys.iter().map(|(&u, k)| (u, k.public_key())).collect()
    }

    pub fn to_json(&self) -> String {
        let file = KeystoreFile {
            keys: self
                .keys
                .values()
                .map(|k| KeyRecord {
                    user_index: k.user_index,
                    public_key_hex: hex::encode(k.public_key()),
                    secret_key_hex: hex::encode(k.signing_key.to_bytes()),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("keystore always serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: KeystoreFile = serde_json::from_str(text)?;
        let mut keys = BTreeMap::new();
        for rec in file.keys {
            let mut secret = [0u8; 32];
            hex::decode_to_slice(&rec.secret_key_hex, &mut secret).map_err(|e| {
                Error::InvalidParameter(format!("user {}: bad secret key: {e}", rec.user_index))
            })?;
            let key = UserKey {
                user_index: rec.user_index,
                signing_key: SigningKey::from_bytes(&secret),
            };
            if hex::encode(key.public_key()) != rec.public_key_hex.to_ascii_lowercase() {
                return Err(Error::InvalidParameter(format!(
                    "user {}: public key does not match secret key",
                    rec.user_index
                )));
            }
            if keys.insert(rec.user_index, key).is_some() {
                return Err(Error::InvalidParameter(format!(
                    "user {} appears twice in keystore",
                    rec.user_index
                )));
            }
        }
        Ok(Keystore { keys })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct KeystoreFile {
    keys: Vec<KeyRecord>,
}

#[derive(Serialize, Deserialize)]
struct KeyRecord {
    user_index: usize,
    public_key_hex: String,
    secret_key_hex: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded() {
        let a = Keystore::generate(4, 1);
        let b = Keystore::generate(4, 1);
        let c = Keystore::generate(4, 2);
        assert_eq!(a.registry(), b.registry());
        assert_ne!(a.registry(), c.registry());
        let distinct: std::collections::BTreeSet<_> = a.registry().into_values().collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let ks = Keystore::generate(3, 9);
        let back = Keystore::from_json(&ks.to_json()).unwrap();
        assert_eq!(back.registry(), ks.registry());
        assert!(back.get(5).is_err());

        let broken = ks.to_json().replacen(&hex::encode(ks.get(0).unwrap().public_key()), &"00".repeat(32), 1);
        assert!(Keystore::from_json(&broken).is_err());
    }
}

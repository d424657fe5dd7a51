//! User-owned consent ledger: an append-only, hash-chained log of signed
//! blocks carrying posts, consent grants/revocations, and token credits.
//!
//! Each block commits to the previous block's hash. Hash and signature both
//! cover the canonical byte layout (all integers big-endian):
//!
//! ```text
//! index         u64
//! prev_hash     [u8; 32]
//! timestamp     u64
//! author        [u8; 32]   Ed25519 public key
//! payload_type  u8         0 Post, 1 ConsentGrant, 2 ConsentRevoke, 3 TokenCredit
//! payload_len   u32
//! payload       [u8; payload_len]
//! ```
//!
//! `hash = SHA-256(canonical)` and `signature = Ed25519(author, canonical)`.
//! Block 0 is a genesis block with an all-zero author and signature.
//!
//! Consent and token balances are never stored: they are replayed from the
//! blocks a key authored. Consent is opt-in (false until granted) and the
//! latest consent block wins.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};
use crate::ratings::RatingMatrix;

pub type Hash = [u8; 32];
pub type PublicKey = [u8; 32];

pub const ZERO_HASH: Hash = [0u8; 32];
/// Author of the genesis block; no signing key corresponds to it.
pub const SYSTEM_AUTHOR: PublicKey = [0u8; 32];

/// Maps a rating-matrix row to the key that owns it.
pub type Registry = BTreeMap<usize, PublicKey>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PayloadType {
    Post,
    ConsentGrant,
    ConsentRevoke,
    TokenCredit,
}

impl PayloadType {
    pub fn tag(self) -> u8 {
        match self {
            PayloadType::Post => 0,
            PayloadType::ConsentGrant => 1,
            PayloadType::ConsentRevoke => 2,
            PayloadType::TokenCredit => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => PayloadType::Post,
            1 => PayloadType::ConsentGrant,
            2 => PayloadType::ConsentRevoke,
            3 => PayloadType::TokenCredit,
            _ => return None,
        })
    }
}

/// Encodes a token credit amount as a payload.
pub fn credit_payload(amount: i64) -> Vec<u8> {
    amount.to_be_bytes().to_vec()
}

fn validate_payload(payload_type: PayloadType, payload: &[u8]) -> Result<()> {
    match payload_type {
        PayloadType::Post => Ok(()),
        PayloadType::ConsentGrant | PayloadType::ConsentRevoke => {
            if payload.is_empty() {
                Ok(())
            } else {
                Err(Error::InvalidPayload("consent payloads must be empty".into()))
            }
        }
        PayloadType::TokenCredit => credit_amount(payload).map(|_| ()),
    }
}

fn credit_amount(payload: &[u8]) -> Result<u64> {
    let bytes: [u8; 8] = payload.try_into().map_err(|_| {
        Error::InvalidPayload(format!(
            "token credit payload must be 8 bytes, got {}",
            payload.len()
        ))
    })?;
    let amount = i64::from_be_bytes(bytes);
    u64::try_from(amount)
        .map_err(|_| Error::InvalidPayload(format!("negative token credit amount {amount}")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "BlockRecord", try_from = "BlockRecord")]
pub struct LedgerBlock {
    pub index: u64,
    pub prev_hash: Hash,
    pub timestamp: u64,
    pub author: PublicKey,
    pub payload_type: PayloadType,
    pub payload: Vec<u8>,
    pub signature: [u8; 64],
    pub hash: Hash,
}

impl LedgerBlock {
    /// The exact bytes covered by both hash and signature.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 32 + 8 + 32 + 1 + 4 + self.payload.len());
        out.extend_from_slice(&self.index.to_be_bytes());
        out.extend_from_slice(&self.prev_hash);
        out.extend_from_slice(&self.timestamp.to_be_bytes());
        out.extend_from_slice(&self.author);
        out.push(self.payload_type.tag());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn compute_hash(&self) -> Hash {
        Sha256::digest(self.canonical_bytes()).into()
    }

    fn genesis(timestamp: u64) -> Self {
        let mut block = LedgerBlock {
            index: 0,
            prev_hash: ZERO_HASH,
            timestamp,
            author: SYSTEM_AUTHOR,
            payload_type: PayloadType::Post,
            payload: Vec::new(),
            signature: [0u8; 64],
            hash: ZERO_HASH,
        };
        block.hash = block.compute_hash();
        block
    }

    fn signature_valid(&self, keys: &mut KeyCache) -> bool {
        if self.author == SYSTEM_AUTHOR {
            return self.index == 0 && self.signature == [0u8; 64];
        }
        let Some(key) = keys.get(&self.author) else {
            return false;
        };
        key.verify(&self.canonical_bytes(), &Signature::from_bytes(&self.signature))
            .is_ok()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("block records always serialize")
    }
}

/// Decompressed verifying keys, so each author's point is decoded once.
#[derive(Default)]
struct KeyCache(HashMap<PublicKey, Option<VerifyingKey>>);

impl KeyCache {
    fn get(&mut self, key: &PublicKey) -> Option<&VerifyingKey> {
        self.0
            .entry(*key)
            .or_insert_with(|| VerifyingKey::from_bytes(key).ok())
            .as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvalidReason {
    MissingGenesis,
    HashMismatch,
    BrokenLink,
    IndexGap,
    BadSignature,
}

impl fmt::Display for InvalidReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            InvalidReason::MissingGenesis => "missing genesis block",
            InvalidReason::HashMismatch => "hash mismatch",
            InvalidReason::BrokenLink => "prev_hash does not match previous block",
            InvalidReason::IndexGap => "index not contiguous",
            InvalidReason::BadSignature => "bad signature",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainStatus {
    Valid,
    Invalid { index: u64, reason: InvalidReason },
}

impl ChainStatus {
    pub fn is_valid(&self) -> bool {
        matches!(self, ChainStatus::Valid)
    }
}

/// Checks every block in order (hash, linkage, index, signature) and
/// reports the first failure. `index` in the report is the block's position.
pub fn verify_chain(blocks: &[LedgerBlock]) -> ChainStatus {
    if blocks.is_empty() {
        return ChainStatus::Invalid {
            index: 0,
            reason: InvalidReason::MissingGenesis,
        };
    }
    let mut keys = KeyCache::default();
    let mut expected_prev = ZERO_HASH;
    for (pos, block) in blocks.iter().enumerate() {
        let fail = |reason| ChainStatus::Invalid {
            index: pos as u64,
            reason,
        };
        if block.compute_hash() != block.hash {
            return fail(InvalidReason::HashMismatch);
        }
        if block.prev_hash != expected_prev {
            return fail(InvalidReason::BrokenLink);
        }
        if block.index != pos as u64 {
            return fail(InvalidReason::IndexGap);
        }
        if !block.signature_valid(&mut keys) {
            return fail(InvalidReason::BadSignature);
        }
        expected_prev = block.hash;
    }
    ChainStatus::Valid
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct AccountState {
    consent: bool,
    balance: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayState {
    accounts: HashMap<PublicKey, AccountState>,
    minted: u64,
}

impl ReplayState {
    fn apply(&mut self, block: &LedgerBlock) -> Result<()> {
        if block.author == SYSTEM_AUTHOR {
            return Ok(());
        }
        match block.payload_type {
            PayloadType::Post => {}
            PayloadType::ConsentGrant => self.accounts.entry(block.author).or_default().consent = true,
            PayloadType::ConsentRevoke => self.accounts.entry(block.author).or_default().consent = false,
            PayloadType::TokenCredit => {
                let amount = credit_amount(&block.payload)?;
                let account = self.accounts.entry(block.author).or_default();
                let overflow = || Error::InvalidPayload("token balance overflow".into());
                account.balance = account.balance.checked_add(amount).ok_or_else(overflow)?;
                self.minted = self.minted.checked_add(amount).ok_or_else(overflow)?;
            }
        }
        Ok(())
    }

    pub fn replay<'a>(blocks: impl IntoIterator<Item = &'a LedgerBlock>) -> Result<Self> {
        let mut state = ReplayState::default();
        for block in blocks {
            state.apply(block)?;
        }
        Ok(state)
    }

    pub fn consent(&self, key: &PublicKey) -> bool {
        self.accounts.get(key).is_some_and(|a| a.consent)
    }

    pub fn balance(&self, key: &PublicKey) -> u64 {
        self.accounts.get(key).map_or(0, |a| a.balance)
    }

    /// Total amount ever credited.
    pub fn minted(&self) -> u64 {
        self.minted
    }

    pub fn total_balance(&self) -> u64 {
        self.accounts.values().map(|a| a.balance).sum()
    }
}

/// A user's view of the ledger: identity plus replayed consent and balance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UserAccount {
    #[serde(with = "hex_array")]
    pub public_key: PublicKey,
    pub user_index: usize,
    pub consent: bool,
    pub token_balance: u64,
}

/// Append-only ledger with incrementally tracked account state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ledger {
    blocks: Vec<LedgerBlock>,
    state: ReplayState,
}

impl Ledger {
    /// A ledger holding only the genesis block.
    pub fn new(timestamp: u64) -> Self {
        Ledger {
            blocks: vec![LedgerBlock::genesis(timestamp)],
            state: ReplayState::default(),
        }
    }

    /// Rebuilds a ledger from stored blocks, replaying account state. The
    /// chain itself is not verified here; call [`Ledger::verify`].
    pub fn from_blocks(blocks: Vec<LedgerBlock>) -> Result<Self> {
        let state = ReplayState::replay(&blocks)?;
        Ok(Ledger { blocks, state })
    }

    pub fn blocks(&self) -> &[LedgerBlock] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn head_hash(&self) -> Hash {
        self.blocks.last().map_or(ZERO_HASH, |b| b.hash)
    }

    pub fn verify(&self) -> ChainStatus {
        verify_chain(&self.blocks)
    }

    /// Incrementally tracked state; equal to `ReplayState::replay(blocks)`.
    pub fn state(&self) -> &ReplayState {
        &self.state
    }

    pub fn append_event(
        &mut self,
        key: &SigningKey,
        payload_type: PayloadType,
        payload: Vec<u8>,
        timestamp: u64,
    ) -> Result<LedgerBlock> {
        validate_payload(payload_type, &payload)?;
        if payload.len() > u32::MAX as usize {
            return Err(Error::InvalidPayload("payload too large".into()));
        }
        let mut block = LedgerBlock {
            index: self.blocks.len() as u64,
            prev_hash: self.head_hash(),
            timestamp,
            author: key.verifying_key().to_bytes(),
            payload_type,
            payload,
            signature: [0u8; 64],
            hash: ZERO_HASH,
        };
        let bytes = block.canonical_bytes();
        block.signature = key
            .try_sign(&bytes)
            .map_err(|e| Error::SigningFailure(e.to_string()))?
            .to_bytes();
        block.hash = Sha256::digest(&bytes).into();
        self.state.apply(&block)?;
        self.blocks.push(block.clone());
        Ok(block)
    }

    pub fn post(&mut self, key: &SigningKey, text: &str, timestamp: u64) -> Result<LedgerBlock> {
        self.append_event(key, PayloadType::Post, text.as_bytes().to_vec(), timestamp)
    }

    pub fn set_consent(&mut self, key: &SigningKey, consent: bool, timestamp: u64) -> Result<LedgerBlock> {
        let kind = if consent {
            PayloadType::ConsentGrant
        } else {
            PayloadType::ConsentRevoke
        };
        self.append_event(key, kind, Vec::new(), timestamp)
    }

    pub fn credit_tokens(&mut self, key: &SigningKey, amount: i64, timestamp: u64) -> Result<LedgerBlock> {
        self.append_event(key, PayloadType::TokenCredit, credit_payload(amount), timestamp)
    }

    pub fn consent(&self, key: &PublicKey) -> bool {
        self.state.consent(key)
    }

    pub fn balance(&self, key: &PublicKey) -> u64 {
        self.state.balance(key)
    }

    pub fn account(&self, key: &PublicKey, user_index: usize) -> UserAccount {
        UserAccount {
            public_key: *key,
            user_index,
            consent: self.consent(key),
            token_balance: self.balance(key),
        }
    }

    /// Rows of users whose current consent is true; everyone else's row is
    /// emptied. Every user with observations must be in `registry`.
    pub fn consented_ratings(&self, matrix: &RatingMatrix, registry: &Registry) -> Result<RatingMatrix> {
        let allowed = (0..matrix.n_users())
            .map(|u| match registry.get(&u) {
                Some(key) => Ok(self.consent(key)),
                None if matrix.user_ratings(u).is_empty() => Ok(false),
                None => Err(Error::UnregisteredUser(u)),
            })
            .collect::<Result<Vec<bool>>>()?;
        Ok(matrix.filter_users(|u| allowed[u]))
    }

    pub fn export_profile(&self, key: &PublicKey) -> Result<PortableProfile> {
        let blocks: Vec<LedgerBlock> = self
            .blocks
            .iter()
            .filter(|b| b.author == *key)
            .cloned()
            .collect();
        let (Some(first), Some(last)) = (blocks.first(), blocks.last()) else {
            return Err(Error::InvalidParameter(format!(
                "key {} has no blocks to export",
                hex::encode(key)
            )));
        };
        let start = first.index.saturating_sub(1);
        let hashes = self.blocks[start as usize..=last.index as usize]
            .iter()
            .map(|b| b.hash)
            .collect();
        Ok(PortableProfile {
            public_key: *key,
            blocks,
            chain_proof: ChainProof {
                start_index: start,
                hashes,
            },
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            out.push_str(&b.to_json_line());
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// Appends `blocks` to an existing ledger file without rewriting it.
    pub fn append_to_file(path: impl AsRef<Path>, blocks: &[LedgerBlock]) -> Result<()> {
        let path = path.as_ref();
        let mut file = fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut buf = String::new();
        for b in blocks {
            buf.push_str(&b.to_json_line());
            buf.push('\n');
        }
        file.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_blocks(read_blocks(path)?)
    }
}

/// Parses a JSON-lines ledger file without verifying or replaying it.
pub fn read_blocks(path: impl AsRef<Path>) -> Result<Vec<LedgerBlock>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_blocks(&text)
}

pub fn parse_blocks(text: &str) -> Result<Vec<LedgerBlock>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Hashes of the origin ledger from the block before the profile's first
/// block through its last one, so each exported block's position and
/// linkage can be checked without the full ledger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainProof {
    pub start_index: u64,
    #[serde(with = "hex_vec")]
    pub hashes: Vec<Hash>,
}

impl ChainProof {
    fn hash_at(&self, index: u64) -> Option<&Hash> {
        let offset = index.checked_sub(self.start_index)?;
        self.hashes.get(usize::try_from(offset).ok()?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortableProfile {
    #[serde(rename = "public_key_hex", with = "hex_array")]
    pub public_key: PublicKey,
    pub blocks: Vec<LedgerBlock>,
    pub chain_proof: ChainProof,
}

/// Consent and balance reconstructed from a verified profile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ImportedAccount {
    #[serde(rename = "public_key_hex", with = "hex_array")]
    pub public_key: PublicKey,
    pub consent: bool,
    pub token_balance: u64,
    pub n_blocks: usize,
}

impl PortableProfile {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profiles always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Verifies every block (hash, signature, authorship, ordering, linkage
    /// against the chain proof) and replays consent and balance.
    pub fn import(&self) -> Result<ImportedAccount> {
        let fail = |msg: String| Err(Error::VerificationFailure(msg));
        if self.blocks.is_empty() {
            return fail("profile has no blocks".into());
        }
        let Ok(key) = VerifyingKey::from_bytes(&self.public_key) else {
            return fail("public key is not a valid curve point".into());
        };
        let mut last_index = None;
        for block in &self.blocks {
            let i = block.index;
            if block.author != self.public_key {
                return fail(format!("block {i} has a different author"));
            }
            if last_index.is_some_and(|last| i <= last) {
                return fail(format!("block {i} is out of order"));
            }
            last_index = Some(i);
            if i == 0 {
                return fail("profile cannot contain the genesis block".into());
            }
            let bytes = block.canonical_bytes();
            if <[u8; 32]>::from(Sha256::digest(&bytes)) != block.hash {
                return fail(format!("block {i}: hash mismatch"));
            }
            if key.verify(&bytes, &Signature::from_bytes(&block.signature)).is_err() {
                return fail(format!("block {i}: bad signature"));
            }
            if self.chain_proof.hash_at(i) != Some(&block.hash)
                || self.chain_proof.hash_at(i - 1) != Some(&block.prev_hash)
            {
                return fail(format!("block {i}: not linked by the chain proof"));
            }
            if let Err(e) = validate_payload(block.payload_type, &block.payload) {
                return fail(format!("block {i}: {e}"));
            }
        }
        let state = ReplayState::replay(&self.blocks).map_err(|e| Error::VerificationFailure(e.to_string()))?;
        Ok(ImportedAccount {
            public_key: self.public_key,
            consent: state.consent(&self.public_key),
            token_balance: state.balance(&self.public_key),
            n_blocks: self.blocks.len(),
        })
    }
}

/// JSON-lines representation of a block.
#[derive(Serialize, Deserialize)]
struct BlockRecord {
    index: u64,
    prev_hash_hex: String,
    timestamp: u64,
    author_hex: String,
    payload_type: PayloadType,
    payload_b64: String,
    signature_hex: String,
    hash_hex: String,
}

impl From<LedgerBlock> for BlockRecord {
    fn from(b: LedgerBlock) -> Self {
        BlockRecord {
            index: b.index,
            prev_hash_hex: hex::encode(b.prev_hash),
            timestamp: b.timestamp,
            author_hex: hex::encode(b.author),
            payload_type: b.payload_type,
            payload_b64: BASE64.encode(&b.payload),
            signature_hex: hex::encode(b.signature),
            hash_hex: hex::encode(b.hash),
        }
    }
}

impl TryFrom<BlockRecord> for LedgerBlock {
    type Error = String;

    fn try_from(r: BlockRecord) -> std::result::Result<Self, String> {
        fn fixed<const N: usize>(field: &str, s: &str) -> std::result::Result<[u8; N], String> {
            let mut out = [0u8; N];
            hex::decode_to_slice(s, &mut out).map_err(|e| format!("{field}: {e}"))?;
            Ok(out)
        }
        Ok(LedgerBlock {
            index: r.index,
            prev_hash: fixed("prev_hash_hex", &r.prev_hash_hex)?,
            timestamp: r.timestamp,
            author: fixed("author_hex", &r.author_hex)?,
            payload_type: r.payload_type,
            payload: BASE64
                .decode(&r.payload_b64)
                .map_err(|e| format!("payload_b64: {e}"))?,
            signature: fixed("signature_hex", &r.signature_hex)?,
            hash: fixed("hash_hex", &r.hash_hex)?,
        })
    }
}

mod hex_array {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(&s, &mut out).map_err(D::Error::custom)?;
        Ok(out)
    }
}

mod hex_vec {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[[u8; 32]], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(hex::encode))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<[u8; 32]>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| {
                let mut out = [0u8; 32];
                hex::decode_to_slice(s, &mut out).map_err(D::Error::custom)?;
                Ok(out)
            })
            .collect()
    }
}

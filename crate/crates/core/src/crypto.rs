//! Pluggable cipher suite: authenticated symmetric encryption under link
//! keys, signatures over ciphertext + timestamp, and the leader's mask
//! generators.

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes128Gcm, Nonce};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::{RngCore, SeedableRng};
use rand_chacha::{ChaCha12Rng, ChaCha20Rng, ChaCha8Rng};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fixed::FixedParams;

pub type SymmetricKey = [u8; 16];

/// Number of built-in mask generator families.
pub const NOISE_GENERATORS: u32 = 4;

/// Authenticated symmetric encryption. `nonce` must be unique per key; the
/// simulator feeds it a global message sequence number.
pub trait CipherSuite: Send + Sync {
    fn encrypt(&self, key: &SymmetricKey, nonce: u64, plaintext: &[u8]) -> Vec<u8>;
    fn decrypt(&self, key: &SymmetricKey, ciphertext: &[u8]) -> Result<Vec<u8>>;
}

/// Production suite: AES-128-GCM, nonce carried in the first 12 bytes.
#[derive(Debug, Default, Clone, Copy)]
pub struct AeadSuite;

impl CipherSuite for AeadSuite {
    fn encrypt(&self, key: &SymmetricKey, nonce: u64, plaintext: &[u8]) -> Vec<u8> {
        let cipher = Aes128Gcm::new(key.into());
        let mut nonce_bytes = [0u8; 12];
        nonce_bytes[..8].copy_from_slice(&nonce.to_le_bytes());
        let ct = cipher
            .encrypt(Nonce::from_slice(&nonce_bytes), Payload::from(plaintext))
            .expect("AES-GCM encryption is infallible for in-memory buffers");
        let mut out = nonce_bytes.to_vec();
        out.extend_from_slice(&ct);
        out
    }

    fn decrypt(&self, key: &SymmetricKey, ciphertext: &[u8]) -> Result<Vec<u8>> {
        if ciphertext.len() < 12 {
            return Err(Error::AuthenticationFailure("ciphertext shorter than nonce".into()));
        }
        let (nonce_bytes, body) = ciphertext.split_at(12);
        let cipher = Aes128Gcm::new(key.into());
        cipher
            .decrypt(Nonce::from_slice(nonce_bytes), Payload::from(body))
            .map_err(|_| Error::AuthenticationFailure("AEAD tag mismatch".into()))
    }
}

/// Transparent test suite: plaintext plus a keyed hash tag. Same
/// detect-wrong-key and detect-tamper contract, none of the cost.
#[derive(Debug, Default, Clone, Copy)]
pub struct PlainSuite;

impl PlainSuite {
    fn tag(key: &SymmetricKey, body: &[u8]) -> [u8; 8] {
        let mut h = Sha256::new();
        h.update(key);
        h.update(body);
        let d = h.finalize();
        d[..8].try_into().unwrap()
    }
}

impl CipherSuite for PlainSuite {
    fn encrypt(&self, key: &SymmetricKey, _nonce: u64, plaintext: &[u8]) -> Vec<u8> {
        let mut out = plaintext.to_vec();
        out.extend_from_slice(&Self::tag(key, plaintext));
        out
    }

    fn decrypt(&self, key: &SymmetricKey, ciphertext: &[u8]) -> Result<Vec<u8>> {
        if ciphertext.len() < 8 {
            return Err(Error::AuthenticationFailure("ciphertext shorter than tag".into()));
        }
        let (body, tag) = ciphertext.split_at(ciphertext.len() - 8);
        if Self::tag(key, body) != tag {
            return Err(Error::AuthenticationFailure("tag mismatch".into()));
        }
        Ok(body.to_vec())
    }
}

/// Per-client signing identity. Keys are generated deterministically from a
/// seed so scenario runs replay.
pub struct ClientKeypair {
    pub signing: SigningKey,
    pub verifying: VerifyingKey,
}

pub fn generate_keypair(seed: u64) -> ClientKeypair {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut secret = [0u8; 32];
    rng.fill_bytes(&mut secret);
    let signing = SigningKey::from_bytes(&secret);
    let verifying = signing.verifying_key();
    ClientKeypair { signing, verifying }
}

/// Ciphertext plus a signed timestamp; the unit exchanged between peers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedEnvelope {
    pub sender: u32,
    pub timestamp: u64,
    pub ciphertext: Vec<u8>,
    pub signature: Vec<u8>,
}

fn signed_message(ciphertext: &[u8], timestamp: u64) -> Vec<u8> {
    let mut msg = Vec::with_capacity(ciphertext.len() + 8);
    msg.extend_from_slice(ciphertext);
    msg.extend_from_slice(&timestamp.to_le_bytes());
    msg
}

pub fn sign_envelope(
    sender: u32,
    ciphertext: Vec<u8>,
    timestamp: u64,
    sk: &SigningKey,
) -> SignedEnvelope {
    let signature = sk.sign(&signed_message(&ciphertext, timestamp));
    SignedEnvelope { sender, timestamp, ciphertext, signature: signature.to_bytes().to_vec() }
}

/// Accepts iff the signature covers (ciphertext || timestamp) under `pk`
/// and the timestamp is within the freshness window of `now`.
pub fn verify_envelope(
    env: &SignedEnvelope,
    pk: &VerifyingKey,
    now: u64,
    freshness_window: u64,
) -> Result<()> {
    let sig_bytes: [u8; 64] = env
        .signature
        .as_slice()
        .try_into()
        .map_err(|_| Error::Forgery(format!("signature length {}", env.signature.len())))?;
    let sig = Signature::from_bytes(&sig_bytes);
    pk.verify(&signed_message(&env.ciphertext, env.timestamp), &sig)
        .map_err(|_| Error::Forgery("signature verification failed".into()))?;
    if now.abs_diff(env.timestamp) > freshness_window {
        return Err(Error::Replay { message: env.timestamp, now, window: freshness_window });
    }
    Ok(())
}

impl SignedEnvelope {
    /// Wire format: sender u32 LE, timestamp u64 LE, ct-len u32 LE, ct,
    /// sig-len u16 LE, sig.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(18 + self.ciphertext.len() + self.signature.len());
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&self.timestamp.to_le_bytes());
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&(self.signature.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<SignedEnvelope> {
        let need = |n: usize, at: usize| {
            if bytes.len() < at + n {
                Err(Error::Wire("envelope truncated".into()))
            } else {
                Ok(())
            }
        };
        need(16, 0)?;
        let sender = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let timestamp = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let ct_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        need(ct_len + 2, 16)?;
        let ciphertext = bytes[16..16 + ct_len].to_vec();
        let sig_at = 16 + ct_len;
        let sig_len = u16::from_le_bytes(bytes[sig_at..sig_at + 2].try_into().unwrap()) as usize;
        need(sig_len, sig_at + 2)?;
        let signature = bytes[sig_at + 2..sig_at + 2 + sig_len].to_vec();
        if bytes.len() != sig_at + 2 + sig_len {
            return Err(Error::Wire("trailing bytes after envelope".into()));
        }
        Ok(SignedEnvelope { sender, timestamp, ciphertext, signature })
    }
}

/// Leader-generated mask, uniform over the full modular range so the masked
/// partial sums are statistically independent of the underlying updates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseVector {
    pub values: Vec<u64>,
    pub generator_id: u32,
    pub seed: u64,
}

pub fn generate_noise(
    dim: usize,
    generator_id: u32,
    seed: u64,
    params: FixedParams,
) -> Result<NoiseVector> {
    if dim == 0 {
        return Err(Error::parameter("noise dimension must be at least 1"));
    }
    let mask = params.mask();
    let values: Vec<u64> = match generator_id {
        0 => raw_stream(ChaCha8Rng::seed_from_u64(seed), dim),
        1 => raw_stream(ChaCha12Rng::seed_from_u64(seed), dim),
        2 => raw_stream(ChaCha20Rng::seed_from_u64(seed), dim),
        3 => sha_counter_stream(seed, dim),
        other => {
            return Err(Error::parameter(format!(
                "unknown noise generator {other} (have {NOISE_GENERATORS})"
            )))
        }
    };
    Ok(NoiseVector {
        values: values.into_iter().map(|v| v & mask).collect(),
        generator_id,
        seed,
    })
}

fn raw_stream<R: RngCore>(mut rng: R, dim: usize) -> Vec<u64> {
    (0..dim).map(|_| rng.next_u64()).collect()
}

fn sha_counter_stream(seed: u64, dim: usize) -> Vec<u64> {
    (0..dim as u64)
        .map(|i| {
            let mut h = Sha256::new();
            h.update(seed.to_le_bytes());
            h.update(i.to_le_bytes());
            u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

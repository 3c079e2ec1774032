//! Keyed random streams derived from one master seed.
//!
//! Stream seed = SHA-256(`"mars/stream/v1"` || master seed as little-endian u64
//! || `0x00` || key as UTF-8). Streams are identified by name, so the order in
//! which they are created never changes their contents.
//!
//! Key layout used by training:
//! - `env`
//! - `agent/{i}/init/{actor|critic|safety}`, `agent/{i}/noise`, `agent/{i}/buffer`
//! - `mac/init`, `mac/buffer`

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

const DOMAIN: &[u8] = b"mars/stream/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedStreams {
    pub master: u64,
}

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn seed_for(&self, key: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(DOMAIN);
        h.update(self.master.to_le_bytes());
        h.update([0u8]);
        h.update(key.as_bytes());
        let digest = h.finalize();
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }

    pub fn stream(&self, key: &str) -> Stream {
        Stream(ChaCha8Rng::from_seed(self.seed_for(key)))
    }

    pub fn agent(&self, index: usize, purpose: &str) -> Stream {
        self.stream(&format!("agent/{index}/{purpose}"))
    }
}

/// A ChaCha8 generator whose position survives serialization, so a resumed run
/// continues the exact same sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stream(ChaCha8Rng);

impl Stream {
    pub fn from_seed_bytes(seed: [u8; 32]) -> Self {
        Stream(ChaCha8Rng::from_seed(seed))
    }
}

impl RngCore for Stream {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

#[derive(Serialize, Deserialize)]
struct StreamState {
    seed: String,
    stream: u64,
    word_pos: String,
}

impl Serialize for Stream {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        StreamState {
            seed: hex::encode(self.0.get_seed()),
            stream: self.0.get_stream(),
            word_pos: self.0.get_word_pos().to_string(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Stream {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let st = StreamState::deserialize(d)?;
        let bytes = hex::decode(&st.seed).map_err(D::Error::custom)?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| D::Error::custom("seed must be 32 bytes"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(st.stream);
        rng.set_word_pos(st.word_pos.parse::<u128>().map_err(D::Error::custom)?);
        Ok(Stream(rng))
    }
}

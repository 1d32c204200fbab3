//! Token data: the byte-level tokenizer, the on-disk corpus container, and
//! the windowing/shuffling used by training.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};

/// Byte-level vocabulary: ids 0..=255 are raw bytes, then the two markers.
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const BYTE_VOCAB: u32 = 258;

/// Frame a document: BOS, its bytes, EOS.
pub fn encode_bytes(text: &[u8]) -> Vec<u32> {
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(BOS);
    ids.extend(text.iter().map(|&b| b as u32));
    ids.push(EOS);
    ids
}

/// Best-effort readable form of a byte-token stream; markers are spelled out
/// and non-utf8 stretches come back as replacement characters.
pub fn decode_to_string(ids: &[u32]) -> String {
    let mut out = String::new();
    let mut bytes = Vec::new();
    let flush = |bytes: &mut Vec<u8>, out: &mut String| {
        if !bytes.is_empty() {
            out.push_str(&String::from_utf8_lossy(bytes));
            bytes.clear();
        }
    };
    for &id in ids {
        match id {
            0..=255 => bytes.push(id as u8),
            BOS => {
                flush(&mut bytes, &mut out);
                out.push_str("⟨bos⟩");
            }
            EOS => {
                flush(&mut bytes, &mut out);
                out.push_str("⟨eos⟩");
            }
            other => {
                flush(&mut bytes, &mut out);
                out.push_str(&format!("⟨{other}⟩"));
            }
        }
    }
    flush(&mut bytes, &mut out);
    out
}

const MAGIC: &[u8; 4] = b"ALCT";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab_size: u32,
    pub ids: Vec<u32>,
}

/// Binary token container:
/// ```text
/// "ALCT"  u32 version  u32 vocab_size  u64 count  count × u32 ids
/// ```
/// all little-endian.
pub fn write_corpus(path: &Path, vocab_size: u32, ids: &[u32]) -> Result<()> {
    let mut out = Vec::with_capacity(20 + ids.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&vocab_size.to_le_bytes());
    out.extend_from_slice(&(ids.len() as u64).to_le_bytes());
    for &id in ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a corpus. A file that does not start with the container magic is
/// taken as plain text and framed through the byte tokenizer.
pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let buf = fs::read(path)?;
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Ok(Corpus { vocab_size: BYTE_VOCAB, ids: encode_bytes(&buf) });
    }
    let bad = |m: &str| Error::Corpus(m.into());
    if buf.len() < 20 {
        return Err(bad("truncated header"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Corpus(format!("unsupported container version {version}")));
    }
    let vocab_size = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    let count = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
    if buf.len() != 20 + count * 4 {
        return Err(Error::Corpus(format!(
            "expected {count} tokens ({} bytes), file has {}",
            20 + count * 4,
            buf.len()
        )));
    }
    let mut ids = Vec::with_capacity(count);
    for c in buf[20..].chunks_exact(4) {
        let id = u32::from_le_bytes(c.try_into().unwrap());
        if id >= vocab_size {
            return Err(Error::Corpus(format!("token id {id} outside vocab {vocab_size}")));
        }
        ids.push(id);
    }
    Ok(Corpus { vocab_size, ids })
}

/// Fixed-length, non-overlapping windows in corpus order; a trailing
/// fragment shorter than `window_len` is dropped. Each window trains the
/// model on `window_len − 1` next-token pairs: inputs `w[..L−1]`, targets
/// `w[1..]`.
pub fn windows(ids: &[u32], window_len: usize) -> impl Iterator<Item = &[u32]> {
    assert!(window_len >= 2, "a window needs at least one input/target pair");
    ids.chunks_exact(window_len)
}

/// The window visit order for one epoch: a permutation derived only from
/// (seed, epoch), so resuming mid-run reproduces the exact same order
/// without any shuffle state in the checkpoint.
pub fn epoch_order(n_windows: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mixed = seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    let mut order: Vec<usize> = (0..n_windows).collect();
    order.shuffle(&mut ChaCha12Rng::seed_from_u64(mixed));
    order
}

const EASY_PHRASES: &[&str] = &[
    "the lamp hums in the quiet hall. ",
    "a door opens and then closes again. ",
    "rain keeps falling on the old roof. ",
    "the kettle whistles and someone pours tea. ",
    "every shelf in the room is full of books. ",
];

/// Deterministic mixed-difficulty text: mostly repeated stock phrases whose
/// continuations become certain after a few characters, salted with random
/// identifiers that stay unpredictable to the last character. The contrast
/// gives a router something real to learn on a small budget.
pub fn synthetic_text(seed: u64, approx_bytes: usize) -> String {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(approx_bytes + 64);
    const ALNUM: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    while out.len() < approx_bytes {
        if rng.random::<f64>() < 0.25 {
            out.push_str("they file it under code ");
            for _ in 0..6 {
                out.push(ALNUM[rng.random_range(0..ALNUM.len())] as char);
            }
            out.push_str(". ");
        } else {
            out.push_str(EASY_PHRASES[rng.random_range(0..EASY_PHRASES.len())]);
        }
    }
    out
}

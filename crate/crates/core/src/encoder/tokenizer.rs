//! Byte-level BPE tokenizer compatible with CLIP's `vocab.json` / `merges.txt`.

use std::collections::HashMap;
use std::path::Path;

use regex::Regex;

use super::EncoderError;

pub const START_TOKEN: &str = "<|startoftext|>";
pub const END_TOKEN: &str = "<|endoftext|>";

#[derive(Debug, Clone)]
pub struct ClipTokenizer {
    vocab: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    byte_map: [char; 256],
    pattern: Regex,
    start: u32,
    end: u32,
}

/// GPT-2 style reversible byte to printable-char table.
fn bytes_to_unicode() -> [char; 256] {
    let mut printable: Vec<u32> = (b'!' as u32..=b'~' as u32).chain(0xA1..=0xAC).chain(0xAE..=0xFF).collect();
    let mut map = ['\0'; 256];
    for &b in &printable {
        map[b as usize] = char::from_u32(b).unwrap();
    }
    let mut extra = 0;
    for b in 0..256u32 {
        if !printable.contains(&b) {
            map[b as usize] = char::from_u32(256 + extra).unwrap();
            extra += 1;
            printable.push(b);
        }
    }
    map
}

impl ClipTokenizer {
    pub fn from_parts(vocab: HashMap<String, u32>, merges: &str) -> Result<Self, EncoderError> {
        let mut ranks = HashMap::new();
        for line in merges.lines().filter(|l| !l.starts_with("#version") && !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next()) {
                (Some(a), Some(b)) => {
                    let next = ranks.len();
                    ranks.entry((a.to_string(), b.to_string())).or_insert(next);
                }
                _ => return Err(EncoderError::Weights(format!("bad merge line `{line}`"))),
            }
        }
        let get = |t: &str| {
            vocab.get(t).copied().ok_or_else(|| EncoderError::Weights(format!("vocabulary lacks `{t}`")))
        };
        let (start, end) = (get(START_TOKEN)?, get(END_TOKEN)?);
        let pattern = Regex::new(
            r"(?i)<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+",
        )
        .expect("static pattern");
        Ok(Self { vocab, ranks, byte_map: bytes_to_unicode(), pattern, start, end })
    }

    pub fn from_dir(dir: &Path) -> Result<Self, EncoderError> {
        let read = |name: &str| {
            std::fs::read_to_string(dir.join(name))
                .map_err(|e| EncoderError::BackendUnavailable(format!("{}: {e}", dir.join(name).display())))
        };
        let vocab: HashMap<String, u32> =
            serde_json::from_str(&read("vocab.json")?).map_err(|e| EncoderError::Weights(e.to_string()))?;
        Self::from_parts(vocab, &read("merges.txt")?)
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word.chars().map(String::from).collect();
        if let Some(last) = symbols.last_mut() {
            last.push_str("</w>");
        }
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|r| (*r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && self.ranks.get(&(symbols[i].clone(), symbols[i + 1].clone())) == Some(&rank) {
                    merged.push(format!("{}{}", symbols[i], symbols[i + 1]));
                    i += 2;
                } else {
                    merged.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    /// Token ids wrapped in start/end markers and truncated to `context`.
    pub fn encode(&self, text: &str, context: usize) -> Vec<u32> {
        let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let mut ids = vec![self.start];
        for m in self.pattern.find_iter(&cleaned) {
            let mapped: String = m.as_str().bytes().map(|b| self.byte_map[b as usize]).collect();
            for piece in self.bpe(&mapped) {
                // Unknown pieces cannot occur with a complete byte vocabulary; skip if they do.
                if let Some(&id) = self.vocab.get(&piece) {
                    ids.push(id);
                }
            }
        }
        ids.truncate(context.saturating_sub(1).max(1));
        ids.push(self.end);
        ids
    }

    pub fn end_id(&self) -> u32 {
        self.end
    }
}

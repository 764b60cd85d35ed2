//! Word-level tokenizer, vocabulary persistence, masking, and the text
//! transformer forward pass.

use super::block::{block_forward, init_block, key_padding_mask};
use super::params::{init_normal, Bound, ParamSet};
use super::NnError;
use crate::autodiff::{NodeId, Tape};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const SPECIAL_COUNT: usize = 5;
const SPECIAL_NAMES: [&str; SPECIAL_COUNT] = ["<pad>", "<unk>", "<cls>", "<sep>", "<mask>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
}

impl Default for SpecialTokens {
    fn default() -> SpecialTokens {
        SpecialTokens { pad: PAD, unk: UNK, cls: CLS, sep: SEP, mask: MASK }
    }
}

impl SpecialTokens {
    pub fn all(&self) -> [u32; SPECIAL_COUNT] {
        [self.pad, self.unk, self.cls, self.sep, self.mask]
    }

    pub fn contains(&self, id: u32) -> bool {
        self.all().contains(&id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub embed: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub specials: SpecialTokens,
}

impl TextConfig {
    pub fn desk(vocab_size: usize) -> TextConfig {
        TextConfig {
            vocab_size,
            max_len: 512,
            embed: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            specials: SpecialTokens::default(),
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let ids = self.specials.all();
        for (i, &a) in ids.iter().enumerate() {
            if a as usize >= self.vocab_size {
                return Err(NnError::BadConfig(format!("special id {a} outside vocab")));
            }
            if ids[..i].contains(&a) {
                return Err(NnError::BadConfig("special token ids must be distinct".into()));
            }
        }
        if self.max_len < 2 {
            return Err(NnError::BadConfig("max length below CLS+SEP".into()));
        }
        if self.embed == 0 || self.heads == 0 || self.embed % self.heads != 0 {
            return Err(NnError::BadConfig(format!(
                "embed {} not divisible by {} heads",
                self.embed, self.heads
            )));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        self.embed * self.mlp_ratio
    }
}

/// Lowercased alphanumeric runs; everything else separates words.
pub fn normalize_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            words.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

/// Corpus-built vocabulary: five reserved ids, then words by descending
/// frequency (ties alphabetical).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    counts: Vec<u64>,
    by_token: BTreeMap<String, u32>,
}

impl Vocab {
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Vocab {
        let mut freq: BTreeMap<String, u64> = BTreeMap::new();
        for text in corpus {
            for w in normalize_words(text) {
                *freq.entry(w).or_insert(0) += 1;
            }
        }
        let mut by_count: Vec<(String, u64)> = freq.into_iter().collect();
        by_count.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0u64; SPECIAL_COUNT];
        let mut by_token = BTreeMap::new();
        for (word, count) in by_count {
            by_token.insert(word.clone(), tokens.len() as u32);
            tokens.push(word);
            counts.push(count);
        }
        Vocab { tokens, counts, by_token }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, word: &str) -> Option<u32> {
        self.by_token.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// Line-oriented persistence: `token<TAB>count`.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            let _ = writeln!(out, "{t}\t{c}");
        }
        out
    }

    pub fn from_lines(text: &str) -> Result<Vocab, NnError> {
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        let mut by_token = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let (tok, count) = line
                .split_once('\t')
                .ok_or_else(|| NnError::BadConfig(format!("vocab line {} lacks a tab", i + 1)))?;
            let count: u64 = count
                .parse()
                .map_err(|_| NnError::BadConfig(format!("vocab line {} bad count", i + 1)))?;
            if i < SPECIAL_COUNT {
                if tok != SPECIAL_NAMES[i] {
                    return Err(NnError::BadConfig(format!(
                        "vocab line {} expected reserved token {}",
                        i + 1,
                        SPECIAL_NAMES[i]
                    )));
                }
            } else if by_token.insert(tok.to_string(), i as u32).is_some() {
                return Err(NnError::BadConfig(format!("vocab line {} duplicate token", i + 1)));
            }
            tokens.push(tok.to_string());
            counts.push(count);
        }
        if tokens.len() < SPECIAL_COUNT {
            return Err(NnError::BadConfig("vocab shorter than the reserved prefix".into()));
        }
        Ok(Vocab { tokens, counts, by_token })
    }
}

/// CLS + word ids + SEP, truncated to `max_len` keeping the trailing SEP.
pub fn tokenize(text: &str, vocab: &Vocab, cfg: &TextConfig) -> Vec<u32> {
    let words = normalize_words(text);
    let body = words.len().min(cfg.max_len - 2);
    let mut ids = Vec::with_capacity(body + 2);
    ids.push(cfg.specials.cls);
    for w in &words[..body] {
        ids.push(vocab.id_of(w).unwrap_or(cfg.specials.unk));
    }
    ids.push(cfg.specials.sep);
    ids
}

/// Space-joined words; structural tokens are dropped and UNK renders as
/// "unk", so the output re-tokenizes to the same ids whenever the corpus
/// itself never used that literal word.
pub fn detokenize(ids: &[u32], vocab: &Vocab, cfg: &TextConfig) -> String {
    let mut words = Vec::new();
    for &id in ids {
        if id == cfg.specials.unk {
            words.push("unk");
        } else if !cfg.specials.contains(id) {
            words.push(vocab.token(id).unwrap_or("unk"));
        }
    }
    words.join(" ")
}

/// BERT-style masking: each non-special position selected with probability
/// `p`; selected positions become MASK (80%), a random real token (10%), or
/// stay unchanged (10%). Labels carry the original id at selected positions.
pub fn mask_tokens(
    ids: &[u32],
    p: f64,
    cfg: &TextConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<u32>, Vec<Option<u32>>), NnError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(NnError::BadConfig(format!("mask probability {p} outside [0,1]")));
    }
    let mut masked = ids.to_vec();
    let mut labels = vec![None; ids.len()];
    let first_real = SPECIAL_COUNT as u32;
    for (i, &id) in ids.iter().enumerate() {
        if cfg.specials.contains(id) {
            continue;
        }
        if rng.gen::<f64>() >= p {
            continue;
        }
        labels[i] = Some(id);
        let action: f64 = rng.gen();
        if action < 0.8 {
            masked[i] = cfg.specials.mask;
        } else if action < 0.9 && cfg.vocab_size as u32 > first_real {
            masked[i] = rng.gen_range(first_real..cfg.vocab_size as u32);
        }
    }
    Ok((masked, labels))
}

/// Register the text encoder's parameters under `prefix`.
pub fn init_text(params: &mut ParamSet, rng: &mut ChaCha8Rng, prefix: &str, cfg: &TextConfig) {
    params.insert(
        format!("{prefix}.tok_emb"),
        init_normal(rng, &[cfg.vocab_size, cfg.embed], 0.02),
    );
    params.insert(format!("{prefix}.pos"), init_normal(rng, &[cfg.max_len, cfg.embed], 0.02));
    for i in 1..=cfg.depth {
        init_block(params, rng, &format!("{prefix}.block{i}"), cfg.embed, cfg.mlp_hidden());
    }
}

#[derive(Debug)]
pub struct TextOutput {
    /// [1, embed] CLS state.
    pub cls: NodeId,
    /// [len, embed] states for every input position, CLS included.
    pub tokens: NodeId,
}

/// Token + absolute position embeddings, then the block stack with PAD
/// positions masked out of attention.
pub fn encode_text(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    cfg: &TextConfig,
    ids: &[u32],
) -> Result<TextOutput, NnError> {
    cfg.validate()?;
    if ids.is_empty() {
        return Err(NnError::BadConfig("empty token sequence".into()));
    }
    if ids.len() > cfg.max_len {
        return Err(NnError::Overlength { len: ids.len(), max: cfg.max_len });
    }
    let len = ids.len();
    let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let tok = tape.gather_rows(bound.id(&format!("{prefix}.tok_emb")), &rows)?;
    let positions: Vec<usize> = (0..len).collect();
    let pos = tape.gather_rows(bound.id(&format!("{prefix}.pos")), &positions)?;
    let mut x = tape.add(tok, pos)?;

    let keep: Vec<bool> = ids.iter().map(|&i| i != cfg.specials.pad).collect();
    let attn_mask = if keep.iter().all(|&k| k) {
        None
    } else {
        Some(tape.constant(key_padding_mask(len, &keep)))
    };
    for i in 1..=cfg.depth {
        x = block_forward(tape, bound, &format!("{prefix}.block{i}"), x, cfg.heads, attn_mask)?;
    }
    let cls = tape.slice(x, 0, 0, 1)?;
    Ok(TextOutput { cls, tokens: x })
}

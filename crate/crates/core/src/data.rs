//! Ingested corpus on disk: token stream, vocabulary, per-ply alignment to
//! board states, and the train/validation split by game.
//!
//! `tokens.bin`:
//! ```text
//! "MOEX" | u16 version | u8 n | n vocab bytes | u32 len | JSON meta | u64 count | count × u8 id
//! ```
//! `alignment.bin`:
//! ```text
//! "MOEXALGN" | u16 version | u32 len | JSON meta | u32 count | count × (u32 game | u32 token | 96-byte BSP)
//! ```
//! `split.json` holds the game spans and the split; `vocab.json` lists the
//! characters in id order.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chess::{align_tokens_to_boards, board_to_bsp, parse_pgn, serialize_game, strip_annotations, BspVector, Vocab, BSP_BYTES};
use crate::error::{Error, Result};

pub const TOKENS_FILE: &str = "tokens.bin";
pub const ALIGNMENT_FILE: &str = "alignment.bin";
pub const SPLIT_FILE: &str = "split.json";
pub const VOCAB_FILE: &str = "vocab.json";

const TOKENS_MAGIC: &[u8; 4] = b"MOEX";
const ALIGN_MAGIC: &[u8; 8] = b"MOEXALGN";
const VERSION: u16 = 1;

/// Hex SHA-256 of `bytes`.
pub fn content_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash over several files, each contributing its name and contents.
pub fn hash_files(paths: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        let bytes = std::fs::read(p).map_err(|e| Error::format(*p, e.to_string()))?;
        h.update(p.file_name().map(|n| n.as_encoded_bytes()).unwrap_or_default());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameSpan {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignRecord {
    pub game: u32,
    /// Absolute index into the token stream.
    pub token: u32,
    pub bsp: BspVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub val_fraction: f64,
    pub games: Vec<GameSpan>,
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusSplit {
    Train,
    Val,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub tokens: Vec<u8>,
    pub alignment: Vec<AlignRecord>,
    pub split: SplitManifest,
}

/// 1-based line of byte `offset` in `text`.
fn line_of(text: &str, offset: usize) -> usize {
    text.as_bytes()[..offset.min(text.len())].iter().filter(|&&b| b == b'\n').count() + 1
}

/// Parse movetext, replay every game and tokenize it with the canonical
/// vocabulary. Result markers are dropped. Annotated PGN (headers,
/// comments, variations) is first reduced to one movetext line per game,
/// and error line numbers then refer to that reduced text.
pub fn ingest(text: &str, max_games: Option<usize>, val_fraction: f64, seed: u64) -> Result<Corpus> {
    let annotated = text.contains(['[', '{', '(', '$']);
    let clean = if annotated { strip_annotations(text) } else { text.to_string() };
    let games = parse_pgn(&clean).map_err(|e| match e {
        Error::Parse { game, offset, msg } => Error::Data(format!(
            "game {} (line {}, byte {offset}): {msg}",
            game + 1,
            line_of(&clean, offset)
        )),
        other => other,
    })?;
    let games = &games[..max_games.unwrap_or(games.len()).min(games.len())];
    let vocab = Vocab::canonical();
    let mut tokens = Vec::new();
    let mut spans = Vec::with_capacity(games.len());
    let mut alignment = Vec::new();
    for (gi, game) in games.iter().enumerate() {
        let fail = |e: Error| Error::Data(format!("game {} (line {}): {e}", gi + 1, line_of(&clean, game.span.start)));
        let boards = align_tokens_to_boards(game).map_err(fail)?;
        let line = serialize_game(&game.moves, None);
        let reparsed = &parse_pgn(&line).map_err(fail)?[0];
        let start = tokens.len();
        tokens.extend(vocab.tokenize(&line).map_err(fail)?);
        spans.push(GameSpan { start, len: line.len() });
        // alignment offsets refer to the normalized line, which starts with ';'
        for (&end, (_, board)) in reparsed.move_spans.iter().map(|s| &s.end).zip(&boards) {
            alignment.push(AlignRecord {
                game: gi as u32,
                token: (start + end) as u32,
                bsp: board_to_bsp(board),
            });
        }
    }
    if tokens.len() > u32::MAX as usize {
        return Err(Error::Data("corpus exceeds 4 GiB of tokens".into()));
    }
    let (train, val) = split_games(spans.len(), val_fraction, seed);
    Ok(Corpus {
        vocab,
        tokens,
        alignment,
        split: SplitManifest {
            seed,
            val_fraction,
            games: spans,
            train,
            val,
            meta: serde_json::Value::Null,
        },
    })
}

/// Seeded split of game ids. Validation gets `round(fraction · n)` games,
/// at least one when there are two or more games. Both lists are sorted.
pub fn split_games(n: usize, val_fraction: f64, seed: u64) -> (Vec<u32>, Vec<u32>) {
    let mut ids: Vec<u32> = (0..n as u32).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (val_fraction * n as f64).round() as usize;
    if n >= 2 && val_fraction > 0.0 {
        n_val = n_val.clamp(1, n - 1);
    }
    let mut val = ids[..n_val.min(n)].to_vec();
    let mut train = ids[n_val.min(n)..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

impl Corpus {
    pub fn game_ids(&self, split: CorpusSplit) -> Vec<u32> {
        match split {
            CorpusSplit::Train => self.split.train.clone(),
            CorpusSplit::Val => self.split.val.clone(),
            CorpusSplit::All => (0..self.split.games.len() as u32).collect(),
        }
    }

    /// Concatenated tokens of the given games, in id order.
    pub fn stream(&self, split: CorpusSplit) -> Vec<u8> {
        let mut out = Vec::new();
        for g in self.game_ids(split) {
            let s = self.split.games[g as usize];
            out.extend_from_slice(&self.tokens[s.start..s.start + s.len]);
        }
        out
    }

    /// Tokens of one game followed by a game delimiter, so the alignment
    /// point after the last ply is inside the window.
    pub fn game_window(&self, game: u32) -> Vec<u8> {
        let s = self.split.games[game as usize];
        let mut out = self.tokens[s.start..s.start + s.len].to_vec();
        out.push(self.vocab.id(';').expect("vocabulary has the game delimiter"));
        out
    }

    /// Alignment records of `game`, with token indices relative to its start.
    pub fn game_alignment(&self, game: u32) -> Vec<(usize, BspVector)> {
        let start = self.split.games[game as usize].start;
        self.alignment
            .iter()
            .filter(|a| a.game == game)
            .map(|a| (a.token as usize - start, a.bsp))
            .collect()
    }

    pub fn write_dir(&self, dir: &Path, meta: &serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta_bytes = serde_json::to_vec(meta)?;

        let mut out = Vec::with_capacity(self.tokens.len() + 64 + meta_bytes.len());
        out.extend_from_slice(TOKENS_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.vocab.len() as u8);
        for &c in self.vocab.chars() {
            out.push(c as u8);
        }
        out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta_bytes);
        out.extend_from_slice(&(self.tokens.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.tokens);
        std::fs::write(dir.join(TOKENS_FILE), out)?;

        let mut out = Vec::with_capacity(self.alignment.len() * (8 + BSP_BYTES) + 64);
        out.extend_from_slice(ALIGN_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta_bytes);
        out.extend_from_slice(&(self.alignment.len() as u32).to_le_bytes());
        for a in &self.alignment {
            out.extend_from_slice(&a.game.to_le_bytes());
            out.extend_from_slice(&a.token.to_le_bytes());
            out.extend_from_slice(a.bsp.as_bytes());
        }
        std::fs::write(dir.join(ALIGNMENT_FILE), out)?;

        let mut split = self.split.clone();
        split.meta = meta.clone();
        std::fs::write(dir.join(SPLIT_FILE), serde_json::to_string_pretty(&split)?)?;
        let chars: Vec<String> = self.vocab.chars().iter().map(|c| c.to_string()).collect();
        std::fs::write(dir.join(VOCAB_FILE), serde_json::to_string_pretty(&chars)?)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let path = dir.join(TOKENS_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        let mut r = Reader::new(&bytes, &path);
        if r.take(4)? != TOKENS_MAGIC {
            return Err(Error::format(&path, "not a token file (bad magic)"));
        }
        r.version()?;
        let n = r.take(1)?[0] as usize;
        let vocab = Vocab::new(r.take(n)?.iter().map(|&b| b as char).collect())
            .map_err(|e| Error::format(&path, e.to_string()))?;
        r.meta()?;
        let count = u64::from_le_bytes(r.array()?) as usize;
        let tokens = r.take(count)?.to_vec();
        r.finish()?;
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab.len()) {
            return Err(Error::format(&path, format!("token id {bad} outside the vocabulary")));
        }

        let path = dir.join(ALIGNMENT_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        let mut r = Reader::new(&bytes, &path);
        if r.take(8)? != ALIGN_MAGIC {
            return Err(Error::format(&path, "not an alignment file (bad magic)"));
        }
        r.version()?;
        r.meta()?;
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut alignment = Vec::with_capacity(count);
        for _ in 0..count {
            alignment.push(AlignRecord {
                game: u32::from_le_bytes(r.array()?),
                token: u32::from_le_bytes(r.array()?),
                bsp: BspVector::from_bytes(r.array()?),
            });
        }
        r.finish()?;

        let path = dir.join(SPLIT_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        let split: SplitManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        let n_games = split.games.len();
        if split.games.iter().any(|g| g.start + g.len > tokens.len())
            || alignment.iter().any(|a| a.game as usize >= n_games || a.token as usize > tokens.len())
            || split.train.iter().chain(&split.val).any(|&g| g as usize >= n_games)
        {
            return Err(Error::format(dir, "split, alignment and token files disagree"));
        }
        Ok(Self {
            vocab,
            tokens,
            alignment,
            split,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn version(&mut self) -> Result<()> {
        let v = u16::from_le_bytes(self.array()?);
        if v != VERSION {
            return Err(Error::format(self.path, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn meta(&mut self) -> Result<serde_json::Value> {
        let n = u32::from_le_bytes(self.array()?) as usize;
        serde_json::from_slice(self.take(n)?).map_err(|e| Error::format(self.path, format!("metadata: {e}")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chess::{replay, SyntheticCorpus};

    #[test]
    fn two_games_token_count() {
        let text = "1.e4 e5 2.Nf3 Nc6 1-0\n1.d4 d5\n";
        let c = ingest(text, None, 0.5, 0).unwrap();
        let expected = ";1.e4 e5 2.Nf3 Nc6".len() + ";1.d4 d5".len();
        assert_eq!(c.tokens.len(), expected);
        assert_eq!(c.vocab.detokenize(&c.tokens).unwrap(), ";1.e4 e5 2.Nf3 Nc6;1.d4 d5");
        assert_eq!(c.alignment.len(), 6);
        assert_eq!(c.split.train.len() + c.split.val.len(), 2);
        assert_eq!(c.split.val.len(), 1);
    }

    #[test]
    fn alignment_points_follow_each_ply() {
        let text = "1.e4 e5 2.Nf3\n1.d4\n";
        let c = ingest(text, None, 0.0, 0).unwrap();
        let stream = c.vocab.detokenize(&c.tokens).unwrap();
        let moves = ["e4", "e5", "Nf3"];
        let boards = replay(&moves.map(String::from)).unwrap();
        for (i, a) in c.alignment.iter().take(3).enumerate() {
            let t = a.token as usize;
            assert!(stream[..t].ends_with(moves[i]));
            assert!(matches!(stream.as_bytes().get(t), Some(b' ') | Some(b';')));
            assert_eq!(a.bsp, board_to_bsp(&boards[i]));
        }
        assert_eq!(c.game_alignment(1)[0].0, ";1.d4".len());
        assert_eq!(c.game_window(0), &c.tokens[..";1.e4 e5 2.Nf3".len() + 1]);
        assert_eq!(c.vocab.detokenize(&c.game_window(1)).unwrap(), ";1.d4;");
    }

    #[test]
    fn errors_name_game_and_line() {
        let err = ingest("1.e4 e5\n1.e4 Ke7\n", None, 0.0, 0).unwrap_err().to_string();
        assert!(err.contains("game 2") && err.contains("line 2") && err.contains("Ke7"), "{err}");
        let err = ingest("1.e4 e5\n\n1.e4 e5??\n", None, 0.0, 0).unwrap_err().to_string();
        assert!(err.contains("game 2") && err.contains("line 3"), "{err}");
    }

    #[test]
    fn annotated_pgn() {
        let text = "[Event \"x\"]\n\n1. e4 {best} e5 (1... c5) 2. Nf3 $1 1-0\n";
        let c = ingest(text, None, 0.0, 0).unwrap();
        assert_eq!(c.vocab.detokenize(&c.tokens).unwrap(), ";1.e4 e5 2.Nf3");
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (t, v) = split_games(1000, 0.01, 7);
        assert_eq!(v.len(), 10);
        assert_eq!(t.len(), 990);
        assert!(v.iter().all(|g| !t.contains(g)));
        assert_eq!(split_games(1000, 0.01, 7), (t, v.clone()));
        assert_ne!(split_games(1000, 0.01, 8).1, v);
        assert_eq!(split_games(2, 0.01, 0).1.len(), 1);
    }

    #[test]
    fn directory_round_trip_is_byte_identical() {
        let lines = SyntheticCorpus {
            games: 30,
            seed: 2,
            ..Default::default()
        }
        .generate()
        .join("\n");
        let meta = serde_json::json!({"seed": 2});
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let c = ingest(&lines, Some(20), 0.1, 3).unwrap();
        assert_eq!(c.split.games.len(), 20);
        c.write_dir(a.path(), &meta).unwrap();
        ingest(&lines, Some(20), 0.1, 3).unwrap().write_dir(b.path(), &meta).unwrap();
        for f in [TOKENS_FILE, ALIGNMENT_FILE, SPLIT_FILE, VOCAB_FILE] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
        let back = Corpus::read_dir(a.path()).unwrap();
        assert_eq!(back.tokens, c.tokens);
        assert_eq!(back.alignment, c.alignment);
        assert_eq!(back.split.games, c.split.games);
        let vocab: Vec<String> = serde_json::from_str(&std::fs::read_to_string(a.path().join(VOCAB_FILE)).unwrap()).unwrap();
        assert!(vocab.len() <= 32);
        let total: usize = back.stream(CorpusSplit::Train).len() + back.stream(CorpusSplit::Val).len();
        assert_eq!(total, back.tokens.len());
        assert_ne!(hash_files(&[&a.path().join(TOKENS_FILE)]).unwrap(), content_hash(b""));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let c = ingest("1.e4 e5\n", None, 0.0, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write_dir(dir.path(), &serde_json::Value::Null).unwrap();
        let p = dir.path().join(ALIGNMENT_FILE);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, bytes).unwrap();
        let err = Corpus::read_dir(dir.path()).unwrap_err().to_string();
        assert!(err.contains(ALIGNMENT_FILE) && err.contains("truncated"), "{err}");
    }
}

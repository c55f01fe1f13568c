//! Movetext parsing and normalized serialization.

use std::ops::Range;

use super::san::is_san_syntax;
use crate::error::{Error, Result};

pub const RESULTS: [&str; 4] = ["1-0", "0-1", "1/2-1/2", "*"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Game {
    pub moves: Vec<String>,
    /// Byte range of each SAN token in the parsed text.
    pub move_spans: Vec<Range<usize>>,
    pub result: Option<String>,
    /// Byte range of the game's movetext, excluding the leading `;`.
    pub span: Range<usize>,
}

/// Split `text` into games on newlines and `;`, stripping move numbers.
pub fn parse_pgn(text: &str) -> Result<Vec<Game>> {
    let mut games = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices().chain(std::iter::once((text.len(), '\n'))) {
        if c == '\n' || c == ';' {
            let seg = &text[start..i];
            if !seg.trim().is_empty() {
                let idx = games.len();
                games.push(parse_game(text, start..i, idx)?);
            }
            start = i + c.len_utf8();
        }
    }
    Ok(games)
}

fn parse_game(text: &str, span: Range<usize>, game: usize) -> Result<Game> {
    let seg = &text[span.clone()];
    let mut moves = Vec::new();
    let mut move_spans = Vec::new();
    let mut result = None;
    let mut pos = 0;
    for tok in seg.split_ascii_whitespace() {
        let rel = pos + seg[pos..].find(tok).expect("token from this segment");
        pos = rel + tok.len();
        let offset = span.start + rel;
        if result.is_some() {
            return Err(Error::Parse {
                game,
                offset,
                msg: format!("'{tok}' after the result marker"),
            });
        }
        if RESULTS.contains(&tok) {
            result = Some(tok.to_string());
            continue;
        }
        let digits = tok.bytes().take_while(u8::is_ascii_digit).count();
        let dots = tok[digits..].bytes().take_while(|&b| b == b'.').count();
        let (san, san_off) = if digits > 0 && dots > 0 {
            (&tok[digits + dots..], offset + digits + dots)
        } else {
            (tok, offset)
        };
        if san.is_empty() {
            continue;
        }
        if !is_san_syntax(san) {
            return Err(Error::Parse {
                game,
                offset: san_off,
                msg: format!("malformed move '{san}'"),
            });
        }
        moves.push(san.to_string());
        move_spans.push(san_off..san_off + san.len());
    }
    Ok(Game {
        moves,
        move_spans,
        result,
        span,
    })
}

/// Normalized movetext: `;1.e4 e5 2.Nf3` plus the result marker if any.
pub fn serialize_game(moves: &[String], result: Option<&str>) -> String {
    let mut out = String::from(";");
    for (i, m) in moves.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        if i % 2 == 0 {
            out.push_str(&format!("{}.", i / 2 + 1));
        }
        out.push_str(m);
    }
    if let Some(r) = result {
        if !moves.is_empty() {
            out.push(' ');
        }
        out.push_str(r);
    }
    out
}

impl Game {
    pub fn to_movetext(&self) -> String {
        serialize_game(&self.moves, self.result.as_deref())
    }
}

/// Drop header lines, `{}` comments, `()` variations and `$n` glyphs, leaving
/// one line of movetext per game.
pub fn strip_annotations(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            continue;
        }
        let mut brace = 0usize;
        let mut paren = 0usize;
        let mut chars = line.chars().peekable();
        while let Some(c) = chars.next() {
            match c {
                '{' => brace += 1,
                '}' if brace > 0 => brace -= 1,
                '(' if brace == 0 => paren += 1,
                ')' if brace == 0 && paren > 0 => paren -= 1,
                '$' if brace == 0 && paren == 0 => {
                    while chars.peek().is_some_and(char::is_ascii_digit) {
                        chars.next();
                    }
                }
                _ if brace == 0 && paren == 0 => out.push(c),
                _ => {}
            }
        }
        let kept = out.trim_end().len();
        out.truncate(kept);
        out.push('\n');
    }
    let collapsed: Vec<String> = out
        .lines()
        .map(|l| l.split_ascii_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|l| !l.is_empty())
        .collect();
    collapsed.join("\n")
}

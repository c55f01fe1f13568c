//! Standard algebraic notation: resolving SAN against a board and rendering
//! moves back to SAN.

use super::board::{file_of, parse_square, rank_of, square, square_name, Board, Kind, Move, Square};
use crate::error::{Error, Result};

/// Parsed shape of a non-castling SAN token.
#[derive(Debug, Clone, PartialEq, Eq)]
struct SanParts {
    kind: Kind,
    from_file: Option<u8>,
    from_rank: Option<u8>,
    capture: bool,
    to: Square,
    promotion: Option<Kind>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum SanShape {
    CastleShort,
    CastleLong,
    Normal(SanParts),
}

fn strip_suffix(san: &str) -> &str {
    san.trim_end_matches(['+', '#', '!', '?'])
}

fn parse_shape(san: &str) -> Option<SanShape> {
    let body = strip_suffix(san);
    match body {
        "O-O" => return Some(SanShape::CastleShort),
        "O-O-O" => return Some(SanShape::CastleLong),
        _ => {}
    }
    let (body, promotion) = match body.split_once('=') {
        Some((head, p)) => {
            let mut chars = p.chars();
            let k = chars.next().and_then(Kind::from_letter)?;
            if chars.next().is_some() || matches!(k, Kind::Pawn | Kind::King) {
                return None;
            }
            (head, Some(k))
        }
        None => (body, None),
    };
    let bytes = body.as_bytes();
    let (kind, rest) = match bytes.first()? {
        b'K' | b'Q' | b'R' | b'B' | b'N' => (Kind::from_letter(bytes[0] as char)?, &body[1..]),
        b'a'..=b'h' => (Kind::Pawn, body),
        _ => return None,
    };
    if rest.len() < 2 {
        return None;
    }
    let to = parse_square(&rest[rest.len() - 2..])?;
    let mut head = &rest[..rest.len() - 2];
    let capture = head.ends_with('x');
    if capture {
        head = &head[..head.len() - 1];
    }
    let mut from_file = None;
    let mut from_rank = None;
    for (i, c) in head.bytes().enumerate() {
        match c {
            b'a'..=b'h' if i == 0 && from_file.is_none() => from_file = Some(c - b'a'),
            b'1'..=b'8' if from_rank.is_none() => from_rank = Some(c - b'1'),
            _ => return None,
        }
    }
    if kind == Kind::Pawn {
        // Pawn moves name the origin file only when capturing.
        if capture != from_file.is_some() || from_rank.is_some() {
            return None;
        }
        let last = rank_of(to) == 0 || rank_of(to) == 7;
        if last != promotion.is_some() {
            return None;
        }
    } else if promotion.is_some() {
        return None;
    }
    Some(SanShape::Normal(SanParts {
        kind,
        from_file,
        from_rank,
        capture,
        to,
        promotion,
    }))
}

/// Whether `token` is syntactically a SAN move (legality is not checked).
pub fn is_san_syntax(token: &str) -> bool {
    parse_shape(token).is_some()
}

/// The unique legal move on `board` matching `san`.
pub fn resolve_san(board: &Board, san: &str) -> Result<Move> {
    let shape = parse_shape(san).ok_or_else(|| Error::IllegalMove {
        san: san.to_string(),
        msg: "not a SAN move".into(),
    })?;
    let legal = board.legal_moves();
    let matches: Vec<Move> = legal
        .into_iter()
        .filter(|&m| {
            let Some(piece) = board.piece_at(m.from) else {
                return false;
            };
            match &shape {
                SanShape::CastleShort | SanShape::CastleLong => {
                    let target_file = if shape == SanShape::CastleShort { 6 } else { 2 };
                    piece.kind == Kind::King
                        && file_of(m.from) == 4
                        && m.to == square(target_file, rank_of(m.from))
                }
                SanShape::Normal(p) => {
                    piece.kind == p.kind
                        && m.to == p.to
                        && m.promotion == p.promotion
                        && p.from_file.is_none_or(|f| f == file_of(m.from))
                        && p.from_rank.is_none_or(|r| r == rank_of(m.from))
                        && p.capture == board.is_capture(m)
                        && !(p.kind == Kind::King && file_of(m.from).abs_diff(file_of(m.to)) == 2)
                }
            }
        })
        .collect();
    match matches.len() {
        1 => Ok(matches[0]),
        0 => Err(Error::IllegalMove {
            san: san.to_string(),
            msg: format!("no legal move matches in {:?}", board),
        }),
        n => Err(Error::AmbiguousMove {
            san: san.to_string(),
            candidates: n,
        }),
    }
}

/// Render a legal move as SAN, with minimal disambiguation and `+`/`#`.
pub fn move_to_san(board: &Board, m: Move) -> String {
    let piece = board.piece_at(m.from).expect("move from an occupied square");
    let mut out = String::new();
    if piece.kind == Kind::King && file_of(m.from).abs_diff(file_of(m.to)) == 2 {
        out.push_str(if file_of(m.to) == 6 { "O-O" } else { "O-O-O" });
    } else {
        let capture = board.is_capture(m);
        if piece.kind == Kind::Pawn {
            if capture {
                out.push((b'a' + file_of(m.from)) as char);
            }
        } else {
            out.push(piece.kind.letter());
            let rivals: Vec<Move> = board
                .legal_moves()
                .into_iter()
                .filter(|o| o.to == m.to && o.from != m.from && board.piece_at(o.from) == Some(piece))
                .collect();
            if !rivals.is_empty() {
                let file_unique = rivals.iter().all(|o| file_of(o.from) != file_of(m.from));
                let rank_unique = rivals.iter().all(|o| rank_of(o.from) != rank_of(m.from));
                if file_unique {
                    out.push((b'a' + file_of(m.from)) as char);
                } else if rank_unique {
                    out.push((b'1' + rank_of(m.from)) as char);
                } else {
                    out.push_str(&square_name(m.from));
                }
            }
        }
        if capture {
            out.push('x');
        }
        out.push_str(&square_name(m.to));
        if let Some(p) = m.promotion {
            out.push('=');
            out.push(p.letter());
        }
    }
    let next = board.apply_move(m);
    if next.in_check() {
        out.push(if next.legal_moves().is_empty() { '#' } else { '+' });
    }
    out
}

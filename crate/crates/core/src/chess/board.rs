//! Board representation, legal move generation and move application.
//!
//! Squares are numbered `rank * 8 + file` with a1 = 0 and h8 = 63.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Color {
    White,
    Black,
}

impl Color {
    pub fn other(self) -> Color {
        match self {
            Color::White => Color::Black,
            Color::Black => Color::White,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kind {
    Pawn,
    Knight,
    Bishop,
    Rook,
    Queen,
    King,
}

impl Kind {
    pub fn letter(self) -> char {
        match self {
            Kind::Pawn => 'P',
            Kind::Knight => 'N',
            Kind::Bishop => 'B',
            Kind::Rook => 'R',
            Kind::Queen => 'Q',
            Kind::King => 'K',
        }
    }

    pub fn from_letter(c: char) -> Option<Kind> {
        Some(match c {
            'P' => Kind::Pawn,
            'N' => Kind::Knight,
            'B' => Kind::Bishop,
            'R' => Kind::Rook,
            'Q' => Kind::Queen,
            'K' => Kind::King,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Piece {
    pub color: Color,
    pub kind: Kind,
}

impl Piece {
    pub const fn new(color: Color, kind: Kind) -> Self {
        Self { color, kind }
    }

    /// 0..12: white P N B R Q K, then black P N B R Q K.
    pub fn index(self) -> usize {
        self.color.index() * 6 + self.kind as usize
    }

    fn fen_char(self) -> char {
        let c = self.kind.letter();
        match self.color {
            Color::White => c,
            Color::Black => c.to_ascii_lowercase(),
        }
    }
}

pub type Square = u8;

pub fn square(file: u8, rank: u8) -> Square {
    rank * 8 + file
}

pub fn file_of(sq: Square) -> u8 {
    sq % 8
}

pub fn rank_of(sq: Square) -> u8 {
    sq / 8
}

pub fn square_name(sq: Square) -> String {
    format!("{}{}", (b'a' + file_of(sq)) as char, rank_of(sq) + 1)
}

pub fn parse_square(s: &str) -> Option<Square> {
    let b = s.as_bytes();
    if b.len() != 2 || !(b'a'..=b'h').contains(&b[0]) || !(b'1'..=b'8').contains(&b[1]) {
        return None;
    }
    Some(square(b[0] - b'a', b[1] - b'1'))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Move {
    pub from: Square,
    pub to: Square,
    pub promotion: Option<Kind>,
}

impl fmt::Display for Move {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", square_name(self.from), square_name(self.to))?;
        if let Some(p) = self.promotion {
            write!(f, "{}", p.letter().to_ascii_lowercase())?;
        }
        Ok(())
    }
}

/// Castling rights, indexed white-kingside, white-queenside, black-kingside, black-queenside.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Castling(pub [bool; 4]);

impl Castling {
    fn kingside(color: Color) -> usize {
        color.index() * 2
    }
    fn queenside(color: Color) -> usize {
        color.index() * 2 + 1
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Board {
    squares: [Option<Piece>; 64],
    pub side_to_move: Color,
    pub castling: Castling,
    pub en_passant: Option<Square>,
    pub halfmove: u32,
    pub fullmove: u32,
}

const KNIGHT_STEPS: [(i8, i8); 8] = [
    (1, 2),
    (2, 1),
    (2, -1),
    (1, -2),
    (-1, -2),
    (-2, -1),
    (-2, 1),
    (-1, 2),
];
const KING_STEPS: [(i8, i8); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];
const ROOK_DIRS: [(i8, i8); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
const BISHOP_DIRS: [(i8, i8); 4] = [(1, 1), (1, -1), (-1, 1), (-1, -1)];

fn offset(sq: Square, df: i8, dr: i8) -> Option<Square> {
    let f = file_of(sq) as i8 + df;
    let r = rank_of(sq) as i8 + dr;
    ((0..8).contains(&f) && (0..8).contains(&r)).then(|| square(f as u8, r as u8))
}

impl Default for Board {
    fn default() -> Self {
        Self::initial()
    }
}

impl Board {
    pub fn empty() -> Self {
        Self {
            squares: [None; 64],
            side_to_move: Color::White,
            castling: Castling([false; 4]),
            en_passant: None,
            halfmove: 0,
            fullmove: 1,
        }
    }

    pub fn initial() -> Self {
        use Kind::*;
        let mut b = Self::empty();
        let back = [Rook, Knight, Bishop, Queen, King, Bishop, Knight, Rook];
        for (f, &kind) in back.iter().enumerate() {
            let f = f as u8;
            b.squares[square(f, 0) as usize] = Some(Piece::new(Color::White, kind));
            b.squares[square(f, 1) as usize] = Some(Piece::new(Color::White, Pawn));
            b.squares[square(f, 6) as usize] = Some(Piece::new(Color::Black, Pawn));
            b.squares[square(f, 7) as usize] = Some(Piece::new(Color::Black, kind));
        }
        b.castling = Castling([true; 4]);
        b
    }

    pub fn piece_at(&self, sq: Square) -> Option<Piece> {
        self.squares[sq as usize]
    }

    pub fn set_piece(&mut self, sq: Square, piece: Option<Piece>) {
        self.squares[sq as usize] = piece;
    }

    pub fn pieces(&self) -> impl Iterator<Item = (Square, Piece)> + '_ {
        self.squares
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.map(|p| (i as Square, p)))
    }

    pub fn king_square(&self, color: Color) -> Option<Square> {
        self.pieces()
            .find(|(_, p)| p.color == color && p.kind == Kind::King)
            .map(|(s, _)| s)
    }

    /// Piece placement in FEN notation (first field only).
    pub fn placement_fen(&self) -> String {
        let mut out = String::new();
        for rank in (0..8).rev() {
            let mut empty = 0;
            for file in 0..8 {
                match self.piece_at(square(file, rank)) {
                    Some(p) => {
                        if empty > 0 {
                            out.push(char::from(b'0' + empty));
                            empty = 0;
                        }
                        out.push(p.fen_char());
                    }
                    None => empty += 1,
                }
            }
            if empty > 0 {
                out.push(char::from(b'0' + empty));
            }
            if rank > 0 {
                out.push('/');
            }
        }
        out
    }

    /// Whether any piece of `by` attacks `sq`.
    pub fn is_attacked(&self, sq: Square, by: Color) -> bool {
        let is = |s: Option<Square>, kinds: &[Kind]| {
            s.and_then(|s| self.piece_at(s))
                .is_some_and(|p| p.color == by && kinds.contains(&p.kind))
        };
        let pawn_dr = match by {
            Color::White => -1,
            Color::Black => 1,
        };
        if is(offset(sq, -1, pawn_dr), &[Kind::Pawn]) || is(offset(sq, 1, pawn_dr), &[Kind::Pawn]) {
            return true;
        }
        if KNIGHT_STEPS.iter().any(|&(df, dr)| is(offset(sq, df, dr), &[Kind::Knight])) {
            return true;
        }
        if KING_STEPS.iter().any(|&(df, dr)| is(offset(sq, df, dr), &[Kind::King])) {
            return true;
        }
        let slide = |dirs: &[(i8, i8)], kinds: &[Kind]| {
            dirs.iter().any(|&(df, dr)| {
                let mut cur = sq;
                while let Some(next) = offset(cur, df, dr) {
                    if let Some(p) = self.piece_at(next) {
                        return p.color == by && kinds.contains(&p.kind);
                    }
                    cur = next;
                }
                false
            })
        };
        slide(&ROOK_DIRS, &[Kind::Rook, Kind::Queen]) || slide(&BISHOP_DIRS, &[Kind::Bishop, Kind::Queen])
    }

    pub fn in_check(&self) -> bool {
        self.king_square(self.side_to_move)
            .is_some_and(|k| self.is_attacked(k, self.side_to_move.other()))
    }

    fn pseudo_legal(&self) -> Vec<Move> {
        let us = self.side_to_move;
        let mut moves = Vec::with_capacity(48);
        for (from, piece) in self.pieces().filter(|(_, p)| p.color == us) {
            match piece.kind {
                Kind::Pawn => self.pawn_moves(from, &mut moves),
                Kind::Knight => self.step_moves(from, &KNIGHT_STEPS, &mut moves),
                Kind::King => {
                    self.step_moves(from, &KING_STEPS, &mut moves);
                    self.castle_moves(from, &mut moves);
                }
                Kind::Bishop => self.slide_moves(from, &BISHOP_DIRS, &mut moves),
                Kind::Rook => self.slide_moves(from, &ROOK_DIRS, &mut moves),
                Kind::Queen => {
                    self.slide_moves(from, &ROOK_DIRS, &mut moves);
                    self.slide_moves(from, &BISHOP_DIRS, &mut moves);
                }
            }
        }
        moves
    }

    fn push_pawn(from: Square, to: Square, moves: &mut Vec<Move>) {
        if rank_of(to) == 0 || rank_of(to) == 7 {
            for k in [Kind::Queen, Kind::Rook, Kind::Bishop, Kind::Knight] {
                moves.push(Move {
                    from,
                    to,
                    promotion: Some(k),
                });
            }
        } else {
            moves.push(Move {
                from,
                to,
                promotion: None,
            });
        }
    }

    fn pawn_moves(&self, from: Square, moves: &mut Vec<Move>) {
        let us = self.side_to_move;
        let (dr, start_rank) = match us {
            Color::White => (1, 1),
            Color::Black => (-1, 6),
        };
        if let Some(one) = offset(from, 0, dr) {
            if self.piece_at(one).is_none() {
                Self::push_pawn(from, one, moves);
                if rank_of(from) == start_rank {
                    if let Some(two) = offset(from, 0, 2 * dr) {
                        if self.piece_at(two).is_none() {
                            moves.push(Move {
                                from,
                                to: two,
                                promotion: None,
                            });
                        }
                    }
                }
            }
        }
        for df in [-1, 1] {
            if let Some(to) = offset(from, df, dr) {
                let enemy = self.piece_at(to).is_some_and(|p| p.color != us);
                if enemy || self.en_passant == Some(to) {
                    Self::push_pawn(from, to, moves);
                }
            }
        }
    }

    fn step_moves(&self, from: Square, steps: &[(i8, i8)], moves: &mut Vec<Move>) {
        for &(df, dr) in steps {
            if let Some(to) = offset(from, df, dr) {
                if self.piece_at(to).is_none_or(|p| p.color != self.side_to_move) {
                    moves.push(Move {
                        from,
                        to,
                        promotion: None,
                    });
                }
            }
        }
    }

    fn slide_moves(&self, from: Square, dirs: &[(i8, i8)], moves: &mut Vec<Move>) {
        for &(df, dr) in dirs {
            let mut cur = from;
            while let Some(to) = offset(cur, df, dr) {
                match self.piece_at(to) {
                    None => moves.push(Move {
                        from,
                        to,
                        promotion: None,
                    }),
                    Some(p) => {
                        if p.color != self.side_to_move {
                            moves.push(Move {
                                from,
                                to,
                                promotion: None,
                            });
                        }
                        break;
                    }
                }
                cur = to;
            }
        }
    }

    fn castle_moves(&self, from: Square, moves: &mut Vec<Move>) {
        let us = self.side_to_move;
        let them = us.other();
        let rank = match us {
            Color::White => 0,
            Color::Black => 7,
        };
        if from != square(4, rank) || self.is_attacked(from, them) {
            return;
        }
        let rook = Some(Piece::new(us, Kind::Rook));
        let empty = |files: &[u8]| files.iter().all(|&f| self.piece_at(square(f, rank)).is_none());
        let safe = |files: &[u8]| files.iter().all(|&f| !self.is_attacked(square(f, rank), them));
        if self.castling.0[Castling::kingside(us)]
            && self.piece_at(square(7, rank)) == rook
            && empty(&[5, 6])
            && safe(&[5, 6])
        {
            moves.push(Move {
                from,
                to: square(6, rank),
                promotion: None,
            });
        }
        if self.castling.0[Castling::queenside(us)]
            && self.piece_at(square(0, rank)) == rook
            && empty(&[1, 2, 3])
            && safe(&[2, 3])
        {
            moves.push(Move {
                from,
                to: square(2, rank),
                promotion: None,
            });
        }
    }

    /// All legal moves for the side to move.
    pub fn legal_moves(&self) -> Vec<Move> {
        let us = self.side_to_move;
        self.pseudo_legal()
            .into_iter()
            .filter(|&m| {
                let next = self.apply_move(m);
                next.king_square(us)
                    .is_some_and(|k| !next.is_attacked(k, us.other()))
            })
            .collect()
    }

    pub fn is_capture(&self, m: Move) -> bool {
        self.piece_at(m.to).is_some() || self.is_en_passant(m)
    }

    fn is_en_passant(&self, m: Move) -> bool {
        self.piece_at(m.from).is_some_and(|p| p.kind == Kind::Pawn)
            && Some(m.to) == self.en_passant
            && file_of(m.from) != file_of(m.to)
            && self.piece_at(m.to).is_none()
    }

    /// Board after `m`; `m` must come from [`Board::legal_moves`].
    pub fn apply_move(&self, m: Move) -> Board {
        let mut b = self.clone();
        let piece = self.piece_at(m.from).expect("move from an occupied square");
        let us = piece.color;
        let captured = self.piece_at(m.to);

        if self.is_en_passant(m) {
            let victim = square(file_of(m.to), rank_of(m.from));
            b.set_piece(victim, None);
        }
        b.set_piece(m.from, None);
        let placed = match m.promotion {
            Some(k) => Piece::new(us, k),
            None => piece,
        };
        b.set_piece(m.to, Some(placed));

        if piece.kind == Kind::King && file_of(m.from) == 4 && file_of(m.to).abs_diff(4) == 2 {
            let rank = rank_of(m.from);
            let (rook_from, rook_to) = if file_of(m.to) == 6 { (7, 5) } else { (0, 3) };
            let rook = b.piece_at(square(rook_from, rank));
            b.set_piece(square(rook_from, rank), None);
            b.set_piece(square(rook_to, rank), rook);
        }

        if piece.kind == Kind::King {
            b.castling.0[Castling::kingside(us)] = false;
            b.castling.0[Castling::queenside(us)] = false;
        }
        for (sq, idx) in [(0u8, 1usize), (7, 0), (56, 3), (63, 2)] {
            if m.from == sq || m.to == sq {
                b.castling.0[idx] = false;
            }
        }

        b.en_passant = None;
        if piece.kind == Kind::Pawn && rank_of(m.from).abs_diff(rank_of(m.to)) == 2 {
            b.en_passant = Some(square(file_of(m.from), (rank_of(m.from) + rank_of(m.to)) / 2));
        }

        b.halfmove = if piece.kind == Kind::Pawn || captured.is_some() {
            0
        } else {
            self.halfmove + 1
        };
        if us == Color::Black {
            b.fullmove += 1;
        }
        b.side_to_move = us.other();
        b
    }

    pub fn is_checkmate(&self) -> bool {
        self.in_check() && self.legal_moves().is_empty()
    }
}

impl fmt::Debug for Board {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Board({} {:?})", self.placement_fen(), self.side_to_move)
    }
}

/// Leaf count of the legal move tree to `depth`.
pub fn perft(board: &Board, depth: u32) -> u64 {
    if depth == 0 {
        return 1;
    }
    let moves = board.legal_moves();
    if depth == 1 {
        return moves.len() as u64;
    }
    moves.iter().map(|&m| perft(&board.apply_move(m), depth - 1)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mv(from: &str, to: &str) -> Move {
        Move {
            from: parse_square(from).unwrap(),
            to: parse_square(to).unwrap(),
            promotion: None,
        }
    }

    #[test]
    fn initial_position() {
        let b = Board::initial();
        assert_eq!(b.placement_fen(), "rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP/RNBQKBNR");
        assert_eq!(b.legal_moves().len(), 20);
        assert!(!b.in_check());
    }

    #[test]
    fn perft_shallow() {
        let b = Board::initial();
        assert_eq!(perft(&b, 1), 20);
        assert_eq!(perft(&b, 2), 400);
        assert_eq!(perft(&b, 3), 8902);
    }

    #[test]
    fn double_push_sets_en_passant() {
        let b = Board::initial().apply_move(mv("e2", "e4"));
        assert_eq!(b.en_passant, parse_square("e3"));
        assert_eq!(b.side_to_move, Color::Black);
    }

    #[test]
    fn exd5_capture() {
        let b = Board::initial()
            .apply_move(mv("e2", "e4"))
            .apply_move(mv("d7", "d5"))
            .apply_move(mv("e4", "d5"));
        assert_eq!(b.piece_at(parse_square("d5").unwrap()), Some(Piece::new(Color::White, Kind::Pawn)));
        let black_pawns = b
            .pieces()
            .filter(|(_, p)| *p == Piece::new(Color::Black, Kind::Pawn))
            .count();
        assert_eq!(black_pawns, 7);
    }

    #[test]
    fn castling_moves_rook_and_clears_rights() {
        let mut b = Board::initial();
        for (f, t) in [("e2", "e4"), ("e7", "e5"), ("g1", "f3"), ("b8", "c6"), ("f1", "c4"), ("g8", "f6")] {
            b = b.apply_move(mv(f, t));
        }
        assert!(b.legal_moves().contains(&mv("e1", "g1")));
        let b = b.apply_move(mv("e1", "g1"));
        assert_eq!(b.piece_at(parse_square("g1").unwrap()), Some(Piece::new(Color::White, Kind::King)));
        assert_eq!(b.piece_at(parse_square("f1").unwrap()), Some(Piece::new(Color::White, Kind::Rook)));
        assert!(b.piece_at(parse_square("h1").unwrap()).is_none());
        assert_eq!(b.castling.0, [false, false, true, true]);
    }

    #[test]
    fn pinned_piece_cannot_move() {
        let mut b = Board::empty();
        b.set_piece(parse_square("e1").unwrap(), Some(Piece::new(Color::White, Kind::King)));
        b.set_piece(parse_square("e2").unwrap(), Some(Piece::new(Color::White, Kind::Knight)));
        b.set_piece(parse_square("e8").unwrap(), Some(Piece::new(Color::Black, Kind::Rook)));
        b.set_piece(parse_square("a8").unwrap(), Some(Piece::new(Color::Black, Kind::King)));
        assert!(b
            .legal_moves()
            .iter()
            .all(|m| m.from != parse_square("e2").unwrap()));
    }
}

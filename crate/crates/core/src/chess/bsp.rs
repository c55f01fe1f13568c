//! Board-state properties: one bit per (square, piece kind).

use super::board::{file_of, rank_of, Board, Square};

pub const BSP_COUNT: usize = 8 * 8 * 12;
pub const BSP_BYTES: usize = BSP_COUNT / 8;

/// Index of the property "piece `piece_index` (0..12) stands on `sq`".
pub fn bsp_index(sq: Square, piece_index: usize) -> usize {
    (file_of(sq) as usize * 8 + rank_of(sq) as usize) * 12 + piece_index
}

/// Inverse of [`bsp_index`]: `(file, rank, piece_index)`.
pub fn bsp_parts(index: usize) -> (u8, u8, usize) {
    let sq = index / 12;
    ((sq / 8) as u8, (sq % 8) as u8, index % 12)
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct BspVector([u8; BSP_BYTES]);

impl Default for BspVector {
    fn default() -> Self {
        Self([0; BSP_BYTES])
    }
}

impl std::fmt::Debug for BspVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BspVector({:?})", self.ones().collect::<Vec<_>>())
    }
}

impl BspVector {
    pub fn from_bytes(bytes: [u8; BSP_BYTES]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; BSP_BYTES] {
        &self.0
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn set(&mut self, i: usize, on: bool) {
        if on {
            self.0[i / 8] |= 1 << (i % 8);
        } else {
            self.0[i / 8] &= !(1 << (i % 8));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b != 0).flat_map(|(i, &b)| {
            (0..8).filter(move |j| b >> j & 1 == 1).map(move |j| i * 8 + j)
        })
    }

    /// Number of bits set in both vectors.
    pub fn count_common(&self, other: &Self) -> usize {
        self.0.iter().zip(&other.0).map(|(a, b)| (a & b).count_ones() as usize).sum()
    }
}

pub fn board_to_bsp(board: &Board) -> BspVector {
    let mut v = BspVector::default();
    for (sq, p) in board.pieces() {
        v.set(bsp_index(sq, p.index()), true);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chess::board::{parse_square, Color, Kind, Piece};
    use crate::chess::san::resolve_san;

    #[test]
    fn initial() {
        let v = board_to_bsp(&Board::initial());
        assert_eq!(v.count_ones(), 32);
        let rook = Piece::new(Color::White, Kind::Rook).index();
        for s in ["a1", "h1"] {
            assert!(v.get(bsp_index(parse_square(s).unwrap(), rook)));
        }
    }

    #[test]
    fn empty_board() {
        assert_eq!(board_to_bsp(&Board::empty()).count_ones(), 0);
    }

    #[test]
    fn after_e4() {
        let b = Board::initial();
        let b = b.apply_move(resolve_san(&b, "e4").unwrap());
        let v = board_to_bsp(&b);
        let pawn = Piece::new(Color::White, Kind::Pawn).index();
        assert!(v.get(bsp_index(parse_square("e4").unwrap(), pawn)));
        assert!(!v.get(bsp_index(parse_square("e2").unwrap(), pawn)));
    }

    #[test]
    fn index_round_trip() {
        for i in 0..BSP_COUNT {
            let (f, r, p) = bsp_parts(i);
            assert_eq!(bsp_index(r * 8 + f, p), i);
        }
    }
}

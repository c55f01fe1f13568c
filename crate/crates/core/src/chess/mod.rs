//! Chess movetext: boards, SAN, parsing, board-state bits, tokens, and the
//! mapping from token positions to board states.

pub mod board;
pub mod bsp;
pub mod pgn;
pub mod san;
pub mod vocab;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use board::{perft, Board, Color, Kind, Move, Piece};
pub use bsp::{board_to_bsp, bsp_index, BspVector, BSP_BYTES, BSP_COUNT};
pub use pgn::{parse_pgn, serialize_game, strip_annotations, Game};
pub use san::{move_to_san, resolve_san};
pub use vocab::{build_vocab, Vocab};

use crate::error::Result;

/// Boards after each ply of `moves`, starting from the initial position.
pub fn replay(moves: &[String]) -> Result<Vec<Board>> {
    let mut board = Board::initial();
    let mut out = Vec::with_capacity(moves.len());
    for san in moves {
        let m = resolve_san(&board, san)?;
        board = board.apply_move(m);
        out.push(board.clone());
    }
    Ok(out)
}

/// One `(token index, board after the ply)` pair per ply. The index is the
/// byte right after the ply's SAN token in the text `game` was parsed from,
/// which is a space or the end of the game.
pub fn align_tokens_to_boards(game: &Game) -> Result<Vec<(usize, Board)>> {
    let boards = replay(&game.moves)?;
    Ok(game
        .move_spans
        .iter()
        .map(|s| s.end)
        .zip(boards)
        .collect())
}

/// Seeded random legal games, serialized as normalized movetext lines.
///
/// Each game runs for a uniformly drawn number of plies in
/// `min_plies..=max_plies`, stopping early at mate or stalemate and before
/// the line would exceed `max_chars`. Captures are preferred with
/// probability `capture_bias` so positions thin out like real games.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub games: usize,
    pub min_plies: usize,
    pub max_plies: usize,
    pub max_chars: usize,
    pub capture_bias: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpus {
    fn default() -> Self {
        Self {
            games: 1000,
            min_plies: 20,
            max_plies: 120,
            max_chars: 1023,
            capture_bias: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticCorpus {
    pub fn generate(&self) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.games).map(|_| self.one_game(&mut rng)).collect()
    }

    fn one_game(&self, rng: &mut ChaCha8Rng) -> String {
        let plies = rng.gen_range(self.min_plies..=self.max_plies.max(self.min_plies));
        let mut board = Board::initial();
        let mut moves: Vec<String> = Vec::new();
        let mut len = 1;
        for ply in 0..plies {
            let legal = board.legal_moves();
            if legal.is_empty() {
                break;
            }
            let captures: Vec<Move> = legal.iter().copied().filter(|&m| board.is_capture(m)).collect();
            let pool = if !captures.is_empty() && rng.gen_bool(self.capture_bias) {
                &captures
            } else {
                &legal
            };
            let m = *pool.choose(rng).expect("nonempty move list");
            let san = move_to_san(&board, m);
            let extra = san.len() + 1 + if ply % 2 == 0 { format!("{}.", ply / 2 + 1).len() } else { 0 };
            if len + extra > self.max_chars {
                break;
            }
            len += extra;
            moves.push(san);
            board = board.apply_move(m);
        }
        serialize_game(&moves, None)
    }
}

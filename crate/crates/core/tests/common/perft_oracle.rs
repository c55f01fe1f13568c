//! Brute-force perft on a 0x88 board, sharing no code with the library.
//! A move is legal when, after making it, no opposing pseudo-move lands on
//! the mover's king.

#[derive(Clone)]
pub struct Pos {
    sq: [i8; 128],
    white: bool,
    castle: [bool; 4],
    ep: Option<usize>,
}

const N: [i32; 8] = [33, 31, 18, 14, -33, -31, -18, -14];
const K: [i32; 8] = [1, -1, 16, -16, 17, 15, -17, -15];
const DIAG: [i32; 4] = [17, 15, -17, -15];
const ORTH: [i32; 4] = [1, -1, 16, -16];

fn on(s: i32) -> bool {
    (0..128).contains(&s) && s & 0x88 == 0
}

impl Pos {
    pub fn start() -> Self {
        let mut sq = [0i8; 128];
        let back = [4, 2, 3, 5, 6, 3, 2, 4];
        for f in 0..8 {
            sq[f] = back[f];
            sq[16 + f] = 1;
            sq[96 + f] = -1;
            sq[112 + f] = -back[f];
        }
        Pos {
            sq,
            white: true,
            castle: [true; 4],
            ep: None,
        }
    }

    /// `pieces` are (file, rank, code) with codes 1..=6 for P N B R Q K,
    /// negated for black.
    pub fn from_parts(pieces: &[(u8, u8, i8)], white: bool, castle: [bool; 4], ep: Option<(u8, u8)>) -> Self {
        let mut sq = [0i8; 128];
        for &(f, r, c) in pieces {
            sq[r as usize * 16 + f as usize] = c;
        }
        Pos {
            sq,
            white,
            castle,
            ep: ep.map(|(f, r)| r as usize * 16 + f as usize),
        }
    }

    fn mine(&self, p: i8) -> bool {
        if self.white {
            p > 0
        } else {
            p < 0
        }
    }

    /// Targets of every pseudo-move of the side to move, plus pawn diagonals.
    fn attacks(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let dir = if self.white { 16 } else { -16 };
        for s in 0..128usize {
            let p = self.sq[s];
            if s & 0x88 != 0 || !self.mine(p) {
                continue;
            }
            let s = s as i32;
            match p.abs() {
                1 => {
                    for d in [dir + 1, dir - 1] {
                        if on(s + d) {
                            out.push((s + d) as usize);
                        }
                    }
                }
                2 | 6 => {
                    let steps: &[i32] = if p.abs() == 2 { &N } else { &K };
                    for &d in steps {
                        if on(s + d) {
                            out.push((s + d) as usize);
                        }
                    }
                }
                _ => {
                    let dirs: Vec<i32> = match p.abs() {
                        3 => DIAG.to_vec(),
                        4 => ORTH.to_vec(),
                        _ => DIAG.iter().chain(ORTH.iter()).copied().collect(),
                    };
                    for d in dirs {
                        let mut t = s + d;
                        while on(t) {
                            out.push(t as usize);
                            if self.sq[t as usize] != 0 {
                                break;
                            }
                            t += d;
                        }
                    }
                }
            }
        }
        out
    }

    fn flipped_attacks(&self) -> Vec<usize> {
        let mut other = self.clone();
        other.white = !other.white;
        other.attacks()
    }

    /// (from, to, promotion piece or 0, castle flag)
    fn pseudo(&self) -> Vec<(usize, usize, i8)> {
        let mut out = Vec::new();
        let sign: i8 = if self.white { 1 } else { -1 };
        let dir = if self.white { 16 } else { -16 };
        for s in 0..128usize {
            let p = self.sq[s];
            if s & 0x88 != 0 || !self.mine(p) {
                continue;
            }
            let si = s as i32;
            let push = |t: i32, out: &mut Vec<(usize, usize, i8)>| {
                let tr = t / 16;
                if p.abs() == 1 && (tr == 0 || tr == 7) {
                    for pr in [2, 3, 4, 5] {
                        out.push((s, t as usize, pr * sign));
                    }
                } else {
                    out.push((s, t as usize, 0));
                }
            };
            match p.abs() {
                1 => {
                    let one = si + dir;
                    if on(one) && self.sq[one as usize] == 0 {
                        push(one, &mut out);
                        let start = if self.white { 1 } else { 6 };
                        let two = one + dir;
                        if si / 16 == start && self.sq[two as usize] == 0 {
                            push(two, &mut out);
                        }
                    }
                    for d in [dir + 1, dir - 1] {
                        let t = si + d;
                        if on(t) {
                            let q = self.sq[t as usize];
                            if (q != 0 && !self.mine(q)) || self.ep == Some(t as usize) {
                                push(t, &mut out);
                            }
                        }
                    }
                }
                2 | 6 => {
                    let steps: &[i32] = if p.abs() == 2 { &N } else { &K };
                    for &d in steps {
                        let t = si + d;
                        if on(t) && !self.mine(self.sq[t as usize]) {
                            push(t, &mut out);
                        }
                    }
                }
                _ => {
                    let dirs: Vec<i32> = match p.abs() {
                        3 => DIAG.to_vec(),
                        4 => ORTH.to_vec(),
                        _ => DIAG.iter().chain(ORTH.iter()).copied().collect(),
                    };
                    for d in dirs {
                        let mut t = si + d;
                        while on(t) {
                            let q = self.sq[t as usize];
                            if self.mine(q) {
                                break;
                            }
                            push(t, &mut out);
                            if q != 0 {
                                break;
                            }
                            t += d;
                        }
                    }
                }
            }
        }
        // Castling, with the transit squares checked against enemy attacks.
        let (base, ci) = if self.white { (0usize, 0usize) } else { (112, 2) };
        if self.sq[base + 4] == 6 * sign {
            let att = self.flipped_attacks();
            let safe = |s: usize| !att.contains(&s);
            if self.castle[ci]
                && self.sq[base + 7] == 4 * sign
                && self.sq[base + 5] == 0
                && self.sq[base + 6] == 0
                && safe(base + 4)
                && safe(base + 5)
                && safe(base + 6)
            {
                out.push((base + 4, base + 6, 0));
            }
            if self.castle[ci + 1]
                && self.sq[base] == 4 * sign
                && self.sq[base + 1] == 0
                && self.sq[base + 2] == 0
                && self.sq[base + 3] == 0
                && safe(base + 4)
                && safe(base + 3)
                && safe(base + 2)
            {
                out.push((base + 4, base + 2, 0));
            }
        }
        out
    }

    fn make(&self, (from, to, promo): (usize, usize, i8)) -> Pos {
        let mut n = self.clone();
        let p = n.sq[from];
        if p.abs() == 1 && Some(to) == self.ep && from % 16 != to % 16 {
            let victim = if self.white { to - 16 } else { to + 16 };
            n.sq[victim] = 0;
        }
        n.sq[to] = if promo != 0 { promo } else { p };
        n.sq[from] = 0;
        if p.abs() == 6 && (from as i32 - to as i32).abs() == 2 {
            let (rf, rt) = if to > from { (from + 3, from + 1) } else { (from - 4, from - 1) };
            n.sq[rt] = n.sq[rf];
            n.sq[rf] = 0;
        }
        n.ep = if p.abs() == 1 && (from as i32 - to as i32).abs() == 32 {
            Some((from + to) / 2)
        } else {
            None
        };
        for (s, ci) in [(4usize, 0usize), (4, 1), (7, 0), (0, 1), (116, 2), (116, 3), (119, 2), (112, 3)] {
            if from == s || to == s {
                n.castle[ci] = false;
            }
        }
        n.white = !n.white;
        n
    }

    fn king_capturable(&self) -> bool {
        // Side to move can capture the opponent's king.
        let king: i8 = if self.white { -6 } else { 6 };
        let Some(k) = (0..128).find(|&s| s & 0x88 == 0 && self.sq[s] == king) else {
            return true;
        };
        self.attacks().contains(&k)
    }

    pub fn perft(&self, depth: u32) -> u64 {
        if depth == 0 {
            return 1;
        }
        self.pseudo()
            .into_iter()
            .map(|m| self.make(m))
            .filter(|n| !n.king_capturable())
            .map(|n| n.perft(depth - 1))
            .sum()
    }
}

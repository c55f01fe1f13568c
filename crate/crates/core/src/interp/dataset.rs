//! Harvested activation rows paired with board-state labels.
//!
//! File layout, little-endian:
//!
//! ```text
//! "MOEXACTV" | u16 version | u32 len | JSON {width, rows, meta}
//! rows × (u32 game | u32 position | u8 split | 96-byte BSP | width × f32)
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chess::{BspVector, BSP_BYTES};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MOEXACTV";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRow {
    pub game: u32,
    pub position: u32,
    pub split: Split,
    pub label: BspVector,
    pub features: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    width: usize,
    features: Vec<f32>,
    labels: Vec<BspVector>,
    games: Vec<u32>,
    positions: Vec<u32>,
    splits: Vec<Split>,
    f_max: Vec<f32>,
    /// Free-form provenance written into the file header.
    pub meta: serde_json::Value,
}

fn column_max(width: usize, features: &[f32]) -> Vec<f32> {
    let mut f_max = vec![f32::NEG_INFINITY; width];
    for row in features.chunks_exact(width.max(1)) {
        for (m, &v) in f_max.iter_mut().zip(row) {
            *m = m.max(v);
        }
    }
    f_max
}

impl ActivationDataset {
    /// Rows from a row-major `[labels.len() × width]` matrix, all tagged
    /// train, each its own game.
    pub fn from_matrix(width: usize, features: Vec<f32>, labels: Vec<BspVector>) -> Result<Self> {
        if features.len() != width * labels.len() {
            return Err(Error::dim("activation matrix", &[features.len()], &[labels.len(), width]));
        }
        let n = labels.len();
        Self::assemble(
            width,
            features,
            labels,
            (0..n as u32).collect(),
            vec![0; n],
            vec![Split::Train; n],
        )
    }

    pub fn from_rows(width: usize, rows: Vec<ActivationRow>) -> Result<Self> {
        let mut features = Vec::with_capacity(width * rows.len());
        let (mut labels, mut games, mut positions, mut splits) = (vec![], vec![], vec![], vec![]);
        for r in rows {
            if r.features.len() != width {
                return Err(Error::dim("activation row", &[r.features.len()], &[width]));
            }
            features.extend_from_slice(&r.features);
            labels.push(r.label);
            games.push(r.game);
            positions.push(r.position);
            splits.push(r.split);
        }
        Self::assemble(width, features, labels, games, positions, splits)
    }

    fn assemble(
        width: usize,
        features: Vec<f32>,
        labels: Vec<BspVector>,
        games: Vec<u32>,
        positions: Vec<u32>,
        splits: Vec<Split>,
    ) -> Result<Self> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("activation value".into()));
        }
        Ok(Self {
            f_max: column_max(width, &features),
            width,
            features,
            labels,
            games,
            positions,
            splits,
            meta: serde_json::Value::Null,
        })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, s: usize) -> &[f32] {
        &self.features[s * self.width..(s + 1) * self.width]
    }

    pub fn value(&self, s: usize, feature: usize) -> f32 {
        self.features[s * self.width + feature]
    }

    pub fn column(&self, feature: usize) -> Vec<f32> {
        (0..self.rows()).map(|s| self.value(s, feature)).collect()
    }

    pub fn labels(&self) -> &[BspVector] {
        &self.labels
    }

    pub fn games(&self) -> &[u32] {
        &self.games
    }

    pub fn positions(&self) -> &[u32] {
        &self.positions
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    /// Per-feature maximum over the rows held.
    pub fn f_max(&self) -> &[f32] {
        &self.f_max
    }

    pub fn row_record(&self, s: usize) -> ActivationRow {
        ActivationRow {
            game: self.games[s],
            position: self.positions[s],
            split: self.splits[s],
            label: self.labels[s],
            features: self.row(s).to_vec(),
        }
    }

    /// Rows tagged `split`, with maxima recomputed over those rows.
    pub fn split(&self, split: Split) -> Self {
        let keep: Vec<usize> = (0..self.rows()).filter(|&s| self.splits[s] == split).collect();
        let mut out = Self::from_rows(self.width, keep.iter().map(|&s| self.row_record(s)).collect())
            .expect("rows come from a valid dataset");
        out.meta = self.meta.clone();
        out
    }

    pub fn with_labels(&self, labels: Vec<BspVector>) -> Result<Self> {
        if labels.len() != self.rows() {
            return Err(Error::dim("labels", &[labels.len()], &[self.rows()]));
        }
        let mut out = self.clone();
        out.labels = labels;
        Ok(out)
    }

    /// Tag whole games as test: a seeded shuffle of the distinct game ids,
    /// with the first `round(test_fraction · games)` going to test.
    pub fn assign_split_by_game(&mut self, test_fraction: f64, seed: u64) {
        let mut ids = self.games.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (test_fraction * ids.len() as f64).round() as usize;
        let test: std::collections::HashSet<u32> = ids[..n_test.min(ids.len())].iter().copied().collect();
        for (s, g) in self.splits.iter_mut().zip(&self.games) {
            *s = if test.contains(g) { Split::Test } else { Split::Train };
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    width: usize,
    rows: usize,
    meta: serde_json::Value,
}

pub fn write_activations(ds: &ActivationDataset, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(ds.rows() * (9 + BSP_BYTES + 4 * ds.width) + 256);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let header = serde_json::to_vec(&Header {
        width: ds.width,
        rows: ds.rows(),
        meta: ds.meta.clone(),
    })?;
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for s in 0..ds.rows() {
        out.extend_from_slice(&ds.games[s].to_le_bytes());
        out.extend_from_slice(&ds.positions[s].to_le_bytes());
        out.push(match ds.splits[s] {
            Split::Train => 0,
            Split::Test => 1,
        });
        out.extend_from_slice(ds.labels[s].as_bytes());
        for v in ds.row(s) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_activations(path: &Path) -> Result<ActivationDataset> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: String| Error::format(path, msg);
    let mut pos = 0;
    let mut take = |n: usize| -> Result<&[u8]> {
        if bytes.len() - pos < n {
            return Err(Error::format(path, format!("truncated at byte {pos}")));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    if take(8)? != MAGIC {
        return Err(bad("not an activation file (bad magic)".into()));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported activation file version {version}")));
    }
    let hlen = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(hlen)?).map_err(|e| bad(format!("header: {e}")))?;
    let mut rows = Vec::with_capacity(header.rows);
    for _ in 0..header.rows {
        let game = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let position = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let split = match take(1)?[0] {
            0 => Split::Train,
            1 => Split::Test,
            b => return Err(bad(format!("unknown split tag {b}"))),
        };
        let label = BspVector::from_bytes(take(BSP_BYTES)?.try_into().unwrap());
        let features = take(4 * header.width)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        rows.push(ActivationRow {
            game,
            position,
            split,
            label,
            features,
        });
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after the last row".into()));
    }
    let mut ds = ActivationDataset::from_rows(header.width, rows).map_err(|e| bad(e.to_string()))?;
    ds.meta = header.meta;
    Ok(ds)
}

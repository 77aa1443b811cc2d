//! Tubelet extraction, temporal-difference ranking and per-position token masking.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Result};
use crate::video::Clip;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Spatial patch size.
    pub patch: usize,
    /// Temporal tubelet size.
    pub tubelet: usize,
    /// Masked fraction per spatial position.
    pub k: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { patch: 8, tubelet: 2, k: 0.5 }
    }
}

/// Shape of the tubelet grid: `(time steps, rows, cols)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridShape {
    pub steps: usize,
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn len(&self) -> usize {
        self.steps * self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, t: usize, i: usize, j: usize) -> usize {
        (t * self.rows + i) * self.cols + j
    }

    pub fn positions(&self) -> impl Iterator<Item = TokenPos> + '_ {
        (0..self.steps).flat_map(move |t| {
            (0..self.rows).flat_map(move |i| (0..self.cols).map(move |j| TokenPos { t, i, j }))
        })
    }
}

/// Spatio-temporal grid coordinate of a tubelet/token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenPos {
    pub t: usize,
    pub i: usize,
    pub j: usize,
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.tubelet == 0 {
            return Err(config_err("patch and tubelet sizes must be nonzero"));
        }
        if !(self.k >= 0.0 && self.k < 1.0) {
            return Err(config_err(format!("mask fraction k={} outside [0, 1)", self.k)));
        }
        Ok(())
    }

    /// Grid for a clip of the given geometry.
    pub fn grid(&self, frames: usize, height: usize, width: usize) -> Result<GridShape> {
        self.validate()?;
        if !height.is_multiple_of(self.patch) || !width.is_multiple_of(self.patch) {
            return Err(config_err(format!(
                "patch size {} does not divide {height}x{width}",
                self.patch
            )));
        }
        if frames == 0 || !frames.is_multiple_of(self.tubelet) {
            return Err(config_err(format!(
                "tubelet size {} does not divide clip length {frames}",
                self.tubelet
            )));
        }
        Ok(GridShape {
            steps: frames / self.tubelet,
            rows: height / self.patch,
            cols: width / self.patch,
        })
    }

    /// Tubelets kept per spatial position, `round_half_up((1 - k) * steps)`.
    pub fn kept_per_column(&self, steps: usize) -> Result<usize> {
        self.validate()?;
        let keep = ((1.0 - self.k) * steps as f64 + 0.5 + 1e-9).floor() as usize;
        if keep == 0 {
            return Err(config_err(format!(
                "k={} leaves no tubelet at any position for {steps} time steps",
                self.k
            )));
        }
        Ok(keep.min(steps))
    }

    pub fn tubelet_dim(&self, channels: usize) -> usize {
        self.tubelet * self.patch * self.patch * channels
    }
}

/// All tubelets of a clip, each flattened in (frame, row, col, channel) order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TubeletGrid {
    pub shape: GridShape,
    pub dim: usize,
    pub data: Vec<u8>,
}

impl TubeletGrid {
    pub fn tubelet(&self, t: usize, i: usize, j: usize) -> &[u8] {
        let k = self.shape.index(t, i, j);
        &self.data[k * self.dim..(k + 1) * self.dim]
    }
}

pub fn extract_tubelets(clip: &Clip, cfg: &MaskConfig) -> Result<TubeletGrid> {
    let shape = cfg.grid(clip.frames(), clip.height(), clip.width())?;
    let (p, d, c) = (cfg.patch, cfg.tubelet, clip.channels());
    let dim = cfg.tubelet_dim(c);
    let mut data = Vec::with_capacity(shape.len() * dim);
    for pos in shape.positions() {
        for f in 0..d {
            let frame = clip.frame(pos.t * d + f);
            for y in 0..p {
                let row = (pos.i * p + y) * clip.width() + pos.j * p;
                data.extend_from_slice(&frame[row * c..(row + p) * c]);
            }
        }
    }
    Ok(TubeletGrid { shape, dim, data })
}

/// Inverse of [`extract_tubelets`].
pub fn assemble_tubelets(grid: &TubeletGrid, cfg: &MaskConfig, channels: usize) -> Result<Clip> {
    let (p, d) = (cfg.patch, cfg.tubelet);
    let (frames, height, width) = (grid.shape.steps * d, grid.shape.rows * p, grid.shape.cols * p);
    let mut data = vec![0u8; frames * height * width * channels];
    for pos in grid.shape.positions() {
        let tub = grid.tubelet(pos.t, pos.i, pos.j);
        let mut src = 0;
        for f in 0..d {
            for y in 0..p {
                let dst = (((pos.t * d + f) * height + pos.i * p + y) * width + pos.j * p) * channels;
                data[dst..dst + p * channels].copy_from_slice(&tub[src..src + p * channels]);
                src += p * channels;
            }
        }
    }
    Clip::new(frames, height, width, channels, data)
}

/// Nonnegative motion score per tubelet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankGrid {
    pub shape: GridShape,
    pub scores: Vec<u64>,
}

impl RankGrid {
    pub fn get(&self, t: usize, i: usize, j: usize) -> u64 {
        self.scores[self.shape.index(t, i, j)]
    }
}

fn patch_l1(clip: &Clip, a: usize, b: usize, i: usize, j: usize, p: usize) -> u64 {
    let c = clip.channels();
    let (fa, fb) = (clip.frame(a), clip.frame(b));
    let mut sum = 0u64;
    for y in 0..p {
        let start = ((i * p + y) * clip.width() + j * p) * c;
        let end = start + p * c;
        sum += fa[start..end]
            .iter()
            .zip(&fb[start..end])
            .map(|(&x, &y)| x.abs_diff(y) as u64)
            .sum::<u64>();
    }
    sum
}

/// L1 distance between the first frame of tubelet `t` and the last frame of
/// tubelet `t + 1` at the same spatial position. The final tubelet compares its
/// own first and last frames.
pub fn rank_tubelets(clip: &Clip, cfg: &MaskConfig) -> Result<RankGrid> {
    let shape = cfg.grid(clip.frames(), clip.height(), clip.width())?;
    let d = cfg.tubelet;
    let mut scores = vec![0u64; shape.len()];
    for pos in shape.positions() {
        let first = pos.t * d;
        let last = if pos.t + 1 < shape.steps { (pos.t + 1) * d + d - 1 } else { pos.t * d + d - 1 };
        scores[shape.index(pos.t, pos.i, pos.j)] = patch_l1(clip, first, last, pos.i, pos.j, cfg.patch);
    }
    Ok(RankGrid { shape, scores })
}

/// Retention grid over tubelets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSelection {
    pub shape: GridShape,
    pub keep: Vec<bool>,
}

impl MaskSelection {
    pub fn keep_all(shape: GridShape) -> Self {
        Self { shape, keep: vec![true; shape.len()] }
    }

    pub fn is_kept(&self, t: usize, i: usize, j: usize) -> bool {
        self.keep[self.shape.index(t, i, j)]
    }

    pub fn retained(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn retained_in_column(&self, i: usize, j: usize) -> usize {
        (0..self.shape.steps).filter(|&t| self.is_kept(t, i, j)).count()
    }

    /// Retained positions in `(t, i, j)` lexicographic order.
    pub fn retained_positions(&self) -> Vec<TokenPos> {
        self.shape.positions().filter(|p| self.is_kept(p.t, p.i, p.j)).collect()
    }
}

/// Keeps, in every spatial column, the tubelets with the highest rank; ties go
/// to the later time step.
pub fn difference_mask(clip: &Clip, cfg: &MaskConfig) -> Result<MaskSelection> {
    let ranks = rank_tubelets(clip, cfg)?;
    select_top(&ranks, cfg)
}

pub fn select_top(ranks: &RankGrid, cfg: &MaskConfig) -> Result<MaskSelection> {
    let shape = ranks.shape;
    let keep_n = cfg.kept_per_column(shape.steps)?;
    let mut keep = vec![false; shape.len()];
    let mut order: Vec<usize> = Vec::with_capacity(shape.steps);
    for i in 0..shape.rows {
        for j in 0..shape.cols {
            order.clear();
            order.extend(0..shape.steps);
            order.sort_unstable_by(|&a, &b| {
                (ranks.get(b, i, j), b).cmp(&(ranks.get(a, i, j), a))
            });
            for &t in &order[..keep_n] {
                keep[shape.index(t, i, j)] = true;
            }
        }
    }
    Ok(MaskSelection { shape, keep })
}

/// Keeps a uniformly random subset of the same size in every spatial column.
pub fn random_mask<R: Rng + ?Sized>(clip: &Clip, cfg: &MaskConfig, rng: &mut R) -> Result<MaskSelection> {
    let shape = cfg.grid(clip.frames(), clip.height(), clip.width())?;
    random_mask_for(shape, cfg, rng)
}

pub fn random_mask_for<R: Rng + ?Sized>(shape: GridShape, cfg: &MaskConfig, rng: &mut R) -> Result<MaskSelection> {
    let keep_n = cfg.kept_per_column(shape.steps)?;
    let mut keep = vec![false; shape.len()];
    for i in 0..shape.rows {
        for j in 0..shape.cols {
            for t in rand::seq::index::sample(rng, shape.steps, keep_n) {
                keep[shape.index(t, i, j)] = true;
            }
        }
    }
    Ok(MaskSelection { shape, keep })
}

/// Which masking rule to apply to a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    Difference,
    Random,
    None,
}

impl std::str::FromStr for MaskKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "difference" => Ok(Self::Difference),
            "random" => Ok(Self::Random),
            "none" => Ok(Self::None),
            other => Err(config_err(format!("unknown mask kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for MaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Difference => "difference",
            Self::Random => "random",
            Self::None => "none",
        })
    }
}

/// Computes the selection for one clip according to `kind`.
pub fn select<R: Rng + ?Sized>(
    kind: MaskKind,
    clip: &Clip,
    cfg: &MaskConfig,
    rng: &mut R,
) -> Result<MaskSelection> {
    match kind {
        MaskKind::Difference => difference_mask(clip, cfg),
        MaskKind::Random => random_mask(clip, cfg, rng),
        MaskKind::None => Ok(MaskSelection::keep_all(cfg.grid(clip.frames(), clip.height(), clip.width())?)),
    }
}

/// Rows tagged with their grid positions.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub embeddings: ndarray::Array2<f64>,
    pub positions: Vec<TokenPos>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Drops the rows of `tokens` whose cell is masked out, preserving order and
/// position tags. `tokens` may itself already be a subset of the grid.
pub fn apply_mask(tokens: &TokenSequence, sel: &MaskSelection) -> Result<TokenSequence> {
    let shape = sel.shape;
    let mut rows = Vec::new();
    for (r, p) in tokens.positions.iter().enumerate() {
        if p.t >= shape.steps || p.i >= shape.rows || p.j >= shape.cols {
            return Err(contract_err(format!("token at {p:?} lies outside the {shape:?} grid")));
        }
        if sel.is_kept(p.t, p.i, p.j) {
            rows.push(r);
        }
    }
    Ok(TokenSequence {
        embeddings: tokens.embeddings.select(ndarray::Axis(0), &rows),
        positions: rows.iter().map(|&r| tokens.positions[r]).collect(),
    })
}

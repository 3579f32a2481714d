//! Per-parameter importance: accumulated `|gradient × parameter|` scores,
//! cross-language merging, the exhaustive zero-out oracle, and per-dimension
//! (row/column) scores for structured removal.
//!
//! Importance is tracked for the attention and feed-forward weight matrices
//! and all norm vectors. The token embedding is deliberately outside the
//! scheme, and the lm-head is excluded to match it.

use crate::corpus::Corpus;
use crate::model::{Layout, MatrixId, MatrixKind, ModelConfig, ParamCoord, ParameterStore};
use crate::regions::{DimAxis, RegionMask};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImportanceError {
    #[error("gradient set has {got} matrices, layout has {want}")]
    GradientArity { got: usize, want: usize },
    #[error("gradient for {id} has {got} values, expected {want}")]
    GradientShape { id: MatrixId, got: usize, want: usize },
    #[error("maps cover different shapes and cannot merge")]
    MergeShapeMismatch,
    #[error("coordinate {0:?} is not addressable")]
    BadCoord(ParamCoord),
    #[error("matrix {0} is not covered by importance tracking")]
    NotCovered(MatrixId),
    #[error("dimension scores are not defined for {kind:?} along {axis:?}")]
    BadDimAxis { kind: MatrixKind, axis: DimAxis },
    #[error(transparent)]
    Train(#[from] crate::trainer::TrainError),
}

pub type Result<T> = std::result::Result<T, ImportanceError>;

/// Accumulated importance scores, one f64 array per covered matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    config: ModelConfig,
    covered: Vec<(MatrixId, usize, usize)>,
    /// Layout index of each covered matrix, for gradient alignment.
    layout_index: Vec<usize>,
    scores: Vec<Vec<f64>>,
    steps: u64,
    languages: Vec<String>,
}

impl ImportanceMap {
    pub fn zeros(config: &ModelConfig) -> Self {
        let layout = Layout::of(config);
        let mut covered = Vec::new();
        let mut layout_index = Vec::new();
        for (i, desc) in layout.entries().iter().enumerate() {
            if desc.id.kind.tracks_importance() {
                covered.push((desc.id, desc.rows, desc.cols));
                layout_index.push(i);
            }
        }
        let scores = covered.iter().map(|&(_, r, c)| vec![0.0; r * c]).collect();
        ImportanceMap {
            config: config.clone(),
            covered,
            layout_index,
            scores,
            steps: 0,
            languages: Vec::new(),
        }
    }

    pub fn for_language(config: &ModelConfig, language: &str) -> Self {
        let mut map = Self::zeros(config);
        map.languages.push(language.to_string());
        map
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn covered(&self) -> impl Iterator<Item = (MatrixId, usize, usize, &[f64])> {
        self.covered
            .iter()
            .zip(&self.scores)
            .map(|(&(id, r, c), s)| (id, r, c, s.as_slice()))
    }

    /// Covered matrices that participate in ratio selection.
    pub fn weight_matrices(&self) -> impl Iterator<Item = (MatrixId, usize, usize, &[f64])> {
        self.covered().filter(|(id, ..)| id.kind.is_region_weight())
    }

    pub fn scores_for(&self, id: MatrixId) -> Option<&[f64]> {
        self.covered
            .iter()
            .position(|&(c, ..)| c == id)
            .map(|i| self.scores[i].as_slice())
    }

    /// Test hook: overwrite scores from a function of (matrix, flat index).
    pub fn fill_with(&mut self, f: impl Fn(MatrixId, usize) -> f64) {
        let mut global = 0usize;
        for (i, &(id, r, c)) in self.covered.iter().enumerate() {
            for j in 0..r * c {
                self.scores[i][j] = f(id, global + j);
            }
            global += r * c;
        }
    }

    /// One optimizer step's contribution: `score_j += |g_j * θ_j|`, using the
    /// pre-update parameters and the minibatch gradient.
    pub fn accumulate_step(
        &mut self,
        store: &ParameterStore<f32>,
        grads: &[Vec<f32>],
    ) -> Result<()> {
        let want = store.layout().entries().len();
        if grads.len() != want {
            return Err(ImportanceError::GradientArity { got: grads.len(), want });
        }
        for (slot, &li) in self.layout_index.iter().enumerate() {
            let theta = store.matrix(li);
            let g = &grads[li];
            if g.len() != theta.len() {
                return Err(ImportanceError::GradientShape {
                    id: self.covered[slot].0,
                    got: g.len(),
                    want: theta.len(),
                });
            }
            let s = &mut self.scores[slot];
            for j in 0..theta.len() {
                s[j] += (g[j] as f64 * theta[j] as f64).abs();
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// Elementwise sum of the given maps; contributing languages concatenate.
    pub fn merge(maps: &[&ImportanceMap]) -> Result<ImportanceMap> {
        let first = maps.first().ok_or(ImportanceError::MergeShapeMismatch)?;
        let mut out = (*first).clone();
        for m in &maps[1..] {
            if m.covered != out.covered {
                return Err(ImportanceError::MergeShapeMismatch);
            }
            for (dst, src) in out.scores.iter_mut().zip(&m.scores) {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            out.steps += m.steps;
            out.languages.extend(m.languages.iter().cloned());
        }
        Ok(out)
    }
}

/// Exact removal importance of one coordinate: `|L(D,θ) − L(D,θ|θ_j=0)|`,
/// by zeroing the scalar, re-evaluating, and restoring it bit-identically.
pub fn exact_importance(
    store: &mut ParameterStore<f32>,
    eval_corpus: &Corpus,
    coord: ParamCoord,
) -> Result<f64> {
    let base = crate::trainer::eval_mean_nll(store, eval_corpus)?;
    exact_importance_with_base(store, eval_corpus, coord, base)
}

fn exact_importance_with_base(
    store: &mut ParameterStore<f32>,
    eval_corpus: &Corpus,
    coord: ParamCoord,
    base_nll: f64,
) -> Result<f64> {
    let original = store.get(coord).ok_or(ImportanceError::BadCoord(coord))?;
    store.set(coord, 0.0);
    let removed = crate::trainer::eval_mean_nll(store, eval_corpus);
    store.set(coord, original);
    Ok((base_nll - removed?).abs())
}

/// Exhaustive exact importance for every entry of one matrix, sharing a
/// single base-loss evaluation. Row-major order.
pub fn exact_importance_matrix(
    store: &mut ParameterStore<f32>,
    eval_corpus: &Corpus,
    matrix: MatrixId,
) -> Result<Vec<f64>> {
    let desc = *store
        .layout()
        .desc(matrix)
        .ok_or(ImportanceError::NotCovered(matrix))?;
    let base = crate::trainer::eval_mean_nll(store, eval_corpus)?;
    let mut out = Vec::with_capacity(desc.len());
    for row in 0..desc.rows {
        for col in 0..desc.cols {
            let coord = ParamCoord { matrix, row, col };
            out.push(exact_importance_with_base(store, eval_corpus, coord, base)?);
        }
    }
    Ok(out)
}

/// The `|g·θ|` scores of a single gradient evaluation (no accumulation),
/// for comparing the first-order approximation against the exact oracle.
pub fn single_eval_approximation(
    store: &ParameterStore<f32>,
    grads: &[Vec<f32>],
    matrix: MatrixId,
) -> Result<Vec<f64>> {
    let layout = store.layout();
    let idx = layout
        .index_of(matrix)
        .ok_or(ImportanceError::NotCovered(matrix))?;
    let theta = store.matrix(idx);
    let g = grads
        .get(idx)
        .ok_or(ImportanceError::GradientArity { got: grads.len(), want: layout.entries().len() })?;
    if g.len() != theta.len() {
        return Err(ImportanceError::GradientShape { id: matrix, got: g.len(), want: theta.len() });
    }
    Ok(theta
        .iter()
        .zip(g)
        .map(|(&t, &gv)| (t as f64 * gv as f64).abs())
        .collect())
}

// ── per-dimension scores ────────────────────────────────────────────────

/// Row/column scores for one matrix name, aggregated across layers.
/// Primary score is the mask-hit count (or summed importance when built
/// from a map); ties break by summed importance, then by lower index.
#[derive(Debug, Clone, PartialEq)]
pub struct DimScores {
    pub kind: MatrixKind,
    pub axis: DimAxis,
    pub scores: Vec<f64>,
    pub tie_break: Vec<f64>,
}

fn axis_len(config: &ModelConfig, kind: MatrixKind, axis: DimAxis) -> Result<usize> {
    if !kind.is_region_weight() {
        return Err(ImportanceError::BadDimAxis { kind, axis });
    }
    let (rows, cols) = match kind {
        MatrixKind::FfnGate | MatrixKind::FfnUp => (config.ffn_dim, config.dim),
        MatrixKind::FfnDown => (config.dim, config.ffn_dim),
        _ => (config.dim, config.dim),
    };
    Ok(match axis {
        DimAxis::Row => rows,
        DimAxis::Col => cols,
    })
}

impl DimScores {
    /// Counts mask hits per row/column of `kind`, summed over layers.
    /// When a map is supplied its per-index importance sums act as the
    /// tie-break key.
    pub fn from_mask(
        mask: &RegionMask,
        config: &ModelConfig,
        kind: MatrixKind,
        axis: DimAxis,
        tie_break: Option<&ImportanceMap>,
    ) -> Result<DimScores> {
        let n = axis_len(config, kind, axis)?;
        let mut scores = vec![0.0; n];
        for e in mask.entries() {
            if e.id.kind != kind {
                continue;
            }
            for (row, col) in e.coords() {
                let idx = match axis {
                    DimAxis::Row => row,
                    DimAxis::Col => col,
                };
                scores[idx] += 1.0;
            }
        }
        let tie = match tie_break {
            Some(map) => Self::from_map(map, config, kind, axis)?.scores,
            None => vec![0.0; n],
        };
        Ok(DimScores { kind, axis, scores, tie_break: tie })
    }

    /// Sums importance per row/column of `kind` over layers.
    pub fn from_map(
        map: &ImportanceMap,
        config: &ModelConfig,
        kind: MatrixKind,
        axis: DimAxis,
    ) -> Result<DimScores> {
        let n = axis_len(config, kind, axis)?;
        let mut scores = vec![0.0; n];
        for (id, rows, cols, s) in map.covered() {
            if id.kind != kind {
                continue;
            }
            for r in 0..rows {
                for c in 0..cols {
                    let idx = match axis {
                        DimAxis::Row => r,
                        DimAxis::Col => c,
                    };
                    scores[idx] += s[r * cols + c];
                }
            }
        }
        Ok(DimScores { kind, axis, scores: scores.clone(), tie_break: scores })
    }

    /// Indices from most to least important.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| {
            self.scores[b]
                .partial_cmp(&self.scores[a])
                .unwrap()
                .then(self.tie_break[b].partial_cmp(&self.tie_break[a]).unwrap())
                .then(a.cmp(&b))
        });
        order
    }

    pub fn top(&self, n: usize) -> Vec<usize> {
        self.ranking().into_iter().take(n).collect()
    }

    pub fn bottom(&self, n: usize) -> Vec<usize> {
        let r = self.ranking();
        r.into_iter().rev().take(n).collect()
    }

    /// `n` indices from the central 10% band of the ranking (widened to `n`
    /// if the band is narrower).
    pub fn middle(&self, n: usize) -> Vec<usize> {
        let r = self.ranking();
        let len = r.len();
        let band = ((len as f64 * 0.10).ceil() as usize).max(n).min(len);
        let start = (len - band) / 2;
        r[start..].iter().take(n).copied().collect()
    }
}

//! Parameter regions: per-matrix coordinate bitsets, ratio/random selection,
//! deduplication, zero-out surgery, structured dimension removal, and
//! targeted perturbations.
//!
//! Ratio selection operates on the attention and feed-forward weight
//! matrices only; norm vectors take part in importance ranking but never in
//! ratio masks, and the embedding / lm-head are untouchable by all surgery.

use crate::importance::ImportanceMap;
use crate::model::{init_distribution, MatrixId, MatrixKind, ModelConfig, ParamCoord, ParameterStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("masks have incompatible shapes for {id}: {a_rows}x{a_cols} vs {b_rows}x{b_cols}")]
    ShapeMismatch {
        id: MatrixId,
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },
    #[error("mask addresses excluded matrix {0}; embedding and lm-head are off limits to surgery")]
    ExcludedMatrix(MatrixId),
    #[error("mask does not fit the model: {0}")]
    MaskModelMismatch(String),
    #[error("ratio {0} outside [0, 1]")]
    BadRatio(f64),
    #[error("{what} index {index} out of range for {limit}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("matrix kind {0:?} has no per-layer rows/columns to remove")]
    NotRemovable(MatrixKind),
    #[error("{0} is not a norm vector")]
    NotANorm(MatrixId),
    #[error("perturbation factor must be finite, got {0}")]
    BadFactor(f32),
}

pub type Result<T> = std::result::Result<T, RegionError>;

// ── mask storage ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    pub id: MatrixId,
    pub rows: usize,
    pub cols: usize,
    bits: Vec<u64>,
    count: usize,
}

impl MaskMatrix {
    fn empty(id: MatrixId, rows: usize, cols: usize) -> Self {
        let words = (rows * cols).div_ceil(64);
        MaskMatrix { id, rows, cols, bits: vec![0; words], count: 0 }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        let idx = row * self.cols + col;
        (self.bits[idx / 64] >> (idx % 64)) & 1 == 1
    }

    fn set(&mut self, row: usize, col: usize) {
        let idx = row * self.cols + col;
        let word = &mut self.bits[idx / 64];
        let bit = 1u64 << (idx % 64);
        if *word & bit == 0 {
            *word |= bit;
            self.count += 1;
        }
    }

    fn recount(&mut self) {
        self.count = self.bits.iter().map(|w| w.count_ones() as usize).sum();
    }

    /// Masked coordinates in row-major order.
    pub fn coords(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.count);
        for row in 0..self.rows {
            for col in 0..self.cols {
                if self.contains(row, col) {
                    out.push((row, col));
                }
            }
        }
        out
    }
}

/// How a mask came to be; carried through persistence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Provenance {
    pub mode: String,
    pub ratio: Option<f64>,
    pub source: String,
    pub seed: Option<u64>,
    pub lineage: Vec<String>,
}

/// A set of parameter coordinates, one bitset per matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    entries: Vec<MaskMatrix>,
    pub provenance: Provenance,
}

impl RegionMask {
    pub fn new(entries: Vec<MaskMatrix>, provenance: Provenance) -> Self {
        let mut entries = entries;
        entries.sort_by_key(|e| e.id);
        RegionMask { entries, provenance }
    }

    /// Empty mask over the ratio-selection domain (weight matrices).
    pub fn empty_weights(config: &ModelConfig) -> Self {
        let entries = region_weight_shapes(config)
            .into_iter()
            .map(|(id, r, c)| MaskMatrix::empty(id, r, c))
            .collect();
        RegionMask::new(entries, Provenance { mode: "empty".into(), ..Default::default() })
    }

    /// Mask covering every trainable scalar, embedding and lm-head included.
    /// Too broad for surgery, but exactly what a full freeze wants.
    pub fn all_trainable(config: &ModelConfig) -> Self {
        let layout = crate::model::Layout::of(config);
        let entries = layout
            .entries()
            .iter()
            .map(|d| {
                let mut m = MaskMatrix::empty(d.id, d.rows, d.cols);
                m.bits.fill(u64::MAX);
                let len = m.len();
                if len % 64 != 0 {
                    let last = m.bits.len() - 1;
                    m.bits[last] = (1u64 << (len % 64)) - 1;
                }
                m.recount();
                m
            })
            .collect();
        RegionMask::new(
            entries,
            Provenance { mode: "full-trainable".into(), ..Default::default() },
        )
    }

    pub fn entries(&self) -> &[MaskMatrix] {
        &self.entries
    }

    pub fn entry(&self, id: MatrixId) -> Option<&MaskMatrix> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.count).sum()
    }

    pub fn contains(&self, coord: ParamCoord) -> bool {
        self.entry(coord.matrix)
            .map(|e| coord.row < e.rows && coord.col < e.cols && e.contains(coord.row, coord.col))
            .unwrap_or(false)
    }

    pub fn insert(&mut self, coord: ParamCoord) -> Result<()> {
        let entry = self
            .entries
            .iter_mut()
            .find(|e| e.id == coord.matrix)
            .ok_or_else(|| {
                RegionError::MaskModelMismatch(format!("no entry for {}", coord.matrix))
            })?;
        if coord.row >= entry.rows || coord.col >= entry.cols {
            return Err(RegionError::IndexOutOfRange {
                what: "coordinate",
                index: coord.row * entry.cols + coord.col,
                limit: entry.len(),
            });
        }
        entry.set(coord.row, coord.col);
        Ok(())
    }

    fn zip_compatible<'a>(
        &'a self,
        other: &'a RegionMask,
    ) -> Result<Vec<(&'a MaskMatrix, Option<&'a MaskMatrix>)>> {
        let mut out = Vec::new();
        for e in &self.entries {
            let o = other.entry(e.id);
            if let Some(o) = o {
                if o.rows != e.rows || o.cols != e.cols {
                    return Err(RegionError::ShapeMismatch {
                        id: e.id,
                        a_rows: e.rows,
                        a_cols: e.cols,
                        b_rows: o.rows,
                        b_cols: o.cols,
                    });
                }
            }
            out.push((e, o));
        }
        Ok(out)
    }

    pub fn intersection_count(&self, other: &RegionMask) -> Result<usize> {
        Ok(self
            .zip_compatible(other)?
            .into_iter()
            .map(|(a, b)| match b {
                Some(b) => a
                    .bits
                    .iter()
                    .zip(&b.bits)
                    .map(|(&x, &y)| (x & y).count_ones() as usize)
                    .sum(),
                None => 0,
            })
            .sum())
    }

    pub fn union_count(&self, other: &RegionMask) -> Result<usize> {
        let shared: usize = self
            .zip_compatible(other)?
            .into_iter()
            .map(|(a, b)| match b {
                Some(b) => a
                    .bits
                    .iter()
                    .zip(&b.bits)
                    .map(|(&x, &y)| (x | y).count_ones() as usize)
                    .sum(),
                None => a.count,
            })
            .sum::<usize>();
        let only_other: usize = other
            .entries
            .iter()
            .filter(|o| self.entry(o.id).is_none())
            .map(|o| o.count)
            .sum();
        Ok(shared + only_other)
    }

    /// Exact per-matrix population counts.
    pub fn stats(&self) -> Vec<(MatrixId, usize)> {
        self.entries.iter().map(|e| (e.id, e.count)).collect()
    }
}

/// Shapes of the matrices ratio selection covers, in layout order.
pub fn region_weight_shapes(config: &ModelConfig) -> Vec<(MatrixId, usize, usize)> {
    crate::model::Layout::of(config)
        .entries()
        .iter()
        .filter(|d| d.id.kind.is_region_weight())
        .map(|d| (d.id, d.rows, d.cols))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectMode {
    Top,
    Bottom,
}

impl SelectMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectMode::Top => "top",
            SelectMode::Bottom => "bottom",
        }
    }
}

/// Per matrix, selects `floor(ratio * entries)` coordinates with the highest
/// (or lowest) importance scores. Ties break toward the lower coordinate.
pub fn select_ratio(map: &ImportanceMap, ratio: f64, mode: SelectMode) -> Result<RegionMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(RegionError::BadRatio(ratio));
    }
    let mut entries = Vec::new();
    for (id, rows, cols, scores) in map.weight_matrices() {
        let mut m = MaskMatrix::empty(id, rows, cols);
        let k = (ratio * m.len() as f64).floor() as usize;
        if k > 0 {
            let mut order: Vec<usize> = (0..m.len()).collect();
            match mode {
                SelectMode::Top => order
                    .sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))),
                SelectMode::Bottom => order
                    .sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b))),
            }
            for &idx in order.iter().take(k) {
                m.set(idx / cols, idx % cols);
            }
        }
        entries.push(m);
    }
    Ok(RegionMask::new(
        entries,
        Provenance {
            mode: format!("ratio-{}", mode.as_str()),
            ratio: Some(ratio),
            source: format!("importance[{}]", map.languages().join("+")),
            seed: None,
            lineage: Vec::new(),
        },
    ))
}

/// Per matrix, uniformly samples `floor(ratio * entries)` coordinates
/// without replacement. Deterministic under `seed`.
pub fn select_random(
    shapes: &[(MatrixId, usize, usize)],
    ratio: f64,
    seed: u64,
) -> Result<RegionMask> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(RegionError::BadRatio(ratio));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for &(id, rows, cols) in shapes {
        let mut m = MaskMatrix::empty(id, rows, cols);
        let n = m.len();
        let k = (ratio * n as f64).floor() as usize;
        // partial Fisher-Yates: the first k slots of a virtual shuffle
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = rng.random_range(i..n);
            pool.swap(i, j);
            m.set(pool[i] / cols, pool[i] % cols);
        }
        entries.push(m);
    }
    Ok(RegionMask::new(
        entries,
        Provenance {
            mode: "random".into(),
            ratio: Some(ratio),
            source: "uniform".into(),
            seed: Some(seed),
            lineage: Vec::new(),
        },
    ))
}

/// Set difference `target − ∪ others`, per matrix. The provenance records
/// the dedup lineage.
pub fn dedup(target: &RegionMask, others: &[&RegionMask]) -> Result<RegionMask> {
    let mut entries = Vec::new();
    for e in target.entries() {
        let mut m = e.clone();
        for other in others {
            if let Some(o) = other.entry(e.id) {
                if o.rows != e.rows || o.cols != e.cols {
                    return Err(RegionError::ShapeMismatch {
                        id: e.id,
                        a_rows: e.rows,
                        a_cols: e.cols,
                        b_rows: o.rows,
                        b_cols: o.cols,
                    });
                }
                for (w, &ow) in m.bits.iter_mut().zip(&o.bits) {
                    *w &= !ow;
                }
            }
        }
        m.recount();
        entries.push(m);
    }
    let mut lineage = vec![format!("target:{}", target.provenance.mode)];
    lineage.extend(others.iter().map(|o| format!("minus:{}", o.provenance.mode)));
    Ok(RegionMask::new(
        entries,
        Provenance {
            mode: "dedup".into(),
            ratio: target.provenance.ratio,
            source: target.provenance.source.clone(),
            seed: target.provenance.seed,
            lineage,
        },
    ))
}

fn reject_excluded(mask: &RegionMask) -> Result<()> {
    for e in mask.entries() {
        if matches!(e.id.kind, MatrixKind::Embedding | MatrixKind::LmHead) && e.count > 0 {
            return Err(RegionError::ExcludedMatrix(e.id));
        }
    }
    Ok(())
}

/// Sets every masked scalar to zero. Everything else is untouched;
/// recovering the originals requires a checkpoint.
pub fn apply_zero(store: &mut ParameterStore<f32>, mask: &RegionMask) -> Result<()> {
    reject_excluded(mask)?;
    for e in mask.entries() {
        let Some(matrix) = store.matrix_by_id_mut(e.id) else {
            return Err(RegionError::MaskModelMismatch(format!("model lacks {}", e.id)));
        };
        if matrix.len() != e.len() {
            return Err(RegionError::ShapeMismatch {
                id: e.id,
                a_rows: e.rows,
                a_cols: e.cols,
                b_rows: matrix.len() / e.cols.max(1),
                b_cols: e.cols,
            });
        }
        for (word_idx, &word) in e.bits.iter().enumerate() {
            if word == 0 {
                continue;
            }
            let base = word_idx * 64;
            for bit in 0..64 {
                if word >> bit & 1 == 1 {
                    matrix[base + bit] = 0.0;
                }
            }
        }
    }
    Ok(())
}

// ── structured dimension removal ────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimAxis {
    Row,
    Col,
}

impl DimAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            DimAxis::Row => "row",
            DimAxis::Col => "col",
        }
    }
}

/// The row/column groupings the structured-removal experiments sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DimGroupPreset {
    /// attn.o rows + attn.q/k/v cols (head blocks) + ffn.down cols.
    AttnHeadsFfnDown,
    /// attn.o rows + attn.q/k/v cols only.
    AttnHeads,
    /// attn.o cols + attn.q/k/v rows: the representation-feature side.
    AttnFeatures,
    /// ffn.gate/up rows + ffn.down cols: feed-forward hidden units.
    FfnHidden,
}

impl DimGroupPreset {
    pub fn pairs(self) -> &'static [(MatrixKind, DimAxis)] {
        use DimAxis::*;
        use MatrixKind::*;
        match self {
            DimGroupPreset::AttnHeadsFfnDown => &[
                (AttnO, Row),
                (AttnQ, Col),
                (AttnK, Col),
                (AttnV, Col),
                (FfnDown, Col),
            ],
            DimGroupPreset::AttnHeads => &[(AttnO, Row), (AttnQ, Col), (AttnK, Col), (AttnV, Col)],
            DimGroupPreset::AttnFeatures => {
                &[(AttnO, Col), (AttnQ, Row), (AttnK, Row), (AttnV, Row)]
            }
            DimGroupPreset::FfnHidden => &[(FfnGate, Row), (FfnUp, Row), (FfnDown, Col)],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DimGroupPreset::AttnHeadsFfnDown => "attn-heads+ffn-down",
            DimGroupPreset::AttnHeads => "attn-heads",
            DimGroupPreset::AttnFeatures => "attn-features",
            DimGroupPreset::FfnHidden => "ffn-hidden",
        }
    }
}

impl std::str::FromStr for DimGroupPreset {
    type Err = RegionError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attn-heads+ffn-down" => Ok(DimGroupPreset::AttnHeadsFfnDown),
            "attn-heads" => Ok(DimGroupPreset::AttnHeads),
            "attn-features" => Ok(DimGroupPreset::AttnFeatures),
            "ffn-hidden" => Ok(DimGroupPreset::FfnHidden),
            _ => Err(RegionError::MaskModelMismatch(format!("unknown preset {s}"))),
        }
    }
}

/// Rows/columns to zero, applied to the named matrix in every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DimRemovalSpec {
    pub removals: Vec<(MatrixKind, DimAxis, usize)>,
    pub preset: Option<DimGroupPreset>,
    pub n_d: usize,
}

impl DimRemovalSpec {
    pub fn empty() -> Self {
        DimRemovalSpec { removals: Vec::new(), preset: None, n_d: 0 }
    }
}

fn axis_limit(config: &ModelConfig, kind: MatrixKind, axis: DimAxis) -> Result<usize> {
    if !kind.is_region_weight() || !kind.is_per_layer() {
        return Err(RegionError::NotRemovable(kind));
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

/// Zeroes each named row/column across all layers. Shape-preserving.
pub fn remove_dims(store: &mut ParameterStore<f32>, spec: &DimRemovalSpec) -> Result<()> {
    let config = store.config().clone();
    for &(kind, axis, index) in &spec.removals {
        let limit = axis_limit(&config, kind, axis)?;
        if index >= limit {
            return Err(RegionError::IndexOutOfRange { what: "dimension", index, limit });
        }
    }
    for &(kind, axis, index) in &spec.removals {
        let cols = match kind {
            MatrixKind::FfnDown => config.ffn_dim,
            _ => config.dim,
        };
        let rows = match kind {
            MatrixKind::FfnGate | MatrixKind::FfnUp => config.ffn_dim,
            _ => config.dim,
        };
        for layer in 0..config.layers {
            let id = MatrixId::layered(kind, layer);
            let matrix = store.matrix_by_id_mut(id).expect("layered weight exists");
            match axis {
                DimAxis::Row => matrix[index * cols..(index + 1) * cols].fill(0.0),
                DimAxis::Col => {
                    for r in 0..rows {
                        matrix[r * cols + index] = 0.0;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Re-draws one residual-stream dimension's incoming weights — the attn.o
/// column and the ffn.down row at `dim` — from the initializer distribution,
/// in every layer.
pub fn perturb_dim(store: &mut ParameterStore<f32>, dim: usize, seed: u64) -> Result<()> {
    let config = store.config().clone();
    if dim >= config.dim {
        return Err(RegionError::IndexOutOfRange {
            what: "dimension",
            index: dim,
            limit: config.dim,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = init_distribution(&config);
    for layer in 0..config.layers {
        let o = store
            .matrix_by_id_mut(MatrixId::layered(MatrixKind::AttnO, layer))
            .expect("attn.o exists");
        for r in 0..config.dim {
            o[r * config.dim + dim] = normal.sample(&mut rng);
        }
        let down = store
            .matrix_by_id_mut(MatrixId::layered(MatrixKind::FfnDown, layer))
            .expect("ffn.down exists");
        down[dim * config.ffn_dim..(dim + 1) * config.ffn_dim]
            .iter_mut()
            .for_each(|w| *w = normal.sample(&mut rng));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormPerturbMode {
    ResetToOne,
    MultiplyBy(f32),
}

/// Modifies exactly one scalar of a norm vector.
pub fn perturb_norm_param(
    store: &mut ParameterStore<f32>,
    norm: MatrixId,
    dim: usize,
    mode: NormPerturbMode,
) -> Result<()> {
    if !norm.kind.is_norm() {
        return Err(RegionError::NotANorm(norm));
    }
    let Some(vec) = store.matrix_by_id_mut(norm) else {
        return Err(RegionError::MaskModelMismatch(format!("model lacks {norm}")));
    };
    if dim >= vec.len() {
        return Err(RegionError::IndexOutOfRange {
            what: "norm dim",
            index: dim,
            limit: vec.len(),
        });
    }
    match mode {
        NormPerturbMode::ResetToOne => vec[dim] = 1.0,
        NormPerturbMode::MultiplyBy(k) => {
            if !k.is_finite() {
                return Err(RegionError::BadFactor(k));
            }
            vec[dim] *= k;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::ImportanceMap;

    fn cfg() -> ModelConfig {
        ModelConfig::tiny(8, 2, 2, 32)
    }

    fn scored_map(config: &ModelConfig) -> ImportanceMap {
        // deterministic synthetic scores: score = flat index + 1
        let mut map = ImportanceMap::zeros(config);
        map.fill_with(|_, i| i as f64 + 1.0);
        map
    }

    #[test]
    fn ratio_zero_and_one_are_empty_and_full() {
        let config = cfg();
        let map = scored_map(&config);
        let empty = select_ratio(&map, 0.0, SelectMode::Top).unwrap();
        assert_eq!(empty.total_count(), 0);
        let full = select_ratio(&map, 1.0, SelectMode::Top).unwrap();
        for e in full.entries() {
            assert_eq!(e.count(), e.len());
        }
        assert!(select_ratio(&map, 1.1, SelectMode::Top).is_err());
    }

    #[test]
    fn ratio_selection_matches_an_independent_sort() {
        // 4x4 matrix with scores 1..16, ratio 0.25 top -> the 4 highest.
        let config = ModelConfig::tiny(4, 1, 2, 16);
        let map = scored_map(&config);
        let mask = select_ratio(&map, 0.25, SelectMode::Top).unwrap();
        let q = mask.entry(MatrixId::layered(MatrixKind::AttnQ, 0)).unwrap();
        assert_eq!(q.count(), 4);
        // scores increase with the flat index, so the top quarter is the
        // last four coordinates
        assert_eq!(q.coords(), vec![(3, 0), (3, 1), (3, 2), (3, 3)]);
        let bottom = select_ratio(&map, 0.25, SelectMode::Bottom).unwrap();
        let qb = bottom.entry(MatrixId::layered(MatrixKind::AttnQ, 0)).unwrap();
        assert_eq!(qb.coords(), vec![(0, 0), (0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn top_and_bottom_disjoint_under_distinct_scores() {
        let config = cfg();
        let map = scored_map(&config);
        let top = select_ratio(&map, 0.2, SelectMode::Top).unwrap();
        let bottom = select_ratio(&map, 0.2, SelectMode::Bottom).unwrap();
        assert_eq!(top.intersection_count(&bottom).unwrap(), 0);
    }

    #[test]
    fn random_selection_counts_and_determinism() {
        let config = cfg();
        let shapes = region_weight_shapes(&config);
        let a = select_random(&shapes, 0.13, 99).unwrap();
        let b = select_random(&shapes, 0.13, 99).unwrap();
        assert_eq!(a, b);
        for e in a.entries() {
            assert_eq!(e.count(), (0.13 * e.len() as f64).floor() as usize);
            // recount through the coordinate list
            assert_eq!(e.coords().len(), e.count());
        }
        assert_ne!(a, select_random(&shapes, 0.13, 100).unwrap());
        assert_eq!(select_random(&shapes, 0.0, 1).unwrap().total_count(), 0);
    }

    #[test]
    fn dedup_subtracts_the_union() {
        let config = cfg();
        let mut target = RegionMask::empty_weights(&config);
        let mut other1 = RegionMask::empty_weights(&config);
        let mut other2 = RegionMask::empty_weights(&config);
        let q = MatrixId::layered(MatrixKind::AttnQ, 0);
        let mut put = |m: &mut RegionMask, coords: &[(usize, usize)]| {
            for &(r, c) in coords {
                m.insert(ParamCoord { matrix: q, row: r, col: c }).unwrap();
            }
        };
        put(&mut target, &[(0, 0), (1, 1), (2, 2), (3, 3), (4, 4)]);
        put(&mut other1, &[(1, 1), (2, 2)]);
        put(&mut other2, &[(2, 2), (4, 4), (5, 5)]);
        let result = dedup(&target, &[&other1, &other2]).unwrap();
        let e = result.entry(q).unwrap();
        assert_eq!(e.coords(), vec![(0, 0), (3, 3)]);
        // disjoint from every input in `others`
        assert_eq!(result.intersection_count(&other1).unwrap(), 0);
        assert_eq!(result.intersection_count(&other2).unwrap(), 0);
        // identity when others is empty
        let same = dedup(&target, &[]).unwrap();
        assert_eq!(same.entries(), target.entries());
        // annihilation when others cover the target
        let all = dedup(&target, &[&target]).unwrap();
        assert_eq!(all.total_count(), 0);
    }

    #[test]
    fn inclusion_exclusion_holds() {
        let config = cfg();
        let shapes = region_weight_shapes(&config);
        let a = select_random(&shapes, 0.2, 1).unwrap();
        let b = select_random(&shapes, 0.2, 2).unwrap();
        let i = a.intersection_count(&b).unwrap();
        let u = a.union_count(&b).unwrap();
        assert_eq!(u + i, a.total_count() + b.total_count());
    }

    #[test]
    fn apply_zero_zeroes_exactly_the_mask() {
        let config = cfg();
        let base = ParameterStore::init(&config).unwrap();
        let shapes = region_weight_shapes(&config);
        let mask = select_random(&shapes, 0.1, 5).unwrap();
        let mut store = base.clone();
        apply_zero(&mut store, &mask).unwrap();
        for coord in base.coords() {
            let (before, after) = (base.get(coord).unwrap(), store.get(coord).unwrap());
            if mask.contains(coord) {
                assert_eq!(after, 0.0);
            } else {
                assert!(before.to_bits() == after.to_bits(), "{coord:?} changed");
            }
        }
        // empty mask leaves the store bit-identical
        let mut untouched = base.clone();
        apply_zero(&mut untouched, &RegionMask::empty_weights(&config)).unwrap();
        assert_eq!(untouched, base);
    }

    #[test]
    fn apply_zero_rejects_embedding_and_lm_head() {
        let config = cfg();
        let mut store = ParameterStore::init(&config).unwrap();
        let mask = RegionMask::all_trainable(&config);
        match apply_zero(&mut store, &mask) {
            Err(RegionError::ExcludedMatrix(id)) => {
                assert!(matches!(id.kind, MatrixKind::Embedding | MatrixKind::LmHead));
            }
            other => panic!("expected exclusion error, got {other:?}"),
        }
    }

    #[test]
    fn remove_dims_zeroes_named_rows_and_cols_everywhere() {
        let config = cfg();
        let base = ParameterStore::init(&config).unwrap();
        let mut store = base.clone();
        let spec = DimRemovalSpec {
            removals: vec![
                (MatrixKind::FfnDown, DimAxis::Col, 5),
                (MatrixKind::AttnO, DimAxis::Row, 2),
            ],
            preset: Some(DimGroupPreset::AttnHeadsFfnDown),
            n_d: 1,
        };
        remove_dims(&mut store, &spec).unwrap();
        for coord in base.coords() {
            let expect_zero = (coord.matrix.kind == MatrixKind::FfnDown && coord.col == 5)
                || (coord.matrix.kind == MatrixKind::AttnO && coord.row == 2);
            let after = store.get(coord).unwrap();
            if expect_zero {
                assert_eq!(after, 0.0, "{coord:?} not zeroed");
            } else {
                assert_eq!(after.to_bits(), base.get(coord).unwrap().to_bits());
            }
        }
        // empty spec leaves everything alone
        let mut same = base.clone();
        remove_dims(&mut same, &DimRemovalSpec::empty()).unwrap();
        assert_eq!(same, base);
        // out of range rejected
        let bad = DimRemovalSpec {
            removals: vec![(MatrixKind::AttnQ, DimAxis::Col, config.dim)],
            preset: None,
            n_d: 1,
        };
        assert!(matches!(
            remove_dims(&mut same, &bad),
            Err(RegionError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn perturb_dim_touches_only_the_target_slices() {
        let config = cfg();
        let base = ParameterStore::init(&config).unwrap();
        let mut store = base.clone();
        perturb_dim(&mut store, 3, 77).unwrap();
        let mut changed = 0usize;
        for coord in base.coords() {
            let targeted = (coord.matrix.kind == MatrixKind::AttnO && coord.col == 3)
                || (coord.matrix.kind == MatrixKind::FfnDown && coord.row == 3);
            let same = store.get(coord).unwrap().to_bits() == base.get(coord).unwrap().to_bits();
            if !targeted {
                assert!(same, "{coord:?} changed unexpectedly");
            } else if !same {
                changed += 1;
            }
        }
        assert!(changed > 0);
        // determinism
        let mut again = base.clone();
        perturb_dim(&mut again, 3, 77).unwrap();
        assert_eq!(again, store);
        assert!(perturb_dim(&mut again, config.dim, 0).is_err());
    }

    #[test]
    fn perturb_norm_modifies_exactly_one_scalar() {
        let config = cfg();
        let base = ParameterStore::init(&config).unwrap();
        let norm = MatrixId::layered(MatrixKind::InputNorm, 1);
        let mut store = base.clone();
        perturb_norm_param(&mut store, norm, 4, NormPerturbMode::MultiplyBy(10.0)).unwrap();
        let mut diffs = 0;
        for coord in base.coords() {
            if store.get(coord).unwrap().to_bits() != base.get(coord).unwrap().to_bits() {
                diffs += 1;
                assert_eq!(coord.matrix, norm);
                assert_eq!(coord.row, 4);
            }
        }
        assert_eq!(diffs, 1);
        // multiply by 1 is the identity
        let mut same = base.clone();
        perturb_norm_param(&mut same, norm, 4, NormPerturbMode::MultiplyBy(1.0)).unwrap();
        assert_eq!(same, base);
        // reset-to-1 on a fresh store is also the identity
        let mut reset = base.clone();
        perturb_norm_param(&mut reset, norm, 4, NormPerturbMode::ResetToOne).unwrap();
        assert_eq!(reset, base);
        assert!(perturb_norm_param(
            &mut reset,
            MatrixId::layered(MatrixKind::AttnQ, 0),
            0,
            NormPerturbMode::ResetToOne
        )
        .is_err());
    }
}

//! Spatial feature grids and the cell-replacement transform.
//!
//! A feature map of shape `h × w × d` is stored as an `hw × d` matrix with
//! cells in row-major order, so cell `(row, col)` lives at row `row * w + col`.
//! An edit copies one cell's `d`-vector from a distractor grid into a query
//! grid. In general form the transform is
//!
//! ```text
//! out = (1 - a) ∘ F + a ∘ (P · F')
//! ```
//!
//! where `a` gates which query cells are replaced and `P` chooses, per query
//! cell, which distractor cells the replacement is drawn from.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for simplex and row-stochastic sums.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Cell { row, col }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    depth: usize,
    values: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, depth: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || depth == 0 {
            return Err(Error::InvalidValue(format!(
                "feature grid dimensions must be positive, got {height}x{width}x{depth}"
            )));
        }
        let expected = height * width * depth;
        if values.len() != expected {
            return Err(Error::Shape {
                dimension: "feature values",
                expected,
                actual: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite feature value at flat index {pos}"
            )));
        }
        Ok(FeatureGrid {
            height,
            width,
            depth,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize, depth: usize) -> Self {
        FeatureGrid {
            height,
            width,
            depth,
            values: vec![0.0; height * width * depth],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Number of spatial cells, `h * w`.
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, cell: usize) -> &[f64] {
        &self.values[cell * self.depth..(cell + 1) * self.depth]
    }

    pub fn cell_index(&self, cell: Cell) -> Result<usize> {
        if cell.row >= self.height {
            return Err(Error::Bounds {
                what: "grid row",
                index: cell.row,
                len: self.height,
            });
        }
        if cell.col >= self.width {
            return Err(Error::Bounds {
                what: "grid column",
                index: cell.col,
                len: self.width,
            });
        }
        Ok(cell.row * self.width + cell.col)
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new(index / self.width, index % self.width)
    }

    pub fn same_shape(&self, other: &FeatureGrid) -> Result<()> {
        for (dimension, expected, actual) in [
            ("grid height", self.height, other.height),
            ("grid width", self.width, other.width),
            ("grid depth", self.depth, other.depth),
        ] {
            if expected != actual {
                return Err(Error::Shape {
                    dimension,
                    expected,
                    actual,
                });
            }
        }
        Ok(())
    }

    pub(crate) fn from_raw(height: usize, width: usize, depth: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), height * width * depth);
        FeatureGrid {
            height,
            width,
            depth,
            values,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    Discrete,
    Relaxed,
}

/// The per-cell replacement gate `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateVector {
    weights: Vec<f64>,
    mode: GateMode,
}

impl GateVector {
    pub fn discrete(weights: Vec<f64>) -> Result<Self> {
        if let Some(pos) = weights.iter().position(|&w| w != 0.0 && w != 1.0) {
            return Err(Error::InvalidValue(format!(
                "discrete gate entry {pos} is {}, expected 0 or 1",
                weights[pos]
            )));
        }
        Ok(GateVector {
            weights,
            mode: GateMode::Discrete,
        })
    }

    pub fn relaxed(weights: Vec<f64>) -> Result<Self> {
        check_simplex(&weights, "gate")?;
        Ok(GateVector {
            weights,
            mode: GateMode::Relaxed,
        })
    }

    pub fn zeros(len: usize) -> Self {
        GateVector {
            weights: vec![0.0; len],
            mode: GateMode::Discrete,
        }
    }

    pub fn ones(len: usize) -> Self {
        GateVector {
            weights: vec![1.0; len],
            mode: GateMode::Discrete,
        }
    }

    pub fn one_hot(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::Bounds {
                what: "gate",
                index,
                len,
            });
        }
        let mut weights = vec![0.0; len];
        weights[index] = 1.0;
        Ok(GateVector {
            weights,
            mode: GateMode::Discrete,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mode(&self) -> GateMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn l1_norm(&self) -> f64 {
        self.weights.iter().map(|w| w.abs()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignmentMode {
    Permutation,
    RowStochastic,
}

/// The square alignment matrix `P`; row `i` says where query cell `i` copies from.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    size: usize,
    entries: Vec<f64>,
    mode: AlignmentMode,
}

impl AlignmentMatrix {
    pub fn identity(size: usize) -> Self {
        let mut entries = vec![0.0; size * size];
        for i in 0..size {
            entries[i * size + i] = 1.0;
        }
        AlignmentMatrix {
            size,
            entries,
            mode: AlignmentMode::Permutation,
        }
    }

    /// Builds a permutation where row `i` selects source cell `sources[i]`.
    pub fn from_sources(sources: &[usize]) -> Result<Self> {
        let size = sources.len();
        let mut used = vec![false; size];
        for &s in sources {
            if s >= size {
                return Err(Error::Bounds {
                    what: "permutation source",
                    index: s,
                    len: size,
                });
            }
            if std::mem::replace(&mut used[s], true) {
                return Err(Error::InvalidValue(format!(
                    "source cell {s} appears twice in permutation"
                )));
            }
        }
        let mut entries = vec![0.0; size * size];
        for (i, &s) in sources.iter().enumerate() {
            entries[i * size + s] = 1.0;
        }
        Ok(AlignmentMatrix {
            size,
            entries,
            mode: AlignmentMode::Permutation,
        })
    }

    pub fn permutation(size: usize, entries: Vec<f64>) -> Result<Self> {
        check_square(size, &entries)?;
        for i in 0..size {
            let row = &entries[i * size..(i + 1) * size];
            let col_ones = (0..size).filter(|&r| entries[r * size + i] == 1.0).count();
            let row_ones = row.iter().filter(|&&v| v == 1.0).count();
            let others = row.iter().any(|&v| v != 0.0 && v != 1.0);
            if row_ones != 1 || col_ones != 1 || others {
                return Err(Error::InvalidValue(format!(
                    "permutation matrix row/column {i} does not hold exactly one 1"
                )));
            }
        }
        Ok(AlignmentMatrix {
            size,
            entries,
            mode: AlignmentMode::Permutation,
        })
    }

    pub fn row_stochastic(size: usize, entries: Vec<f64>) -> Result<Self> {
        check_square(size, &entries)?;
        for i in 0..size {
            check_simplex(&entries[i * size..(i + 1) * size], "alignment row")?;
        }
        Ok(AlignmentMatrix {
            size,
            entries,
            mode: AlignmentMode::RowStochastic,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mode(&self) -> AlignmentMode {
        self.mode
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.size..(i + 1) * self.size]
    }
}

fn check_square(size: usize, entries: &[f64]) -> Result<()> {
    if entries.len() != size * size {
        return Err(Error::Shape {
            dimension: "alignment entries",
            expected: size * size,
            actual: entries.len(),
        });
    }
    Ok(())
}

fn check_simplex(weights: &[f64], what: &str) -> Result<()> {
    if let Some(pos) = weights.iter().position(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidValue(format!(
            "{what} entry {pos} is {}, expected a nonnegative finite value",
            weights[pos]
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::InvalidValue(format!(
            "{what} sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// One copied cell: query cell receives the features of the distractor cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    pub query: Cell,
    pub distractor: Cell,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EditList(Vec<Edit>);

impl EditList {
    pub fn new() -> Self {
        EditList(Vec::new())
    }

    /// Validates coordinates against an `h × w` grid and query-cell uniqueness.
    pub fn from_edits(edits: Vec<Edit>, height: usize, width: usize) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for e in &edits {
            for (cell, what) in [(e.query, "query cell"), (e.distractor, "distractor cell")] {
                if cell.row >= height {
                    return Err(Error::Bounds {
                        what,
                        index: cell.row,
                        len: height,
                    });
                }
                if cell.col >= width {
                    return Err(Error::Bounds {
                        what,
                        index: cell.col,
                        len: width,
                    });
                }
            }
            if !seen.insert(e.query) {
                return Err(Error::InvalidValue(format!(
                    "query cell ({}, {}) edited twice",
                    e.query.row, e.query.col
                )));
            }
        }
        Ok(EditList(edits))
    }

    pub fn push(&mut self, edit: Edit) {
        self.0.push(edit);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Edit> {
        self.0.iter()
    }

    pub fn as_slice(&self) -> &[Edit] {
        &self.0
    }
}

impl<'a> IntoIterator for &'a EditList {
    type Item = &'a Edit;
    type IntoIter = std::slice::Iter<'a, Edit>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

/// `(1 - a) ∘ F + a ∘ (P · F')`, with `a` broadcast across channels.
pub fn apply_edits(
    query: &FeatureGrid,
    distractor: &FeatureGrid,
    gate: &GateVector,
    alignment: &AlignmentMatrix,
) -> Result<FeatureGrid> {
    query.same_shape(distractor)?;
    let n = query.cells();
    let d = query.depth();
    if gate.len() != n {
        return Err(Error::Shape {
            dimension: "gate length",
            expected: n,
            actual: gate.len(),
        });
    }
    if alignment.size() != n {
        return Err(Error::Shape {
            dimension: "alignment size",
            expected: n,
            actual: alignment.size(),
        });
    }

    let mut out = vec![0.0; n * d];
    let mut mixed = vec![0.0; d];
    for i in 0..n {
        let a = gate.weights()[i];
        let dst = &mut out[i * d..(i + 1) * d];
        if a == 0.0 {
            dst.copy_from_slice(query.row(i));
            continue;
        }
        mixed.iter_mut().for_each(|m| *m = 0.0);
        for (j, &p) in alignment.row(i).iter().enumerate() {
            if p != 0.0 {
                for (m, &v) in mixed.iter_mut().zip(distractor.row(j)) {
                    *m += p * v;
                }
            }
        }
        for ((o, &q), &m) in dst.iter_mut().zip(query.row(i)).zip(&mixed) {
            *o = (1.0 - a) * q + a * m;
        }
    }
    Ok(FeatureGrid::from_raw(query.height, query.width, d, out))
}

/// Copies distractor cell `source` over query cell `target`.
pub fn single_edit(
    query: &FeatureGrid,
    distractor: &FeatureGrid,
    target: usize,
    source: usize,
) -> Result<FeatureGrid> {
    query.same_shape(distractor)?;
    let n = query.cells();
    for (what, index) in [("query cell", target), ("distractor cell", source)] {
        if index >= n {
            return Err(Error::Bounds {
                what,
                index,
                len: n,
            });
        }
    }
    let mut out = query.clone();
    copy_cell(&mut out, distractor, target, source);
    Ok(out)
}

/// In-place single edit; caller guarantees shapes and indices.
pub(crate) fn copy_cell(dst: &mut FeatureGrid, src: &FeatureGrid, target: usize, source: usize) {
    let d = dst.depth;
    dst.values[target * d..(target + 1) * d].copy_from_slice(src.row(source));
}

/// Lists the `(query cell, distractor cell)` pairs selected by a discrete gate
/// and permutation, ascending by query cell.
pub fn extract_edit_set(
    gate: &GateVector,
    alignment: &AlignmentMatrix,
    height: usize,
    width: usize,
) -> Result<EditList> {
    if gate.mode() != GateMode::Discrete {
        return Err(Error::Mode("gate vector is relaxed".into()));
    }
    if alignment.mode() != AlignmentMode::Permutation {
        return Err(Error::Mode("alignment matrix is row-stochastic".into()));
    }
    let n = height * width;
    if gate.len() != n {
        return Err(Error::Shape {
            dimension: "gate length",
            expected: n,
            actual: gate.len(),
        });
    }
    if alignment.size() != n {
        return Err(Error::Shape {
            dimension: "alignment size",
            expected: n,
            actual: alignment.size(),
        });
    }
    let to_cell = |i: usize| Cell::new(i / width, i % width);
    let edits = (0..n)
        .filter(|&i| gate.weights()[i] == 1.0)
        .map(|i| {
            let source = alignment
                .row(i)
                .iter()
                .position(|&p| p == 1.0)
                .expect("validated permutation row");
            Edit {
                query: to_cell(i),
                distractor: to_cell(source),
            }
        })
        .collect();
    Ok(EditList(edits))
}

//! Lattice partition of the input space.
//!
//! A lattice is an ordered list of dimensions. Categorical dimensions look up
//! their level by label; binned-continuous dimensions place a value into
//! half-open bins `[e_{k-1}, e_k)`, with the outermost bins absorbing anything
//! beyond the first or last edge. Cells are flattened row-major in dimension
//! order, and that encoding is stable across serialization.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default minimum per-cell count used by [`feasible_refinement`].
pub const DEFAULT_CELL_THRESHOLD: usize = 20;

/// Safety factor applied to the bin constraint by default.
pub const DEFAULT_BIN_SAFETY: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DimKind {
    Categorical,
    BinnedContinuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeDim {
    pub name: String,
    pub kind: DimKind,
    pub levels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
}

impl LatticeDim {
    pub fn categorical<S: Into<String>>(name: S, labels: Vec<String>) -> Result<Self> {
        let dim = LatticeDim {
            name: name.into(),
            kind: DimKind::Categorical,
            levels: labels.len(),
            edges: None,
            labels: Some(labels),
        };
        dim.validate()?;
        Ok(dim)
    }

    /// Categorical dimension with levels labelled `"0"`, `"1"`, ...
    pub fn indexed<S: Into<String>>(name: S, levels: usize) -> Result<Self> {
        Self::categorical(name, (0..levels).map(|l| l.to_string()).collect())
    }

    pub fn binned<S: Into<String>>(name: S, edges: Vec<f64>) -> Result<Self> {
        let dim = LatticeDim {
            name: name.into(),
            kind: DimKind::BinnedContinuous,
            levels: edges.len() + 1,
            edges: Some(edges),
            labels: None,
        };
        dim.validate()?;
        Ok(dim)
    }

    fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InfeasibleLattice(format!(
                "dimension `{}` has no levels",
                self.name
            )));
        }
        match self.kind {
            DimKind::Categorical => {
                let labels = self.labels.as_ref().ok_or_else(|| {
                    Error::Config(format!("categorical dimension `{}` needs labels", self.name))
                })?;
                if labels.len() != self.levels {
                    return Err(Error::Config(format!(
                        "dimension `{}` declares {} levels but lists {} labels",
                        self.name,
                        self.levels,
                        labels.len()
                    )));
                }
                let unique: HashSet<&String> = labels.iter().collect();
                if unique.len() != labels.len() {
                    return Err(Error::Config(format!(
                        "dimension `{}` has duplicate labels",
                        self.name
                    )));
                }
            }
            DimKind::BinnedContinuous => {
                let edges = self.edges.as_ref().ok_or_else(|| {
                    Error::Config(format!("binned dimension `{}` needs edges", self.name))
                })?;
                if edges.len() + 1 != self.levels {
                    return Err(Error::Config(format!(
                        "dimension `{}` declares {} levels but has {} edges",
                        self.name,
                        self.levels,
                        edges.len()
                    )));
                }
                if edges.iter().any(|e| !e.is_finite()) {
                    return Err(Error::Config(format!(
                        "dimension `{}` has non-finite edges",
                        self.name
                    )));
                }
                if edges.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config(format!(
                        "edges of dimension `{}` are not strictly increasing",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Level of a single value along this dimension.
    pub fn level_of(&self, value: &LatticeValue<'_>) -> Result<usize> {
        match (self.kind, value) {
            (_, LatticeValue::Missing) => Err(Error::MissingLatticeFeature {
                dim: self.name.clone(),
            }),
            (DimKind::BinnedContinuous, LatticeValue::Numeric(v)) => self.bin_of(*v),
            (DimKind::BinnedContinuous, LatticeValue::Label(s)) => {
                let trimmed = s.trim();
                if trimmed.is_empty() {
                    return Err(Error::MissingLatticeFeature {
                        dim: self.name.clone(),
                    });
                }
                let v: f64 = trimmed.parse().map_err(|_| Error::UnknownLevel {
                    dim: self.name.clone(),
                    label: s.to_string(),
                })?;
                self.bin_of(v)
            }
            (DimKind::Categorical, LatticeValue::Label(s)) => self.label_index(s),
            (DimKind::Categorical, LatticeValue::Numeric(v)) => {
                // Integer-valued numerics are matched against their decimal label.
                let label = if v.fract() == 0.0 && v.abs() < 1e15 {
                    format!("{}", *v as i64)
                } else {
                    format!("{v}")
                };
                self.label_index(&label)
            }
        }
    }

    fn bin_of(&self, v: f64) -> Result<usize> {
        if v.is_nan() {
            return Err(Error::MissingLatticeFeature {
                dim: self.name.clone(),
            });
        }
        let edges = self.edges.as_deref().unwrap_or(&[]);
        Ok(edges.partition_point(|&e| e <= v))
    }

    fn label_index(&self, label: &str) -> Result<usize> {
        let trimmed = label.trim();
        if trimmed.is_empty() {
            return Err(Error::MissingLatticeFeature {
                dim: self.name.clone(),
            });
        }
        self.labels
            .as_ref()
            .and_then(|ls| ls.iter().position(|l| l == trimmed))
            .ok_or_else(|| Error::UnknownLevel {
                dim: self.name.clone(),
                label: trimmed.to_string(),
            })
    }
}

/// A raw value presented to the lattice for cell assignment.
#[derive(Clone, Debug, PartialEq)]
pub enum LatticeValue<'a> {
    Numeric(f64),
    Label(&'a str),
    Missing,
}

/// Position of an observation in the lattice, one level per dimension.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellIndex(pub Vec<usize>);

impl CellIndex {
    pub fn levels(&self) -> &[usize] {
        &self.0
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Display for CellIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, k) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{k}")?;
        }
        write!(f, ")")
    }
}

#[derive(Deserialize)]
struct LatticeSpecRaw {
    #[serde(default)]
    dims: Vec<LatticeDim>,
}

/// Immutable description of the lattice partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LatticeSpecRaw")]
pub struct LatticeSpec {
    dims: Vec<LatticeDim>,
}

impl TryFrom<LatticeSpecRaw> for LatticeSpec {
    type Error = Error;

    fn try_from(raw: LatticeSpecRaw) -> Result<Self> {
        LatticeSpec::new(raw.dims)
    }
}

impl LatticeSpec {
    pub fn new(dims: Vec<LatticeDim>) -> Result<Self> {
        let mut seen = HashSet::new();
        for dim in &dims {
            dim.validate()?;
            if !seen.insert(dim.name.as_str()) {
                return Err(Error::Config(format!(
                    "duplicate lattice dimension `{}`",
                    dim.name
                )));
            }
        }
        Ok(LatticeSpec { dims })
    }

    /// Lattice with no dimensions: a single cell.
    pub fn empty() -> Self {
        LatticeSpec { dims: Vec::new() }
    }

    /// `d` categorical dimensions named `g0..g{d-1}` with `levels` levels each.
    pub fn uniform(d: usize, levels: usize) -> Result<Self> {
        let dims = (0..d)
            .map(|i| LatticeDim::indexed(format!("g{i}"), levels))
            .collect::<Result<Vec<_>>>()?;
        Self::new(dims)
    }

    pub fn dims(&self) -> &[LatticeDim] {
        &self.dims
    }

    pub fn d(&self) -> usize {
        self.dims.len()
    }

    pub fn level_counts(&self) -> Vec<usize> {
        self.dims.iter().map(|d| d.levels).collect()
    }

    pub fn cell_count(&self) -> usize {
        self.dims.iter().map(|d| d.levels).product()
    }

    /// Number of binned-continuous dimensions; categorical dimensions never count.
    pub fn continuous_dims(&self) -> usize {
        self.dims
            .iter()
            .filter(|d| d.kind == DimKind::BinnedContinuous)
            .count()
    }

    pub fn dim_index(&self, name: &str) -> Option<usize> {
        self.dims.iter().position(|d| d.name == name)
    }

    /// Assigns a cell to a row whose values are aligned with the lattice dimensions.
    pub fn assign_cell(&self, row: &[LatticeValue<'_>]) -> Result<CellIndex> {
        let levels = self
            .dims
            .iter()
            .enumerate()
            .map(|(i, dim)| {
                let value = row.get(i).unwrap_or(&LatticeValue::Missing);
                dim.level_of(value)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CellIndex(levels))
    }

    /// Checks that a cell belongs to this lattice.
    pub fn check_cell(&self, cell: &CellIndex) -> Result<()> {
        if cell.dims() != self.d() {
            return Err(Error::ModelLatticeMismatch(format!(
                "cell {cell} has {} coordinates, lattice has {} dimensions",
                cell.dims(),
                self.d()
            )));
        }
        for (dim, &k) in self.dims.iter().zip(&cell.0) {
            if k >= dim.levels {
                return Err(Error::ModelLatticeMismatch(format!(
                    "level {k} out of range for dimension `{}` with {} levels",
                    dim.name, dim.levels
                )));
            }
        }
        Ok(())
    }

    /// Row-major flat index of a cell.
    pub fn flat_index(&self, cell: &CellIndex) -> Result<usize> {
        self.check_cell(cell)?;
        Ok(flat_index(&self.level_counts(), &cell.0))
    }

    pub fn cell_from_flat(&self, mut flat: usize) -> Result<CellIndex> {
        if flat >= self.cell_count() {
            return Err(Error::ModelLatticeMismatch(format!(
                "flat index {flat} exceeds {} cells",
                self.cell_count()
            )));
        }
        let mut levels = vec![0; self.d()];
        for (i, dim) in self.dims.iter().enumerate().rev() {
            levels[i] = flat % dim.levels;
            flat /= dim.levels;
        }
        Ok(CellIndex(levels))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Row-major flattening of `coords` over dimensions with the given level counts.
pub fn flat_index(levels: &[usize], coords: &[usize]) -> usize {
    coords
        .iter()
        .zip(levels)
        .fold(0, |acc, (&k, &l)| acc * l + k)
}

#[derive(Clone, Debug, PartialEq)]
pub enum BinStrategy {
    Quantile,
    ExplicitEdges(Vec<f64>),
}

/// Result of binning a column: the dimension plus requested vs realized levels.
#[derive(Clone, Debug, PartialEq)]
pub struct BinnedDim {
    pub dim: LatticeDim,
    pub requested: usize,
    pub realized: usize,
}

/// Builds a binned-continuous dimension for `column`.
///
/// Quantile edges sit at the `k/L` empirical quantiles using midpoint
/// interpolation between adjacent order statistics. Duplicate edges (and edges
/// at or below the column minimum, which would leave the first bin empty) are
/// dropped, so heavily tied data may realize fewer levels than requested.
pub fn build_bins(
    name: &str,
    column: &[f64],
    levels: usize,
    strategy: &BinStrategy,
) -> Result<BinnedDim> {
    match strategy {
        BinStrategy::ExplicitEdges(edges) => {
            let dim = LatticeDim::binned(name, edges.clone())?;
            let realized = dim.levels;
            Ok(BinnedDim {
                dim,
                requested: realized,
                realized,
            })
        }
        BinStrategy::Quantile => {
            if levels < 2 {
                return Err(Error::Config(format!(
                    "quantile binning of `{name}` needs at least 2 bins"
                )));
            }
            let mut sorted: Vec<f64> = column.iter().copied().filter(|v| v.is_finite()).collect();
            sorted.sort_by(|a, b| a.total_cmp(b));
            let mut distinct = sorted.clone();
            distinct.dedup();
            if distinct.len() < levels {
                return Err(Error::DegenerateBinning {
                    column: name.to_string(),
                    distinct: distinct.len(),
                    requested: levels,
                });
            }
            let min = sorted[0];
            let mut edges: Vec<f64> = Vec::with_capacity(levels - 1);
            for k in 1..levels {
                let e = midpoint_quantile(&sorted, k as f64 / levels as f64);
                if e > min && edges.last().is_none_or(|&last| e > last) {
                    edges.push(e);
                }
            }
            let realized = edges.len() + 1;
            if realized < levels {
                log::warn!(
                    "column `{name}`: ties reduced quantile bins from {levels} to {realized}"
                );
            }
            Ok(BinnedDim {
                dim: LatticeDim::binned(name, edges)?,
                requested: levels,
                realized,
            })
        }
    }
}

fn midpoint_quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        0.5 * (sorted[lo] + sorted[hi])
    }
}

/// Largest bin count per continuous dimension that keeps the local
/// parameter-to-sample ratio `p L^d / N` within budget:
/// `floor(safety * (N/p)^(1/d_cont))`, at least 1.
pub fn max_bins(n: usize, p: usize, d_cont: usize, safety: f64) -> Result<usize> {
    if p == 0 || n <= p {
        return Err(Error::InfeasibleLattice(format!(
            "need N > p >= 1, got N = {n}, p = {p}"
        )));
    }
    if d_cont == 0 {
        return Err(Error::Config(
            "bin constraint needs at least one continuous dimension".into(),
        ));
    }
    if !(safety > 0.0 && safety <= 1.0) {
        return Err(Error::Config(format!(
            "safety factor {safety} must lie in (0, 1]"
        )));
    }
    let ratio = n as f64 / p as f64;
    let d = d_cont as i32;
    // L <= safety (N/p)^(1/d)  <=>  (L / safety)^d * p <= N, checked exactly
    // around the floating-point estimate so that e.g. 1000^(1/3) gives 10.
    let fits = |l: usize| (l as f64 / safety).powi(d) * p as f64 <= n as f64;
    let mut l = (safety * ratio.powf(1.0 / d_cont as f64)).floor().max(1.0) as usize;
    while l > 1 && !fits(l) {
        l -= 1;
    }
    while fits(l + 1) {
        l += 1;
    }
    Ok(l.max(1))
}

/// Whether a new dimension with `levels` levels keeps at least `threshold`
/// observations in the smallest current cell after the split.
pub fn feasible_refinement(n_min: usize, levels: usize, threshold: usize) -> bool {
    levels > 0 && n_min as f64 / levels as f64 >= threshold as f64
}

/// Local parameter-to-sample ratio `p L^d_cont / N`.
pub fn gamma_local(n: usize, p: usize, levels: usize, d_cont: usize) -> f64 {
    p as f64 * (levels as f64).powi(d_cont as i32) / n as f64
}

/// Maps each fine bin of a refined binned dimension to the coarse bin containing it.
/// Requires every coarse edge to appear among the fine edges.
pub fn parent_map(coarse: &LatticeDim, fine: &LatticeDim) -> Result<Vec<usize>> {
    let (ce, fe) = match (&coarse.edges, &fine.edges) {
        (Some(c), Some(f)) => (c, f),
        _ => {
            return Err(Error::InvalidRefinement(
                "parent maps are derived only between binned dimensions".into(),
            ))
        }
    };
    if let Some(missing) = ce.iter().find(|e| !fe.contains(e)) {
        return Err(Error::InvalidRefinement(format!(
            "coarse edge {missing} is not a fine edge of `{}`",
            fine.name
        )));
    }
    // Fine bin k covers [fe[k-1], fe[k]); its parent is the coarse bin holding its left edge.
    Ok((0..fine.levels)
        .map(|k| {
            if k == 0 {
                0
            } else {
                ce.partition_point(|&e| e <= fe[k - 1])
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_median_uses_midpoint() {
        let b = build_bins("x", &[1.0, 2.0, 3.0, 4.0], 2, &BinStrategy::Quantile).unwrap();
        assert_eq!(b.dim.edges.as_deref(), Some(&[2.5][..]));
        assert_eq!(b.dim.levels, 2);
        assert_eq!(b.realized, 2);
    }

    #[test]
    fn constant_column_is_degenerate() {
        let err = build_bins("zeros", &[0.0; 10], 2, &BinStrategy::Quantile).unwrap_err();
        match err {
            Error::DegenerateBinning { column, .. } => assert_eq!(column, "zeros"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn explicit_edges_give_levels() {
        let b = build_bins(
            "bmi",
            &[],
            0,
            &BinStrategy::ExplicitEdges(vec![18.5, 25.0, 30.0]),
        )
        .unwrap();
        assert_eq!(b.dim.levels, 4);
    }

    #[test]
    fn ties_reduce_realized_levels() {
        let col = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0];
        let b = build_bins("t", &col, 4, &BinStrategy::Quantile).unwrap();
        assert!(b.realized < 4);
        assert_eq!(b.requested, 4);
    }

    #[test]
    fn boundary_and_overflow() {
        let dim = LatticeDim::binned("x", vec![2.5]).unwrap();
        assert_eq!(dim.level_of(&LatticeValue::Numeric(2.5)).unwrap(), 1);
        assert_eq!(dim.level_of(&LatticeValue::Numeric(10.0)).unwrap(), 1);
        assert_eq!(dim.level_of(&LatticeValue::Numeric(-10.0)).unwrap(), 0);
    }

    #[test]
    fn flat_index_is_row_major() {
        let spec = LatticeSpec::new(vec![
            LatticeDim::indexed("a", 4).unwrap(),
            LatticeDim::indexed("b", 3).unwrap(),
        ])
        .unwrap();
        assert_eq!(spec.flat_index(&CellIndex(vec![2, 1])).unwrap(), 7);
        assert_eq!(spec.cell_from_flat(7).unwrap(), CellIndex(vec![2, 1]));
        assert_eq!(spec.cell_count(), 12);
    }

    #[test]
    fn categorical_lookup_errors() {
        let spec = LatticeSpec::new(vec![LatticeDim::categorical(
            "sex",
            vec!["F".into(), "M".into()],
        )
        .unwrap()])
        .unwrap();
        assert_eq!(
            spec.assign_cell(&[LatticeValue::Label("M")]).unwrap(),
            CellIndex(vec![1])
        );
        assert!(matches!(
            spec.assign_cell(&[LatticeValue::Label("X")]),
            Err(Error::UnknownLevel { .. })
        ));
        assert!(matches!(
            spec.assign_cell(&[LatticeValue::Missing]),
            Err(Error::MissingLatticeFeature { .. })
        ));
        assert!(matches!(
            spec.assign_cell(&[]),
            Err(Error::MissingLatticeFeature { .. })
        ));
    }

    #[test]
    fn max_bins_worked_values() {
        assert_eq!(max_bins(1000, 1, 3, 1.0).unwrap(), 10);
        assert_eq!(max_bins(1000, 1, 5, 1.0).unwrap(), 3);
        assert_eq!(max_bins(100, 1, 1, 0.5).unwrap(), 50);
        assert_eq!(max_bins(50_000, 50, 3, 1.0).unwrap(), 10);
        assert!(matches!(
            max_bins(10, 10, 1, 1.0),
            Err(Error::InfeasibleLattice(_))
        ));
    }

    #[test]
    fn refinement_feasibility() {
        assert!(feasible_refinement(200, 10, 20));
        assert!(!feasible_refinement(199, 10, 20));
        assert!(feasible_refinement(200, 4, 20));
    }

    #[test]
    fn invalid_dims_rejected() {
        assert!(LatticeDim::binned("x", vec![1.0, 1.0]).is_err());
        assert!(LatticeDim::binned("x", vec![2.0, 1.0]).is_err());
        assert!(LatticeSpec::new(vec![
            LatticeDim::indexed("a", 2).unwrap(),
            LatticeDim::indexed("a", 3).unwrap()
        ])
        .is_err());
    }

    #[test]
    fn toml_round_trip_is_exact() {
        let spec = LatticeSpec::new(vec![
            LatticeDim::binned("x", vec![0.1, 1.0 / 3.0, std::f64::consts::E]).unwrap(),
            LatticeDim::categorical("c", vec!["a".into(), "b".into()]).unwrap(),
        ])
        .unwrap();
        let text = spec.to_toml().unwrap();
        let back = LatticeSpec::from_toml(&text).unwrap();
        assert_eq!(back, spec);
        let e0 = back.dims()[0].edges.as_ref().unwrap();
        assert_eq!(e0[1].to_bits(), (1.0f64 / 3.0).to_bits());
    }

    #[test]
    fn parent_map_for_split_bins() {
        let coarse = LatticeDim::binned("x", vec![0.0]).unwrap();
        let fine = LatticeDim::binned("x", vec![-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(parent_map(&coarse, &fine).unwrap(), vec![0, 0, 1, 1]);
    }
}

//! Additive hierarchical expansion of cell parameters.
//!
//! The parameter of cell `κ` is the sum over all components `α` (subsets of
//! lattice dimensions with at most `K` members) of the component tensor row
//! selected by the restriction of `κ` to `α`. Tensors are dense with shape
//! `(∏_{i∈α} L_i) × p`, stored row-major.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{flat_index, CellIndex, LatticeSpec};

/// A subset of lattice dimensions, kept sorted.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ComponentId {
    pub dims: Vec<usize>,
}

impl ComponentId {
    pub fn new(mut dims: Vec<usize>) -> Self {
        dims.sort_unstable();
        dims.dedup();
        ComponentId { dims }
    }

    pub fn global() -> Self {
        ComponentId { dims: Vec::new() }
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn is_global(&self) -> bool {
        self.dims.is_empty()
    }

    /// Human-readable name such as `()` or `(age,sex)`.
    pub fn label(&self, names: Option<&[String]>) -> String {
        let parts: Vec<String> = self
            .dims
            .iter()
            .map(|&i| match names.and_then(|n| n.get(i)) {
                Some(name) => name.clone(),
                None => i.to_string(),
            })
            .collect();
        format!("({})", parts.join(","))
    }
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Number of components `C_K = Σ_{k≤K} binom(d, k)`.
pub fn component_count(d: usize, order: usize) -> usize {
    (0..=order.min(d)).map(|k| binomial(d, k)).sum()
}

/// All subsets of `{0..d-1}` with at most `order` members, ordered by size and
/// then lexicographically.
pub fn enumerate_components(d: usize, order: usize) -> Result<Vec<ComponentId>> {
    if order > d {
        return Err(Error::InvalidTruncation { order, d });
    }
    let mut out = Vec::with_capacity(component_count(d, order));
    for k in 0..=order {
        let mut combo: Vec<usize> = (0..k).collect();
        loop {
            out.push(ComponentId { dims: combo.clone() });
            // Advance to the next k-combination in lexicographic order.
            let mut i = k;
            while i > 0 && combo[i - 1] == d - k + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            combo[i - 1] += 1;
            for j in i..k {
                combo[j] = combo[j - 1] + 1;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentTensor {
    pub id: ComponentId,
    /// Level counts of the component's dimensions, in lattice order.
    pub shape: Vec<usize>,
    /// Row-major `(∏ shape) × p` values.
    pub values: Vec<f64>,
}

impl ComponentTensor {
    pub fn rows(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn row(&self, r: usize, p: usize) -> &[f64] {
        &self.values[r * p..(r + 1) * p]
    }

    pub fn row_mut(&mut self, r: usize, p: usize) -> &mut [f64] {
        &mut self.values[r * p..(r + 1) * p]
    }
}

/// Cell parameters expressed as a truncated sum of interaction components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecomposedParameter {
    pub levels: Vec<usize>,
    pub p: usize,
    pub order: usize,
    pub components: Vec<ComponentTensor>,
}

impl DecomposedParameter {
    pub fn zeros(levels: &[usize], p: usize, order: usize) -> Result<Self> {
        let ids = enumerate_components(levels.len(), order)?;
        let components = ids
            .into_iter()
            .map(|id| {
                let shape: Vec<usize> = id.dims.iter().map(|&i| levels[i]).collect();
                let rows: usize = shape.iter().product();
                ComponentTensor {
                    id,
                    shape,
                    values: vec![0.0; rows * p],
                }
            })
            .collect();
        Ok(DecomposedParameter {
            levels: levels.to_vec(),
            p,
            order,
            components,
        })
    }

    pub fn for_lattice(lattice: &LatticeSpec, p: usize, order: usize) -> Result<Self> {
        Self::zeros(&lattice.level_counts(), p, order)
    }

    pub fn d(&self) -> usize {
        self.levels.len()
    }

    pub fn n_params(&self) -> usize {
        self.components.iter().map(|c| c.values.len()).sum()
    }

    pub fn component_index(&self, id: &ComponentId) -> Option<usize> {
        self.components.iter().position(|c| &c.id == id)
    }

    /// Row of component `c` selected by the cell's restriction to its dimensions.
    pub fn combo_index(&self, c: usize, cell: &[usize]) -> usize {
        let comp = &self.components[c];
        comp.id
            .dims
            .iter()
            .zip(&comp.shape)
            .fold(0, |acc, (&i, &l)| acc * l + cell[i])
    }

    pub fn check_cell(&self, cell: &CellIndex) -> Result<()> {
        if cell.dims() != self.d() {
            return Err(Error::ModelLatticeMismatch(format!(
                "cell {cell} has {} coordinates, parameter expects {}",
                cell.dims(),
                self.d()
            )));
        }
        for (i, (&k, &l)) in cell.0.iter().zip(&self.levels).enumerate() {
            if k >= l {
                return Err(Error::ModelLatticeMismatch(format!(
                    "level {k} out of range for dimension {i} with {l} levels"
                )));
            }
        }
        Ok(())
    }

    /// `θ^κ = Σ_α θ^(α)[κ|α]`.
    pub fn materialize_cell_params(&self, cell: &CellIndex) -> Result<Vec<f64>> {
        self.check_cell(cell)?;
        let mut out = vec![0.0; self.p];
        self.add_cell_params(&cell.0, &mut out);
        Ok(out)
    }

    fn add_cell_params(&self, cell: &[usize], out: &mut [f64]) {
        for (c, comp) in self.components.iter().enumerate() {
            let r = self.combo_index(c, cell);
            for (o, v) in out.iter_mut().zip(comp.row(r, self.p)) {
                *o += v;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.components
            .iter()
            .all(|c| c.values.iter().all(|v| v.is_finite()))
    }

    /// Flat copy of all parameters in component order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.components
            .iter()
            .flat_map(|c| c.values.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionError {
                expected: self.n_params(),
                found: flat.len(),
            });
        }
        let mut offset = 0;
        for comp in &mut self.components {
            let n = comp.values.len();
            comp.values.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Per-dimension parent maps from a finer lattice to a coarser one.
/// `None` keeps the dimension unchanged.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Refinement {
    pub parents: Vec<Option<Vec<usize>>>,
}

impl Refinement {
    pub fn identity(d: usize) -> Self {
        Refinement {
            parents: vec![None; d],
        }
    }
}

/// Initializes a refined and/or higher-order parameter from a coarse fit.
/// Fine levels inherit their parent's values; components above the coarse
/// order start at zero, so the cell sums are unchanged.
pub fn warm_start(
    coarse: &DecomposedParameter,
    refinement: &Refinement,
    new_order: usize,
) -> Result<DecomposedParameter> {
    let d = coarse.d();
    if refinement.parents.len() != d {
        return Err(Error::InvalidRefinement(format!(
            "refinement covers {} dimensions, parameter has {d}",
            refinement.parents.len()
        )));
    }
    if new_order < coarse.order {
        return Err(Error::InvalidRefinement(format!(
            "new order {new_order} is below the coarse order {}",
            coarse.order
        )));
    }
    let mut fine_levels = coarse.levels.clone();
    for (i, map) in refinement.parents.iter().enumerate() {
        if let Some(map) = map {
            let cl = coarse.levels[i];
            if map.is_empty() {
                return Err(Error::InvalidRefinement(format!(
                    "empty parent map for dimension {i}"
                )));
            }
            if let Some(&bad) = map.iter().find(|&&k| k >= cl) {
                return Err(Error::InvalidRefinement(format!(
                    "dimension {i}: parent level {bad} out of range for {cl} coarse levels"
                )));
            }
            let mut hit = vec![false; cl];
            for &k in map {
                hit[k] = true;
            }
            if let Some(missing) = hit.iter().position(|h| !h) {
                return Err(Error::InvalidRefinement(format!(
                    "dimension {i}: coarse level {missing} has no fine children"
                )));
            }
            fine_levels[i] = map.len();
        }
    }
    let mut fine = DecomposedParameter::zeros(&fine_levels, coarse.p, new_order)?;
    let p = coarse.p;
    for comp in &mut fine.components {
        let Some(src) = coarse.components.iter().find(|c| c.id == comp.id) else {
            continue;
        };
        let mut coords = vec![0usize; comp.shape.len()];
        for r in 0..comp.rows() {
            let parent: Vec<usize> = comp
                .id
                .dims
                .iter()
                .zip(&coords)
                .map(|(&i, &k)| match &refinement.parents[i] {
                    Some(map) => map[k],
                    None => k,
                })
                .collect();
            let pr = flat_index(&src.shape, &parent);
            comp.row_mut(r, p).copy_from_slice(src.row(pr, p));
            increment(&mut coords, &comp.shape);
        }
    }
    Ok(fine)
}

fn increment(coords: &mut [usize], shape: &[usize]) {
    for i in (0..coords.len()).rev() {
        coords[i] += 1;
        if coords[i] < shape[i] {
            return;
        }
        coords[i] = 0;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentStats {
    pub id: ComponentId,
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
}

/// Row counts per level combination of a component.
pub fn component_stats(
    cells: &[CellIndex],
    component: &ComponentId,
    lattice: &LatticeSpec,
) -> Result<ComponentStats> {
    if cells.is_empty() {
        return Err(Error::EmptyData);
    }
    let levels = lattice.level_counts();
    if let Some(&bad) = component.dims.iter().find(|&&i| i >= levels.len()) {
        return Err(Error::ModelLatticeMismatch(format!(
            "component refers to dimension {bad} of a {}-dimensional lattice",
            levels.len()
        )));
    }
    let shape: Vec<usize> = component.dims.iter().map(|&i| levels[i]).collect();
    let mut counts = vec![0usize; shape.iter().product()];
    for cell in cells {
        lattice.check_cell(cell)?;
        let coords: Vec<usize> = component.dims.iter().map(|&i| cell.0[i]).collect();
        counts[flat_index(&shape, &coords)] += 1;
    }
    let n = cells.len() as f64;
    let fractions = counts.iter().map(|&c| c as f64 / n).collect();
    Ok(ComponentStats {
        id: component.clone(),
        counts,
        fractions,
    })
}

/// Distinct populated cells of a dataset and, for each, the tensor row it
/// selects in every component. Lets a fit work per populated cell rather than
/// per observation when materializing or scattering parameters.
#[derive(Clone, Debug)]
pub struct PopulatedCells {
    pub cells: Vec<CellIndex>,
    /// Slot of each observation.
    pub slot_of_row: Vec<usize>,
    pub counts: Vec<usize>,
    /// `rows[slot][component]`.
    pub rows: Vec<Vec<usize>>,
}

impl PopulatedCells {
    pub fn new(param: &DecomposedParameter, cells: &[CellIndex]) -> Result<Self> {
        let mut slots: HashMap<&CellIndex, usize> = HashMap::new();
        let mut unique = Vec::new();
        let mut slot_of_row = Vec::with_capacity(cells.len());
        let mut counts = Vec::new();
        for cell in cells {
            let next = unique.len();
            let slot = *slots.entry(cell).or_insert_with(|| {
                unique.push(cell.clone());
                next
            });
            if slot == counts.len() {
                param.check_cell(cell)?;
                counts.push(0);
            }
            counts[slot] += 1;
            slot_of_row.push(slot);
        }
        let rows = unique
            .iter()
            .map(|cell| {
                (0..param.components.len())
                    .map(|c| param.combo_index(c, &cell.0))
                    .collect()
            })
            .collect();
        Ok(PopulatedCells {
            cells: unique,
            slot_of_row,
            counts,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Cell parameters for every populated slot, row-major `slots × p`.
    pub fn materialize(&self, param: &DecomposedParameter) -> Vec<f64> {
        let p = param.p;
        let mut out = vec![0.0; self.len() * p];
        for (slot, rows) in self.rows.iter().enumerate() {
            let dst = &mut out[slot * p..(slot + 1) * p];
            for (comp, &r) in param.components.iter().zip(rows) {
                for (o, v) in dst.iter_mut().zip(comp.row(r, p)) {
                    *o += v;
                }
            }
        }
        out
    }

    /// Adds per-slot gradients (row-major `slots × p`) into every component row
    /// that contributes to the slot.
    pub fn scatter(&self, slot_grad: &[f64], grad: &mut DecomposedParameter) {
        let p = grad.p;
        for (slot, rows) in self.rows.iter().enumerate() {
            let src = &slot_grad[slot * p..(slot + 1) * p];
            for (comp, &r) in grad.components.iter_mut().zip(rows) {
                for (g, s) in comp.row_mut(r, p).iter_mut().zip(src) {
                    *g += s;
                }
            }
        }
    }
}

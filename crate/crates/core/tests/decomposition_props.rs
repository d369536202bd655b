use latticeglm::decomposition::{
    binomial, component_count, enumerate_components, warm_start, DecomposedParameter, Refinement,
};
use latticeglm::lattice::CellIndex;
use proptest::prelude::*;

/// Sum over every dimension subset of size at most `order`, indexing each
/// tensor row by hand.
fn brute_force(param: &DecomposedParameter, cell: &[usize]) -> Vec<f64> {
    let d = cell.len();
    let mut out = vec![0.0; param.p];
    for mask in 0u32..(1 << d) {
        if mask.count_ones() as usize > param.order {
            continue;
        }
        let dims: Vec<usize> = (0..d).filter(|i| mask >> i & 1 == 1).collect();
        let comp = param.components.iter().find(|c| c.id.dims == dims).unwrap();
        let row = dims.iter().fold(0, |acc, &i| acc * param.levels[i] + cell[i]);
        for (o, v) in out.iter_mut().zip(comp.row(row, param.p)) {
            *o += v;
        }
    }
    out
}

fn all_cells(levels: &[usize]) -> Vec<Vec<usize>> {
    let mut cells = vec![vec![]];
    for &l in levels {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                (0..l).map(move |k| {
                    let mut c = c.clone();
                    c.push(k);
                    c
                })
            })
            .collect();
    }
    cells
}

fn instance() -> impl Strategy<Value = (DecomposedParameter, Vec<f64>)> {
    (1usize..=3, 1usize..=3)
        .prop_flat_map(|(d, p)| (prop::collection::vec(1usize..=4, d), Just(p), 0..=d))
        .prop_flat_map(|(levels, p, order)| {
            let param = DecomposedParameter::zeros(&levels, p, order).unwrap();
            let n = param.n_params();
            (Just(param), prop::collection::vec(-5.0f64..5.0, n))
        })
}

proptest! {
    #[test]
    fn materialize_matches_subset_sum((mut param, flat) in instance()) {
        param.set_flat(&flat).unwrap();
        for cell in all_cells(&param.levels.clone()) {
            let got = param.materialize_cell_params(&CellIndex(cell.clone())).unwrap();
            let want = brute_force(&param, &cell);
            for (g, w) in got.iter().zip(&want) {
                prop_assert!((g - w).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn flat_round_trip((mut param, flat) in instance()) {
        param.set_flat(&flat).unwrap();
        prop_assert_eq!(param.to_flat(), flat);
    }

    #[test]
    fn raising_the_order_keeps_cell_values((mut param, flat) in instance()) {
        param.set_flat(&flat).unwrap();
        let d = param.d();
        let up = warm_start(&param, &Refinement::identity(d), d).unwrap();
        prop_assert_eq!(up.order, d);
        for cell in all_cells(&param.levels.clone()) {
            let c = CellIndex(cell);
            prop_assert_eq!(
                param.materialize_cell_params(&c).unwrap(),
                up.materialize_cell_params(&c).unwrap()
            );
        }
    }

    #[test]
    fn refinement_copies_parent_cells(
        (mut param, flat) in instance(),
        split in 1usize..=3,
    ) {
        param.set_flat(&flat).unwrap();
        // Every coarse level of dimension 0 splits into `split` fine levels.
        let coarse0 = param.levels[0];
        let map: Vec<usize> = (0..coarse0 * split).map(|f| f / split).collect();
        let mut parents = vec![None; param.d()];
        parents[0] = Some(map.clone());
        let fine = warm_start(&param, &Refinement { parents }, param.order).unwrap();
        prop_assert_eq!(fine.levels[0], coarse0 * split);
        for cell in all_cells(&fine.levels.clone()) {
            let mut parent = cell.clone();
            parent[0] = map[cell[0]];
            prop_assert_eq!(
                fine.materialize_cell_params(&CellIndex(cell)).unwrap(),
                param.materialize_cell_params(&CellIndex(parent)).unwrap()
            );
        }
    }

    #[test]
    fn component_enumeration(d in 0usize..=6, k in 0usize..=6) {
        prop_assume!(k <= d);
        let ids = enumerate_components(d, k).unwrap();
        prop_assert_eq!(ids.len(), component_count(d, k));
        prop_assert_eq!(ids.len(), (0..=k).map(|j| binomial(d, j)).sum::<usize>());
        for w in ids.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            prop_assert!((a.order(), &a.dims) < (b.order(), &b.dims));
        }
    }
}

#[test]
fn non_surjective_refinement_rejected() {
    let param = DecomposedParameter::zeros(&[3, 2], 1, 1).unwrap();
    let refinement = Refinement {
        parents: vec![Some(vec![0, 0, 2, 2]), None],
    };
    assert!(warm_start(&param, &refinement, 1).is_err());
}

#[test]
fn order_above_d_rejected() {
    assert!(DecomposedParameter::zeros(&[2, 2], 1, 3).is_err());
}

use proptest::prelude::*;

use varc::data::Grid;
use varc::geometry::{
    apply_color_perm, apply_dihedral, decode_prediction, place_input, place_target, sample_view, ColorPerm, Dihedral,
    ProbField, ViewSampling, ViewTransform, BD, BG,
};

fn grid_strategy(max_side: usize) -> impl Strategy<Value = Grid> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(r, c)| {
        proptest::collection::vec(0u8..10, r * c).prop_map(move |cells| Grid::new(r, c, cells).unwrap())
    })
}

fn dihedral_strategy() -> impl Strategy<Value = Dihedral> {
    proptest::sample::select(Dihedral::ALL.to_vec())
}

fn perm_strategy() -> impl Strategy<Value = ColorPerm> {
    Just((0u8..10).collect::<Vec<u8>>()).prop_shuffle().prop_map(|v| ColorPerm::new(v.try_into().unwrap()).unwrap())
}

/// Cell `(r, c)` of the transformed grid, written out per element.
fn oracle_dihedral(g: &Grid, d: Dihedral) -> Grid {
    let (h, w) = g.shape();
    let (oh, ow) = match d {
        Dihedral::Rot90 | Dihedral::Rot270 | Dihedral::Transpose | Dihedral::AntiTranspose => (w, h),
        _ => (h, w),
    };
    let mut cells = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            let (sr, sc) = match d {
                Dihedral::Identity => (r, c),
                Dihedral::FlipH => (r, w - 1 - c),
                Dihedral::FlipV => (h - 1 - r, c),
                Dihedral::Rot180 => (h - 1 - r, w - 1 - c),
                // Clockwise quarter turn.
                Dihedral::Rot90 => (h - 1 - c, r),
                Dihedral::Rot270 => (c, w - 1 - r),
                Dihedral::Transpose => (c, r),
                Dihedral::AntiTranspose => (h - 1 - c, w - 1 - r),
            };
            cells.push(g.get(sr, sc));
        }
    }
    Grid::new(oh, ow, cells).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn dihedral_matches_coordinate_oracle(g in grid_strategy(7), d in dihedral_strategy()) {
        prop_assert_eq!(apply_dihedral(&g, d), oracle_dihedral(&g, d));
        prop_assert_eq!(apply_dihedral(&g, d).shape(), d.transformed_shape(g.shape()));
    }

    #[test]
    fn dihedral_inverse_and_composition(g in grid_strategy(6), a in dihedral_strategy(), b in dihedral_strategy()) {
        prop_assert_eq!(apply_dihedral(&apply_dihedral(&g, a), a.inverse()), g.clone());
        prop_assert_eq!(apply_dihedral(&apply_dihedral(&g, a), b), apply_dihedral(&g, a.then(b)));
    }

    #[test]
    fn color_perm_inverse_and_composition(g in grid_strategy(6), p in perm_strategy(), q in perm_strategy()) {
        prop_assert_eq!(apply_color_perm(&apply_color_perm(&g, &p), &p.inverse()), g.clone());
        prop_assert_eq!(apply_color_perm(&apply_color_perm(&g, &p), &q), apply_color_perm(&g, &p.then(&q)));
        for c in 0..10u8 {
            prop_assert_eq!(p.inverse().map(p.map(c)), c);
        }
    }

    #[test]
    fn view_transform_round_trip(g in grid_strategy(6), d in dihedral_strategy(), p in perm_strategy()) {
        let v = ViewTransform::identity().with_symmetry(d, p);
        prop_assert_eq!(v.untransform_grid(&v.transform_grid(&g)), g);
    }

    #[test]
    fn placed_target_decodes_to_original(
        g in grid_strategy(10),
        d in proptest::sample::select(Dihedral::AUGMENTATION.to_vec()),
        p in perm_strategy(),
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let opts = ViewSampling { canvas_size: 40, max_scale: 3, ..ViewSampling::default() };
        let shape = d.transformed_shape(g.shape());
        let v = sample_view(&mut rng, shape, Some(shape), &opts).unwrap().with_symmetry(d, p);
        let target = place_target(&g, &v, 40).unwrap();
        let decoded = decode_prediction(&ProbField::one_hot(&target), &v).unwrap();
        prop_assert_eq!(decoded, g);
    }

    #[test]
    fn placed_input_has_only_grid_and_background(g in grid_strategy(8), seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let opts = ViewSampling { canvas_size: 30, max_scale: 3, ..ViewSampling::default() };
        let v = sample_view(&mut rng, g.shape(), None, &opts).unwrap();
        let c = place_input(&g, &v, 30).unwrap();
        let (r0, c0) = v.offset;
        let s = v.scale;
        for r in 0..30 {
            for col in 0..30 {
                let inside = r >= r0 && col >= c0 && r < r0 + g.rows() * s && col < c0 + g.cols() * s;
                let want = if inside { g.get((r - r0) / s, (col - c0) / s) } else { BG };
                prop_assert_eq!(c.get(r, col), want);
            }
        }
        prop_assert!(!c.cells().contains(&BD));
    }
}

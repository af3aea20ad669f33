//! Randomized invariants of small building blocks.

use dimlab_core::data::Transform;
use dimlab_core::eval::{mmd, mmd_biased};
use dimlab_core::model::PsiIndex;
use ndarray::Array2;
use proptest::prelude::*;

fn cloud(n: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-3.0f64..3.0, 2 * n).prop_map(move |v| Array2::from_shape_vec((n, 2), v).unwrap())
}

proptest! {
    #[test]
    fn gather_then_scatter_keeps_only_the_selected_entries(
        ranges in prop::collection::vec((0usize..40, 0usize..10), 0..6),
        full in prop::collection::vec(-1.0f64..1.0, 50),
    ) {
        let psi = PsiIndex::from_ranges(ranges.iter().map(|&(s, l)| [s, s + l]).collect());
        let back = psi.scatter(&psi.gather(&full), full.len());
        for (i, (b, f)) in back.iter().zip(&full).enumerate() {
            prop_assert_eq!(*b, if psi.contains(i) { *f } else { 0.0 });
        }
        prop_assert_eq!(psi.iter().count(), psi.len());
    }

    #[test]
    fn mmd_estimators_are_symmetric(a in cloud(12), b in cloud(9), bw in 0.1f64..3.0) {
        let ab = mmd(a.view(), b.view(), bw).unwrap();
        let ba = mmd(b.view(), a.view(), bw).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        let biased = mmd_biased(a.view(), b.view(), bw).unwrap();
        prop_assert!(biased >= 0.0);
        prop_assert!((biased - mmd_biased(b.view(), a.view(), bw).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn transforms_scale_distances(
        rotation in -3.2f64..3.2,
        scale in 0.05f64..4.0,
        p in prop::array::uniform2(-5.0f64..5.0),
        q in prop::array::uniform2(-5.0f64..5.0),
    ) {
        let t = Transform { rotation, scale, offset: [0.7, -1.1] };
        let (tp, tq) = (t.apply(p), t.apply(q));
        let d = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).hypot(a[1] - b[1]);
        prop_assert!((d(tp, tq) - scale * d(p, q)).abs() < 1e-9);
    }
}

use std::collections::BTreeSet;

use proptest::prelude::*;
use uspilot_core::eval::{accuracy, edge_f1, vertex_f1, Sample};
use uspilot_core::graph::{DirectedPlan, PlanStep};

fn ids() -> impl Strategy<Value = BTreeSet<String>> {
    proptest::collection::btree_set((0u8..8).prop_map(|i| format!("t{i}")), 0..6)
}

fn edges() -> impl Strategy<Value = BTreeSet<(String, String)>> {
    proptest::collection::btree_set(((0u8..4), (0u8..4)).prop_map(|(a, b)| (format!("t{a}"), format!("t{b}"))), 0..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn precision_and_recall_swap(a in ids(), b in ids()) {
        let ab = vertex_f1(&a, &b);
        let ba = vertex_f1(&b, &a);
        prop_assert_eq!(ab.precision, ba.recall);
        prop_assert_eq!(ab.recall, ba.precision);
    }

    #[test]
    fn f1_bounds_and_zero_iff_disjoint(a in ids(), b in ids()) {
        let m = vertex_f1(&a, &b);
        prop_assert!((0.0..=1.0).contains(&m.f1));
        if m.precision + m.recall > 0.0 {
            let bound = 2.0 * m.precision.min(m.recall) / (m.precision + m.recall);
            prop_assert!(m.f1 <= bound.min(1.0) + 1e-12);
        }
        if !a.is_empty() && !b.is_empty() {
            prop_assert_eq!(m.f1 == 0.0, a.is_disjoint(&b));
        }
    }

    #[test]
    fn exact_match_implies_perfect_f1(pv in ids(), pe in edges(), same in any::<bool>(), gv in ids(), ge in edges()) {
        let (gv, ge) = if same { (pv.clone(), pe.clone()) } else { (gv, ge) };
        let plan = DirectedPlan::new(pv.iter().map(|v| PlanStep::new(v.clone())).collect(), pe.iter().cloned().collect());
        let gold = Sample::new("s", "x", gv.iter().cloned(), ge.iter().cloned());
        if accuracy(&plan, &gold) == 1 {
            prop_assert_eq!(vertex_f1(&pv, &gv).f1, 1.0);
            prop_assert_eq!(edge_f1(&pe, &ge).f1, 1.0);
        }
        if same {
            prop_assert_eq!(accuracy(&plan, &gold), 1);
        }
    }
}

#[test]
fn worked_examples() {
    let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    let m = vertex_f1(&set(&["A", "B"]), &set(&["B", "C"]));
    assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
    let m = vertex_f1(&set(&[]), &set(&["A"]));
    assert_eq!(m.f1, 0.0);
}

//! Property tests over the deterministic building blocks.

use proptest::prelude::*;
use viewplan::autodiff::Tensor;
use viewplan::completion::{interp_matrix, uniform_mask};
use viewplan::container;
use viewplan::geometry::{backproject_adjoint, forward_project, FanBeamGeometry};
use viewplan::metrics::wilcoxon_signed_rank;
use viewplan::phantom::{decode_dataset, encode_dataset, gen_task, Family, TaskSpec};
use viewplan::sampler::{gumbel_topk_sample, Strategy};

fn mask_from(bits: &[bool]) -> Vec<bool> {
    bits.to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(64) })]

    #[test]
    fn container_round_trips(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>(), name in "[a-z/]{1,12}") {
        let data: Vec<f64> = (0..rows * cols).map(|i| ((seed ^ i as u64) % 1000) as f64 * 0.37 - 100.0).collect();
        let t = Tensor::matrix(rows, cols, data).unwrap();
        let entries = vec![(name.clone(), t.clone()), ("scalar".to_string(), Tensor::scalar(-0.0))];
        let back = container::decode(&container::encode(&entries)).unwrap();
        prop_assert_eq!(back, entries);
    }

    #[test]
    fn truncated_containers_fail_cleanly(cut in 0usize..64) {
        let entries = vec![("w".to_string(), Tensor::matrix(2, 3, vec![1.0; 6]).unwrap())];
        let buf = container::encode(&entries);
        let cut = cut.min(buf.len() - 1);
        prop_assert!(container::decode(&buf[..cut]).is_err());
    }

    #[test]
    fn interpolation_rows_are_convex_and_keep_measured_rows(bits in prop::collection::vec(any::<bool>(), 3..24)) {
        let mut mask = mask_from(&bits);
        mask[0] = true;
        let last = mask.len() - 1;
        mask[last] = true;
        let l = interp_matrix(&mask).unwrap();
        for (j, &m) in mask.iter().enumerate() {
            let row = l.row(j);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            for (k, &w) in row.iter().enumerate() {
                if !mask[k] {
                    prop_assert_eq!(w, 0.0);
                }
            }
            if m {
                prop_assert_eq!(row[j], 1.0);
            }
        }
    }

    #[test]
    fn uniform_masks_have_the_requested_count(v in 2usize..200, frac in 0.0f64..1.0) {
        let vs = 1 + ((v - 1) as f64 * frac) as usize;
        prop_assert_eq!(uniform_mask(v, vs).iter().filter(|&&m| m).count(), vs);
    }

    #[test]
    fn strategies_round_trip_through_text(bits in prop::collection::vec(any::<bool>(), 2..40)) {
        let v = bits.len();
        let geom = FanBeamGeometry::new(v, 8, 8).unwrap();
        let mut idx: Vec<usize> = bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
        if idx.len() < 2 {
            idx = vec![0, v - 1];
        }
        let s = Strategy::from_indices("t", idx.clone(), &geom).unwrap();
        let back = Strategy::parse(&s.to_text()).unwrap();
        prop_assert_eq!(back.indices.clone(), idx);
        prop_assert_eq!(back, s);
    }

    #[test]
    fn gumbel_top_k_picks_distinct_views(v in 2usize..16, k in 1usize..16, g in prop::collection::vec(-3.0f64..3.0, 16)) {
        let k = k.min(v);
        let p = vec![1.0 / v as f64; v];
        let d = gumbel_topk_sample(&p, k, 0.5, &g[..v]).unwrap();
        let sel = d.selected();
        prop_assert_eq!(sel.len(), k);
        prop_assert!(sel.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(d.hard.iter().filter(|&&h| h).count(), k);
        for r in 0..k {
            prop_assert!((d.soft.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wilcoxon_p_is_a_probability_and_symmetric(x in prop::collection::vec(-5.0f64..5.0, 6..30), shift in 0.05f64..1.0) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + shift + 0.01 * i as f64).collect();
        let a = wilcoxon_signed_rank(&x, &y).unwrap();
        let b = wilcoxon_signed_rank(&y, &x).unwrap();
        prop_assert!((0.0..=1.0).contains(&a.p_value));
        prop_assert!((a.p_value - b.p_value).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(8) })]

    #[test]
    fn projector_and_backprojector_are_adjoint(seed in any::<u64>()) {
        let geom = FanBeamGeometry::new(6, 8, 8).unwrap();
        let x = Tensor::new(vec![8, 8], (0..64).map(|i| ((seed >> (i % 60)) & 7) as f64 * 0.1).collect()).unwrap();
        let y = Tensor::new(vec![6, geom.detectors], (0..6 * geom.detectors).map(|i| ((i as u64 * 31 + seed) % 11) as f64 * 0.05).collect()).unwrap();
        let lhs = forward_project(&x, &geom).unwrap().dot(&y);
        let rhs = x.dot(&backproject_adjoint(&y, &geom).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn corrupt_datasets_are_rejected(flip in 0usize..4096) {
        let geom = FanBeamGeometry::new(6, 8, 8).unwrap();
        let ds = gen_task(&TaskSpec::new("t", Family::CenterBlob, 1, 1, 3), &geom).unwrap();
        let buf = encode_dataset(&ds);
        let cut = flip % buf.len();
        prop_assert!(decode_dataset(&buf[..cut]).is_err());
        prop_assert_eq!(decode_dataset(&buf).unwrap(), ds);
    }
}

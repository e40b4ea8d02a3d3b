use std::collections::VecDeque;

use ndarray::{Array2, Array3};
use proptest::prelude::*;

use lrseg::geometry::WindowRect;
use lrseg::metrics::{dice, iou, paired_ttest_onesided, window_accuracy};
use lrseg::rnmf::sparse_update;
use lrseg::roi::{detect_window, TimeWeights};
use lrseg::segment::{anisotropic_diffuse, label_components_3d, morphological_open, Connectivity, DiffusionParams, MaskVolume};
use lrseg::video::{flatten, preprocess, unflatten, Video};

fn volume(frames: usize, h: usize, w: usize) -> impl Strategy<Value = Array3<f64>> {
    prop::collection::vec(0.0..1.0f64, frames * h * w)
        .prop_map(move |v| Array3::from_shape_vec((frames, h, w), v).unwrap())
}

fn bool_volume(frames: usize, h: usize, w: usize, p: f64) -> impl Strategy<Value = Array3<bool>> {
    prop::collection::vec(prop::bool::weighted(p), frames * h * w)
        .prop_map(move |v| Array3::from_shape_vec((frames, h, w), v).unwrap())
}

fn brute_window(sal: &Array3<f64>, s: &[f64], wh: usize, ww: usize) -> WindowRect {
    let (frames, h, w) = sal.dim();
    let mut best: Option<(f64, WindowRect)> = None;
    for top in 0..=h - wh {
        for left in 0..=w - ww {
            let mut score = 0.0;
            for t in 0..frames {
                for r in top..top + wh {
                    for c in left..left + ww {
                        score += s[t] * sal[[t, r, c]].powi(2);
                    }
                }
            }
            if best.is_none_or(|(b, _)| score > b + 1e-9 * b.abs()) {
                best = Some((score, WindowRect::new(top, left, wh, ww)));
            }
        }
    }
    best.unwrap().1
}

fn bfs_component_sizes(mask: &Array3<bool>) -> Vec<usize> {
    let dim = mask.dim();
    let mut seen = Array3::from_elem(dim, false);
    let mut sizes = Vec::new();
    for start in ndarray::indices(dim) {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut size = 0;
        while let Some((a, b, c)) = queue.pop_front() {
            size += 1;
            for (da, db, dc) in [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)] {
                let (na, nb, nc) = (a as isize + da, b as isize + db, c as isize + dc);
                if na < 0 || nb < 0 || nc < 0 {
                    continue;
                }
                let n = (na as usize, nb as usize, nc as usize);
                if n.0 < dim.0 && n.1 < dim.1 && n.2 < dim.2 && mask[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        sizes.push(size);
    }
    sizes
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_is_a_function_of_iou(a in bool_volume(1, 6, 7, 0.4), b in bool_volume(1, 6, 7, 0.4)) {
        let j = iou(&a, &b).unwrap();
        let d = dice(&a, &b).unwrap();
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
        prop_assert!(j <= d + 1e-15);
        prop_assert!((0.0..=1.0).contains(&j));
    }

    #[test]
    fn overlap_is_symmetric(a in bool_volume(2, 4, 5, 0.5), b in bool_volume(2, 4, 5, 0.5)) {
        prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
    }

    #[test]
    fn window_accuracy_is_a_fraction(a in bool_volume(1, 5, 5, 0.5), b in bool_volume(1, 5, 5, 0.5)) {
        if a.iter().any(|v| *v) {
            let i = window_accuracy(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert_eq!(window_accuracy(&a, &a).unwrap(), 1.0);
        } else {
            prop_assert!(window_accuracy(&a, &b).is_err());
        }
    }

    #[test]
    fn window_search_matches_exhaustive_scan(
        sal in volume(3, 9, 11),
        s in prop::collection::vec(0.05..1.0f64, 3),
        wh in 1usize..=9,
        ww in 1usize..=11,
    ) {
        let got = detect_window(&sal, &TimeWeights::new(s.clone()).unwrap(), wh, ww, 1).unwrap();
        prop_assert_eq!(got, brute_window(&sal, &s, wh, ww));
    }

    #[test]
    fn opening_is_idempotent_and_anti_extensive(
        data in bool_volume(2, 12, 14, 0.6),
        top in 0usize..4,
        left in 0usize..4,
    ) {
        let roi = WindowRect::new(top, left, 8, 10);
        let data = Array3::from_shape_fn(data.dim(), |(t, r, c)| data[[t, r, c]] && roi.contains(r, c));
        let mask = MaskVolume { data, roi };
        let once = morphological_open(&mask, 1);
        prop_assert_eq!(&morphological_open(&once, 1), &once);
        for (o, m) in once.data.iter().zip(mask.data.iter()) {
            prop_assert!(!*o || *m);
        }
    }

    #[test]
    fn labeling_matches_breadth_first_search(mask in bool_volume(4, 6, 6, 0.45)) {
        let (labels, sizes) = label_components_3d(&mask, Connectivity::Six);
        let mut expected = bfs_component_sizes(&mask);
        let mut got = sizes.clone();
        expected.sort_unstable();
        got.sort_unstable();
        prop_assert_eq!(got, expected);
        for (l, m) in labels.iter().zip(mask.iter()) {
            prop_assert_eq!(*l != 0, *m);
        }
    }

    #[test]
    fn diffusion_conserves_mass_and_range(frame in prop::collection::vec(0.0..1.0f64, 8 * 9)) {
        let f = Array2::from_shape_vec((8, 9), frame).unwrap();
        let out = anisotropic_diffuse(f.view(), &DiffusionParams::default());
        prop_assert!((out.sum() - f.sum()).abs() < 1e-9);
        let (lo, hi) = f.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        prop_assert!(out.iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
    }

    #[test]
    fn sparse_update_is_a_shifted_relu(
        x in prop::collection::vec(0.0..1.0f64, 12),
        l in prop::collection::vec(0.0..1.0f64, 12),
        lambda in 0.0..2.0f64,
    ) {
        let x = Array2::from_shape_vec((3, 4), x).unwrap();
        let l = Array2::from_shape_vec((3, 4), l).unwrap();
        let s = sparse_update(&x, &l, lambda);
        for ((s, x), l) in s.iter().zip(x.iter()).zip(l.iter()) {
            prop_assert!(*s >= 0.0);
            prop_assert_eq!(*s, (x - l - lambda / 2.0).max(0.0));
        }
    }

    #[test]
    fn preprocessing_normalizes_to_one(data in volume(2, 5, 7), side in 4usize..12) {
        let data = data.mapv(|v| v + 0.01);
        let v = Video::new(data, 25.0).unwrap();
        let out = preprocess(&v, side).unwrap();
        prop_assert_eq!(out.shape(), (side, side, 2));
        prop_assert_eq!(out.max_value(), 1.0);
        prop_assert!(out.data().iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn flatten_round_trips(data in volume(3, 4, 5)) {
        let v = Video::new(data, 25.0).unwrap();
        prop_assert_eq!(unflatten(&flatten(&v), 25.0).unwrap(), v);
    }

    #[test]
    fn one_sided_tests_are_complementary(
        a in prop::collection::vec(0.0..1.0f64, 5),
        b in prop::collection::vec(0.0..1.0f64, 5),
    ) {
        let p = paired_ttest_onesided(&a, &b).unwrap();
        let q = paired_ttest_onesided(&b, &a).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((p + q - 1.0).abs() < 1e-9);
    }
}

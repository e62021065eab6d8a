mod common;

use eyenet_core::label::{argmax_channels, one_hot, LabelMap, NUM_CLASSES};
use eyenet_core::metrics::{ConfusionMatrix, Evaluator};
use eyenet_core::ops::{self, ConvCfg, PoolCfg};
use eyenet_core::postproc::{clean_mask, connected_components_8, fill_holes, BinaryMask};
use eyenet_core::synth::EyeGeometry;
use eyenet_core::Tensor4;
use proptest::prelude::*;

fn tensor(dims: [usize; 4]) -> impl Strategy<Value = Tensor4<f64>> {
    let n = dims.iter().product::<usize>();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |v| Tensor4::from_vec(dims, v).unwrap())
}

fn label_map(h: usize, w: usize) -> impl Strategy<Value = LabelMap> {
    prop::collection::vec(0u8..4, h * w).prop_map(move |v| LabelMap::from_vec(h, w, v).unwrap())
}

fn binary(h: usize, w: usize, density: f64) -> impl Strategy<Value = BinaryMask> {
    prop::collection::vec(prop::bool::weighted(density), h * w)
        .prop_map(move |v| BinaryMask::from_fn(h, w, |y, x| v[y * w + x]))
}

/// Brute-force per-class counts straight from the two maps.
struct Recount {
    tp: [u64; 4],
    fp: [u64; 4],
    fneg: [u64; 4],
    truth: [u64; 4],
    correct: u64,
    total: u64,
}

fn recount(pred: &LabelMap, truth: &LabelMap) -> Recount {
    let mut r = Recount {
        tp: [0; 4],
        fp: [0; 4],
        fneg: [0; 4],
        truth: [0; 4],
        correct: 0,
        total: 0,
    };
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (p, t) = (p as usize, t as usize);
        r.total += 1;
        r.truth[t] += 1;
        if p == t {
            r.tp[p] += 1;
            r.correct += 1;
        } else {
            r.fp[p] += 1;
            r.fneg[t] += 1;
        }
    }
    r
}

/// Union-find labelling with 8-neighbour merges.
fn union_find_components(m: &BinaryMask) -> Vec<usize> {
    let (h, w) = (m.height(), m.width());
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for y in 0..h {
        for x in 0..w {
            if !m.get(y, x) {
                continue;
            }
            for (dy, dx) in [(0i32, 1i32), (1, -1), (1, 0), (1, 1)] {
                let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                if ny < h as i32 && nx >= 0 && nx < w as i32 && m.get(ny as usize, nx as usize) {
                    let (a, b) = (
                        find(&mut parent, y * w + x),
                        find(&mut parent, ny as usize * w + nx as usize),
                    );
                    parent[a] = b;
                }
            }
        }
    }
    (0..h * w).map(|i| find(&mut parent, i)).collect()
}

fn bump_mask(seed: u64, specks: &[(usize, usize, u8)]) -> LabelMap {
    let mut g = EyeGeometry::centered(24, 32);
    g.cx += (seed % 5) as f64 - 2.0;
    let mut m = g.mask(24, 32);
    for &(y, x, v) in specks {
        m.set(y % 24, x % 32, v);
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_output_shape_follows_formula(
        h in 1usize..12, w in 1usize..12, k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3, dil in 1usize..3, pad in 0usize..4,
    ) {
        let x = Tensor4::<f64>::zeros([1, 2, h, w]);
        let kern = Tensor4::<f64>::zeros([3, 2, k, k]);
        let span = dil * (k - 1) + 1;
        let cfg = ConvCfg::new(stride, dil, pad);
        match ops::conv2d(&x, &kern, None, cfg) {
            Ok(y) => {
                prop_assert_eq!(y.dims().h, (h + 2 * pad - span) / stride + 1);
                prop_assert_eq!(y.dims().w, (w + 2 * pad - span) / stride + 1);
                prop_assert_eq!(y.dims().c, 3);
            }
            Err(_) => prop_assert!(h + 2 * pad < span || w + 2 * pad < span),
        }
    }

    #[test]
    fn same_padding_preserves_size(h in 1usize..10, w in 1usize..10, dil in 1usize..4) {
        let x = Tensor4::<f64>::zeros([1, 1, h, w]);
        let kern = Tensor4::<f64>::zeros([1, 1, 3, 3]);
        let y = ops::conv2d(&x, &kern, None, ConvCfg::same(3, dil)).unwrap();
        prop_assert_eq!(y.dims(), x.dims());
    }

    #[test]
    fn conv_is_linear_in_input(a in tensor([1, 2, 5, 4]), b in tensor([1, 2, 5, 4]), k in tensor([3, 2, 3, 3]), s in -2.0f64..2.0) {
        let cfg = ConvCfg::same(3, 1);
        let combo = Tensor4::from_fn([1, 2, 5, 4], |n, c, y, x| a.get(n, c, y, x) + s * b.get(n, c, y, x));
        let lhs = ops::conv2d(&combo, &k, None, cfg).unwrap();
        let ya = ops::conv2d(&a, &k, None, cfg).unwrap();
        let yb = ops::conv2d(&b, &k, None, cfg).unwrap();
        for i in 0..lhs.len() {
            prop_assert!((lhs.data()[i] - ya.data()[i] - s * yb.data()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_backward_is_the_adjoint(x in tensor([1, 2, 6, 5]), k in tensor([3, 2, 3, 3]), g in tensor([1, 3, 3, 3]), dil in 1usize..3) {
        // <conv(x), g> = <x, conv_backward(g)>
        let cfg = ConvCfg::new(2, dil, dil);
        let y = ops::conv2d(&x, &k, None, cfg).unwrap();
        prop_assume!(y.dims() == g.dims());
        let grads = ops::conv2d_backward(&x, &k, &g, cfg);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(grads.x.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn pooling_and_upsampling_backward_are_adjoints(x in tensor([1, 2, 4, 6]), g in tensor([1, 2, 8, 12])) {
        let up = ops::upsample_nearest(&x, 2).unwrap();
        let lhs: f64 = up.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let back = ops::upsample_nearest_backward(x.dims(), &g, 2);
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));

        let cfg = PoolCfg::new(3, 1, 1);
        let pooled = ops::avg_pool2d(&g, cfg).unwrap();
        let h: Tensor4<f64> = Tensor4::from_fn(pooled.dims(), |n, c, y, xx| ((n + c * 3 + y * 5 + xx * 7) % 11) as f64 - 5.0);
        let lhs: f64 = pooled.data().iter().zip(h.data()).map(|(a, b)| a * b).sum();
        let back = ops::avg_pool2d_backward(g.dims(), &h, cfg);
        let rhs: f64 = g.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn softmax_is_a_distribution(x in tensor([2, 4, 3, 3]), shift in -50.0f64..50.0) {
        let p = ops::softmax_channels(&x).unwrap();
        let shifted = ops::softmax_channels(&x.map(|v| v + shift)).unwrap();
        for n in 0..2 {
            for y in 0..3 {
                for xx in 0..3 {
                    let s: f64 = (0..4).map(|c| p.get(n, c, y, xx)).sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                    for c in 0..4 {
                        prop_assert!(p.get(n, c, y, xx) > 0.0);
                        prop_assert!((p.get(n, c, y, xx) - shifted.get(n, c, y, xx)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn one_hot_argmax_round_trip(m in label_map(5, 7)) {
        let t: Tensor4<f32> = one_hot(std::slice::from_ref(&m)).unwrap();
        prop_assert_eq!(&argmax_channels(&t)[0], &m);
    }

    #[test]
    fn swapping_maps_transposes_the_matrix(a in label_map(8, 8), b in label_map(8, 8)) {
        let ab = ConfusionMatrix::from_maps(&a, &b).unwrap();
        let ba = ConfusionMatrix::from_maps(&b, &a).unwrap();
        prop_assert_eq!(ab.transpose(), ba.clone());
        prop_assert_eq!(ab.miou().unwrap(), ba.miou().unwrap());
    }

    #[test]
    fn components_match_union_find(m in binary(16, 16, 0.45)) {
        let comps = connected_components_8(&m);
        let roots = union_find_components(&m);
        let fg: usize = m.data().iter().filter(|&&v| v).count();
        prop_assert_eq!(comps.iter().map(|c| c.area).sum::<usize>(), fg);
        let mut distinct = std::collections::HashSet::new();
        for c in &comps {
            let (y0, x0) = c.pixels[0];
            let root = roots[y0 * 16 + x0];
            prop_assert!(distinct.insert(root));
            for &(y, x) in &c.pixels {
                prop_assert_eq!(roots[y * 16 + x], root);
            }
            let size = roots.iter().enumerate().filter(|&(i, &r)| r == root && m.data()[i]).count();
            prop_assert_eq!(size, c.area);
        }
        for w in comps.windows(2) {
            prop_assert!(w[0].area >= w[1].area);
        }
    }

    #[test]
    fn filled_mask_has_no_holes(m in binary(12, 12, 0.5)) {
        let f = fill_holes(&m);
        prop_assert_eq!(fill_holes(&f), f.clone());
        for i in 0..144 {
            prop_assert!(!m.data()[i] || f.data()[i]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn clean_mask_is_idempotent(seed in 0u64..1000, specks in prop::collection::vec((0usize..24, 0usize..32, 0u8..4), 0..40)) {
        let m = bump_mask(seed, &specks);
        let once = clean_mask(&m).unwrap();
        prop_assert_eq!(clean_mask(&once).unwrap(), once.clone());
        let eye = BinaryMask::from_labels(&once, |v| v != 0);
        prop_assert!(connected_components_8(&eye).len() <= 1);
        let iris = BinaryMask::from_labels(&once, |v| v == 2);
        prop_assert!(connected_components_8(&iris).len() <= 1);
    }
}

#[test]
fn pooled_metrics_match_brute_force() {
    let mut ev = Evaluator::new();
    let mut all = Recount {
        tp: [0; 4],
        fp: [0; 4],
        fneg: [0; 4],
        truth: [0; 4],
        correct: 0,
        total: 0,
    };
    for i in 0..50 {
        let p = common::random_labels(8, 8, 2 * i);
        let t = common::random_labels(8, 8, 2 * i + 1);
        ev.add(&p, &t).unwrap();
        let r = recount(&p, &t);
        for c in 0..NUM_CLASSES {
            all.tp[c] += r.tp[c];
            all.fp[c] += r.fp[c];
            all.fneg[c] += r.fneg[c];
            all.truth[c] += r.truth[c];
        }
        all.correct += r.correct;
        all.total += r.total;
    }
    let report = ev.report().unwrap();
    assert_eq!(report.pixel_total, all.total);
    assert_eq!(report.pixel_accuracy, all.correct as f64 / all.total as f64);
    for c in 0..NUM_CLASSES {
        let u = all.tp[c] + all.fp[c] + all.fneg[c];
        assert_eq!(report.per_class[c].iou, all.tp[c] as f64 / u as f64);
    }
}

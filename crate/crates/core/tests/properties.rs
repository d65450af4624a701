use ecg_uda::autodiff::{Graph, Tensor, Var};
use ecg_uda::clusters::{compute_centroids, select_confident, Centroids, ClusterState, Gate, GateInputs};
use ecg_uda::eval::{ConfusionMatrix, MetricsReport};
use ecg_uda::losses::{self, DroMode, GroupDro};
use ecg_uda::net::combine;
use proptest::collection::vec;
use proptest::prelude::*;

const D: usize = 3;

fn leaf(g: &mut Graph<f64>, shape: &[usize], data: &[f64]) -> Var {
    g.leaf(&Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
}

fn centroids_from(rows: &[f64]) -> Centroids {
    let mut c = Centroids::new(D);
    for k in 0..4 {
        c.set(k, rows[k * D..(k + 1) * D].iter().map(|&v| v as f32).collect());
    }
    c
}

fn separating(rows: &[f64], t_m: f64) -> f64 {
    let mut g = Graph::new();
    let c = leaf(&mut g, &[rows.len() / D, D], rows);
    let v = losses::separating(&mut g, c, t_m).unwrap();
    g.scalar(v)
}

fn compacting(feats: &[f64], labels: &[usize], cents: &[f64]) -> f64 {
    let mut g = Graph::new();
    let f = leaf(&mut g, &[labels.len(), D], feats);
    let c = leaf(&mut g, &[4, D], cents);
    let v = losses::compacting(&mut g, f, labels, c).unwrap();
    g.scalar(v)
}

fn cd(a: &[f64], b: &[f64]) -> f64 {
    let mut g = Graph::new();
    let (x, y) = (leaf(&mut g, &[4, D], a), leaf(&mut g, &[4, D], b));
    let v = losses::interdomain_cd(&mut g, x, y).unwrap();
    g.scalar(v)
}

fn cmb(feats: &[f64], labels: &[usize], cc_m: &[f64]) -> f64 {
    let mut g = Graph::new();
    let f = leaf(&mut g, &[labels.len(), D], feats);
    let m = leaf(&mut g, &[4, D], cc_m);
    let (bcc, classes) = losses::batch_centroids(&mut g, f, labels).unwrap().unwrap();
    let v = losses::running_combined(&mut g, bcc, &classes, m).unwrap();
    g.scalar(v)
}

fn batch() -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
    (1usize..12).prop_flat_map(|n| (vec(-3.0..3.0f64, n * D), vec(0usize..4, n)))
}

fn translate(x: &[f64], t: &[f64]) -> Vec<f64> {
    x.iter().enumerate().map(|(i, v)| v + t[i % D]).collect()
}

/// Softmax-like rows in `[0, 1]` summing to one, from raw logits.
fn probs(logits: &[f64]) -> Vec<f32> {
    logits
        .chunks(4)
        .flat_map(|r| {
            let e: Vec<f64> = r.iter().map(|v| v.exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| (v / s) as f32)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn dro_max_is_at_least_erm(per in vec(0.0..5.0f64, 1..32), seed in any::<u64>()) {
        let groups: Vec<usize> = (0..per.len()).map(|i| ((seed >> (i % 60)) as usize + i) % 4).collect();
        let mut g = Graph::new();
        let p = leaf(&mut g, &[per.len()], &per);
        let dro = GroupDro::new(DroMode::Max, 0.01).apply(&mut g, p, &groups).unwrap();
        let erm = per.iter().sum::<f64>() / per.len() as f64;
        prop_assert!(g.scalar(dro) >= erm - 1e-12);
    }

    #[test]
    fn separating_never_grows_when_centroids_spread(rows in vec(-4.0..4.0f64, 4 * D), spread in 1.0..3.0f64, t_m in 0.1..12.0f64) {
        let mean: Vec<f64> = (0..D).map(|j| (0..4).map(|k| rows[k * D + j]).sum::<f64>() / 4.0).collect();
        let wider: Vec<f64> = rows.iter().enumerate().map(|(i, v)| mean[i % D] + spread * (v - mean[i % D])).collect();
        prop_assert!(separating(&wider, t_m) <= separating(&rows, t_m) + 1e-9);
    }

    #[test]
    fn separating_counts_every_unordered_pair_twice(rows in vec(-4.0..4.0f64, 4 * D), t_m in 0.1..12.0f64) {
        let mut hinge = 0.0;
        for a in 0..4 {
            for b in a + 1..4 {
                let d: f64 = (0..D).map(|j| (rows[a * D + j] - rows[b * D + j]).powi(2)).sum::<f64>().sqrt();
                hinge += (t_m - d).max(0.0);
            }
        }
        let l = separating(&rows, t_m);
        prop_assert!((l - 2.0 * hinge).abs() < 1e-9);
        prop_assert_eq!(l == 0.0, hinge == 0.0);
    }

    #[test]
    fn compacting_is_permutation_invariant((feats, labels) in batch(), cents in vec(-3.0..3.0f64, 4 * D), rot in 0usize..12) {
        let n = labels.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).rev().collect();
        let pf: Vec<f64> = perm.iter().flat_map(|&i| feats[i * D..(i + 1) * D].to_vec()).collect();
        let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        prop_assert!((compacting(&feats, &labels, &cents) - compacting(&pf, &pl, &cents)).abs() < 1e-9);
    }

    #[test]
    fn compacting_vanishes_at_the_centroids(cents in vec(-3.0..3.0f64, 4 * D), labels in vec(0usize..4, 1..10)) {
        let feats: Vec<f64> = labels.iter().flat_map(|&k| cents[k * D..(k + 1) * D].to_vec()).collect();
        prop_assert_eq!(compacting(&feats, &labels, &cents), 0.0);
    }

    #[test]
    fn centroid_losses_are_translation_invariant(
        (feats, labels) in batch(),
        a in vec(-3.0..3.0f64, 4 * D),
        b in vec(-3.0..3.0f64, 4 * D),
        t in vec(-5.0..5.0f64, D),
    ) {
        prop_assert!((cd(&a, &b) - cd(&translate(&a, &t), &translate(&b, &t))).abs() < 1e-9);
        prop_assert_eq!(cd(&a, &a), 0.0);
        let moved = cmb(&translate(&feats, &t), &labels, &translate(&a, &t));
        prop_assert!((cmb(&feats, &labels, &a) - moved).abs() < 1e-9);
    }

    #[test]
    fn losses_are_non_negative((feats, labels) in batch(), cents in vec(-3.0..3.0f64, 4 * D), logits in vec(-4.0..4.0f64, 48)) {
        let n = labels.len();
        prop_assert!(compacting(&feats, &labels, &cents) >= 0.0);
        prop_assert!(separating(&cents, 5.0) >= 0.0);
        prop_assert!(cmb(&feats, &labels, &cents) >= 0.0);
        let mut g = Graph::new();
        let l1 = leaf(&mut g, &[n, 4], &logits[..n * 4]);
        let l2 = leaf(&mut g, &[n, 4], &logits[48 - n * 4..]);
        let ce = losses::weighted_ce(&mut g, l1, &labels, &[1.0, 2.0, 0.5, 3.0]).unwrap();
        prop_assert!(g.value(ce).iter().all(|&v| v >= 0.0));
        let (p1, p2) = (g.softmax(l1), g.softmax(l2));
        let dis = losses::discrepancy(&mut g, p1, p2).unwrap();
        prop_assert!(g.scalar(dis) >= 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one(logits in vec(-30.0..30.0f64, 4..40)) {
        let n = logits.len() / 4;
        let mut g = Graph::new();
        let x = leaf(&mut g, &[n, 4], &logits[..n * 4]);
        let p = g.softmax(x);
        for row in g.value(p).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let l32: Vec<f32> = logits[..n * 4].iter().map(|&v| v as f32).collect();
        let (combined, _) = combine(&l32, &l32);
        for row in combined.chunks(4) {
            prop_assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn tighter_gates_select_subsets(
        logits in vec(-8.0..8.0f64, 40),
        noise in vec(-0.5..0.5f64, 40),
        feats in vec(-2.0..2.0f64, 10 * D),
        cents in vec(-2.0..2.0f64, 4 * D),
        m_ctr in vec(0.5..4.0f64, 4),
        m_dis in 0.01..1.0f64,
        lo in 0.0..0.99f64,
        bump in 0.0..0.5f64,
        shrink in 0.2..1.0f64,
    ) {
        let p1 = probs(&logits);
        let noisy: Vec<f64> = logits.iter().zip(&noise).map(|(a, b)| a + b).collect();
        let p2 = probs(&noisy);
        let p: Vec<f32> = p1.iter().zip(&p2).map(|(a, b)| (a + b) / 2.0).collect();
        let f: Vec<f32> = feats.iter().map(|&v| v as f32).collect();
        let x = || GateInputs { features: &f, dim: D, probs: &p, probs1: &p1, probs2: &p2 };
        let cc = centroids_from(&cents);
        let m = [m_ctr[0], m_ctr[1], m_ctr[2], m_ctr[3]];
        let loose = Gate { min_prob: lo, ctr_scale: 1.0, dis_scale: 1.0 };
        let tight = Gate { min_prob: (lo + bump).min(0.999), ctr_scale: shrink, dis_scale: shrink };
        let a = select_confident(x(), &cc, &m, m_dis, loose);
        let b = select_confident(x(), &cc, &m, m_dis, tight);
        prop_assert!(b.iter().all(|s| a.contains(s)), "tight {:?} not within loose {:?}", b, a);
    }

    #[test]
    fn duplication_leaves_centroids_unchanged(feats in vec(-3.0..3.0f64, 8 * D), factors in vec(0usize..4, 4)) {
        let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
        let f: Vec<f32> = feats.iter().map(|&v| v as f32).collect();
        let (mut df, mut dl) = (f.clone(), labels.clone());
        for (i, &k) in labels.iter().enumerate() {
            for _ in 0..factors[k] {
                df.extend_from_slice(&f[i * D..(i + 1) * D]);
                dl.push(k);
            }
        }
        let a = compute_centroids(&f, D, &labels).unwrap();
        let b = compute_centroids(&df, D, &dl).unwrap();
        for k in 0..4 {
            for (x, y) in a.get(k).unwrap().iter().zip(b.get(k).unwrap()) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn combined_centroids_stay_the_midpoint(cents in vec(-3.0..3.0f64, 4 * D), feats in vec(-3.0..3.0f64, 6 * D), picks in vec(0usize..4, 6)) {
        let mut state = ClusterState::new(centroids_from(&cents), [1.0; 4], 0.1);
        let f: Vec<f32> = feats.iter().map(|&v| v as f32).collect();
        let confident: Vec<(usize, usize)> = picks.iter().enumerate().map(|(i, &k)| (i, k)).collect();
        for sel in [&confident[..], &confident[..2], &[]] {
            state.set_target(sel, &f, D);
            for k in 0..4 {
                let (s, t, m) = (state.cc_s.get(k).unwrap(), state.cc_t.get(k).unwrap(), state.cc_m.get(k).unwrap());
                for j in 0..D {
                    prop_assert!((m[j] - (s[j] + t[j]) / 2.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn metrics_ignore_sample_order(pairs in vec((0usize..4, 0usize..4), 1..200), rot in 0usize..200) {
        let (t, p): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let n = pairs.len();
        let (rt, rp): (Vec<usize>, Vec<usize>) = (0..n).map(|i| pairs[(i + rot) % n]).rev().unzip();
        let a = ConfusionMatrix::from_predictions(&t, &p).unwrap();
        let b = ConfusionMatrix::from_predictions(&rt, &rp).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(
            MetricsReport::from_confusion(&a, "d", "m", false).to_json(),
            MetricsReport::from_confusion(&b, "d", "m", false).to_json()
        );
    }
}

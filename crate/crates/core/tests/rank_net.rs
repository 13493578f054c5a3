use gradcore::{gradcheck, Graph, ParamStore, Tensor};
use occface::rank::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn config(coords: usize, cond: usize, hidden: Vec<usize>) -> RankConfig {
    RankConfig {
        coords,
        cond_dim: cond,
        hidden,
        feature_scale: 1.0,
        temperature: Temperature::Median,
    }
}

fn gauss(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|_| s * normal(rng)).collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn candidates(rng: &mut ChaCha8Rng, n: usize, coords: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| gauss(rng, coords, 1.0)).collect()
}

fn to_f64(store: &ParamStore<f32>) -> ParamStore<f64> {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        out.insert(name, t.cast()).unwrap();
    }
    out
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

#[test]
fn split_first_layer_matches_concatenated_oracle() {
    let (coords, cond_dim, h) = (6, 3, 5);
    let c = config(coords, cond_dim, vec![h]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let reference = gauss(&mut rng, coords, 0.3);
    let net = RankNet::new(c, &reference, 7).unwrap();
    let cands = candidates(&mut rng, 4, coords);
    let cond = gauss(&mut rng, cond_dim, 0.5);
    let scores = net.scores(&cands, &cond).unwrap();

    // one dense layer on [mean − ref ; residual ; √dim·cond], written out by hand
    let p = |name: &str| net.params.get(name).unwrap().to_f64();
    let (ws, wr, b0) = (p("l0.w_shared"), p("l0.w_res"), p("l0.b"));
    let (lg, lb, w1, b1) = (p("ln0.g"), p("ln0.b"), p("l1.w"), p("l1.b"));
    let n = cands.len() as f64;
    let mean: Vec<f64> = (0..coords)
        .map(|k| cands.iter().map(|x| x[k]).sum::<f64>() / n)
        .collect();
    let gain = (cond_dim as f64).sqrt();
    for (i, x) in cands.iter().enumerate() {
        let mut input: Vec<f64> = mean.iter().zip(&reference).map(|(m, r)| m - r).collect();
        input.extend(cond.iter().map(|v| v * gain));
        let res: Vec<f64> = x.iter().zip(&mean).map(|(a, m)| a - m).collect();
        let z: Vec<f64> = (0..h)
            .map(|j| {
                let shared: f64 = input
                    .iter()
                    .enumerate()
                    .map(|(r, v)| v * ws[r * h + j])
                    .sum();
                let own: f64 = res.iter().enumerate().map(|(r, v)| v * wr[r * h + j]).sum();
                shared + own + b0[j]
            })
            .collect();
        let mu = z.iter().sum::<f64>() / h as f64;
        let var = z.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / h as f64;
        let a: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(j, v)| gelu((v - mu) / (var + 1e-5).sqrt() * lg[j] + lb[j]))
            .collect();
        let s = a.iter().zip(&w1).map(|(x, w)| x * w).sum::<f64>() + b1[0];
        assert!(
            (s - scores[i]).abs() < 1e-4,
            "candidate {i}: {s} vs {}",
            scores[i]
        );
    }
}

#[test]
fn scorer_gradients_match_finite_differences() {
    let (coords, cond_dim) = (6, 4);
    let c = config(coords, cond_dim, vec![8, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = RankNet::new(c.clone(), &[0.0; 6], 3).unwrap();
    let mut store = to_f64(&net.params);
    // perturb the zero-initialised biases and gains so every path is exercised
    for name in ["l0.b", "ln0.b", "ln1.g", "l1.b", "l2.b"] {
        let t = store.get_mut(name).unwrap();
        for v in t.data_mut() {
            *v += 0.3 * rng.random_range(-1.0..1.0);
        }
    }
    let cands = candidates(&mut rng, 5, coords);
    let f = build_features(&cands).unwrap();
    let res: Vec<f64> = f.residuals.concat();
    let cond = gauss(&mut rng, cond_dim, 1.0);
    let target = gt_distribution(&[0.3, 0.1, 0.5, 0.2, 0.9], Temperature::Median).unwrap();
    let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let mean = g.constant(Tensor::from_f64(vec![1, coords], &f.mean)?)?;
        let r = g.constant(Tensor::from_f64(vec![1, 5, coords], &res)?)?;
        let k = g.constant(Tensor::from_f64(vec![1, cond_dim], &cond)?)?;
        let scores = forward(&c, g, s, mean, r, k, true)
            .map_err(|e| gradcore::GradError::Container(e.to_string()))?;
        g.softmax_cross_entropy(scores, Tensor::from_f64(vec![1, 5], &target)?)
    };
    let err = gradcheck::max_relative_error(&store, &loss, 1e-6).unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn loss_gradient_is_h_minus_g() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in [2, 5, 16, 100] {
        let p = gauss(&mut rng, n, 2.0);
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let g = gt_distribution(&d, Temperature::Median).unwrap();
        let analytic = rank_loss_grad(&p, &g).unwrap();
        let h = 1e-6;
        for i in 0..n {
            let mut up = p.clone();
            let mut dn = p.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (rank_loss(&up, &g).unwrap() - rank_loss(&dn, &g).unwrap()) / (2.0 * h);
            assert!(
                (fd - analytic[i]).abs() < 1e-7,
                "n={n} i={i}: {fd} vs {}",
                analytic[i]
            );
        }
    }
}

#[test]
fn target_mode_is_lowest_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let n = rng.random_range(2..64);
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.01)).collect();
        let g = gt_distribution(&d, Temperature::Median).unwrap();
        assert_eq!(select(&g).unwrap(), gt_order(&d)[0]);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn scores_are_permutation_equivariant_and_duplicates_tie() {
    let c = config(9, 4, vec![16, 8]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let net = RankNet::new(c, &gauss(&mut rng, 9, 0.1), 8).unwrap();
    let cond = gauss(&mut rng, 4, 0.5);
    let mut cands = candidates(&mut rng, 7, 9);
    cands[5] = cands[2].clone();
    let s = net.scores(&cands, &cond).unwrap();
    assert_eq!(s[5], s[2]);
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| cands[i].clone()).collect();
    let sp = net.scores(&permuted, &cond).unwrap();
    for (j, &i) in perm.iter().enumerate() {
        assert!((sp[j] - s[i]).abs() < 1e-6, "{} vs {}", sp[j], s[i]);
    }
}

#[test]
fn zero_weight_scorer_selects_first() {
    let c = config(6, 2, vec![4]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut net = RankNet::new(c, &[0.0; 6], 1).unwrap();
    let names: Vec<String> = net.params.names().map(|s| s.to_string()).collect();
    for name in names
        .iter()
        .filter(|n| n.starts_with('l') && n.ends_with(".w") || n.contains(".w_"))
    {
        net.params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let s = net
        .scores(&candidates(&mut rng, 10, 6), &[0.3, -0.2])
        .unwrap();
    assert!(s.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(select(&s).unwrap(), 0);
}

fn brute_metrics(pred: &[usize], truth: &[usize], d: &[f64], k: usize) -> (f64, f64, f64) {
    let a: Vec<usize> = pred[..k].to_vec();
    let b: Vec<usize> = truth[..k].to_vec();
    let inter = a.iter().filter(|i| b.contains(i)).count() as f64;
    let mut union = a.clone();
    union.extend(b.iter().filter(|i| !a.contains(i)));
    let md = |s: &[usize]| s.iter().map(|&i| d[i]).sum::<f64>() / s.len() as f64;
    (
        100.0 * inter / k as f64,
        inter / union.len() as f64,
        md(&b) / md(&a),
    )
}

#[test]
fn metrics_match_set_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..0.01)).collect();
        let scores = gauss(&mut rng, n, 1.0);
        let (pred, truth) = (predicted_order(&scores), gt_order(&d));
        let kp = rng.random_range(1.0..100.0);
        let m = rank_metrics(&pred, &truth, &d, kp).unwrap();
        let k = ((kp / 100.0 * n as f64).round() as usize).max(1);
        assert_eq!(m.k, k);
        let (p, iou, ratio) = brute_metrics(&pred, &truth, &d, k);
        assert!((m.precision - p).abs() < 1e-12 && (m.iou - iou).abs() < 1e-12);
        assert!((m.error_ratio - ratio).abs() < 1e-12 && m.error_ratio <= 1.0 + 1e-12);
    }
}

#[test]
fn report_rows() {
    let row = RankReportRow::new("v0", &[0.1, 0.9, 0.2], &[0.004, 0.002, 0.003]).unwrap();
    assert_eq!(row.selected, 1);
    assert_eq!(row.selected_distance, 0.002);
    assert!((row.mean_distance - 0.003).abs() < 1e-15);
    assert_eq!(row.ideal_distance, 0.002);
    let csv = rank_report_csv(&[row]);
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("v0,1,0.002,"));
}

/// Candidates scattered around a condition-dependent target; the scorer has
/// to learn which of them sit closest to it.
fn ranking_task(rng: &mut ChaCha8Rng, count: usize, n: usize, mix: &[f64]) -> Vec<RankExample> {
    let coords = 6;
    (0..count)
        .map(|_| {
            let cond = gauss(rng, 3, 1.0);
            let truth: Vec<f64> = (0..coords)
                .map(|k| (0..3).map(|j| mix[k * 3 + j] * cond[j]).sum::<f64>())
                .collect();
            let candidates: Vec<Vec<f64>> = (0..n)
                .map(|_| truth.iter().map(|t| t + normal(rng) * 0.6).collect())
                .collect();
            let distances = candidates
                .iter()
                .map(|c: &Vec<f64>| {
                    let v = |x: &[f64]| -> Vec<[f64; 3]> {
                        x.chunks(3).map(|p| [p[0], p[1], p[2]]).collect()
                    };
                    vertex_distance(&v(c), &v(&truth)).unwrap()
                })
                .collect();
            RankExample {
                cond,
                candidates,
                distances,
            }
        })
        .collect()
}

fn mean_precision(net: &RankNet, set: &[RankExample], k: f64) -> f64 {
    set.iter()
        .map(|e| {
            let s = net.scores(&e.candidates, &e.cond).unwrap();
            rank_metrics(
                &predicted_order(&s),
                &gt_order(&e.distances),
                &e.distances,
                k,
            )
            .unwrap()
            .precision
        })
        .sum::<f64>()
        / set.len() as f64
}

#[test]
fn training_beats_chance_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mix = gauss(&mut rng, 18, 1.0);
    let train = ranking_task(&mut rng, 256, 16, &mix);
    let val = ranking_task(&mut rng, 64, 16, &mix);
    let c = config(6, 3, vec![32, 16]);
    let mut net = RankNet::new(c, &[0.0; 6], 12).unwrap();
    let before = mean_precision(&net, &val, 20.0);
    let losses = train_rank(&mut net, &train, 400, 16, 3e-3, 13, |_, _| {}).unwrap();
    let after = mean_precision(&net, &val, 20.0);
    let head: f64 = losses[..40].iter().sum::<f64>() / 40.0;
    let tail: f64 = losses[losses.len() - 40..].iter().sum::<f64>() / 40.0;
    assert!(tail < head, "loss {head} -> {tail}");
    assert!(after > 40.0, "precision@20% {before} -> {after}");
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rank.ckpt");
    let net = RankNet::new(config(6, 2, vec![8]), &[0.1; 6], 4).unwrap();
    net.save(&path).unwrap();
    let back = RankNet::load(&path).unwrap();
    assert_eq!(back.config, net.config);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cands = candidates(&mut rng, 4, 6);
    assert_eq!(
        back.scores(&cands, &[0.5, 0.5]).unwrap(),
        net.scores(&cands, &[0.5, 0.5]).unwrap()
    );
}

#[test]
fn rejects_malformed_inputs() {
    let net = RankNet::new(config(6, 2, vec![8]), &[0.0; 6], 4).unwrap();
    assert!(net.scores(&[vec![0.0; 6]], &[0.0, 0.0]).is_err());
    assert!(net
        .scores(&[vec![0.0; 6], vec![0.0; 5]], &[0.0, 0.0])
        .is_err());
    assert!(net.scores(&[vec![0.0; 6], vec![0.0; 6]], &[0.0]).is_err());
    assert!(RankNet::new(config(6, 2, vec![]), &[0.0; 6], 0).is_err());
    assert!(gt_distribution(&[], Temperature::Median).is_err());
}

proptest! {
    #[test]
    fn loss_is_at_least_target_entropy(
        pairs in prop::collection::vec((-5.0f64..5.0, 0.0f64..0.02), 2..40)
    ) {
        let (p, d): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let g = gt_distribution(&d, Temperature::Median).unwrap();
        let entropy: f64 = -g.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
        prop_assert!(rank_loss(&p, &g).unwrap() >= entropy - 1e-12);
    }

    #[test]
    fn features_are_permutation_invariant(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 2..20),
        rot in 0usize..20,
    ) {
        let f = build_features(&rows).unwrap();
        let mut shuffled = rows.clone();
        let r = rot % rows.len();
        shuffled.rotate_left(r);
        shuffled.reverse();
        let g = build_features(&shuffled).unwrap();
        prop_assert_eq!(&f.mean, &g.mean);
        for k in 0..6 {
            let s: f64 = f.residuals.iter().map(|x| x[k]).sum();
            prop_assert!(s.abs() <= 1e-6 * rows.len() as f64);
        }
    }

    #[test]
    fn select_picks_first_maximum(v in prop::collection::vec(-3i32..3, 1..30)) {
        let s: Vec<f64> = v.iter().map(|&x| x as f64).collect();
        let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(select(&s).unwrap(), s.iter().position(|&x| x == max).unwrap());
    }
}

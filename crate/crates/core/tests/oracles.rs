//! Independent direct-evaluation oracles for kernels, losses, mining,
//! ranking, the optimizer and the samplers.

mod common;

use asanet_core::eval::{distance_matrix, Metric};
use asanet_core::synth::{constrained_random_sample, gen_dataset, GenConfig, PkSampler};
use asanet_core::train::{adam_scalar, OptimConfig};
use asanet_core::{Tape, Tensor};
use common::*;
use rand::Rng;

#[test]
fn losses_match_direct_evaluation() {
    for (name, dev) in loss_deviations() {
        assert!(dev <= 1e-10, "{name}: {dev:e}");
    }
    let (wrt, smooth) = weight_sum_deviations();
    assert!(wrt <= 1e-9, "{wrt:e}");
    assert!(smooth <= 1e-12, "{smooth:e}");
}

#[test]
fn mining_matches_exhaustive_oracle() {
    assert_eq!(first_mining_mismatch(1000), None);
}

#[test]
fn ranking_matches_brute_force() {
    assert!(ranking_agreement(500).unwrap() > 400);
    assert_eq!(hand_example(), (2.0 / 3.0, vec![0.5, 1.0, 1.0, 1.0]));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    for _ in 0..20 {
        let (m, k, n) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..6));
        let a = random_tensor(&mut r, &[m, k]);
        let b = random_tensor(&mut r, &[k, n]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        let c = tape.value(c);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a.data()[i * k + l] * b.data()[l * n + j];
                }
                assert!(close(c.data()[i * n + j], s, 1e-12));
            }
        }
    }
}

#[test]
fn softmax_of_zero_and_ln3() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 2], vec![0.0, 3f64.ln()]).unwrap());
    let s = tape.softmax_rows(x).unwrap();
    let s = tape.value(s).data();
    assert!(close(s[0], 0.25, 1e-15) && close(s[1], 0.75, 1e-15), "{s:?}");
}

#[test]
fn conv3x3_matches_direct_loop() {
    let mut r = rng(2);
    for stride in [1, 2] {
        let (n, cin, cout, h, w) = (2, 3, 4, 5, 6);
        let x = random_tensor(&mut r, &[n, cin, h, w]);
        let k = random_tensor(&mut r, &[cout, cin, 3, 3]);
        let bias = random_tensor(&mut r, &[cout]);
        let mut tape = Tape::new();
        let (vx, vk, vb) = (tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(bias.clone()));
        let y = tape.conv3x3(vx, vk, Some(vb), stride).unwrap();
        let y = tape.value(y).clone();
        let (ho, wo) = (y.shape()[2], y.shape()[3]);
        assert_eq!((ho, wo), ((h - 1) / stride + 1, (w - 1) / stride + 1));
        for b in 0..n {
            for o in 0..cout {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut s = bias.data()[o];
                        for c in 0..cin {
                            for di in 0..3 {
                                for dj in 0..3 {
                                    let (yy, xx) = ((i * stride + di) as isize - 1, (j * stride + dj) as isize - 1);
                                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                        continue;
                                    }
                                    s += k.data()[((o * cin + c) * 3 + di) * 3 + dj]
                                        * x.data()[((b * cin + c) * h + yy as usize) * w + xx as usize];
                                }
                            }
                        }
                        assert!(close(y.data()[((b * cout + o) * ho + i) * wo + j], s, 1e-12));
                    }
                }
            }
        }
    }
}

#[test]
fn conv1x1_matches_direct_loop() {
    let mut r = rng(3);
    let (n, cin, cout, hw) = (2, 5, 3, 7);
    let x = random_tensor(&mut r, &[n, cin, hw]);
    let k = random_tensor(&mut r, &[cout, cin]);
    let mut tape = Tape::new();
    let (vx, vk) = (tape.constant(x.clone()), tape.constant(k.clone()));
    let y = tape.conv1x1(vx, vk, None).unwrap();
    let y = tape.value(y);
    for b in 0..n {
        for o in 0..cout {
            for p in 0..hw {
                let s: f64 = (0..cin).map(|c| k.data()[o * cin + c] * x.data()[(b * cin + c) * hw + p]).sum();
                assert!(close(y.data()[(b * cout + o) * hw + p], s, 1e-12));
            }
        }
    }
}

#[test]
fn distance_matrix_matches_double_loop() {
    let mut r = rng(12);
    let q = random_tensor(&mut r, &[4, 6]);
    let g = random_tensor(&mut r, &[5, 6]);
    let cos = distance_matrix(&q, &g, Metric::Cosine).unwrap();
    let euc = distance_matrix(&q, &g, Metric::Euclidean).unwrap();
    for i in 0..4 {
        for j in 0..5 {
            let dot: f64 = q.row(i).iter().zip(g.row(j)).map(|(a, b)| a * b).sum();
            assert!((cos.data()[i * 5 + j] - (1.0 - dot / (norm(q.row(i)) * norm(g.row(j))))).abs() <= 1e-12);
            assert!((euc.data()[i * 5 + j] - dist(q.row(i), g.row(j)).powi(2)).abs() <= 1e-12);
        }
    }
}

#[test]
fn adam_two_steps_by_hand() {
    let cfg = OptimConfig::default();
    let (lr, g, theta) = (0.1, 0.5, 1.0);
    // step 1: m = (1-β1)g, v = (1-β2)g², bias-corrected to g and g²
    let m1 = (1.0 - cfg.beta1) * g;
    let v1 = (1.0 - cfg.beta2) * g * g;
    let t1 = theta - lr * (m1 / (1.0 - cfg.beta1)) / ((v1 / (1.0 - cfg.beta2)).sqrt() + cfg.eps);
    let m2 = cfg.beta1 * m1 + (1.0 - cfg.beta1) * g;
    let v2 = cfg.beta2 * v1 + (1.0 - cfg.beta2) * g * g;
    let t2 = t1 - lr * (m2 / (1.0 - cfg.beta1.powi(2))) / ((v2 / (1.0 - cfg.beta2.powi(2))).sqrt() + cfg.eps);
    let got = adam_scalar(theta, &[g, g], &cfg, lr);
    assert!((got - t2).abs() <= 1e-12, "{got} vs {t2}");
    // both bias-corrected steps are lr·g/|g| up to eps
    assert!((got - (theta - 2.0 * lr)).abs() < 1e-7);
}

#[test]
fn constrained_sampling_frequencies() {
    let mut r = rng(13);
    let draws = 10_000;
    let mut counts = [0usize; 12];
    for _ in 0..draws {
        let idx = constrained_random_sample(12, 6, &mut r).unwrap();
        for (c, &i) in idx.iter().enumerate() {
            assert!(i / 2 == c, "index {i} outside chunk {c}");
            counts[i] += 1;
        }
    }
    for (i, &c) in counts.iter().enumerate() {
        let f = c as f64 / draws as f64;
        assert!((f - 0.5).abs() <= 0.02, "frame {i}: {f}");
    }
}

#[test]
fn pk_epoch_covers_every_identity() {
    let mut r = rng(14);
    for trial in 0..50 {
        let n = r.random_range(2..30);
        let groups: Vec<Vec<usize>> = (0..n)
            .map(|i| (0..r.random_range(1..7)).map(|j| i * 100 + j).collect())
            .collect();
        let p = r.random_range(2..=n.min(8));
        let k = r.random_range(2..5);
        let batches = PkSampler { p, k }.epoch(&groups, &mut r).unwrap();
        let mut seen = vec![false; n];
        for b in &batches {
            assert_eq!(b.len(), p * k, "trial {trial}");
            let mut ids: Vec<usize> = b.iter().map(|t| t / 100).collect();
            for chunk in ids.chunks(k) {
                assert!(chunk.iter().all(|&i| i == chunk[0]));
            }
            ids.dedup();
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), p);
            for i in ids {
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "trial {trial}");
    }
}

#[test]
fn same_identity_tracklets_differ_only_in_nuisance_labels() {
    let ds = gen_dataset(&GenConfig::default()).unwrap();
    let mut r = rng(15);
    let k = ds.config.tracklets_per_identity;
    let mut pairs = 0;
    while pairs < 200 {
        let id = r.random_range(0..ds.config.num_identities);
        let (a, b) = (r.random_range(0..k), r.random_range(0..k));
        if a == b {
            continue;
        }
        let (ta, tb) = (id * k + a, id * k + b);
        assert_eq!(ds.tracklets[ta].identity, Some(id));
        assert_eq!(ds.re_labels(ta), ds.re_labels(tb));
        if a % 3 != b % 3 {
            assert_ne!(ds.tracklets[ta].ir_labels(), ds.tracklets[tb].ir_labels());
        }
        pairs += 1;
    }
    for id in 0..ds.config.num_identities {
        let mut labels: Vec<_> = (0..k).map(|j| ds.tracklets[id * k + j].ir_labels().map(|v| v as u8)).collect();
        labels.sort();
        labels.dedup();
        assert!(labels.len() >= 2);
    }
}

//! Every operation against an independent direct evaluation.

mod common;

use common::*;
use lumiq::autodiff::{softmax_vec, Tape};
use lumiq::codebook::{
    activation_histogram, codebook_matching_loss, histogram_distance, quantize_nearest, top_k_codes, Codebook,
};
use lumiq::data::{degrade, synth_scene, DegradeParams};
use lumiq::light_quant::{
    extract_light_factor, gram_matrix, light_consistency_loss, lqm_contrastive_loss, LightFactor, LqmState,
};
use lumiq::losses::{
    adversarial_loss, feature_matching_loss, l1_loss, reconstruction_loss, total_loss, AdvSide, LossParts,
    PerceptualExtractor,
};
use lumiq::metrics::{psnr, ssim};
use lumiq::networks::{skip_fusion, FusionSet, NetworkConfig};
use lumiq::optim::{Adam, AdamConfig};
use lumiq::params::ParamSet;
use lumiq::prompt::{compose_prompt, mean_prompt_weights, prompt_weights, PromptBank, PromptWeights};
use lumiq::Tensor4;
use rand::Rng;

#[test]
fn conv2d_matches_loop_oracle() {
    let mut r = rng(1);
    let x = Tensor4::normal([2, 3, 8, 8], 1.0, &mut r);
    let k = Tensor4::normal([4, 3, 3, 3], 1.0, &mut r);
    let b = Tensor4::normal([4, 1, 1, 1], 1.0, &mut r);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let mut t = Tape::new();
        let (xv, kv, bv) = (t.constant(x.clone()), t.constant(k.clone()), t.constant(b.clone()));
        let out = t.conv2d(xv, kv, Some(bv), stride, pad).unwrap();
        let want = naive_conv(&x, &k, Some(&b), stride, pad);
        assert!(max_diff(t.value(out), &want) < 1e-12, "stride {stride} pad {pad}");
    }
}

#[test]
fn avg_pool_matches_loop_oracle() {
    let x = Tensor4::normal([1, 4, 8, 8], 1.0, &mut rng(2));
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let out = t.avg_pool2d(xv, 4).unwrap();
    let got = t.value(out);
    for c in 0..4 {
        for y in 0..2 {
            for xx in 0..2 {
                let mut s = 0.0;
                for dy in 0..4 {
                    for dx in 0..4 {
                        s += x.at(0, c, y * 4 + dy, xx * 4 + dx);
                    }
                }
                assert!((got.at(0, c, y, xx) - s / 16.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_matches_ratio_form() {
    let mut r = rng(3);
    for _ in 0..50 {
        let l: Vec<f64> = (0..5).map(|_| r.random_range(-20.0..20.0)).collect();
        let s = softmax_vec(&l).unwrap();
        for i in 0..5 {
            // 1 / Σ_j exp(l_j - l_i) never forms the full exponentials.
            let want = 1.0 / l.iter().map(|lj| (lj - l[i]).exp()).sum::<f64>();
            assert!((s[i] - want).abs() < 1e-12);
        }
    }
}

fn exhaustive_nearest(codes: &Tensor4, z: &[f64]) -> usize {
    let [n, d, _, _] = codes.dims();
    let mut best = (f64::INFINITY, 0);
    for k in 0..n {
        let dist: f64 = (0..d).map(|c| (z[c] - codes.data()[k * d + c]).powi(2)).sum();
        if dist < best.0 {
            best = (dist, k);
        }
    }
    best.1
}

#[test]
fn quantizer_matches_exhaustive_scan() {
    let mut r = rng(4);
    let z = Tensor4::normal([1, 8, 4, 4], 1.0, &mut r);
    let codes = Tensor4::normal([16, 8, 1, 1], 1.0, &mut r);
    let mut cb = Codebook::from_codes(codes.clone()).unwrap();
    let res = quantize_nearest(&z, &mut cb).unwrap();
    for y in 0..4 {
        for x in 0..4 {
            let col: Vec<f64> = (0..8).map(|c| z.at(0, c, y, x)).collect();
            let k = exhaustive_nearest(&codes, &col);
            assert_eq!(res.index(0, y, x), k);
            for c in 0..8 {
                assert_eq!(res.quantized.at(0, c, y, x).to_bits(), codes.data()[k * 8 + c].to_bits());
            }
        }
    }
    assert_eq!(cb.usage().iter().sum::<u64>(), 16);
    let again = cb.lookup(&res.quantized).unwrap();
    assert_eq!(again.indices, res.indices);
}

#[test]
fn codebook_matching_loss_matches_formula() {
    let mut r = rng(5);
    let z = Tensor4::normal([2, 4, 3, 3], 1.0, &mut r);
    let zq = Tensor4::normal([2, 4, 3, 3], 1.0, &mut r);
    let mut t = Tape::new();
    let (a, b) = (t.constant(z.clone()), t.constant(zq.clone()));
    let l = codebook_matching_loss(&mut t, a, b, 0.25).unwrap();
    let m = mean_sq(z.data(), zq.data());
    assert!((t.value(l).data()[0] - 1.25 * m).abs() < 1e-12);
}

#[test]
fn histogram_helpers_match_direct_evaluation() {
    let mut r = rng(6);
    let n = 12;
    let codes = Tensor4::normal([n, 3, 1, 1], 1.0, &mut r);
    let cb = Codebook::from_codes(codes).unwrap();
    let results: Vec<_> = (0..4)
        .map(|_| cb.lookup(&Tensor4::normal([2, 3, 3, 5], 1.0, &mut r)).unwrap())
        .collect();
    let mut want = vec![0u64; n];
    for res in &results {
        for b in 0..2 {
            for y in 0..3 {
                for x in 0..5 {
                    want[res.index(b, y, x)] += 1;
                }
            }
        }
    }
    let got = activation_histogram(&results, n).unwrap();
    assert_eq!(got, want);
    assert_eq!(got.iter().sum::<u64>(), 4 * 2 * 3 * 5);

    let h1: Vec<u64> = (0..n).map(|_| r.random_range(0..50)).collect();
    let h2: Vec<u64> = (0..n).map(|_| r.random_range(1..50)).collect();
    let (s1, s2) = (h1.iter().sum::<u64>() as f64, h2.iter().sum::<u64>() as f64);
    let direct: f64 = (0..n).map(|i| (h1[i] as f64 / s1 - h2[i] as f64 / s2).abs()).sum();
    assert!((histogram_distance(&h1, &h2).unwrap() - direct).abs() < 1e-12);

    let mut sorted: Vec<(usize, u64)> = h1.iter().copied().enumerate().collect();
    sorted.sort_by_key(|&(i, c)| (std::cmp::Reverse(c), i));
    assert_eq!(top_k_codes(&h1, 5).unwrap(), sorted[..5].to_vec());
}

#[test]
fn skip_fusion_matches_direct_evaluation() {
    let mut r = rng(7);
    let mut fusion = FusionSet::new(
        &NetworkConfig {
            base_channels: 3,
            n_down: 1,
            ..NetworkConfig::default()
        },
        &mut r,
    );
    for i in 0..fusion.params.len() {
        let d = fusion.params.get(i).dims();
        *fusion.params.get_mut(i) = Tensor4::normal(d, 0.5, &mut r);
    }
    let f = fusion.levels[0];
    let fd = Tensor4::normal([2, 3, 4, 4], 1.0, &mut r);
    let fe = Tensor4::normal([2, 3, 4, 4], 1.0, &mut r);
    let cat = Tensor4::from_fn([2, 6, 4, 4], |[n, c, y, x]| {
        if c < 3 {
            fd.at(n, c, y, x)
        } else {
            fe.at(n, c - 3, y, x)
        }
    });
    let ab = naive_conv(
        &cat,
        fusion.params.get(f.conv.kernel),
        Some(fusion.params.get(f.conv.bias)),
        1,
        1,
    );
    let want = Tensor4::from_fn(fd.dims(), |[n, c, y, x]| ab.at(n, c, y, x) * fd.at(n, c, y, x) + ab.at(n, c + 3, y, x));
    let got = skip_fusion(&fd, &fe, &fusion.params, &f).unwrap();
    assert!(max_diff(&got, &want) < 1e-12);
}

#[test]
fn gram_matches_double_loop_and_is_psd() {
    let mut r = rng(8);
    let f = Tensor4::normal([1, 4, 5, 5], 1.0, &mut r);
    let g = gram_matrix(&f).unwrap();
    let want = naive_gram(&f, 0);
    assert_eq!(g.n_spatial, 25);
    for i in 0..4 {
        for j in 0..4 {
            assert!((g.get(i, j) - want[i][j]).abs() < 1e-12);
        }
    }
    assert!(g.asymmetry() < 1e-10);
    for _ in 0..100 {
        let v: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        assert!(g.quadratic_form(&v) >= -1e-9);
    }
}

#[test]
fn light_factor_matches_mlp_oracle() {
    let mut r = rng(9);
    let mut lqm = LqmState::new(&[3], 5, 0.2, &mut r).unwrap();
    for i in 0..lqm.params.len() {
        let d = lqm.params.get(i).dims();
        *lqm.params.get_mut(i) = Tensor4::normal(d, 0.5, &mut r);
    }
    let g = gram_matrix(&Tensor4::normal([1, 3, 4, 4], 1.0, &mut r)).unwrap();
    let lv = lqm.levels[0];
    let (w1, b1, w2, b2) = (
        lqm.params.get(lv.w1),
        lqm.params.get(lv.b1),
        lqm.params.get(lv.w2),
        lqm.params.get(lv.b2),
    );
    let hidden: Vec<f64> = (0..w1.dims()[1])
        .map(|j| {
            let s: f64 = (0..9).map(|i| g.values[i] * w1.data()[i * w1.dims()[1] + j]).sum::<f64>() + b1.data()[j];
            if s > 0.0 {
                s
            } else {
                0.2 * s
            }
        })
        .collect();
    let want: Vec<f64> = (0..5)
        .map(|k| (0..hidden.len()).map(|j| hidden[j] * w2.data()[j * 5 + k]).sum::<f64>() + b2.data()[k])
        .collect();
    let got = extract_light_factor(&g, &lqm, 0).unwrap();
    assert_eq!(got.d_l, 5);
    for k in 0..5 {
        assert!((got.values[k] - want[k]).abs() < 1e-12);
    }
}

fn factor(values: Vec<f64>, n_l: usize) -> LightFactor {
    LightFactor {
        d_l: values.len(),
        values,
        level: 0,
        n_l,
    }
}

fn contrastive_oracle(f: &[(Vec<f64>, i64)], m: f64) -> f64 {
    let mut total = 0.0;
    for a in 0..f.len() {
        for b in a + 1..f.len() {
            let dot: f64 = f[a].0.iter().zip(&f[b].0).map(|(x, y)| x * y).sum();
            let na: f64 = f[a].0.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = f[b].0.iter().map(|x| x * x).sum::<f64>().sqrt();
            let d = 1.0 - dot / (na * nb);
            let h = if f[a].1 == f[b].1 { (d - m).max(0.0) } else { (m - d).max(0.0) };
            total += h * h;
        }
    }
    total
}

#[test]
fn light_losses_match_direct_sums() {
    let mut r = rng(10);
    let fa: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
    let fb: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
    let want = fa.iter().zip(&fb).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (4.0 * 64.0 * 256.0);
    let got = light_consistency_loss(&factor(fa.clone(), 16), &factor(fb, 16)).unwrap();
    assert!((got - want).abs() < 1e-12);
    assert_eq!(light_consistency_loss(&factor(fa.clone(), 16), &factor(fa, 16)).unwrap(), 0.0);

    for _ in 0..20 {
        let entries: Vec<(Vec<f64>, i64)> = (0..6)
            .map(|_| ((0..4).map(|_| r.random_range(-1.0..1.0)).collect(), r.random_range(0..3)))
            .collect();
        let list: Vec<_> = entries.iter().map(|(v, l)| (factor(v.clone(), 4), *l)).collect();
        let got = lqm_contrastive_loss(&list, 0.1).unwrap();
        assert!((got - contrastive_oracle(&entries, 0.1)).abs() < 1e-10);
    }
    // cos 0.5 between same-label factors: (0.5 - 0.1)² = 0.16.
    let s3 = 3f64.sqrt();
    let pair = [(factor(vec![1.0, 0.0], 1), 1), (factor(vec![0.5, s3 / 2.0], 1), 1)];
    assert!((lqm_contrastive_loss(&pair, 0.1).unwrap() - 0.16).abs() < 1e-12);
}

#[test]
fn prompt_weights_match_pipeline_oracle() {
    let mut r = rng(11);
    let mut bank = PromptBank::new("p", 4, 3, 0.2, &mut r).unwrap();
    for i in 0..bank.params.len() {
        let d = bank.params.get(i).dims();
        *bank.params.get_mut(i) = Tensor4::normal(d, 0.7, &mut r);
    }
    let f = Tensor4::normal([2, 3, 8, 8], 1.0, &mut r);
    let pw = prompt_weights(&f, &bank, 2).unwrap();
    assert_eq!(pw.grid, (4, 4));
    let k = bank.params.get(bank.shrink.kernel);
    let b = bank.params.get(bank.shrink.bias);
    let mut patch = 0;
    for n in 0..2 {
        for py in 0..4 {
            for px in 0..4 {
                let pooled: Vec<f64> = (0..3)
                    .map(|c| {
                        let mut s = 0.0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                s += f.at(n, c, py * 2 + dy, px * 2 + dx);
                            }
                        }
                        s / 4.0
                    })
                    .collect();
                let logits: Vec<f64> = (0..4)
                    .map(|o| b.data()[o] + (0..3).map(|c| k.at(o, c, 0, 0) * pooled[c]).sum::<f64>())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                for o in 0..4 {
                    assert!((pw.patch(patch)[o] - (logits[o] - mx).exp() / z).abs() < 1e-12);
                }
                patch += 1;
            }
        }
    }
    assert!(pw.max_sum_error() < 1e-10);
}

#[test]
fn compose_matches_weighted_sum_then_conv() {
    let mut r = rng(12);
    let mut bank = PromptBank::new("p", 3, 2, 0.2, &mut r).unwrap();
    for i in 0..bank.params.len() {
        let d = bank.params.get(i).dims();
        *bank.params.get_mut(i) = Tensor4::normal(d, 0.7, &mut r);
    }
    let w = Tensor4::uniform([2 * 4, 3, 1, 1], 0.0, 1.0, &mut r);
    let pw = PromptWeights {
        weights: w.clone(),
        batch: 2,
        grid: (2, 2),
    };
    let got = compose_prompt(&pw, &bank, 6, 6).unwrap();
    let prompts = bank.params.get(bank.prompts_index());
    let tiled = Tensor4::from_fn([2, 2, 6, 6], |[n, c, y, x]| {
        let patch = n * 4 + (y / 3) * 2 + x / 3;
        (0..3).map(|k| w.data()[patch * 3 + k] * prompts.data()[k * 2 + c]).sum()
    });
    let want = naive_conv(
        &tiled,
        bank.params.get(bank.compose.kernel),
        Some(bank.params.get(bank.compose.bias)),
        1,
        1,
    );
    assert!(max_diff(&got, &want) < 1e-12);

    let all: Vec<PromptWeights> = (0..3)
        .map(|_| {
            let raw = Tensor4::uniform([4, 3, 1, 1], 0.1, 1.0, &mut r);
            let norm = Tensor4::from_fn(raw.dims(), |[n, c, _, _]| {
                raw.at(n, c, 0, 0) / (0..3).map(|k| raw.at(n, k, 0, 0)).sum::<f64>()
            });
            PromptWeights {
                weights: norm,
                batch: 1,
                grid: (2, 2),
            }
        })
        .collect();
    let mean = mean_prompt_weights(&all).unwrap();
    for k in 0..3 {
        let direct: f64 = all.iter().map(|p| (0..4).map(|i| p.patch(i)[k]).sum::<f64>()).sum::<f64>() / 12.0;
        assert!((mean[k] - direct).abs() < 1e-12);
    }
    assert!((mean.iter().sum::<f64>() - 1.0).abs() < 1e-10);
}

#[test]
fn losses_match_direct_evaluation() {
    let mut r = rng(13);
    let a = Tensor4::uniform([2, 3, 8, 8], 0.0, 1.0, &mut r);
    let b = Tensor4::uniform([2, 3, 8, 8], 0.0, 1.0, &mut r);
    let l1: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    assert!((l1_loss(&a, &b).unwrap() - l1).abs() < 1e-12);

    let real = Tensor4::normal([1, 1, 4, 4], 3.0, &mut r);
    let fake = Tensor4::normal([1, 1, 4, 4], 3.0, &mut r);
    let mean = |t: &Tensor4, f: &dyn Fn(f64) -> f64| t.data().iter().map(|&v| f(v)).sum::<f64>() / t.len() as f64;
    let d_want = 0.1 * mean(&real, &log_sigmoid_ref) + mean(&fake, &|v| log_sigmoid_ref(-v));
    let g_want = -0.1 * mean(&fake, &log_sigmoid_ref);
    assert!((adversarial_loss(&real, &fake, 0.1, AdvSide::Discriminator).unwrap() - d_want).abs() < 1e-10);
    assert!((adversarial_loss(&real, &fake, 0.1, AdvSide::Generator).unwrap() - g_want).abs() < 1e-10);
    let zero = Tensor4::zeros([1, 1, 2, 2]);
    let v = adversarial_loss(&zero, &zero, 0.1, AdvSide::Discriminator).unwrap();
    assert!((v - 1.1 * 0.5f64.ln()).abs() < 1e-15);

    let z = Tensor4::normal([2, 3, 2, 2], 1.0, &mut r);
    let zq = Tensor4::normal([2, 3, 2, 2], 1.0, &mut r);
    let mut gram_sq = 0.0;
    for n in 0..2 {
        let (gz, gq) = (naive_gram(&z, n), naive_gram(&zq, n));
        for i in 0..3 {
            for j in 0..3 {
                gram_sq += (gz[i][j] - gq[i][j]).powi(2);
            }
        }
    }
    let want = 0.25 * mean_sq(z.data(), zq.data()) + gram_sq / 18.0;
    assert!((feature_matching_loss(&z, &zq, 0.25).unwrap() - want).abs() < 1e-12);

    let px = PerceptualExtractor::new(99, 3);
    let stages = |img: &Tensor4| {
        let mut h = img.clone();
        let mut out = Vec::new();
        for (s, stride) in [(0, 1), (1, 2), (2, 2)] {
            h = leaky(&naive_conv(&h, px.params.get(2 * s), Some(px.params.get(2 * s + 1)), stride, 1), 0.2);
            out.push(h.clone());
        }
        out
    };
    let (fa, fb) = (stages(&a), stages(&b));
    let staged = l1 + (0..3).map(|s| mean_sq(fa[s].data(), fb[s].data())).sum::<f64>();
    assert!((reconstruction_loss(&a, &b, &px).unwrap() - staged).abs() < 1e-10);
    assert_eq!(reconstruction_loss(&a, &a, &px).unwrap(), 0.0);

    let parts = LossParts {
        adv: r.random(),
        fml: r.random(),
        rec: r.random(),
        lcl: r.random(),
    };
    let want = parts.adv + parts.fml + parts.rec + 0.5 * parts.lcl;
    assert!((total_loss(&parts, 0.5).unwrap() - want).abs() < 1e-12);
}

#[test]
fn adam_matches_scalar_reference_on_quadratic() {
    // f(p) = Σ c_i (p_i - t_i)², grad = 2 c_i (p_i - t_i).
    let mut r = rng(14);
    let c: Vec<f64> = (0..6).map(|_| r.random_range(0.5..3.0)).collect();
    let target: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
    let init: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
    let cfg = AdamConfig {
        lr: 0.05,
        ..AdamConfig::default()
    };
    let mut set = ParamSet::new("q");
    set.push("p", Tensor4::new([6, 1, 1, 1], init.clone()).unwrap());
    let mut adam = Adam::new(&set, cfg);

    let (mut p, mut m, mut v) = (init, vec![0.0; 6], vec![0.0; 6]);
    for t in 1..=10 {
        let g: Vec<f64> = (0..6).map(|i| 2.0 * c[i] * (set.get(0).data()[i] - target[i])).collect();
        adam.step(&mut set, &[Tensor4::new([6, 1, 1, 1], g).unwrap()]).unwrap();
        for i in 0..6 {
            let gi = 2.0 * c[i] * (p[i] - target[i]);
            m[i] = 0.9 * m[i] + 0.1 * gi;
            v[i] = 0.999 * v[i] + 0.001 * gi * gi;
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            p[i] -= 0.05 * mh / (vh.sqrt() + 1e-8);
        }
        for i in 0..6 {
            assert!((set.get(0).data()[i] - p[i]).abs() < 1e-12, "step {t}");
        }
    }
    assert_eq!(adam.steps(), 10);
}

/// Two-pass windowed SSIM over explicit window vectors.
fn ssim_oracle(a: &Tensor4, b: &Tensor4) -> f64 {
    let [_, c, h, w] = a.dims();
    let gray = |t: &Tensor4, y: usize, x: usize| (0..c).map(|ch| t.at(0, ch, y, x)).sum::<f64>() / c as f64;
    let win = 8.min(h).min(w);
    let mut scores = Vec::new();
    for oy in 0..=h - win {
        for ox in 0..=w - win {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for y in oy..oy + win {
                for x in ox..ox + win {
                    xs.push(gray(a, y, x));
                    ys.push(gray(b, y, x));
                }
            }
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
            let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
            let cov = xs.iter().zip(&ys).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / n;
            let (c1, c2) = (1e-4, 9e-4);
            scores.push((2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)));
        }
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

#[test]
fn metrics_match_reference_implementations() {
    let mut r = rng(15);
    for _ in 0..5 {
        let a = Tensor4::uniform([1, 3, 16, 12], 0.0, 1.0, &mut r);
        let noise = Tensor4::normal(a.dims(), 0.1, &mut r);
        let b = Tensor4::from_fn(a.dims(), |[n, c, y, x]| (a.at(n, c, y, x) + noise.at(n, c, y, x)).clamp(0.0, 1.0));
        let mse = mean_sq(a.data(), b.data());
        assert!((psnr(&a, &b, 1.0).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-10);
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-8);
    }
}

#[test]
fn scene_brightness_and_degrade_mean() {
    let means: Vec<f64> = (0..100).map(|s| synth_scene(s, 32, 32).mean()).collect();
    let avg = means.iter().sum::<f64>() / 100.0;
    assert!((0.35..=0.65).contains(&avg), "mean brightness {avg}");
    let mut r = rng(16);
    for s in 0..50 {
        let img = synth_scene(1000 + s, 16, 16);
        let p = DegradeParams {
            gamma: r.random_range(1.0..3.5),
            gain: r.random_range(0.05..=1.0),
            noise_sigma: 0.0,
            seed: s,
        };
        let out = degrade(&img, &p);
        assert!(out.mean() <= img.mean() + 1e-15);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

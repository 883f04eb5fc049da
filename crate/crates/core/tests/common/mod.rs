//! Independent reference implementations used as test oracles.

#![allow(dead_code)]

pub mod criteria;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rarematch::backbone::{softmax, zeros_like, BackboneSpec, Batch, ModelState, NormMode, ParamSet};

pub type Params64 = BTreeMap<String, Vec<f64>>;

pub fn to_f64(set: &ParamSet) -> Params64 {
    set.iter()
        .map(|(k, t)| (k.clone(), t.data.iter().map(|&v| v as f64).collect()))
        .collect()
}

/// Straight-line f64 forward pass of the conv/norm/relu/pool network.
/// `running` selects eval-mode normalisation with the given statistics;
/// otherwise batch statistics (biased variance) are used.
pub fn reference_logits(
    spec: &BackboneSpec,
    p: &Params64,
    running: Option<&Params64>,
    input: &[f64],
    n: usize,
) -> Vec<f64> {
    reference_forward(spec, p, running, input, n).0
}

/// Logits plus the activation pattern: every ReLU on/off decision and every
/// max-pool winner. Two parameter points with equal patterns lie in the same
/// smooth region of the network.
pub fn reference_forward(
    spec: &BackboneSpec,
    p: &Params64,
    running: Option<&Params64>,
    input: &[f64],
    n: usize,
) -> (Vec<f64>, Vec<u8>) {
    let eps = 1e-5;
    let mut pattern = Vec::new();
    let (mut c, mut h, mut w) = (spec.channels, spec.height, spec.width);
    let mut x = input.to_vec();
    for (bi, &cout) in spec.widths.iter().enumerate() {
        let b = bi + 1;
        let wt = &p[&format!("conv{b}.weight")];
        let bias = &p[&format!("conv{b}.bias")];
        let at = |x: &Vec<f64>, i: usize, ch: usize, y: isize, xx: isize| -> f64 {
            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                0.0
            } else {
                x[((i * c + ch) * h + y as usize) * w + xx as usize]
            }
        };
        let mut y = vec![0.0; n * cout * h * w];
        for i in 0..n {
            for co in 0..cout {
                for py in 0..h {
                    for px in 0..w {
                        let mut acc = bias[co];
                        for ci in 0..c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    acc += wt[((co * c + ci) * 3 + ky) * 3 + kx]
                                        * at(&x, i, ci, py as isize + ky as isize - 1, px as isize + kx as isize - 1);
                                }
                            }
                        }
                        y[((i * cout + co) * h + py) * w + px] = acc;
                    }
                }
            }
        }
        let gamma = &p[&format!("bn{b}.weight")];
        let beta = &p[&format!("bn{b}.bias")];
        let m = (n * h * w) as f64;
        for co in 0..cout {
            let idx: Vec<usize> = (0..n)
                .flat_map(|i| (0..h * w).map(move |k| (i * cout + co) * h * w + k))
                .collect();
            let (mean, var) = match running {
                Some(r) => (r[&format!("bn{b}.running_mean")][co], r[&format!("bn{b}.running_var")][co]),
                None => {
                    let mean = idx.iter().map(|&k| y[k]).sum::<f64>() / m;
                    let var = idx.iter().map(|&k| (y[k] - mean).powi(2)).sum::<f64>() / m;
                    (mean, var)
                }
            };
            for &k in &idx {
                let z = gamma[co] * (y[k] - mean) / (var + eps).sqrt() + beta[co];
                pattern.push((z > 0.0) as u8);
                y[k] = z.max(0.0);
            }
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut pooled = vec![0.0; n * cout * oh * ow];
        for i in 0..n {
            for co in 0..cout {
                for py in 0..oh {
                    for px in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = 0u8;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let v = y[((i * cout + co) * h + 2 * py + dy) * w + 2 * px + dx];
                                if v > best {
                                    best = v;
                                    arg = (2 * dy + dx) as u8;
                                }
                            }
                        }
                        pattern.push(arg);
                        pooled[((i * cout + co) * oh + py) * ow + px] = best;
                    }
                }
            }
        }
        x = pooled;
        c = cout;
        h = oh;
        w = ow;
    }
    let fw = &p["fc.weight"];
    let fb = &p["fc.bias"];
    let mut logits = vec![0.0; n * 2];
    for i in 0..n {
        let feat: Vec<f64> = (0..c)
            .map(|ch| x[(i * c + ch) * h * w..(i * c + ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
            .collect();
        for k in 0..2 {
            logits[i * 2 + k] = fb[k] + (0..c).map(|j| fw[k * c + j] * feat[j]).sum::<f64>();
        }
    }
    (logits, pattern)
}

/// Mean two-class cross-entropy, computed directly from its definition.
pub fn reference_cross_entropy(logits: &[f64], labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let (a, b) = (logits[2 * i], logits[2 * i + 1]);
            let lse = a.max(b) + ((a - a.max(b)).exp() + (b - a.max(b)).exp()).ln();
            lse - logits[2 * i + y]
        })
        .sum::<f64>()
        / labels.len() as f64
}

/// ROC area by sweeping thresholds and integrating with the trapezoid rule.
pub fn trapezoid_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let (mut tp, mut fp, mut prev_tpr, mut prev_fpr, mut area) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        let (tpr, fpr) = (tp / pos, fp / neg);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    area
}

/// Average precision by enumerating every distinct threshold and summing
/// precision times the recall increment.
pub fn enumerated_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| labels[i]).count() as f64;
        let recall = tp / pos;
        let precision = tp / selected.len() as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

pub struct GradReport {
    pub checked: usize,
    /// Samples redrawn because the stencil straddled a ReLU or max-pool kink.
    pub redrawn: usize,
    pub max_rel_err: f64,
    pub max_conv_bias_grad: f64,
    pub lines: Vec<String>,
}

/// Compares analytic gradients of the mean cross-entropy (f32 network,
/// train-mode normalisation) with central differences of the f64 reference.
///
/// Parameters are drawn by picking a tensor uniformly, then an element, so
/// every layer is exercised. Central differences are only valid where the
/// loss is smooth across `[theta - eps, theta + eps]`; a draw whose stencil
/// changes the activation pattern is redrawn and counted.
pub fn gradient_check(samples: usize, eps: f64, seed: u64) -> GradReport {
    let spec = BackboneSpec::with_input(3, 16, 16);
    let state = ModelState::new(spec.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let n = 4;
    let batch = Batch {
        n,
        c: spec.channels,
        h: spec.height,
        w: spec.width,
        data: (0..n * spec.input_len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
    };
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let net = state.net();
    let mut stats = state.stats.clone();
    let pass = net.forward(&state.params, &mut stats, &batch, NormMode::BatchOnly, true).unwrap();
    let mut dlogits = vec![0.0f32; 2 * n];
    for i in 0..n {
        let p = softmax(pass.row(i));
        for k in 0..2 {
            let target = if labels[i] == k { 1.0 } else { 0.0 };
            dlogits[2 * i + k] = ((p[k] - target) / n as f64) as f32;
        }
    }
    let mut grads = zeros_like(&state.params);
    net.backward_into(&state.params, &pass, &dlogits, &mut grads).unwrap();

    let input: Vec<f64> = batch.data.iter().map(|&v| v as f64).collect();
    let base = to_f64(&state.params);
    let (_, base_pattern) = reference_forward(&spec, &base, None, &input, n);
    let eval = |p: &Params64| {
        let (logits, pattern) = reference_forward(&spec, p, None, &input, n);
        (reference_cross_entropy(&logits, &labels), pattern)
    };

    // Conv biases feed straight into batch normalisation, which removes any
    // constant shift, so their true gradient is identically zero.
    let is_conv_bias = |k: &str| k.starts_with("conv") && k.ends_with("bias");
    let max_conv_bias_grad = grads
        .iter()
        .filter(|(k, _)| is_conv_bias(k))
        .flat_map(|(_, t)| t.data.iter().map(|v| v.abs() as f64))
        .fold(0.0, f64::max);
    let tensors: Vec<&String> = grads.keys().filter(|k| !is_conv_bias(k)).collect();

    let mut report = GradReport {
        checked: 0,
        redrawn: 0,
        max_rel_err: 0.0,
        max_conv_bias_grad,
        lines: Vec::new(),
    };
    while report.checked < samples {
        let name = tensors[rng.gen_range(0..tensors.len())];
        let i = rng.gen_range(0..grads[name].len());
        let mut plus = base.clone();
        plus.get_mut(name).unwrap()[i] += eps;
        let mut minus = base.clone();
        minus.get_mut(name).unwrap()[i] -= eps;
        let (lp, pp) = eval(&plus);
        let (lm, pm) = eval(&minus);
        if pp != base_pattern || pm != base_pattern {
            report.redrawn += 1;
            assert!(report.redrawn < 20 * samples, "almost every stencil crosses a kink");
            continue;
        }
        let numeric = (lp - lm) / (2.0 * eps);
        let analytic = grads[name].data[i] as f64;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.checked += 1;
        report
            .lines
            .push(format!("{name}[{i}] analytic {analytic:.6e} numeric {numeric:.6e} rel {rel:.2e}"));
    }
    report
}

//! Training losses: L1 reconstruction, the contrastive ratio loss over
//! extractor features, and two ablation alternatives (InfoNCE, perceptual).
//!
//! Loss functions here operate on already-extracted feature maps and return
//! gradients with respect to those features; callers chain them through
//! [`crate::embedding::Extractor::backward_to_input`].

use ndarray::Array4;

use crate::error::{Error, Result};

/// Default denominator guard for the contrastive ratio.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Scalar summary of one training step's loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub total: f64,
    pub rec_student: f64,
    pub rec_teacher: f64,
    pub contrastive: f64,
}

/// Mean absolute error over every element.
pub fn reconstruction_loss(pred: &Array4<f64>, target: &Array4<f64>) -> f64 {
    assert_eq!(pred.dim(), target.dim());
    let n = pred.len() as f64;
    pred.iter()
        .zip(target.iter())
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n
}

/// [`reconstruction_loss`] plus its gradient w.r.t. `pred`
/// (`sign(pred - target) / n`, with `sign(0) = 0`).
pub fn reconstruction_loss_with_grad(
    pred: &Array4<f64>,
    target: &Array4<f64>,
) -> (f64, Array4<f64>) {
    assert_eq!(pred.dim(), target.dim());
    let n = pred.len() as f64;
    let mut grad = pred.clone();
    let mut total = 0.0;
    grad.zip_mut_with(target, |g, &t| {
        let d = *g - t;
        total += d.abs();
        *g = d.signum() * (d != 0.0) as u8 as f64 / n;
    });
    (total / n, grad)
}

/// Per-item mean absolute distance between two feature maps:
/// `out[b] = mean_chw |a[b] - b[b]|`.
fn item_l1(a: &Array4<f64>, b: &Array4<f64>) -> Vec<f64> {
    assert_eq!(a.dim(), b.dim());
    let (bs, c, h, w) = a.dim();
    let n = (c * h * w) as f64;
    (0..bs)
        .map(|i| {
            a.index_axis(ndarray::Axis(0), i)
                .iter()
                .zip(b.index_axis(ndarray::Axis(0), i).iter())
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / n
        })
        .collect()
}

fn check_feature_shapes(
    anchor: &[Array4<f64>],
    positive: &[Array4<f64>],
    negatives: &[Vec<Array4<f64>>],
    weights: &[f64],
) -> Result<()> {
    if anchor.len() != positive.len() || anchor.len() != weights.len() {
        return Err(Error::Shape(format!(
            "tap count mismatch: anchor {}, positive {}, weights {}",
            anchor.len(),
            positive.len(),
            weights.len()
        )));
    }
    for (j, (a, p)) in anchor.iter().zip(positive).enumerate() {
        if a.dim() != p.dim() {
            return Err(Error::Shape(format!(
                "tap {j}: anchor {:?} vs positive {:?}",
                a.dim(),
                p.dim()
            )));
        }
    }
    for (k, neg) in negatives.iter().enumerate() {
        if neg.len() != anchor.len() {
            return Err(Error::Shape(format!(
                "negative {k} has {} taps, expected {}",
                neg.len(),
                anchor.len()
            )));
        }
        for (j, (a, n)) in anchor.iter().zip(neg).enumerate() {
            if a.dim() != n.dim() {
                return Err(Error::Shape(format!(
                    "negative {k} tap {j}: {:?} vs anchor {:?}",
                    n.dim(),
                    a.dim()
                )));
            }
        }
    }
    Ok(())
}

/// Contrastive ratio loss over per-tap features:
///
/// `L = mean_b sum_j w_j * d_j(anchor, positive) / (sum_k d_j(anchor, neg_k) + eps)`
///
/// where `d_j` is the per-item mean absolute feature distance at tap `j`.
/// Shrinking the numerator pulls the anchor toward the positive; growing the
/// denominator pushes it away from every negative.
pub fn contrastive_loss(
    anchor: &[Array4<f64>],
    positive: &[Array4<f64>],
    negatives: &[Vec<Array4<f64>>],
    weights: &[f64],
    epsilon: f64,
) -> Result<f64> {
    check_feature_shapes(anchor, positive, negatives, weights)?;
    let bs = anchor[0].dim().0;
    let mut loss = 0.0;
    for (j, w) in weights.iter().enumerate() {
        let num = item_l1(&anchor[j], &positive[j]);
        let mut den = vec![0.0; bs];
        for neg in negatives {
            for (d, v) in den.iter_mut().zip(item_l1(&anchor[j], &neg[j])) {
                *d += v;
            }
        }
        for b in 0..bs {
            loss += w * num[b] / (den[b] + epsilon);
        }
    }
    Ok(loss / bs as f64)
}

/// Loss value plus gradients with respect to the anchor and positive
/// features. The positive gradient is only consumed when the caller does not
/// stop-gradient the teacher branch.
pub struct ContrastiveParts {
    pub loss: f64,
    pub anchor_grads: Vec<Array4<f64>>,
    pub positive_grads: Vec<Array4<f64>>,
}

pub fn contrastive_loss_with_grad(
    anchor: &[Array4<f64>],
    positive: &[Array4<f64>],
    negatives: &[Vec<Array4<f64>>],
    weights: &[f64],
    epsilon: f64,
) -> Result<ContrastiveParts> {
    check_feature_shapes(anchor, positive, negatives, weights)?;
    let bs = anchor[0].dim().0;
    let inv_b = 1.0 / bs as f64;
    let mut loss = 0.0;
    let mut anchor_grads = Vec::with_capacity(anchor.len());
    let mut positive_grads = Vec::with_capacity(anchor.len());

    for (j, w) in weights.iter().enumerate() {
        let a = &anchor[j];
        let p = &positive[j];
        let (_, c, h, wd) = a.dim();
        let n = (c * h * wd) as f64;
        let num = item_l1(a, p);
        let mut den = vec![0.0; bs];
        for neg in negatives {
            for (d, v) in den.iter_mut().zip(item_l1(a, &neg[j])) {
                *d += v;
            }
        }

        let mut ga = Array4::<f64>::zeros(a.dim());
        let mut gp = Array4::<f64>::zeros(a.dim());
        for b in 0..bs {
            let d_eps = den[b] + epsilon;
            loss += w * num[b] / d_eps;

            // d(num/d_eps)/dA = (dnum * d_eps - num * dden) / d_eps^2, with
            // dnum/dA_i = sign(A_i - P_i)/n and dden/dA_i = sum_k sign(A_i - N_ki)/n.
            let coeff_num = w * inv_b / d_eps;
            let coeff_den = -w * inv_b * num[b] / (d_eps * d_eps);
            {
                let av = a.index_axis(ndarray::Axis(0), b);
                let pv = p.index_axis(ndarray::Axis(0), b);
                let mut gav = ga.index_axis_mut(ndarray::Axis(0), b);
                let mut gpv = gp.index_axis_mut(ndarray::Axis(0), b);
                ndarray::Zip::from(&mut gav)
                    .and(&mut gpv)
                    .and(&av)
                    .and(&pv)
                    .for_each(|gai, gpi, &ai, &pi| {
                        let s = (ai - pi).signum() * ((ai - pi) != 0.0) as u8 as f64;
                        *gai += coeff_num * s / n;
                        *gpi -= coeff_num * s / n;
                    });
                for neg in negatives {
                    let nv = neg[j].index_axis(ndarray::Axis(0), b);
                    ndarray::Zip::from(&mut gav).and(&av).and(&nv).for_each(
                        |gai, &ai, &ni| {
                            let s = (ai - ni).signum() * ((ai - ni) != 0.0) as u8 as f64;
                            *gai += coeff_den * s / n;
                        },
                    );
                }
            }
        }
        anchor_grads.push(ga);
        positive_grads.push(gp);
    }
    Ok(ContrastiveParts {
        loss: loss * inv_b,
        anchor_grads,
        positive_grads,
    })
}

/// Perceptual variant: the weighted feature-space L1 alone, with no
/// negatives in play.
///
/// `L = mean_b sum_j w_j * d_j(anchor, positive)`
pub fn perceptual_loss_with_grad(
    anchor: &[Array4<f64>],
    positive: &[Array4<f64>],
    weights: &[f64],
) -> Result<ContrastiveParts> {
    check_feature_shapes(anchor, positive, &[], weights)?;
    let bs = anchor[0].dim().0;
    let inv_b = 1.0 / bs as f64;
    let mut loss = 0.0;
    let mut anchor_grads = Vec::with_capacity(anchor.len());
    let mut positive_grads = Vec::with_capacity(anchor.len());
    for (j, w) in weights.iter().enumerate() {
        let a = &anchor[j];
        let p = &positive[j];
        let (_, c, h, wd) = a.dim();
        let n = (c * h * wd) as f64;
        for v in item_l1(a, p) {
            loss += w * v;
        }
        let mut ga = a.clone();
        ga.zip_mut_with(p, |g, &pv| {
            let d = *g - pv;
            *g = w * inv_b * d.signum() * (d != 0.0) as u8 as f64 / n;
        });
        positive_grads.push(ga.mapv(|v| -v));
        anchor_grads.push(ga);
    }
    Ok(ContrastiveParts {
        loss: loss * inv_b,
        anchor_grads,
        positive_grads,
    })
}

/// InfoNCE over the deepest tap: features are flattened per item and
/// L2-normalized, similarities are cosine / `temperature`, and the positive
/// must win a softmax against the negatives.
pub fn infonce_loss_with_grad(
    anchor: &Array4<f64>,
    positive: &Array4<f64>,
    negatives: &[Array4<f64>],
    temperature: f64,
) -> Result<ContrastiveParts> {
    if anchor.dim() != positive.dim() {
        return Err(Error::Shape(format!(
            "anchor {:?} vs positive {:?}",
            anchor.dim(),
            positive.dim()
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let (bs, c, h, w) = anchor.dim();
    let n = c * h * w;
    let inv_b = 1.0 / bs as f64;

    let flat = |t: &Array4<f64>, b: usize| -> Vec<f64> {
        t.index_axis(ndarray::Axis(0), b).iter().copied().collect()
    };
    let norm = |v: &[f64]| -> f64 { v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12) };
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };

    let mut loss = 0.0;
    let mut ga = Array4::<f64>::zeros(anchor.dim());
    let mut gp = Array4::<f64>::zeros(anchor.dim());

    for b in 0..bs {
        let fa = flat(anchor, b);
        let na = norm(&fa);
        let ua: Vec<f64> = fa.iter().map(|v| v / na).collect();

        let mut others: Vec<(Vec<f64>, f64)> = Vec::with_capacity(1 + negatives.len());
        let fp = flat(positive, b);
        let np = norm(&fp);
        others.push((fp.iter().map(|v| v / np).collect(), np));
        for neg in negatives {
            let fn_ = flat(neg, b);
            let nn = norm(&fn_);
            others.push((fn_.iter().map(|v| v / nn).collect(), nn));
        }

        let logits: Vec<f64> = others
            .iter()
            .map(|(u, _)| dot(&ua, u) / temperature)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        loss -= (probs[0].max(1e-300)).ln();

        // dL/dlogit_i = p_i - [i == 0]; chain through the cosine and the
        // normalizations of both sides.
        let mut gua = vec![0.0; n];
        for (i, (u, _)) in others.iter().enumerate() {
            let glogit = (probs[i] - if i == 0 { 1.0 } else { 0.0 }) / temperature;
            for (g, uv) in gua.iter_mut().zip(u) {
                *g += glogit * uv;
            }
            if i == 0 {
                // Positive side: d(ua . up)/d fp = (ua - (ua . up) up) / |fp|.
                let cos = dot(&ua, u);
                let (_, npv) = (&others[0].0, others[0].1);
                let mut gslice = gp.index_axis_mut(ndarray::Axis(0), b);
                let gs = gslice.as_slice_mut().expect("standard layout");
                for idx in 0..n {
                    gs[idx] += inv_b * glogit * (ua[idx] - cos * u[idx]) / npv;
                }
            }
        }
        // Anchor side: d(ua)/d fa pulls out the radial component.
        let proj = dot(&gua, &ua);
        let mut gslice = ga.index_axis_mut(ndarray::Axis(0), b);
        let gs = gslice.as_slice_mut().expect("standard layout");
        for idx in 0..n {
            gs[idx] += inv_b * (gua[idx] - proj * ua[idx]) / na;
        }
    }

    Ok(ContrastiveParts {
        loss: loss * inv_b,
        anchor_grads: vec![ga],
        positive_grads: vec![gp],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn(dim, || rng.random_range(-1.0..1.0))
    }

    /// Literal scalar-loop contrastive oracle, no shared code with the
    /// implementation beyond the formula.
    fn contrastive_oracle(
        anchor: &[Array4<f64>],
        positive: &[Array4<f64>],
        negatives: &[Vec<Array4<f64>>],
        weights: &[f64],
        epsilon: f64,
    ) -> f64 {
        let bs = anchor[0].dim().0;
        let mut total = 0.0;
        for b in 0..bs {
            for (j, w) in weights.iter().enumerate() {
                let (_, c, h, wd) = anchor[j].dim();
                let mut num = 0.0;
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..wd {
                            num += (anchor[j][[b, ch, y, x]] - positive[j][[b, ch, y, x]]).abs();
                        }
                    }
                }
                num /= (c * h * wd) as f64;
                let mut den = 0.0;
                for neg in negatives {
                    let mut d = 0.0;
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..wd {
                                d += (anchor[j][[b, ch, y, x]] - neg[j][[b, ch, y, x]]).abs();
                            }
                        }
                    }
                    den += d / (c * h * wd) as f64;
                }
                total += w * num / (den + epsilon);
            }
        }
        total / bs as f64
    }

    fn fixture(
        rng: &mut ChaCha8Rng,
        k: usize,
    ) -> (Vec<Array4<f64>>, Vec<Array4<f64>>, Vec<Vec<Array4<f64>>>, Vec<f64>) {
        let dims = [(2, 3, 4, 4), (2, 5, 2, 2)];
        let anchor: Vec<_> = dims.iter().map(|&d| rand4(rng, d)).collect();
        let positive: Vec<_> = dims.iter().map(|&d| rand4(rng, d)).collect();
        let negatives: Vec<Vec<_>> = (0..k)
            .map(|_| dims.iter().map(|&d| rand4(rng, d)).collect())
            .collect();
        (anchor, positive, negatives, vec![0.5, 1.0])
    }

    #[test]
    fn reconstruction_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand4(&mut rng, (2, 3, 5, 4));
        let b = rand4(&mut rng, (2, 3, 5, 4));
        let mut want = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            want += (x - y).abs();
        }
        want /= a.len() as f64;
        assert!((reconstruction_loss(&a, &b) - want).abs() <= 1e-6);
        let (l, _) = reconstruction_loss_with_grad(&a, &b);
        assert!((l - want).abs() <= 1e-12);
    }

    #[test]
    fn reconstruction_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand4(&mut rng, (1, 2, 3, 3));
        let b = rand4(&mut rng, (1, 2, 3, 3));
        let (_, g) = reconstruction_loss_with_grad(&a, &b);
        let eps = 1e-7;
        for _ in 0..20 {
            let idx = [
                0,
                rng.random_range(0..2),
                rng.random_range(0..3),
                rng.random_range(0..3),
            ];
            let mut ap = a.clone();
            ap[idx] += eps;
            let mut am = a.clone();
            am[idx] -= eps;
            let fd =
                (reconstruction_loss(&ap, &b) - reconstruction_loss(&am, &b)) / (2.0 * eps);
            assert!((g[idx] - fd).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn contrastive_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (anchor, positive, negatives, weights) = fixture(&mut rng, 3);
        let got = contrastive_loss(&anchor, &positive, &negatives, &weights, 1e-8).unwrap();
        let want = contrastive_oracle(&anchor, &positive, &negatives, &weights, 1e-8);
        assert!((got - want).abs() <= 1e-6, "got {got}, want {want}");
        let parts =
            contrastive_loss_with_grad(&anchor, &positive, &negatives, &weights, 1e-8).unwrap();
        assert!((parts.loss - want).abs() <= 1e-12);
    }

    #[test]
    fn contrastive_is_exactly_zero_at_the_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (anchor, _, negatives, weights) = fixture(&mut rng, 2);
        let same = anchor.clone();
        let loss = contrastive_loss(&anchor, &same, &negatives, &weights, 1e-8).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn closer_negatives_raise_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (anchor, positive, _, weights) = fixture(&mut rng, 0);
        let noise: Vec<Array4<f64>> = anchor
            .iter()
            .map(|a| rand4(&mut rng, a.dim()))
            .collect();
        let at = |delta: f64| -> f64 {
            let negs: Vec<Vec<Array4<f64>>> = vec![anchor
                .iter()
                .zip(&noise)
                .map(|(a, n)| a + &n.mapv(|v| v * delta))
                .collect()];
            contrastive_loss(&anchor, &positive, &negs, &weights, 1e-8).unwrap()
        };
        let far = at(1.0);
        let near = at(0.1);
        let nearer = at(0.01);
        assert!(near > far, "near {near} should exceed far {far}");
        assert!(nearer > near, "nearer {nearer} should exceed near {near}");
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (anchor, positive, negatives, weights) = fixture(&mut rng, 2);
        let parts =
            contrastive_loss_with_grad(&anchor, &positive, &negatives, &weights, 1e-8).unwrap();
        let eps = 1e-7;
        for j in 0..2 {
            let dim = anchor[j].dim();
            for _ in 0..15 {
                let idx = [
                    rng.random_range(0..dim.0),
                    rng.random_range(0..dim.1),
                    rng.random_range(0..dim.2),
                    rng.random_range(0..dim.3),
                ];
                // Anchor side.
                let mut ap = anchor.clone();
                ap[j][idx] += eps;
                let mut am = anchor.clone();
                am[j][idx] -= eps;
                let fd = (contrastive_loss(&ap, &positive, &negatives, &weights, 1e-8).unwrap()
                    - contrastive_loss(&am, &positive, &negatives, &weights, 1e-8).unwrap())
                    / (2.0 * eps);
                let got = parts.anchor_grads[j][idx];
                assert!(
                    (got - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "anchor tap {j} at {idx:?}: analytic {got} vs fd {fd}"
                );
                // Positive side.
                let mut pp = positive.clone();
                pp[j][idx] += eps;
                let mut pm = positive.clone();
                pm[j][idx] -= eps;
                let fd = (contrastive_loss(&anchor, &pp, &negatives, &weights, 1e-8).unwrap()
                    - contrastive_loss(&anchor, &pm, &negatives, &weights, 1e-8).unwrap())
                    / (2.0 * eps);
                let got = parts.positive_grads[j][idx];
                assert!(
                    (got - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "positive tap {j} at {idx:?}: analytic {got} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn perceptual_matches_scalar_loop_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (anchor, positive, _, weights) = fixture(&mut rng, 0);
        let parts = perceptual_loss_with_grad(&anchor, &positive, &weights).unwrap();
        // Same formula as the contrastive numerator with an empty denominator
        // and no epsilon: compare against the scalar oracle with eps folded out.
        let want = {
            let bs = anchor[0].dim().0;
            let mut total = 0.0;
            for b in 0..bs {
                for (j, w) in weights.iter().enumerate() {
                    let (_, c, h, wd) = anchor[j].dim();
                    let mut num = 0.0;
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..wd {
                                num +=
                                    (anchor[j][[b, ch, y, x]] - positive[j][[b, ch, y, x]]).abs();
                            }
                        }
                    }
                    total += w * num / (c * h * wd) as f64;
                }
            }
            total / bs as f64
        };
        assert!((parts.loss - want).abs() <= 1e-6);

        let eps = 1e-7;
        let loss_of = |a: &[Array4<f64>]| perceptual_loss_with_grad(a, &positive, &weights).unwrap().loss;
        for j in 0..2 {
            let dim = anchor[j].dim();
            for _ in 0..10 {
                let idx = [
                    rng.random_range(0..dim.0),
                    rng.random_range(0..dim.1),
                    rng.random_range(0..dim.2),
                    rng.random_range(0..dim.3),
                ];
                let mut ap = anchor.clone();
                ap[j][idx] += eps;
                let mut am = anchor.clone();
                am[j][idx] -= eps;
                let fd = (loss_of(&ap) - loss_of(&am)) / (2.0 * eps);
                let got = parts.anchor_grads[j][idx];
                assert!((got - fd).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn infonce_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dim = (2, 4, 3, 3);
        let anchor = rand4(&mut rng, dim);
        let positive = rand4(&mut rng, dim);
        let negatives: Vec<_> = (0..3).map(|_| rand4(&mut rng, dim)).collect();
        let parts = infonce_loss_with_grad(&anchor, &positive, &negatives, 0.1).unwrap();
        let eps = 1e-6;
        let loss_of = |a: &Array4<f64>, p: &Array4<f64>| {
            infonce_loss_with_grad(a, p, &negatives, 0.1).unwrap().loss
        };
        for _ in 0..20 {
            let idx = [
                rng.random_range(0..dim.0),
                rng.random_range(0..dim.1),
                rng.random_range(0..dim.2),
                rng.random_range(0..dim.3),
            ];
            let mut ap = anchor.clone();
            ap[idx] += eps;
            let mut am = anchor.clone();
            am[idx] -= eps;
            let fd = (loss_of(&ap, &positive) - loss_of(&am, &positive)) / (2.0 * eps);
            let got = parts.anchor_grads[0][idx];
            assert!(
                (got - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
                "anchor: analytic {got} vs fd {fd}"
            );
            let mut pp = positive.clone();
            pp[idx] += eps;
            let mut pm = positive.clone();
            pm[idx] -= eps;
            let fd = (loss_of(&anchor, &pp) - loss_of(&anchor, &pm)) / (2.0 * eps);
            let got = parts.positive_grads[0][idx];
            assert!(
                (got - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
                "positive: analytic {got} vs fd {fd}"
            );
        }
    }

    #[test]
    fn infonce_prefers_aligned_positives() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dim = (1, 4, 2, 2);
        let anchor = rand4(&mut rng, dim);
        let negatives: Vec<_> = (0..4).map(|_| rand4(&mut rng, dim)).collect();
        let aligned = infonce_loss_with_grad(&anchor, &anchor.clone(), &negatives, 0.1)
            .unwrap()
            .loss;
        let random = infonce_loss_with_grad(&anchor, &rand4(&mut rng, dim), &negatives, 0.1)
            .unwrap()
            .loss;
        assert!(aligned < random);
    }
}

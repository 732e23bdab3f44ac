//! Frozen feature extractors for the contrastive and perceptual losses.
//!
//! An [`Extractor`] is a fixed op pipeline (conv / relu / maxpool) with tap
//! points whose activations become the feature maps. Weights are never
//! trained; gradients only flow *through* the extractor back to its input.

use std::path::Path;

use ndarray::{Array1, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::tensor::{
    conv2d, conv2d_backward, maxpool2, maxpool2_backward, relu, relu_backward,
};

enum Op {
    Conv { weight: Array4<f64>, bias: Array1<f64> },
    Relu,
    MaxPool,
}

enum OpRecord {
    Conv { input: Array4<f64> },
    Relu { output: Array4<f64> },
    MaxPool { arg: Array4<u8>, input_dim: (usize, usize, usize, usize) },
}

/// Activations recorded during [`Extractor::features_train`], consumed by
/// [`Extractor::backward_to_input`].
pub struct ExtractorCache {
    records: Vec<OpRecord>,
    input_dim: (usize, usize, usize, usize),
}

pub struct Extractor {
    pub kind: String,
    ops: Vec<Op>,
    /// Op indices whose outputs are collected as feature maps (ascending;
    /// the final op is always a tap).
    taps: Vec<usize>,
    /// Per-tap loss weight, shallow to deep.
    pub tap_weights: Vec<f64>,
    /// Optional per-channel input normalization `(mean, std)`.
    normalize: Option<([f64; 3], [f64; 3])>,
}

/// The 13 leading VGG19 convolutions, through `conv5_1`.
const VGG_CONVS: [(&str, usize, usize); 13] = [
    ("conv1_1", 3, 64),
    ("conv1_2", 64, 64),
    ("conv2_1", 64, 128),
    ("conv2_2", 128, 128),
    ("conv3_1", 128, 256),
    ("conv3_2", 256, 256),
    ("conv3_3", 256, 256),
    ("conv3_4", 256, 256),
    ("conv4_1", 256, 512),
    ("conv4_2", 512, 512),
    ("conv4_3", 512, 512),
    ("conv4_4", 512, 512),
    ("conv5_1", 512, 512),
];

/// Stage-opening convolutions whose post-activation maps are tapped.
const VGG_TAPS: [&str; 5] = ["conv1_1", "conv2_1", "conv3_1", "conv4_1", "conv5_1"];
const VGG_TAP_WEIGHTS: [f64; 5] = [1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0];

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

fn random_conv(rng: &mut ChaCha8Rng, ci: usize, co: usize, k: usize) -> (Array4<f64>, Array1<f64>) {
    let bound = 1.0 / ((ci * k * k) as f64).sqrt();
    let weight =
        Array4::from_shape_simple_fn((co, ci, k, k), || rng.random_range(-bound..bound));
    let bias = Array1::from_shape_simple_fn(co, || rng.random_range(-bound..bound));
    (weight, bias)
}

impl Extractor {
    /// Small seeded random-conv extractor for tests and desk-scale runs:
    /// three taps of increasing depth with weights 0.25 / 0.5 / 1.
    pub fn toy(seed: u64) -> Extractor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ops = Vec::new();
        for (ci, co, pool) in [(3, 8, false), (8, 12, true), (12, 16, false)] {
            let (weight, bias) = random_conv(&mut rng, ci, co, 3);
            ops.push(Op::Conv { weight, bias });
            ops.push(Op::Relu);
            if pool {
                ops.push(Op::MaxPool);
            }
        }
        Extractor {
            kind: "toy".into(),
            ops,
            taps: vec![1, 4, 6],
            tap_weights: vec![0.25, 0.5, 1.0],
            normalize: None,
        }
    }

    /// VGG19 features truncated after `conv5_1`, tapped at each stage-opening
    /// convolution (post-activation). Weights must come from a container
    /// written by [`write_vgg19_container`]; this kind is never initialized
    /// randomly.
    pub fn vgg19(weights: &Path) -> Result<Extractor> {
        if !weights.is_file() {
            return Err(Error::checkpoint(
                weights,
                "VGG19 weights container not found; perceptual features \
                 cannot be randomly initialized",
            ));
        }
        let container = Container::load(weights)?;
        let mut ops = Vec::new();
        let mut taps = Vec::new();
        for (name, ci, co) in VGG_CONVS {
            let weight = container
                .get(weights, &format!("{name}.weight"))?
                .clone()
                .into_dimensionality::<ndarray::Ix4>()
                .map_err(|_| Error::checkpoint(weights, format!("{name}.weight is not 4-D")))?;
            if weight.dim() != (co, ci, 3, 3) {
                return Err(Error::checkpoint(
                    weights,
                    format!("{name}.weight has shape {:?}, expected {:?}", weight.dim(), (co, ci, 3, 3)),
                ));
            }
            let bias = container
                .get(weights, &format!("{name}.bias"))?
                .clone()
                .into_dimensionality::<ndarray::Ix1>()
                .map_err(|_| Error::checkpoint(weights, format!("{name}.bias is not 1-D")))?;
            ops.push(Op::Conv { weight, bias });
            ops.push(Op::Relu);
            if VGG_TAPS.contains(&name) {
                taps.push(ops.len() - 1);
            }
            // A 2x2 pool closes stages 1-4; the pipeline stops at conv5_1.
            if matches!(name, "conv1_2" | "conv2_2" | "conv3_4" | "conv4_4") {
                ops.push(Op::MaxPool);
            }
        }
        Ok(Extractor {
            kind: "vgg19".into(),
            ops,
            taps,
            tap_weights: VGG_TAP_WEIGHTS.to_vec(),
            normalize: Some((IMAGENET_MEAN, IMAGENET_STD)),
        })
    }

    pub fn n_taps(&self) -> usize {
        self.taps.len()
    }

    fn normalized(&self, x: &Array4<f64>) -> Array4<f64> {
        match self.normalize {
            None => x.clone(),
            Some((mean, std)) => {
                let mut out = x.clone();
                for c in 0..3 {
                    out.index_axis_mut(ndarray::Axis(1), c)
                        .mapv_inplace(|v| (v - mean[c]) / std[c]);
                }
                out
            }
        }
    }

    /// Feature maps at each tap, shallow to deep.
    pub fn features(&self, x: &Array4<f64>) -> Vec<Array4<f64>> {
        let mut cur = self.normalized(x);
        let mut feats = Vec::with_capacity(self.taps.len());
        for (i, op) in self.ops.iter().enumerate() {
            cur = match op {
                Op::Conv { weight, bias } => conv2d(&cur, weight.view(), bias.view()),
                Op::Relu => relu(&cur),
                Op::MaxPool => maxpool2(&cur).0,
            };
            if self.taps.contains(&i) {
                feats.push(cur.clone());
            }
        }
        feats
    }

    /// Like [`features`](Self::features) but records the activations needed
    /// to push gradients back to the input.
    pub fn features_train(&self, x: &Array4<f64>) -> (Vec<Array4<f64>>, ExtractorCache) {
        let mut cur = self.normalized(x);
        let mut feats = Vec::with_capacity(self.taps.len());
        let mut records = Vec::with_capacity(self.ops.len());
        let input_dim = x.dim();
        for (i, op) in self.ops.iter().enumerate() {
            cur = match op {
                Op::Conv { weight, bias } => {
                    let out = conv2d(&cur, weight.view(), bias.view());
                    records.push(OpRecord::Conv { input: cur });
                    out
                }
                Op::Relu => {
                    let out = relu(&cur);
                    records.push(OpRecord::Relu { output: out.clone() });
                    out
                }
                Op::MaxPool => {
                    let (out, arg) = maxpool2(&cur);
                    records.push(OpRecord::MaxPool { arg, input_dim: cur.dim() });
                    out
                }
            };
            if self.taps.contains(&i) {
                feats.push(cur.clone());
            }
        }
        (feats, ExtractorCache { records, input_dim })
    }

    /// Backpropagate one gradient per tap down to the extractor input. The
    /// extractor itself is frozen: no weight gradients are produced.
    pub fn backward_to_input(&self, cache: &ExtractorCache, tap_grads: &[Array4<f64>]) -> Array4<f64> {
        assert_eq!(tap_grads.len(), self.taps.len(), "one gradient per tap");
        let mut grad: Option<Array4<f64>> = None;
        for i in (0..self.ops.len()).rev() {
            if let Some(t) = self.taps.iter().position(|&tap| tap == i) {
                match grad.as_mut() {
                    None => grad = Some(tap_grads[t].clone()),
                    Some(g) => *g += &tap_grads[t],
                }
            }
            let g = grad.take().expect("deepest op is a tap");
            grad = Some(match (&self.ops[i], &cache.records[i]) {
                (Op::Conv { weight, .. }, OpRecord::Conv { input }) => {
                    conv2d_backward(input, weight.view(), &g, true)
                        .input
                        .expect("input grad requested")
                }
                (Op::Relu, OpRecord::Relu { output }) => relu_backward(&g, output),
                (Op::MaxPool, OpRecord::MaxPool { arg, input_dim }) => {
                    maxpool2_backward(&g, arg, *input_dim)
                }
                _ => unreachable!("cache records mirror ops"),
            });
        }
        let mut gx = grad.expect("non-empty op list");
        debug_assert_eq!(gx.dim(), cache.input_dim);
        if let Some((_, std)) = self.normalize {
            for c in 0..3 {
                gx.index_axis_mut(ndarray::Axis(1), c)
                    .mapv_inplace(|v| v / std[c]);
            }
        }
        gx
    }
}

/// Write a VGG19 weights container in the layout [`Extractor::vgg19`] loads.
/// Callers supply the 13 `(weight, bias)` pairs through `conv5_1`, shallow
/// to deep.
pub fn write_vgg19_container(
    path: &Path,
    layers: Vec<(Array4<f64>, Array1<f64>)>,
) -> Result<()> {
    if layers.len() != VGG_CONVS.len() {
        return Err(Error::Config(format!(
            "expected {} conv layers, got {}",
            VGG_CONVS.len(),
            layers.len()
        )));
    }
    let mut container = Container::new(serde_json::json!({ "kind": "vgg19" }));
    for ((name, ci, co), (weight, bias)) in VGG_CONVS.iter().zip(layers) {
        if weight.dim() != (*co, *ci, 3, 3) {
            return Err(Error::Config(format!(
                "{name}.weight has shape {:?}, expected {:?}",
                weight.dim(),
                (co, ci, 3, 3)
            )));
        }
        container.insert(&format!("{name}.weight"), weight);
        container.insert(&format!("{name}.bias"), bias);
    }
    container.save(path)
}

/// Seeded random VGG19-shaped weights; useful for exercising the full
/// pipeline when pretrained weights are unavailable.
pub fn random_vgg19_layers(seed: u64) -> Vec<(Array4<f64>, Array1<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    VGG_CONVS
        .iter()
        .map(|(_, ci, co)| random_conv(&mut rng, *ci, *co, 3))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn smooth_input(b: usize, h: usize, w: usize) -> Array4<f64> {
        Array4::from_shape_fn((b, 3, h, w), |(bi, c, y, x)| {
            0.5 + 0.3 * ((x as f64 * 0.7 + y as f64 * 0.4 + c as f64 + bi as f64).sin())
        })
    }

    #[test]
    fn toy_is_deterministic_per_seed() {
        let a = Extractor::toy(7);
        let b = Extractor::toy(7);
        let c = Extractor::toy(8);
        let x = smooth_input(1, 8, 8);
        let fa = a.features(&x);
        let fb = b.features(&x);
        let fc = c.features(&x);
        assert_eq!(fa.len(), 3);
        for (l, r) in fa.iter().zip(&fb) {
            assert_eq!(l, r);
        }
        assert!(fa
            .iter()
            .zip(&fc)
            .any(|(l, r)| l.iter().zip(r.iter()).any(|(x, y)| x != y)));
    }

    #[test]
    fn toy_feature_shapes_follow_the_pipeline() {
        let ex = Extractor::toy(1);
        let x = smooth_input(2, 8, 10);
        let f = ex.features(&x);
        assert_eq!(f[0].dim(), (2, 8, 8, 10));
        assert_eq!(f[1].dim(), (2, 12, 4, 5));
        assert_eq!(f[2].dim(), (2, 16, 4, 5));
        assert_eq!(ex.tap_weights, vec![0.25, 0.5, 1.0]);
    }

    #[test]
    fn train_features_match_plain_features() {
        let ex = Extractor::toy(3);
        let x = smooth_input(1, 8, 8);
        let plain = ex.features(&x);
        let (train, _) = ex.features_train(&x);
        for (a, b) in plain.iter().zip(&train) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        use rand::prelude::*;
        let ex = Extractor::toy(5);
        let x = smooth_input(1, 8, 8);
        let (feats, cache) = ex.features_train(&x);
        // Scalar objective: sum_j lambda_j * <P_j, phi_j(x)> with fixed random P_j.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let probes: Vec<Array4<f64>> = feats
            .iter()
            .map(|f| Array4::from_shape_simple_fn(f.dim(), || rng.random_range(-1.0..1.0)))
            .collect();
        let loss_of = |x: &Array4<f64>| -> f64 {
            ex.features(x)
                .iter()
                .zip(&probes)
                .zip(&ex.tap_weights)
                .map(|((f, p), lam)| lam * (f * p).sum())
                .sum()
        };
        let tap_grads: Vec<Array4<f64>> = probes
            .iter()
            .zip(&ex.tap_weights)
            .map(|(p, lam)| p.mapv(|v| v * lam))
            .collect();
        let gx = ex.backward_to_input(&cache, &tap_grads);

        let eps = 1e-6;
        for _ in 0..30 {
            let idx = [
                0,
                rng.random_range(0..3),
                rng.random_range(0..8),
                rng.random_range(0..8),
            ];
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (loss_of(&xp) - loss_of(&xm)) / (2.0 * eps);
            let got = gx[idx];
            assert!(
                (got - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
                "analytic {got} vs fd {fd} at {idx:?}"
            );
        }
    }

    #[test]
    fn vgg19_requires_a_weights_file() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("vgg19.csdc");
        let err = match Extractor::vgg19(&missing) {
            Err(e) => e,
            Ok(_) => panic!("expected an error for missing weights"),
        };
        let msg = err.to_string();
        assert!(msg.contains("not found"), "unexpected error: {msg}");
    }

    #[test]
    fn vgg19_roundtrips_and_extracts_five_taps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg19.csdc");
        write_vgg19_container(&path, random_vgg19_layers(42)).unwrap();
        let ex = Extractor::vgg19(&path).unwrap();
        assert_eq!(ex.n_taps(), 5);
        assert_eq!(ex.tap_weights.len(), 5);
        assert!((ex.tap_weights[0] - 1.0 / 32.0).abs() < 1e-15);
        assert!((ex.tap_weights[4] - 1.0).abs() < 1e-15);
        let x = smooth_input(1, 32, 32);
        let f = ex.features(&x);
        assert_eq!(f[0].dim(), (1, 64, 32, 32));
        assert_eq!(f[1].dim(), (1, 128, 16, 16));
        assert_eq!(f[2].dim(), (1, 256, 8, 8));
        assert_eq!(f[3].dim(), (1, 512, 4, 4));
        assert_eq!(f[4].dim(), (1, 512, 2, 2));
        // Determinism across separate loads of the same container.
        let ex2 = Extractor::vgg19(&path).unwrap();
        let f2 = ex2.features(&x);
        for (a, b) in f.iter().zip(&f2) {
            assert_eq!(a, b);
        }
    }
}

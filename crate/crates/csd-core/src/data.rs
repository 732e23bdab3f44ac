//! Paired LR/HR data: loading, bicubic resampling, patch sampling,
//! augmentation and in-batch negative-sample construction.

use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::dihedral;

/// Keys cubic kernel, a = -0.5.
fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    if ax <= 1.0 {
        (1.5 * ax - 2.5) * ax * ax + 1.0
    } else if ax < 2.0 {
        ((-0.5 * ax + 2.5) * ax - 4.0) * ax + 2.0
    } else {
        0.0
    }
}

/// Per-output-pixel taps for one resized dimension.
fn dim_contributions(in_len: usize, out_len: usize, antialias: bool) -> Vec<(Vec<usize>, Vec<f64>)> {
    let scale = out_len as f64 / in_len as f64;
    // Shrinking with antialias widens the kernel by the inverse scale.
    let kscale = if antialias && scale < 1.0 { scale } else { 1.0 };
    let support = 4.0 / kscale;
    let taps = support.ceil() as isize + 2;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) / scale - 0.5;
            let left = (center - support / 2.0).floor() as isize;
            let mut idx = Vec::with_capacity(taps as usize);
            let mut w = Vec::with_capacity(taps as usize);
            for t in 0..taps {
                let j = left + 1 + t;
                let weight = kscale * cubic(kscale * (center - j as f64));
                // Edge pixels replicate.
                idx.push(j.clamp(0, in_len as isize - 1) as usize);
                w.push(weight);
            }
            let sum: f64 = w.iter().sum();
            for v in &mut w {
                *v /= sum;
            }
            (idx, w)
        })
        .collect()
}

/// Bicubic resize of a `(C, H, W)` image (Keys kernel, a = -0.5, replicated
/// edges). With `antialias` the kernel widens by the shrink factor when
/// downscaling, matching the resampler conventionally used to prepare SR data.
pub fn bicubic_resize(img: &Array3<f64>, out_h: usize, out_w: usize, antialias: bool) -> Array3<f64> {
    let (c, h, w) = img.dim();
    assert!(out_h >= 1 && out_w >= 1);
    // Resize H then W; the kernel is separable.
    let rows = dim_contributions(h, out_h, antialias);
    let mut tmp = Array3::<f64>::zeros((c, out_h, w));
    for ch in 0..c {
        for (oy, (idx, wt)) in rows.iter().enumerate() {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, wv) in idx.iter().zip(wt) {
                    acc += img[[ch, *j, x]] * wv;
                }
                tmp[[ch, oy, x]] = acc;
            }
        }
    }
    let cols = dim_contributions(w, out_w, antialias);
    let mut out = Array3::<f64>::zeros((c, out_h, out_w));
    for ch in 0..c {
        for y in 0..out_h {
            for (ox, (idx, wt)) in cols.iter().enumerate() {
                let mut acc = 0.0;
                for (j, wv) in idx.iter().zip(wt) {
                    acc += tmp[[ch, y, *j]] * wv;
                }
                out[[ch, y, ox]] = acc;
            }
        }
    }
    out
}

/// Load a PNG/BMP image as `(3, H, W)` floats in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Save a `(3, H, W)` image in `[0, 1]`; 8-bit values round half away from zero.
pub fn save_image(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px: [u8; 3] = std::array::from_fn(|ch| {
                (img[[ch, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8
            });
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

enum Source {
    Disk { hr: Vec<PathBuf>, lr: Vec<PathBuf> },
    Memory { hr: Vec<Array3<f64>>, lr: Vec<Array3<f64>> },
}

/// Paired LR/HR image set. When no LR source is given, LR is synthesized by
/// antialiased bicubic downsampling of the HR image (after cropping the HR to
/// a multiple of the scale).
pub struct PairedDataset {
    source: Source,
    pub scale: usize,
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png") | Some("bmp")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

impl PairedDataset {
    /// Layout: `<root>/<set>/HR/*.png` with optional `<root>/<set>/LR_x{s}/`.
    pub fn from_dir(root: &Path, set: &str, scale: usize) -> Result<Self> {
        let hr_dir = root.join(set).join("HR");
        let hr = list_images(&hr_dir)?;
        if hr.is_empty() {
            return Err(Error::Config(format!("no images in {}", hr_dir.display())));
        }
        let lr_dir = root.join(set).join(format!("LR_x{scale}"));
        let lr = if lr_dir.is_dir() {
            let lr = list_images(&lr_dir)?;
            if lr.len() != hr.len() {
                return Err(Error::Config(format!(
                    "{} HR images but {} LR images under {}",
                    hr.len(),
                    lr.len(),
                    lr_dir.display()
                )));
            }
            lr
        } else {
            Vec::new()
        };
        Ok(PairedDataset {
            source: Source::Disk { hr, lr },
            scale,
        })
    }

    pub fn from_memory(hr: Vec<Array3<f64>>, scale: usize) -> Self {
        PairedDataset {
            source: Source::Memory { hr, lr: Vec::new() },
            scale,
        }
    }

    /// Structured synthetic images (gradients, rectangles, waves) for
    /// desk-scale training and tests. Deterministic per seed.
    pub fn synthetic(n: usize, hr_size: usize, scale: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hr = (0..n).map(|_| synth_image(hr_size, hr_size, &mut rng)).collect();
        PairedDataset {
            source: Source::Memory { hr, lr: Vec::new() },
            scale,
        }
    }

    pub fn len(&self) -> usize {
        match &self.source {
            Source::Disk { hr, .. } => hr.len(),
            Source::Memory { hr, .. } => hr.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Load one aligned pair. HR is edge-cropped to a multiple of the scale;
    /// LR is synthesized by bicubic downsampling unless provided.
    pub fn load_pair(&self, index: usize) -> Result<(Array3<f64>, Array3<f64>)> {
        let hr = match &self.source {
            Source::Disk { hr, .. } => load_image(&hr[index])?,
            Source::Memory { hr, .. } => hr[index].clone(),
        };
        let (c, h, w) = hr.dim();
        let (ch, cw) = (h - h % self.scale, w - w % self.scale);
        let hr = hr.slice(s![..c, ..ch, ..cw]).to_owned();
        let lr = match &self.source {
            Source::Disk { lr, .. } if !lr.is_empty() => {
                let lr = load_image(&lr[index])?;
                if lr.dim() != (3, ch / self.scale, cw / self.scale) {
                    return Err(Error::Shape(format!(
                        "LR image {} has dims {:?}, expected {:?}",
                        index,
                        lr.dim(),
                        (3, ch / self.scale, cw / self.scale)
                    )));
                }
                lr
            }
            Source::Memory { lr, .. } if !lr.is_empty() => lr[index].clone(),
            _ => bicubic_resize(&hr, ch / self.scale, cw / self.scale, true),
        };
        Ok((lr, hr))
    }
}

pub fn synth_image(h: usize, w: usize, rng: &mut impl Rng) -> Array3<f64> {
    let mut img = Array3::<f64>::zeros((3, h, w));
    // Base gradient per channel.
    for c in 0..3 {
        let (gx, gy) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        let bias = rng.random_range(0.2..0.8);
        for y in 0..h {
            for x in 0..w {
                img[[c, y, x]] = bias + gx * (x as f64 / w as f64) + gy * (y as f64 / h as f64);
            }
        }
    }
    // Hard-edged rectangles give the resampler something to blur.
    for _ in 0..6 {
        let x0 = rng.random_range(0..w);
        let y0 = rng.random_range(0..h);
        let rw = rng.random_range(w / 8..w / 2 + 1);
        let rh = rng.random_range(h / 8..h / 2 + 1);
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                for c in 0..3 {
                    img[[c, y, x]] = 0.3 * img[[c, y, x]] + 0.7 * color[c];
                }
            }
        }
    }
    // A diagonal wave for mid frequencies.
    let freq = rng.random_range(0.15..0.5);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = rng.random_range(0.05..0.15);
    for y in 0..h {
        for x in 0..w {
            let v = amp * ((x as f64 + 0.7 * y as f64) * freq + phase).sin();
            for c in 0..3 {
                img[[c, y, x]] += v;
            }
        }
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

/// An aligned minibatch: `lr (B,3,p/s,p/s)`, `hr (B,3,p,p)`, values in `[0,1]`.
pub struct PatchBatch {
    pub lr: Array4<f64>,
    pub hr: Array4<f64>,
    pub scale: usize,
}

/// Aligned random crop: HR patch at `(s*y, s*x)` iff LR patch at `(y, x)`.
/// Returns `None` when the image is smaller than the patch.
pub fn sample_patch(
    lr: &Array3<f64>,
    hr: &Array3<f64>,
    scale: usize,
    patch: usize,
    rng: &mut impl Rng,
) -> Option<(Array3<f64>, Array3<f64>)> {
    assert_eq!(patch % scale, 0, "patch must be a multiple of scale");
    let (_, hh, hw) = hr.dim();
    if hh < patch || hw < patch {
        return None;
    }
    let lp = patch / scale;
    let (_, lh, lw) = lr.dim();
    let y = rng.random_range(0..=lh - lp);
    let x = rng.random_range(0..=lw - lp);
    let lr_crop = lr.slice(s![.., y..y + lp, x..x + lp]).to_owned();
    let hr_crop = hr
        .slice(s![.., scale * y..scale * y + patch, scale * x..scale * x + patch])
        .to_owned();
    Some((lr_crop, hr_crop))
}

/// Random horizontal flip and 90-degree rotation, each with probability 1/2,
/// applied identically to both patches. Patches must be square.
pub fn augment(
    lr: Array3<f64>,
    hr: Array3<f64>,
    rng: &mut impl Rng,
) -> (Array3<f64>, Array3<f64>) {
    let flip = rng.random_bool(0.5);
    let rot = rng.random_bool(0.5);
    let k = if rot { 1 } else { 0 };
    if !flip && !rot {
        return (lr, hr);
    }
    (dihedral(&lr, k, flip), dihedral(&hr, k, flip))
}

/// Draw a `batch`-sized set of augmented aligned patches. Images smaller than
/// the patch are skipped (with a warning on the first skip).
pub fn sample_batch(
    ds: &PairedDataset,
    batch: usize,
    patch: usize,
    rng: &mut impl Rng,
) -> Result<PatchBatch> {
    if ds.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let scale = ds.scale;
    let lp = patch / scale;
    let mut lr = Array4::<f64>::zeros((batch, 3, lp, lp));
    let mut hr = Array4::<f64>::zeros((batch, 3, patch, patch));
    let mut warned = false;
    for b in 0..batch {
        let mut placed = false;
        for _attempt in 0..(8 * ds.len()).max(8) {
            let idx = rng.random_range(0..ds.len());
            let (lr_img, hr_img) = ds.load_pair(idx)?;
            match sample_patch(&lr_img, &hr_img, scale, patch, rng) {
                Some((lc, hc)) => {
                    let (lc, hc) = augment(lc, hc, rng);
                    lr.slice_mut(s![b, .., .., ..]).assign(&lc);
                    hr.slice_mut(s![b, .., .., ..]).assign(&hc);
                    placed = true;
                    break;
                }
                None => {
                    if !warned {
                        eprintln!("warning: skipping image {idx}: smaller than patch {patch}");
                        warned = true;
                    }
                }
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "no image large enough for patch size {patch}"
            )));
        }
    }
    Ok(PatchBatch { lr, hr, scale })
}

/// Bicubic-upsampled LR patches from other batch items; `imgs[k]` holds the
/// k-th negative for every anchor.
pub struct NegativeSet {
    pub imgs: Vec<Array4<f64>>,
}

/// For each anchor, pick `k` other batch indices (without replacement when
/// possible) and bicubic-upsample their LR patches to the SR resolution.
/// With `shared`, one index set is drawn for the whole batch and no anchor
/// exclusion applies.
pub fn make_negatives(
    batch: &PatchBatch,
    k: usize,
    rng: &mut impl Rng,
    shared: bool,
) -> Result<NegativeSet> {
    let (b, _, lp, _) = batch.lr.dim();
    if k < 1 {
        return Err(Error::Config("need at least one negative".into()));
    }
    if b < 2 {
        return Err(Error::Config(
            "batch size must be >= 2 to draw negatives".into(),
        ));
    }
    let scale = batch.scale;
    let p = lp * scale;

    let choices: Vec<Vec<usize>> = if shared {
        let set = choose_k(&(0..b).collect::<Vec<_>>(), k, rng);
        vec![set; b]
    } else {
        (0..b)
            .map(|i| {
                let pool: Vec<usize> = (0..b).filter(|&j| j != i).collect();
                choose_k(&pool, k, rng)
            })
            .collect()
    };

    // Upsample each distinct LR item once.
    let mut upsampled: Vec<Option<Array3<f64>>> = vec![None; b];
    let mut need: Vec<usize> = choices.iter().flatten().copied().collect();
    need.sort_unstable();
    need.dedup();
    for idx in need {
        let lr_img = batch.lr.slice(s![idx, .., .., ..]).to_owned();
        upsampled[idx] = Some(bicubic_resize(&lr_img, p, p, false));
    }

    let imgs = (0..k)
        .map(|ki| {
            let mut t = Array4::<f64>::zeros((b, 3, p, p));
            for i in 0..b {
                let src = upsampled[choices[i][ki]].as_ref().expect("upsampled");
                t.slice_mut(s![i, .., .., ..]).assign(src);
            }
            t
        })
        .collect();
    Ok(NegativeSet { imgs })
}

/// `k` draws from `pool`: without replacement when the pool suffices,
/// otherwise uniform with replacement.
fn choose_k(pool: &[usize], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    if pool.len() >= k {
        let mut shuffled = pool.to_vec();
        shuffled.shuffle(rng);
        shuffled.truncate(k);
        shuffled
    } else {
        (0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn ramp(h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            (c as f64 * 0.1 + y as f64 * 0.07 + x as f64 * 0.05) % 1.0
        })
    }

    fn max_abs3(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    /// Non-separable scalar oracle: per output pixel, sum kernel taps in 2-D
    /// with per-dimension normalization and clamped indices.
    fn bicubic_oracle(img: &Array3<f64>, out_h: usize, out_w: usize, antialias: bool) -> Array3<f64> {
        let (c, h, w) = img.dim();
        let axis = |in_len: usize, out_len: usize, i: usize| {
            let scale = out_len as f64 / in_len as f64;
            let kscale = if antialias && scale < 1.0 { scale } else { 1.0 };
            let support = 4.0 / kscale;
            let taps = support.ceil() as isize + 2;
            let center = (i as f64 + 0.5) / scale - 0.5;
            let left = (center - support / 2.0).floor() as isize;
            let mut pairs = Vec::new();
            let mut total = 0.0;
            for t in 0..taps {
                let j = left + 1 + t;
                let wgt = kscale * cubic(kscale * (center - j as f64));
                total += wgt;
                pairs.push((j.clamp(0, in_len as isize - 1) as usize, wgt));
            }
            for p in &mut pairs {
                p.1 /= total;
            }
            pairs
        };
        let mut out = Array3::<f64>::zeros((c, out_h, out_w));
        for ch in 0..c {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let ys = axis(h, out_h, oy);
                    let xs = axis(w, out_w, ox);
                    let mut acc = 0.0;
                    for (jy, wy) in &ys {
                        for (jx, wx) in &xs {
                            acc += img[[ch, *jy, *jx]] * wy * wx;
                        }
                    }
                    out[[ch, oy, ox]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_resize_is_exact() {
        let img = ramp(7, 9);
        let out = bicubic_resize(&img, 7, 9, true);
        assert_eq!(out, img);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Array3::from_elem((3, 5, 6), 0.37);
        for (oh, ow, aa) in [(10, 12, false), (3, 2, true), (7, 11, true)] {
            let out = bicubic_resize(&img, oh, ow, aa);
            for v in out.iter() {
                assert!((v - 0.37).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_matches_kernel_sum_oracle() {
        let img = ramp(8, 8);
        let got = bicubic_resize(&img, 16, 16, false);
        let want = bicubic_oracle(&img, 16, 16, false);
        assert!(max_abs3(&got, &want) <= 1e-6);
    }

    #[test]
    fn downsample_with_antialias_matches_oracle() {
        let img = ramp(12, 16);
        let got = bicubic_resize(&img, 6, 8, true);
        let want = bicubic_oracle(&img, 6, 8, true);
        assert!(max_abs3(&got, &want) <= 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn resize_is_linear(alpha in -2.0..2.0f64, beta in -2.0..2.0f64, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Array3::from_shape_simple_fn((1, 6, 7), || rng.random_range(0.0..1.0));
            let b = Array3::from_shape_simple_fn((1, 6, 7), || rng.random_range(0.0..1.0));
            let combo = a.mapv(|v| v * alpha) + b.mapv(|v| v * beta);
            let lhs = bicubic_resize(&combo, 9, 5, true);
            let rhs = bicubic_resize(&a, 9, 5, true).mapv(|v| v * alpha)
                + bicubic_resize(&b, 9, 5, true).mapv(|v| v * beta);
            prop_assert!(max_abs3(&lhs, &rhs) <= 1e-6);
        }
    }

    #[test]
    fn augment_transforms_are_involutions() {
        let img = ramp(6, 6);
        let flipped = dihedral(&img, 0, true);
        assert_eq!(dihedral(&flipped, 0, true), img);
        let mut r = img.clone();
        for _ in 0..4 {
            r = dihedral(&r, 1, false);
        }
        assert_eq!(r, img);
    }

    #[test]
    fn augmentation_commutes_with_downsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hr = synth_image(24, 24, &mut rng);
        for (k, flip) in [(1, false), (0, true), (1, true)] {
            let lhs = bicubic_resize(&dihedral(&hr, k, flip), 12, 12, true);
            let rhs = dihedral(&bicubic_resize(&hr, 12, 12, true), k, flip);
            assert!(max_abs3(&lhs, &rhs) <= 1e-6);
        }
    }

    #[test]
    fn patch_sampling_is_aligned_and_deterministic() {
        let ds = PairedDataset::synthetic(3, 32, 2, 42);
        let (lr, hr) = ds.load_pair(0).unwrap();
        assert_eq!(lr.dim(), (3, 16, 16));
        assert_eq!(hr.dim(), (3, 32, 32));

        let mut rng1 = ChaCha8Rng::seed_from_u64(7);
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let a = sample_patch(&lr, &hr, 2, 16, &mut rng1).unwrap();
        let b = sample_patch(&lr, &hr, 2, 16, &mut rng2).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);

        // Interior of downsample(HR crop) agrees with the LR crop: shave the
        // kernel's reach (2 LR pixels) from each border before comparing.
        let (lc, hc) = a;
        let down = bicubic_resize(&hc, 8, 8, true);
        let inner = down.slice(s![.., 2..6, 2..6]);
        let want = lc.slice(s![.., 2..6, 2..6]);
        let diff = inner
            .iter()
            .zip(want.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-6, "interior alignment off by {diff}");
    }

    #[test]
    fn whole_image_patch_returns_everything() {
        let ds = PairedDataset::synthetic(1, 16, 2, 1);
        let (lr, hr) = ds.load_pair(0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (lc, hc) = sample_patch(&lr, &hr, 2, 16, &mut rng).unwrap();
        assert_eq!(lc, lr);
        assert_eq!(hc, hr);
    }

    #[test]
    fn sample_patch_rejects_small_images() {
        let ds = PairedDataset::synthetic(1, 8, 2, 1);
        let (lr, hr) = ds.load_pair(0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_patch(&lr, &hr, 2, 16, &mut rng).is_none());
    }

    #[test]
    fn negatives_exclude_anchor_and_match_resolution() {
        let ds = PairedDataset::synthetic(4, 16, 2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = sample_batch(&ds, 4, 8, &mut rng).unwrap();
        let negs = make_negatives(&batch, 2, &mut rng, false).unwrap();
        assert_eq!(negs.imgs.len(), 2);
        assert_eq!(negs.imgs[0].dim(), (4, 3, 8, 8));
        // No negative equals the anchor's own upsampled LR (B-1 >= K here).
        for i in 0..4 {
            let own = bicubic_resize(
                &batch.lr.slice(s![i, .., .., ..]).to_owned(),
                8,
                8,
                false,
            );
            for k in 0..2 {
                let neg = negs.imgs[k].slice(s![i, .., .., ..]).to_owned();
                assert!(max_abs3(&own, &neg) > 1e-9, "anchor {i} leaked into negatives");
            }
        }
    }

    #[test]
    fn two_item_batch_forces_the_other_item() {
        let ds = PairedDataset::synthetic(2, 16, 2, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let batch = sample_batch(&ds, 2, 8, &mut rng).unwrap();
        let negs = make_negatives(&batch, 1, &mut rng, false).unwrap();
        for i in 0..2 {
            let other = bicubic_resize(
                &batch.lr.slice(s![1 - i, .., .., ..]).to_owned(),
                8,
                8,
                false,
            );
            let neg = negs.imgs[0].slice(s![i, .., .., ..]).to_owned();
            assert!(max_abs3(&other, &neg) <= 1e-12);
        }
    }

    #[test]
    fn singleton_batch_has_no_negatives() {
        let ds = PairedDataset::synthetic(1, 16, 2, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = sample_batch(&ds, 1, 8, &mut rng).unwrap();
        assert!(make_negatives(&batch, 1, &mut rng, false).is_err());
    }

    #[test]
    fn image_io_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let img = synth_image(9, 11, &mut rng);
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        // 8-bit quantization bounds the error by half a step.
        assert!(max_abs3(&img, &back) <= 0.5 / 255.0 + 1e-12);
    }
}

//! Quantitative evaluation: Y-channel PSNR/SSIM with border shaving,
//! self-ensemble inference, dataset benchmarks with timing, and CSV/plot
//! report emission.

use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, Array3, Array4};

use crate::arch::{SRBackbone, WidthMultiplier};
use crate::data::{bicubic_resize, PairedDataset};
use crate::error::{Error, Result};
use crate::tensor::{dihedral, dihedral_inverse};

/// BT.601 luma with the 16/255 offset: `Y = (65.481 R + 128.553 G + 24.966 B + 16)/255`.
/// RGB in `[0,1]` maps to `[16/255, 235/255]`.
pub fn rgb_to_y(img: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = img.dim();
    assert_eq!(c, 3, "expected an RGB image");
    let mut y = Array2::<f64>::zeros((h, w));
    for yy in 0..h {
        for xx in 0..w {
            y[[yy, xx]] = (65.481 * img[[0, yy, xx]]
                + 128.553 * img[[1, yy, xx]]
                + 24.966 * img[[2, yy, xx]]
                + 16.0)
                / 255.0;
        }
    }
    y
}

/// Peak signal-to-noise ratio on `[0,1]` planes, `10·log10(1/MSE)`, with
/// `shave` pixels removed from each border first. Identical planes return
/// the `f64::INFINITY` sentinel.
pub fn psnr(a: &Array2<f64>, b: &Array2<f64>, shave: usize) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("psnr dims {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (h, w) = a.dim();
    if h <= 2 * shave || w <= 2 * shave {
        return Err(Error::Shape(format!(
            "plane {h}x{w} too small for shave {shave}"
        )));
    }
    let av = a.slice(s![shave..h - shave, shave..w - shave]);
    let bv = b.slice(s![shave..h - shave, shave..w - shave]);
    let mut mse = 0.0;
    for (x, y) in av.iter().zip(bv.iter()) {
        let d = x - y;
        mse += d * d;
    }
    mse /= av.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> Array2<f64> {
    let mut w = Array2::<f64>::zeros((SSIM_WINDOW, SSIM_WINDOW));
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[[y, x]] = v;
            sum += v;
        }
    }
    w.mapv_inplace(|v| v / sum);
    w
}

/// Mean structural similarity over all valid 11x11 windows (Gaussian
/// weighting, sigma 1.5) with the standard constants on the `[0,1]` range.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("ssim dims {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "plane {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - SSIM_WINDOW {
        for x0 in 0..=w - SSIM_WINDOW {
            let (mut ma, mut mb) = (0.0, 0.0);
            let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                for dx in 0..SSIM_WINDOW {
                    let wv = win[[dy, dx]];
                    let av = a[[y0 + dy, x0 + dx]];
                    let bv = b[[y0 + dy, x0 + dx]];
                    ma += wv * av;
                    mb += wv * bv;
                    saa += wv * av * av;
                    sbb += wv * bv * bv;
                    sab += wv * av * bv;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Shave borders, convert to Y, and report `(psnr_db, ssim)` for an RGB pair.
pub fn metrics_rgb(sr: &Array3<f64>, hr: &Array3<f64>, shave: usize) -> Result<(f64, f64)> {
    if sr.dim() != hr.dim() {
        return Err(Error::Shape(format!(
            "metric dims {:?} vs {:?}",
            sr.dim(),
            hr.dim()
        )));
    }
    let ya = rgb_to_y(sr);
    let yb = rgb_to_y(hr);
    let p = psnr(&ya, &yb, shave)?;
    let (h, w) = ya.dim();
    let yas = ya.slice(s![shave..h - shave, shave..w - shave]).to_owned();
    let ybs = yb.slice(s![shave..h - shave, shave..w - shave]).to_owned();
    let s = ssim(&yas, &ybs)?;
    Ok((p, s))
}

/// Average the network over the 8 dihedral views of the input, undoing each
/// transform on the corresponding output before averaging.
pub fn self_ensemble<F>(mut forward: F, lr: &Array3<f64>) -> Result<Array3<f64>>
where
    F: FnMut(&Array3<f64>) -> Result<Array3<f64>>,
{
    let mut acc: Option<Array3<f64>> = None;
    for flip in [false, true] {
        for k in 0..4 {
            let view = dihedral(lr, k, flip);
            let out = forward(&view)?;
            let restored = dihedral_inverse(&out, k, flip);
            match acc.as_mut() {
                None => acc = Some(restored),
                Some(a) => *a += &restored,
            }
        }
    }
    Ok(acc.expect("eight views").mapv(|v| v / 8.0))
}

/// One (dataset, width) evaluation row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricResult {
    pub dataset: String,
    pub width: f64,
    pub params: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub ms_per_image: f64,
    pub per_image_psnr: Vec<f64>,
    pub per_image_ssim: Vec<f64>,
}

fn forward_image(net: &SRBackbone, r: WidthMultiplier, lr: &Array3<f64>) -> Result<Array3<f64>> {
    let (c, h, w) = lr.dim();
    let mut batch = Array4::<f64>::zeros((1, c, h, w));
    batch.slice_mut(s![0, .., .., ..]).assign(lr);
    let out = net.forward(&batch, r)?;
    Ok(out
        .index_axis(ndarray::Axis(0), 0)
        .mapv(|v| v.clamp(0.0, 1.0)))
}

/// Evaluate one dataset at one width: Y-channel PSNR/SSIM with
/// `shave = scale`, plus mean wall-clock per image (two warmup forwards on
/// the first image are excluded from the mean).
pub fn evaluate_dataset(
    net: &SRBackbone,
    r: WidthMultiplier,
    ds: &PairedDataset,
    ensemble: bool,
) -> Result<MetricResult> {
    let scale = net.cfg.scale;
    let mut per_psnr = Vec::with_capacity(ds.len());
    let mut per_ssim = Vec::with_capacity(ds.len());
    let mut seconds = 0.0;
    for i in 0..ds.len() {
        let (lr, hr) = ds.load_pair(i)?;
        if i == 0 {
            for _ in 0..2 {
                forward_image(net, r, &lr)?;
            }
        }
        let t0 = Instant::now();
        let sr = if ensemble {
            self_ensemble(|img| forward_image(net, r, img), &lr)?
        } else {
            forward_image(net, r, &lr)?
        };
        seconds += t0.elapsed().as_secs_f64();
        let (p, s) = metrics_rgb(&sr, &hr, scale)?;
        per_psnr.push(p);
        per_ssim.push(s);
    }
    let n = ds.len() as f64;
    Ok(MetricResult {
        dataset: String::new(),
        width: r.value(),
        params: net.parameter_count(r),
        psnr_db: per_psnr.iter().sum::<f64>() / n,
        ssim: per_ssim.iter().sum::<f64>() / n,
        ms_per_image: 1000.0 * seconds / n,
        per_image_psnr: per_psnr,
        per_image_ssim: per_ssim,
    })
}

/// Mean bicubic-upsampling PSNR over a dataset (the no-model baseline).
pub fn bicubic_baseline_psnr(ds: &PairedDataset) -> Result<f64> {
    let scale = ds.scale;
    let mut total = 0.0;
    for i in 0..ds.len() {
        let (lr, hr) = ds.load_pair(i)?;
        let (_, hh, hw) = hr.dim();
        let up = bicubic_resize(&lr, hh, hw, false).mapv(|v| v.clamp(0.0, 1.0));
        let (p, _) = metrics_rgb(&up, &hr, scale)?;
        total += p;
    }
    Ok(total / ds.len() as f64)
}

/// Benchmark a grid of datasets and widths. Unresolvable datasets are
/// skipped with a warning on stderr.
pub fn benchmark(
    net: &SRBackbone,
    data_root: &Path,
    datasets: &[String],
    widths: &[WidthMultiplier],
    ensemble: bool,
) -> Result<Vec<MetricResult>> {
    let mut out = Vec::new();
    for set in datasets {
        let ds = match PairedDataset::from_dir(data_root, set, net.cfg.scale) {
            Ok(ds) => ds,
            Err(e) => {
                eprintln!("warning: skipping dataset {set}: {e}");
                continue;
            }
        };
        for &r in widths {
            let mut res = evaluate_dataset(net, r, &ds, ensemble)?;
            res.dataset = set.clone();
            out.push(res);
        }
    }
    Ok(out)
}

/// Median wall-clock seconds for one forward at width `r`, `reps` timed
/// passes after `warmup` untimed ones.
pub fn time_forward(
    net: &SRBackbone,
    r: WidthMultiplier,
    lr: &Array4<f64>,
    warmup: usize,
    reps: usize,
) -> Result<f64> {
    for _ in 0..warmup {
        net.forward(lr, r)?;
    }
    let mut times = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        net.forward(lr, r)?;
        times.push(t0.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(times[times.len() / 2])
}

fn ensure_plot_font() -> bool {
    use std::sync::OnceLock;
    static REGISTERED: OnceLock<bool> = OnceLock::new();
    *REGISTERED.get_or_init(|| {
        let candidates = [
            "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
            "/usr/share/fonts/TTF/DejaVuSans.ttf",
            "/usr/share/fonts/dejavu/DejaVuSans.ttf",
        ];
        for path in candidates {
            if let Ok(bytes) = std::fs::read(path) {
                let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font(
                    "sans-serif",
                    plotters::style::FontStyle::Normal,
                    leaked,
                )
                .is_ok()
                {
                    return true;
                }
            }
        }
        eprintln!("warning: no usable TTF font found; plots will omit text");
        false
    })
}

fn scatter_plot(
    path: &Path,
    caption: &str,
    x_label: &str,
    points: &[(String, f64, f64, f64)], // (dataset, x, psnr, width)
) -> Result<()> {
    use plotters::prelude::*;
    let with_text = ensure_plot_font();
    let root = BitMapBackend::new(path, (800, 600)).into_drawing_area();
    root.fill(&WHITE)
        .map_err(|e| Error::Plot(e.to_string()))?;

    let finite: Vec<&(String, f64, f64, f64)> =
        points.iter().filter(|p| p.1.is_finite() && p.2.is_finite()).collect();
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &finite {
        x_min = x_min.min(p.1);
        x_max = x_max.max(p.1);
        y_min = y_min.min(p.2);
        y_max = y_max.max(p.2);
    }
    if finite.is_empty() {
        (x_min, x_max, y_min, y_max) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| {
        let span = (hi - lo).max(1e-9);
        (lo - 0.08 * span, hi + 0.08 * span)
    };
    let (x_min, x_max) = pad(x_min, x_max);
    let (y_min, y_max) = pad(y_min, y_max);

    let mut builder = ChartBuilder::on(&root);
    if with_text {
        builder
            .caption(caption, ("sans-serif", 24))
            .margin(12)
            .x_label_area_size(42)
            .y_label_area_size(56);
    } else {
        builder.margin(12);
    }
    let mut chart = builder
        .build_cartesian_2d(x_min..x_max, y_min..y_max)
        .map_err(|e| Error::Plot(e.to_string()))?;
    {
        let mut mesh = chart.configure_mesh();
        if with_text {
            mesh.x_desc(x_label).y_desc("PSNR (dB)");
        } else {
            mesh.disable_x_axis().disable_y_axis();
        }
        mesh.draw().map_err(|e| Error::Plot(e.to_string()))?;
    }

    let mut datasets: Vec<String> = finite.iter().map(|p| p.0.clone()).collect();
    datasets.sort();
    datasets.dedup();
    let palette = [&RED, &BLUE, &GREEN, &MAGENTA, &CYAN, &BLACK];
    for (di, name) in datasets.iter().enumerate() {
        let color = palette[di % palette.len()];
        let mut series: Vec<(f64, f64, f64)> = finite
            .iter()
            .filter(|p| &p.0 == name)
            .map(|p| (p.1, p.2, p.3))
            .collect();
        series.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        chart
            .draw_series(LineSeries::new(
                series.iter().map(|&(x, y, _)| (x, y)),
                color,
            ))
            .map_err(|e| Error::Plot(e.to_string()))?
            .label(name.clone())
            .legend(move |(x, y)| {
                plotters::element::PathElement::new(vec![(x, y), (x + 18, y)], color)
            });
        chart
            .draw_series(
                series
                    .iter()
                    .map(|&(x, y, _)| Circle::new((x, y), 4, color.filled())),
            )
            .map_err(|e| Error::Plot(e.to_string()))?;
        if with_text {
            chart
                .draw_series(series.iter().map(|&(x, y, w)| {
                    Text::new(format!("r={w}"), (x, y), ("sans-serif", 14))
                }))
                .map_err(|e| Error::Plot(e.to_string()))?;
        }
    }
    if with_text && !datasets.is_empty() {
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.85))
            .draw()
            .map_err(|e| Error::Plot(e.to_string()))?;
    }
    root.present().map_err(|e| Error::Plot(e.to_string()))?;
    Ok(())
}

/// Write `results.csv`, `psnr_params.png` and `psnr_speed.png` under
/// `out_dir`. The CSV holds one row per result with the scalar fields; the
/// plots chart PSNR against parameter count and against latency.
pub fn emit_report(results: &[MetricResult], out_dir: &Path) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Config("no results to report".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let csv_path = out_dir.join("results.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| {
        Error::io(&csv_path, std::io::Error::other(e.to_string()))
    })?;
    w.write_record(["dataset", "width", "params", "psnr_db", "ssim", "ms_per_image"])
        .map_err(|e| Error::io(&csv_path, std::io::Error::other(e.to_string())))?;
    for r in results {
        w.write_record([
            r.dataset.clone(),
            r.width.to_string(),
            r.params.to_string(),
            r.psnr_db.to_string(),
            r.ssim.to_string(),
            r.ms_per_image.to_string(),
        ])
        .map_err(|e| Error::io(&csv_path, std::io::Error::other(e.to_string())))?;
    }
    w.flush()
        .map_err(|e| Error::io(&csv_path, std::io::Error::other(e.to_string())))?;

    let param_points: Vec<(String, f64, f64, f64)> = results
        .iter()
        .map(|r| (r.dataset.clone(), r.params as f64 / 1e6, r.psnr_db, r.width))
        .collect();
    scatter_plot(
        &out_dir.join("psnr_params.png"),
        "PSNR vs parameters",
        "parameters (millions)",
        &param_points,
    )?;
    let speed_points: Vec<(String, f64, f64, f64)> = results
        .iter()
        .map(|r| (r.dataset.clone(), r.ms_per_image, r.psnr_db, r.width))
        .collect();
    scatter_plot(
        &out_dir.join("psnr_speed.png"),
        "PSNR vs latency",
        "ms per image",
        &speed_points,
    )?;
    Ok(())
}

/// Parse `results.csv` back into scalar-only [`MetricResult`]s (per-image
/// lists are not serialized).
pub fn parse_report(csv_path: &Path) -> Result<Vec<MetricResult>> {
    let mut rd = csv::Reader::from_path(csv_path).map_err(|e| {
        Error::io(csv_path, std::io::Error::other(e.to_string()))
    })?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::io(csv_path, std::io::Error::other(e.to_string())))?;
        let field = |i: usize| -> Result<&str> {
            rec.get(i)
                .ok_or_else(|| Error::Config(format!("results.csv row missing column {i}")))
        };
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Config(format!("bad float {s:?} in results.csv")))
        };
        out.push(MetricResult {
            dataset: field(0)?.to_string(),
            width: parse_f(field(1)?)?,
            params: field(2)?
                .parse()
                .map_err(|_| Error::Config("bad params in results.csv".into()))?,
            psnr_db: parse_f(field(3)?)?,
            ssim: parse_f(field(4)?)?,
            ms_per_image: parse_f(field(5)?)?,
            per_image_psnr: Vec::new(),
            per_image_ssim: Vec::new(),
        });
    }
    Ok(out)
}

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use base64::Engine as _;
use ndarray::Array2;

use super::pipeline::{load_cell_maps, load_ground_truth};
use super::{ExperimentConfig, Method, MetricsTable};
use crate::error::{Error, Result};
use crate::maps::MapKind;

const PANEL: usize = 160;
const GAP: usize = 12;
const CAPTION: usize = 34;
const LEFT: usize = 70;
const BAR: usize = 14;

fn gray(v: f64, lo: f64, hi: f64) -> [u8; 3] {
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    let g = (t * 255.0).round() as u8;
    [g, g, g]
}

/// Blue for negative, white at zero, red for positive, saturating at
/// `±limit`.
pub(crate) fn diverging(v: f64, limit: f64) -> [u8; 3] {
    let t = (v / limit).clamp(-1.0, 1.0);
    let fade = |x: f64| (255.0 * (1.0 - x.abs())).round() as u8;
    if t >= 0.0 {
        [255, fade(t), fade(t)]
    } else {
        [fade(t), fade(t), 255]
    }
}

fn png_data_uri(pixels: &Array2<[u8; 3]>) -> Result<String> {
    let (h, w) = pixels.dim();
    let mut raw = Vec::with_capacity(h * w * 3);
    for px in pixels.iter() {
        raw.extend_from_slice(px);
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::Image("pixel buffer size".into()))?;
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes)))
}

fn panel(svg: &mut String, x: usize, y: usize, pixels: &Array2<[u8; 3]>, caption: &str) -> Result<()> {
    let (h, w) = pixels.dim();
    let scale = PANEL as f64 / h.max(w) as f64;
    let (pw, ph) = (w as f64 * scale, h as f64 * scale);
    writeln!(
        svg,
        r#"<image x="{x}" y="{y}" width="{pw:.1}" height="{ph:.1}" preserveAspectRatio="none" style="image-rendering:pixelated" href="{}"/>"#,
        png_data_uri(pixels)?
    )
    .expect("string write");
    writeln!(
        svg,
        r#"<text x="{:.1}" y="{}" font-size="12" text-anchor="middle">{caption}</text>"#,
        x as f64 + pw / 2.0,
        y + PANEL + 16
    )
    .expect("string write");
    Ok(())
}

fn colorbar(svg: &mut String, x: usize, y: usize, color: impl Fn(f64) -> [u8; 3], lo: f64, hi: f64) -> Result<()> {
    let steps = 64;
    let pixels = Array2::from_shape_fn((steps, 1), |(i, _)| color(hi - (hi - lo) * i as f64 / (steps - 1) as f64));
    writeln!(
        svg,
        r#"<image x="{x}" y="{y}" width="{BAR}" height="{PANEL}" preserveAspectRatio="none" href="{}"/>"#,
        png_data_uri(&pixels)?
    )
    .expect("string write");
    for (v, yy) in [(hi, y + 10), (lo, y + PANEL)] {
        writeln!(svg, r#"<text x="{}" y="{yy}" font-size="10">{}</text>"#, x + BAR + 3, fmt_value(v)).expect("string write");
    }
    Ok(())
}

fn fmt_value(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Renders one figure per map kind from a finished result directory: for every
/// acceleration factor, a row of maps (ground truth, then each method) and a
/// row of signed error maps, on the central slice.
pub fn emit_figures(dir: &Path) -> Result<Vec<PathBuf>> {
    let config_path = dir.join("config.json");
    let cfg = ExperimentConfig::load(&config_path)?;
    let metrics_path = dir.join("metrics.csv");
    let table = MetricsTable::from_csv(
        &fs::read_to_string(&metrics_path).map_err(|_| Error::MissingArtifact(metrics_path.display().to_string()))?,
    )?;
    if table.rows.is_empty() {
        return Err(Error::MissingArtifact(format!("{}: no scored cells", metrics_path.display())));
    }
    let (truth, mask) = load_ground_truth(dir, &cfg.protocol)?;
    let kinds: BTreeSet<MapKind> = table.rows.iter().map(|r| r.map).collect();
    let methods: Vec<Method> = cfg.methods.iter().copied().filter(|m| table.rows.iter().any(|r| r.method == *m)).collect();
    let rs: Vec<f64> = cfg.mask.r.iter().copied().filter(|r| table.rows.iter().any(|row| row.r == *r)).collect();
    let z = mask.dim().2 / 2;
    let out_dir = dir.join("figures");
    fs::create_dir_all(&out_dir)?;
    let mut written = Vec::new();
    for kind in kinds {
        let clamp = |v: f64| cfg.clamp(kind).map_or(v, |(lo, hi)| v.clamp(lo, hi));
        let gt = truth.require(kind)?.map(|&v| clamp(v as f64));
        let slice = |a: &ndarray::Array3<f64>| Array2::from_shape_fn((a.dim().0, a.dim().1), |(i, j)| if mask[[i, j, z]] { a[[i, j, z]] } else { f64::NAN });
        let gt_slice = slice(&gt);
        let (mut lo, mut hi) = gt.iter().zip(mask.iter()).filter(|(_, &m)| m).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| (lo.min(v), hi.max(v)));
        if let Some((clo, _)) = cfg.clamp(kind) {
            lo = lo.min(clo);
        }
        if !(hi > lo) {
            hi = lo + 1.0;
        }
        // one symmetric error scale per figure
        let mut recons = Vec::new();
        let mut limit: f64 = 0.0;
        for &r in &rs {
            for &method in &methods {
                let pred = load_cell_maps(dir, method, r, &[kind]).ok().map(|m| m.require(kind).expect("loaded").map(|&v| clamp(v as f64)));
                if let Some(p) = &pred {
                    let err = slice(&(p - &gt));
                    limit = limit.max(err.iter().filter(|v| v.is_finite()).fold(0.0, |a, v| a.max(v.abs())));
                }
                recons.push(pred);
            }
        }
        if !(limit > 0.0) {
            limit = 1.0;
        }
        let to_gray = |a: &Array2<f64>| a.map(|&v| if v.is_finite() { gray(v, lo, hi) } else { [0, 0, 0] });
        let to_div = |a: &Array2<f64>| a.map(|&v| if v.is_finite() { diverging(v, limit) } else { [255, 255, 255] });
        let cols = methods.len() + 1;
        let width = LEFT + cols * (PANEL + GAP) + 2 * (BAR + 50);
        let height = 40 + rs.len() * 2 * (PANEL + CAPTION);
        let mut svg = String::new();
        writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif">"#).expect("string write");
        writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).expect("string write");
        writeln!(svg, r#"<text x="{LEFT}" y="24" font-size="16">{kind} (slice {z})</text>"#).expect("string write");
        let mut idx = 0;
        for (ri, &r) in rs.iter().enumerate() {
            let y_map = 40 + ri * 2 * (PANEL + CAPTION);
            let y_err = y_map + PANEL + CAPTION;
            writeln!(svg, r#"<text x="8" y="{}" font-size="13">{}</text>"#, y_map + PANEL / 2, super::r_label(r)).expect("string write");
            panel(&mut svg, LEFT, y_map, &to_gray(&gt_slice), "ground truth")?;
            for (mi, &method) in methods.iter().enumerate() {
                let x = LEFT + (mi + 1) * (PANEL + GAP);
                let pred = &recons[idx];
                idx += 1;
                let Some(p) = pred else {
                    writeln!(svg, r#"<text x="{x}" y="{}" font-size="12">{method}: missing</text>"#, y_map + PANEL / 2).expect("string write");
                    continue;
                };
                let score = table.get(method, r, kind).map_or(String::from("n/a"), |v| format!("{v:.4}"));
                panel(&mut svg, x, y_map, &to_gray(&slice(p)), &format!("{method} NRMSE {score}"))?;
                panel(&mut svg, x, y_err, &to_div(&slice(&(p - &gt))), &format!("{method} error"))?;
            }
            let xb = LEFT + cols * (PANEL + GAP);
            colorbar(&mut svg, xb, y_map, |v| gray(v, lo, hi), lo, hi)?;
            colorbar(&mut svg, xb + BAR + 50, y_err, |v| diverging(v, limit), -limit, limit)?;
        }
        svg.push_str("</svg>\n");
        let path = out_dir.join(format!("{kind}.svg"));
        fs::write(&path, svg)?;
        written.push(path);
    }
    Ok(written)
}

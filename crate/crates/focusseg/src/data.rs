//! Synthetic scene generation and on-disk dataset formats (binary PPM/PGM
//! plus a tab-separated manifest).
//!
//! Scenes are built to stress the mechanism under test: large blobs with
//! clean boundaries and thin 1-2 px bars of a dedicated class that occupy a
//! small fraction of the pixels, over a textured background.

use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::supervision::{LabelMap, IGNORE_LABEL};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// Image tensor `[3,H,W]` with values in `[0,1]`.
    pub image: Tensor,
    pub labels: LabelMap,
}

/// Distinct base color per class: dark background, saturated blob colors on a
/// rotating hue, and a near-white thin-structure class last.
pub fn palette(num_classes: usize) -> Vec<[f64; 3]> {
    let mut colors = vec![[0.18, 0.22, 0.28]];
    for j in 0..num_classes.saturating_sub(2) {
        let hue = (j as f64 * 0.6180339887498949).fract();
        colors.push(hsv_to_rgb(hue, 0.7, 0.75));
    }
    colors.push([0.93, 0.93, 0.97]);
    colors
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Deterministic per (seed, index): scene i draws from an independent stream,
/// so a dataset prefix is stable under a larger count.
pub fn gen_synthetic(
    seed: u64,
    count: usize,
    size: [usize; 2],
    num_classes: usize,
) -> Result<Vec<SyntheticScene>> {
    let [h, w] = size;
    if h < 16 || w < 16 {
        return Err(Error::config(format!("scene size {size:?} must be at least 16x16")));
    }
    if num_classes < 3 {
        return Err(Error::config(
            "generator needs >= 3 classes (background, blob, thin-structure)".to_string(),
        ));
    }
    if num_classes > 254 {
        return Err(Error::config("at most 254 classes"));
    }
    let base = Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|i| gen_scene(base.derive(i as u64), i, size, num_classes))
        .collect())
}

fn gen_scene(mut rng: Rng, index: usize, size: [usize; 2], num_classes: usize) -> SyntheticScene {
    let [h, w] = size;
    let blob_classes = num_classes - 2;
    let bar_class = (num_classes - 1) as u8;
    let mut labels = vec![0u8; h * w];

    let n_blobs = rng.uniform_usize(1, 3);
    for b in 0..n_blobs {
        // The first blob cycles through the blob classes so every class
        // appears with nonzero frequency across a modest dataset.
        let class = if b == 0 {
            1 + (index % blob_classes) as u8
        } else {
            rng.uniform_usize(1, blob_classes) as u8
        };
        if rng.bernoulli(0.5) {
            let bw = rng.uniform_usize(w / 8, w / 2);
            let bh = rng.uniform_usize(h / 8, h / 2);
            let x0 = rng.uniform_usize(0, w - bw);
            let y0 = rng.uniform_usize(0, h - bh);
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    labels[y * w + x] = class;
                }
            }
        } else {
            let rx = rng.uniform_usize(w / 10, w / 3) as f64;
            let ry = rng.uniform_usize(h / 10, h / 3) as f64;
            let cx = rng.uniform(rx, w as f64 - rx);
            let cy = rng.uniform(ry, h as f64 - ry);
            for y in 0..h {
                for x in 0..w {
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let dy = (y as f64 + 0.5 - cy) / ry;
                    if dx * dx + dy * dy <= 1.0 {
                        labels[y * w + x] = class;
                    }
                }
            }
        }
    }

    let n_bars = rng.uniform_usize(1, 3);
    for _ in 0..n_bars {
        let thickness = rng.uniform_usize(1, 2);
        if rng.bernoulli(0.5) {
            // horizontal
            let len = rng.uniform_usize(2 * w / 5, w);
            let x0 = rng.uniform_usize(0, w - len);
            let y0 = rng.uniform_usize(0, h - thickness);
            for y in y0..y0 + thickness {
                for x in x0..x0 + len {
                    labels[y * w + x] = bar_class;
                }
            }
        } else {
            let len = rng.uniform_usize(2 * h / 5, h);
            let y0 = rng.uniform_usize(0, h - len);
            let x0 = rng.uniform_usize(0, w - thickness);
            for y in y0..y0 + len {
                for x in x0..x0 + thickness {
                    labels[y * w + x] = bar_class;
                }
            }
        }
    }

    // Image: per-class base color, a low-frequency shading field for texture,
    // and pixel noise, clamped to [0,1].
    let colors = palette(num_classes);
    let fx = rng.uniform(0.5, 2.0) * std::f64::consts::TAU / w as f64;
    let fy = rng.uniform(0.5, 2.0) * std::f64::consts::TAU / h as f64;
    let phase = rng.uniform(0.0, std::f64::consts::TAU);
    let mut image = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let shade = 0.03 * ((x as f64 * fx + y as f64 * fy + phase).sin());
            let base = colors[labels[p] as usize];
            for c in 0..3 {
                let v = base[c] + shade + rng.normal_scaled(0.05);
                image[c * h * w + p] = v.clamp(0.0, 1.0);
            }
        }
    }

    SyntheticScene {
        image: Tensor::from_vec(&[3, h, w], image).expect("consistent dims"),
        labels: LabelMap::new(h, w, labels).expect("consistent dims"),
    }
}

// ---- netpbm IO ----

fn quantize(v: f64) -> u8 {
    (255.0 * v).round().clamp(0.0, 255.0) as u8
}

/// Binary PPM (P6, 8-bit); bytes are round(255 * x).
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::contract(format!("PPM wants 3 channels, got {c}")));
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "P6\n{w} {h}\n255\n")?;
    let data = image.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for ch in 0..3 {
            bytes.push(quantize(data[ch * h * w + p]));
        }
    }
    file.write_all(&bytes)?;
    Ok(())
}

/// Binary PGM (P5, 8-bit); 255 encodes the ignore label.
pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    let (h, w) = labels.dims();
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "P5\n{w} {h}\n255\n")?;
    file.write_all(labels.labels())?;
    Ok(())
}

fn read_netpbm_header(data: &[u8], path: &Path, magic: &str) -> Result<(usize, usize, usize)> {
    let fail = |reason: String| Error::Format { path: path.display().to_string(), reason };
    let mut pos = 0usize;
    let mut fields = Vec::new();
    // magic, width, height, maxval separated by whitespace; '#' starts a comment.
    while fields.len() < 4 {
        if pos >= data.len() {
            return Err(fail("truncated header".into()));
        }
        match data[pos] {
            b'#' => {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => pos += 1,
            _ => {
                let start = pos;
                while pos < data.len() && !data[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                fields.push(std::str::from_utf8(&data[start..pos]).map_err(|_| fail("non-ascii header".into()))?.to_string());
            }
        }
    }
    if fields[0] != magic {
        return Err(fail(format!("expected {magic}, found {}", fields[0])));
    }
    let w: usize = fields[1].parse().map_err(|_| fail("bad width".into()))?;
    let h: usize = fields[2].parse().map_err(|_| fail("bad height".into()))?;
    let maxval: usize = fields[3].parse().map_err(|_| fail("bad maxval".into()))?;
    if maxval != 255 {
        return Err(fail(format!("only 8-bit maxval 255 supported, got {maxval}")));
    }
    // Exactly one whitespace byte separates header and payload.
    Ok((w, h, pos + 1))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let (w, h, offset) = read_netpbm_header(&data, path, "P6")?;
    let need = 3 * w * h;
    if data.len() < offset + need {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("payload too short: {} < {need}", data.len() - offset),
        });
    }
    let mut out = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            out[c * h * w + p] = data[offset + 3 * p + c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], out)
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let (w, h, offset) = read_netpbm_header(&data, path, "P5")?;
    if data.len() < offset + w * h {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: "payload too short".to_string(),
        });
    }
    LabelMap::new(h, w, data[offset..offset + w * h].to_vec())
}

// ---- dataset directory with manifest ----

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Writes scene pairs as scene_XXXX.ppm / scene_XXXX_labels.pgm plus a
/// manifest (one image-path TAB label-path line per pair; '#' lines carry the
/// generator parameters as comments).
pub fn write_dataset(
    dir: &Path,
    scenes: &[SyntheticScene],
    header_comments: &[String],
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let manifest_path = dir.join(MANIFEST_NAME);
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(&manifest_path)?);
    for line in header_comments {
        writeln!(manifest, "# {line}")?;
    }
    for (i, scene) in scenes.iter().enumerate() {
        let image_name = format!("scene_{i:04}.ppm");
        let label_name = format!("scene_{i:04}_labels.pgm");
        write_ppm(&dir.join(&image_name), &scene.image)?;
        write_pgm(&dir.join(&label_name), &scene.labels)?;
        writeln!(manifest, "{image_name}\t{label_name}")?;
    }
    Ok(manifest_path)
}

/// Pairs listed in a manifest, resolved relative to its directory.
pub fn read_manifest(manifest_path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let file = std::io::BufReader::new(std::fs::File::open(manifest_path)?);
    let mut pairs = Vec::new();
    for line in file.lines() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split('\t');
        let (img, lbl) = match (parts.next(), parts.next()) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Format {
                    path: manifest_path.display().to_string(),
                    reason: format!("manifest line is not image TAB label: {trimmed:?}"),
                })
            }
        };
        pairs.push((dir.join(img), dir.join(lbl)));
    }
    Ok(pairs)
}

pub fn load_dataset(manifest_path: &Path) -> Result<Vec<SyntheticScene>> {
    read_manifest(manifest_path)?
        .into_iter()
        .map(|(img, lbl)| {
            Ok(SyntheticScene { image: read_ppm(&img)?, labels: read_pgm(&lbl)? })
        })
        .collect()
}

/// Fraction of non-ignore pixels carrying a given class.
pub fn class_fraction(scenes: &[SyntheticScene], class: u8) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for s in scenes {
        for &l in s.labels.labels() {
            if l == IGNORE_LABEL {
                continue;
            }
            total += 1;
            if l == class {
                hit += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

//! PNG and text renderings of evaluation results.

use std::fmt::Write;

use anyhow::{bail, Context, Result};
use image::{Rgb, RgbImage};
use stormcast_core::dataset::CLASS_COUNT;
use stormcast_core::eval::ConfusionMatrix;

const CELL: u32 = 64;
const MARGIN: u32 = 24;

// 3x5 bitmaps, one row per u8 with the low 3 bits used.
const DIGITS: [[u8; 5]; 10] = [
    [7, 5, 5, 5, 7],
    [2, 6, 2, 2, 7],
    [7, 1, 7, 4, 7],
    [7, 1, 7, 1, 7],
    [5, 5, 7, 1, 1],
    [7, 4, 7, 1, 7],
    [7, 4, 7, 5, 7],
    [7, 1, 1, 1, 1],
    [7, 5, 7, 5, 7],
    [7, 5, 7, 1, 7],
];

fn draw_number(img: &mut RgbImage, n: u64, cx: u32, cy: u32, scale: u32, color: Rgb<u8>) {
    let text = n.to_string();
    let w = text.len() as u32 * 4 * scale - scale;
    let x0 = cx.saturating_sub(w / 2);
    let y0 = cy.saturating_sub(5 * scale / 2);
    for (k, ch) in text.bytes().enumerate() {
        let glyph = DIGITS[(ch - b'0') as usize];
        for (r, bits) in glyph.iter().enumerate() {
            for c in 0..3 {
                if bits & (4 >> c) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let x = x0 + (k as u32 * 4 + c) * scale + dx;
                        let y = y0 + r as u32 * scale + dy;
                        if x < img.width() && y < img.height() {
                            img.put_pixel(x, y, color);
                        }
                    }
                }
            }
        }
    }
}

/// Row-normalized heatmap, true class down, predicted class across, with
/// the raw counts printed in each cell and class indices on the margins.
pub fn confusion_png(cm: &ConfusionMatrix) -> RgbImage {
    let side = MARGIN + CELL * CLASS_COUNT as u32;
    let mut img = RgbImage::from_pixel(side, side, Rgb([255, 255, 255]));
    let norm = cm.row_normalized();
    for (t, row) in norm.iter().enumerate() {
        for (p, &v) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - v)).round() as u8;
            let color = Rgb([shade, shade, 255]);
            let (x0, y0) = (MARGIN + p as u32 * CELL, MARGIN + t as u32 * CELL);
            for y in y0..y0 + CELL - 1 {
                for x in x0..x0 + CELL - 1 {
                    img.put_pixel(x, y, color);
                }
            }
            let ink = if v > 0.5 { Rgb([255, 255, 255]) } else { Rgb([0, 0, 0]) };
            let scale = if cm.counts[t][p] >= 100_000 { 2 } else { 3 };
            draw_number(&mut img, cm.counts[t][p], x0 + CELL / 2, y0 + CELL / 2, scale, ink);
        }
        let mid = MARGIN + t as u32 * CELL + CELL / 2;
        draw_number(&mut img, t as u64, MARGIN / 2, mid, 2, Rgb([0, 0, 0]));
        draw_number(&mut img, t as u64, mid, MARGIN / 2, 2, Rgb([0, 0, 0]));
    }
    img
}

pub fn confusion_text(cm: &ConfusionMatrix) -> String {
    let mut out = String::from("true\\pred");
    for p in 0..CLASS_COUNT {
        let _ = write!(out, " {p:>10}");
    }
    out.push('\n');
    for t in 0..CLASS_COUNT {
        let _ = write!(out, "{t:>9}");
        for p in 0..CLASS_COUNT {
            let _ = write!(out, " {:>10}", cm.counts[t][p]);
        }
        let _ = write!(out, "   recall");
        match cm.per_class_accuracy()[t] {
            Some(r) => {
                let _ = writeln!(out, " {r:.4}");
            }
            None => out.push_str(" n/a\n"),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: f64,
    pub val_loss: Option<f64>,
}

pub fn parse_history(text: &str) -> Result<Vec<HistoryRow>> {
    let mut rows = Vec::new();
    for (k, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            bail!("history line {}: expected 5 fields", k + 1);
        }
        let num = |s: &str| s.parse::<f64>().with_context(|| format!("history line {}: bad number '{s}'", k + 1));
        rows.push(HistoryRow {
            epoch: f[0].parse().with_context(|| format!("history line {}: bad epoch", k + 1))?,
            loss: num(f[1])?,
            val_loss: if f[3].is_empty() { None } else { Some(num(f[3])?) },
        });
    }
    Ok(rows)
}

/// Training loss (blue) and validation loss (red) against epoch.
pub fn history_png(rows: &[HistoryRow]) -> RgbImage {
    let (w, h) = (480u32, 240u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let (left, right, top, bottom) = (MARGIN, w - 8, 8, h - MARGIN);
    for x in left..=right {
        img.put_pixel(x, bottom, Rgb([0, 0, 0]));
    }
    for y in top..=bottom {
        img.put_pixel(left, y, Rgb([0, 0, 0]));
    }
    if rows.is_empty() {
        return img;
    }
    let max = rows
        .iter()
        .flat_map(|r| [Some(r.loss), r.val_loss])
        .flatten()
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let px = |i: usize| left + 1 + ((right - left - 1) as f64 * i as f64 / (rows.len().max(2) - 1) as f64) as u32;
    let py = |v: f64| bottom - 1 - ((bottom - top - 1) as f64 * (v / max).clamp(0.0, 1.0)) as u32;
    let mut plot = |series: &dyn Fn(&HistoryRow) -> Option<f64>, color: Rgb<u8>| {
        let mut prev: Option<(u32, u32)> = None;
        for (i, r) in rows.iter().enumerate() {
            let Some(v) = series(r).filter(|v| v.is_finite()) else {
                prev = None;
                continue;
            };
            let p = (px(i), py(v));
            if let Some(q) = prev {
                line(&mut img, q, p, color);
            }
            img.put_pixel(p.0, p.1, color);
            prev = Some(p);
        }
    };
    plot(&|r| Some(r.loss), Rgb([30, 60, 200]));
    plot(&|r| r.val_loss, Rgb([200, 40, 40]));
    draw_number(&mut img, rows.last().map_or(0, |r| r.epoch as u64), right - 12, bottom + MARGIN / 2, 2, Rgb([0, 0, 0]));
    img
}

fn line(img: &mut RgbImage, a: (u32, u32), b: (u32, u32), color: Rgb<u8>) {
    let steps = a.0.abs_diff(b.0).max(a.1.abs_diff(b.1)).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a.0 as f64 + (b.0 as f64 - a.0 as f64) * t;
        let y = a.1 as f64 + (b.1 as f64 - a.1 as f64) * t;
        img.put_pixel(x.round() as u32, y.round() as u32, color);
    }
}

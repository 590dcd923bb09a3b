//! Minimal deterministic PNG line charts: axes, gridlines, a 3x5 pixel font
//! for tick and legend text, and one polyline per series.

use crate::error::{Error, Result};
use image::{Rgb, RgbImage};
use std::path::Path;

pub struct LineSeries {
    pub label: String,
    pub color: [u8; 3],
    pub points: Vec<(f64, f64)>,
}

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

// 3x5 glyphs, row-major bits, for "0-9.-= ", A-Z subset used by labels.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '_' => [0b000, 0b000, 0b000, 0b000, 0b111],
        'A' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'B' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'C' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'D' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'E' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'F' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'G' => [0b011, 0b100, 0b101, 0b101, 0b011],
        'H' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'I' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'K' => [0b101, 0b110, 0b100, 0b110, 0b101],
        'L' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'M' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'N' => [0b101, 0b111, 0b111, 0b111, 0b101],
        'O' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'P' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'R' => [0b110, 0b101, 0b110, 0b110, 0b101],
        'S' => [0b011, 0b100, 0b010, 0b001, 0b110],
        'T' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'U' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'V' => [0b101, 0b101, 0b101, 0b101, 0b010],
        'Y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        _ => [0b000, 0b000, 0b000, 0b000, 0b000],
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: Rgb<u8>) {
    let mut cx = x;
    for c in text.chars() {
        let g = glyph(c);
        for (gy, row) in g.iter().enumerate() {
            for gx in 0..3 {
                if row & (0b100 >> gx) != 0 {
                    put(img, cx + gx as i64, y + gy as i64, color);
                }
            }
        }
        cx += 4;
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let (mut x, mut y) = (x0, y0);
    loop {
        put(img, x, y, color);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

/// Renders `series` to a PNG at `path`.
pub fn render_line_chart(path: &Path, title: &str, series: &[LineSeries]) -> Result<()> {
    let (w, h) = (720u32, 420u32);
    let (ml, mr, mt, mb) = (52i64, 16i64, 24i64, 32i64);
    let mut img = RgbImage::from_pixel(w, h, BG);

    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    if pts.is_empty() {
        x_min = 0.0;
        x_max = 1.0;
        y_min = 0.0;
        y_max = 1.0;
    }
    if x_max == x_min {
        x_max = x_min + 1.0;
    }
    if y_max == y_min {
        y_max = y_min + 1.0;
    }
    let y_pad = 0.05 * (y_max - y_min);
    y_min -= y_pad;
    y_max += y_pad;

    let plot_w = w as i64 - ml - mr;
    let plot_h = h as i64 - mt - mb;
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let px = ml + ((x - x_min) / (x_max - x_min) * plot_w as f64).round() as i64;
        let py = mt + plot_h - ((y - y_min) / (y_max - y_min) * plot_h as f64).round() as i64;
        (px, py)
    };

    // grid and ticks
    for i in 0..=4 {
        let gy = mt + plot_h * i / 4;
        draw_line(&mut img, ml, gy, ml + plot_w, gy, GRID);
        let val = y_max - (y_max - y_min) * i as f64 / 4.0;
        draw_text(&mut img, 4, gy - 2, &fmt_tick(val), AXIS);
        let gx = ml + plot_w * i / 4;
        draw_line(&mut img, gx, mt, gx, mt + plot_h, GRID);
        let xval = x_min + (x_max - x_min) * i as f64 / 4.0;
        draw_text(&mut img, gx - 6, mt + plot_h + 6, &fmt_tick(xval), AXIS);
    }
    // axes
    draw_line(&mut img, ml, mt, ml, mt + plot_h, AXIS);
    draw_line(&mut img, ml, mt + plot_h, ml + plot_w, mt + plot_h, AXIS);
    draw_text(&mut img, ml, 8, title, AXIS);

    // legend + polylines
    let mut legend_y = mt + 6;
    for s in series {
        let color = Rgb(s.color);
        for win in s.points.windows(2) {
            let (x0, y0) = to_px(win[0].0, win[0].1);
            let (x1, y1) = to_px(win[1].0, win[1].1);
            draw_line(&mut img, x0, y0, x1, y1, color);
        }
        if s.points.len() == 1 {
            let (x0, y0) = to_px(s.points[0].0, s.points[0].1);
            put(&mut img, x0, y0, color);
        }
        let lx = ml + plot_w - 110;
        draw_line(&mut img, lx, legend_y + 2, lx + 10, legend_y + 2, color);
        draw_text(&mut img, lx + 14, legend_y, &s.label, AXIS);
        legend_y += 9;
    }

    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_renders_and_decodes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chart.png");
        let series = vec![
            LineSeries {
                label: "TOTAL".into(),
                color: [200, 40, 40],
                points: (0..50).map(|i| (i as f64, (i as f64 * 0.2).sin() + 2.0)).collect(),
            },
            LineSeries {
                label: "CSE".into(),
                color: [40, 40, 200],
                points: (0..50).map(|i| (i as f64, 3.0 / (1.0 + i as f64))).collect(),
            },
        ];
        render_line_chart(&path, "LOSS", &series).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.width(), 720);
        assert!(std::fs::metadata(&path).unwrap().len() > 0);
    }

    #[test]
    fn rendering_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |p: &Path| {
            let series = vec![LineSeries {
                label: "X".into(),
                color: [0, 120, 0],
                points: vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.75)],
            }];
            render_line_chart(p, "T", &series).unwrap();
        };
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        mk(&a);
        mk(&b);
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
}

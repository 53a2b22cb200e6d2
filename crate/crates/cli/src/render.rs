//! Static pictures: composition mean shapes, detection overlays and
//! vocabulary sharing diagrams.

use std::fmt::Write as _;

use image::{Rgb, RgbImage};
use shapehier::eval::Detection;
use shapehier::{BBox, Plane, Vocabulary};

/// Draw the mean shape of a composition as short oriented strokes on a
/// `size` x `size` white canvas, scaled to fit.
pub fn composition_image(vocab: &Vocabulary, layer: usize, comp: u32, size: u32) -> RgbImage {
    let edges = vocab.mean_shape(layer, comp);
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    if edges.is_empty() {
        return img;
    }
    let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
    for (p, _) in &edges {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let stroke = 3.0;
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]) + 2.0 * stroke;
    let scale = (size as f64 - 4.0) / span;
    let center = [(lo[0] + hi[0]) * 0.5, (lo[1] + hi[1]) * 0.5];
    let n = vocab.orientations.max(1);
    for (p, o) in &edges {
        // tangent of orientation `o`: perpendicular to the filter normal
        let psi = *o as f64 * std::f64::consts::PI / n as f64;
        let t = [psi.sin(), psi.cos()];
        let c = [
            (p[0] - center[0]) * scale + size as f64 * 0.5,
            (p[1] - center[1]) * scale + size as f64 * 0.5,
        ];
        let half = stroke * scale * 0.5;
        line(
            &mut img,
            [c[0] - t[0] * half, c[1] - t[1] * half],
            [c[0] + t[0] * half, c[1] + t[1] * half],
            Rgb([0, 0, 0]),
        );
    }
    img
}

fn put(img: &mut RgbImage, x: f64, y: f64, color: Rgb<u8>) {
    let (x, y) = (x.round(), y.round());
    if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn line(img: &mut RgbImage, a: [f64; 2], b: [f64; 2], color: Rgb<u8>) {
    let steps = (b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        put(img, a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, color);
    }
}

fn rectangle(img: &mut RgbImage, b: &BBox, color: Rgb<u8>) {
    line(img, [b.x0, b.y0], [b.x1, b.y0], color);
    line(img, [b.x1, b.y0], [b.x1, b.y1], color);
    line(img, [b.x1, b.y1], [b.x0, b.y1], color);
    line(img, [b.x0, b.y1], [b.x0, b.y0], color);
}

/// The image in gray with ground-truth boxes in green and detections in
/// red, brighter for higher scores.
pub fn overlay(image: &Plane, truth: &[BBox], dets: &[Detection]) -> RgbImage {
    let mut img = RgbImage::from_fn(image.width() as u32, image.height() as u32, |x, y| {
        let v = (image.get(x as usize, y as usize).clamp(0.0, 1.0) * 255.0) as u8;
        Rgb([v, v, v])
    });
    for b in truth {
        rectangle(&mut img, b, Rgb([0, 200, 0]));
    }
    for d in dets {
        let v = (80.0 + 175.0 * d.score.clamp(0.0, 1.0)) as u8;
        rectangle(&mut img, &d.bbox, Rgb([v, 0, 0]));
    }
    img
}

/// Layered diagram of the OR nodes reachable from any class, with edges
/// from each composition's parts. Node color encodes how many classes use
/// the node.
pub fn sharing_svg(vocab: &Vocabulary) -> String {
    let classes: Vec<&String> = vocab.classes.keys().collect();
    let top = vocab.depth().min(vocab.object_layer);
    // usage[l][or] = number of classes reaching the OR node
    let mut usage: Vec<Vec<usize>> = vec![Vec::new(); top + 1];
    for l in 1..=top {
        usage[l] = vec![0; vocab.layer(l).or_nodes.len()];
        for c in &classes {
            for (i, used) in vocab.or_nodes_used_by(c, l).into_iter().enumerate() {
                usage[l][i] += usize::from(used);
            }
        }
    }
    let widest = (1..=top)
        .map(|l| usage[l].iter().filter(|&&u| u > 0).count())
        .max()
        .unwrap_or(0)
        .max(1);
    let (dx, dy, m) = (14.0, 90.0, 30.0);
    let w = m * 2.0 + dx * widest as f64 + 160.0;
    let h = m * 2.0 + dy * top.saturating_sub(1) as f64;
    let mut pos: Vec<Vec<Option<[f64; 2]>>> = vec![Vec::new(); top + 1];
    for l in 1..=top {
        let shown: Vec<usize> = (0..usage[l].len()).filter(|&i| usage[l][i] > 0).collect();
        let offset = (widest - shown.len()) as f64 * dx * 0.5;
        pos[l] = vec![None; usage[l].len()];
        for (k, &i) in shown.iter().enumerate() {
            pos[l][i] = Some([m + offset + dx * k as f64, h - m - dy * (l - 1) as f64]);
        }
    }
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}">"#);
    let _ = writeln!(s, r#"<rect width="{w:.0}" height="{h:.0}" fill="white"/>"#);
    for l in 2..=top {
        let layer = vocab.layer(l);
        for node in &layer.or_nodes {
            let Some(from) = pos[l][node.id as usize] else { continue };
            for &member in &node.members {
                for part in layer.compositions[member as usize].parts.iter().filter(|p| !p.is_repulsive()) {
                    for or in part.appearance.ids() {
                        if let Some(Some(to)) = pos[l - 1].get(or as usize) {
                            let _ = writeln!(
                                s,
                                r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#999" stroke-width="0.5"/>"##,
                                from[0], from[1], to[0], to[1]
                            );
                        }
                    }
                }
            }
        }
    }
    let colors = ["#cccccc", "#1f77b4", "#ff7f0e", "#d62728", "#9467bd", "#2ca02c"];
    for l in 1..=top {
        for (i, p) in pos[l].iter().enumerate() {
            let Some(p) = p else { continue };
            let color = colors[usage[l][i].min(colors.len() - 1)];
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="5" fill="{color}" stroke="black" stroke-width="0.5"/>"#,
                p[0], p[1]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="12">layer {l}</text>"#,
            w - 150.0,
            h - m - dy * (l - 1) as f64 + 4.0
        );
    }
    for (k, color) in colors.iter().enumerate().skip(1).take(classes.len()) {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="{color}">used by {k} class(es)</text>"#,
            w - 150.0,
            m + 14.0 * k as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

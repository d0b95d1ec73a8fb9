//! Minimal SVG output: finger pairs with their object, and interaction
//! profile plots.

use std::fmt::Write as _;

use grip_core::geometry::{finger_profile, transform, Side};
use grip_core::{ControlVector, FingerGeometry, InteractionProfile, ObjectShape, Pose};

fn points(pts: &[(f64, f64)]) -> String {
    let mut s = String::new();
    for (i, (x, y)) in pts.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{x:.3},{y:.3}");
    }
    s
}

/// Both fingers drawn at a gap just wider than the object, with the object
/// at the origin. Units are mm; y points up.
pub fn finger_pair(m: &ControlVector, geom: &FingerGeometry, shape: &ObjectShape, title: &str) -> grip_core::Result<String> {
    let left = finger_profile(m, Side::Left, geom)?;
    let right = finger_profile(m, Side::Right, geom)?;
    let half_len = geom.length / 2.0;
    let half_gap = shape.radius() + geom.d_max + 2.0;
    let depth = 6.0;
    // Left finger occupies y < h_L(u) - g/2, the right one y > g/2 - h_R(u).
    let mut lp: Vec<(f64, f64)> = left.samples().map(|(u, h)| (u - half_len, h - half_gap)).collect();
    lp.push((half_len, -half_gap - geom.d_max - depth));
    lp.push((-half_len, -half_gap - geom.d_max - depth));
    let mut rp: Vec<(f64, f64)> = right.samples().map(|(u, h)| (u - half_len, half_gap - h)).collect();
    rp.push((half_len, half_gap + geom.d_max + depth));
    rp.push((-half_len, half_gap + geom.d_max + depth));
    let obj: Vec<(f64, f64)> = transform(shape, &Pose::new(0.0, 0.0, 0.0)).iter().map(|p| (p[0], p[1])).collect();

    let w = half_len + 4.0;
    let h = half_gap + geom.d_max + depth + 4.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{:.3} {:.3} {:.3} {:.3}" width="480" height="{:.0}">"#,
        -w,
        -h - 6.0,
        2.0 * w,
        2.0 * h + 6.0,
        480.0 * (2.0 * h + 6.0) / (2.0 * w)
    );
    let _ = writeln!(out, r#"<text x="{:.3}" y="{:.3}" font-size="3" font-family="monospace">{}</text>"#, -w + 1.0, -h - 2.0, escape(title));
    out.push_str("<g transform=\"scale(1,-1)\">\n");
    let _ = writeln!(out, r##"<polygon points="{}" fill="#8aa" stroke="#244" stroke-width="0.2"/>"##, points(&lp));
    let _ = writeln!(out, r##"<polygon points="{}" fill="#8aa" stroke="#244" stroke-width="0.2"/>"##, points(&rp));
    let _ = writeln!(out, r##"<polygon points="{}" fill="#e96" fill-opacity="0.7" stroke="#721" stroke-width="0.2"/>"##, points(&obj));
    out.push_str("</g>\n</svg>\n");
    Ok(out)
}

/// Δθ, Δx and Δy against initial orientation, one panel each. Masked cells
/// break the curves.
pub fn profile_plot(truth: &InteractionProfile, predicted: Option<&InteractionProfile>, title: &str) -> String {
    let (pw, ph, margin) = (600.0, 140.0, 40.0);
    let labels = ["dtheta (rad)", "dx (mm)", "dy (mm)"];
    let mut out = String::new();
    let total_h = 3.0 * (ph + margin) + margin;
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" font-family="monospace" font-size="11">"#, pw + 2.0 * margin, total_h);
    let _ = writeln!(out, r#"<text x="{margin}" y="16">{}</text>"#, escape(title));
    let series: Vec<(&InteractionProfile, &str)> = std::iter::once((truth, "#c33")).chain(predicted.map(|p| (p, "#36c"))).collect();
    for (axis, label) in labels.iter().enumerate() {
        let top = margin + axis as f64 * (ph + margin);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (p, _) in &series {
            for d in p.valid() {
                let v = d.as_array()[axis];
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !lo.is_finite() {
            (lo, hi) = (-1.0, 1.0);
        }
        if hi - lo < 1e-9 {
            lo -= 0.5;
            hi += 0.5;
        }
        let sx = |theta: f64| margin + (theta + std::f64::consts::PI) / std::f64::consts::TAU * pw;
        let sy = |v: f64| top + ph - (v - lo) / (hi - lo) * ph;
        let _ = writeln!(out, r##"<rect x="{margin}" y="{top:.1}" width="{pw}" height="{ph}" fill="none" stroke="#999"/>"##);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{label}  [{lo:.3}, {hi:.3}]</text>"#, margin, top - 4.0);
        if lo < 0.0 && hi > 0.0 {
            let _ = writeln!(out, r##"<line x1="{margin}" x2="{:.1}" y1="{:.2}" y2="{:.2}" stroke="#ccc"/>"##, margin + pw, sy(0.0), sy(0.0));
        }
        for (p, color) in &series {
            let mut run: Vec<(f64, f64)> = Vec::new();
            let flush = |run: &mut Vec<(f64, f64)>, out: &mut String| {
                if run.len() > 1 {
                    let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.2"/>"#, points(run));
                }
                run.clear();
            };
            for i in 0..p.len() {
                if p.mask[i] {
                    let theta = p.grid.theta(p.grid.theta_index(i));
                    run.push((sx(theta), sy(p.deltas[i].as_array()[axis])));
                } else {
                    flush(&mut run, &mut out);
                }
            }
            flush(&mut run, &mut out);
        }
    }
    let legend_y = total_h - 12.0;
    let _ = writeln!(out, r##"<text x="{margin}" y="{legend_y:.1}" fill="#c33">ground truth</text>"##);
    if predicted.is_some() {
        let _ = writeln!(out, r##"<text x="{:.1}" y="{legend_y:.1}" fill="#36c">predicted</text>"##, margin + 120.0);
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

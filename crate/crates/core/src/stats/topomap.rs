//! Per-channel band-power maps rendered as SVG.
//!
//! Layout: one column per band; rows are mean power for condition A, mean
//! power for condition B, and the difference B - A. Difference disks use a
//! symmetric diverging scale (red = increase, blue = decrease) normalised per
//! band by the largest absolute difference; significant channels get a star.

use std::fmt::Write;

use super::ChannelContrast;
use crate::types::{BandName, ChannelLayout};

const PANEL: f64 = 160.0;
const HEAD_R: f64 = 60.0;
const DISK_R: f64 = 9.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_LEFT: f64 = 110.0;

pub const NEUTRAL: (u8, u8, u8) = (247, 247, 247);
pub const RED: (u8, u8, u8) = (178, 24, 43);
pub const BLUE: (u8, u8, u8) = (33, 102, 172);

fn lerp(a: (u8, u8, u8), b: (u8, u8, u8), t: f64) -> (u8, u8, u8) {
    let mix = |x: u8, y: u8| (f64::from(x) + (f64::from(y) - f64::from(x)) * t).round() as u8;
    (mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

/// Diverging color for `v` in `[-1, 1]`.
pub fn diverging(v: f64) -> (u8, u8, u8) {
    let v = v.clamp(-1.0, 1.0);
    if v >= 0.0 {
        lerp(NEUTRAL, RED, v)
    } else {
        lerp(NEUTRAL, BLUE, -v)
    }
}

fn sequential(v: f64) -> (u8, u8, u8) {
    lerp((255, 255, 229), (204, 76, 2), v.clamp(0.0, 1.0))
}

fn hex((r, g, b): (u8, u8, u8)) -> String {
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn star(cx: f64, cy: f64, r: f64) -> String {
    let mut pts = Vec::with_capacity(10);
    for i in 0..10 {
        let rr = if i % 2 == 0 { r } else { r * 0.45 };
        let a = std::f64::consts::PI * (i as f64 / 5.0) - std::f64::consts::FRAC_PI_2;
        pts.push(format!("{:.2},{:.2}", cx + rr * a.cos(), cy + rr * a.sin()));
    }
    format!(r##"<polygon class="star" points="{}" fill="#d7191c" stroke="#000" stroke-width="0.5"/>"##, pts.join(" "))
}

/// Renders the contrast set (16 channels x 5 bands) as a deterministic SVG document.
pub fn emit_topomap(
    contrasts: &[ChannelContrast],
    layout: &ChannelLayout,
    label_a: &str,
    label_b: &str,
) -> String {
    let width = MARGIN_LEFT + 5.0 * PANEL;
    let height = MARGIN_TOP + 3.0 * PANEL;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"##
    );
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="white"/>"##);
    let rows = [label_a.to_string(), label_b.to_string(), format!("{label_b} - {label_a}")];

    for (b, band) in BandName::ALL.iter().enumerate() {
        let x0 = MARGIN_LEFT + b as f64 * PANEL;
        let _ = writeln!(
            svg,
            r##"<text x="{:.1}" y="20" text-anchor="middle">{}</text>"##,
            x0 + PANEL / 2.0,
            band
        );
        let cells: Vec<&ChannelContrast> = layout
            .names()
            .iter()
            .map(|ch| {
                contrasts
                    .iter()
                    .find(|c| &c.channel == ch && c.band == *band)
                    .expect("contrast for every channel and band")
            })
            .collect();
        let max_mean = cells
            .iter()
            .flat_map(|c| [c.mean_a.abs(), c.mean_b.abs()])
            .fold(0.0f64, f64::max);
        let max_diff = cells.iter().map(|c| c.diff.abs()).fold(0.0f64, f64::max);

        for (row, _) in rows.iter().enumerate() {
            let cx = x0 + PANEL / 2.0;
            let cy = MARGIN_TOP + row as f64 * PANEL + PANEL / 2.0;
            let _ = writeln!(
                svg,
                r##"<circle cx="{cx:.1}" cy="{cy:.1}" r="{HEAD_R}" fill="none" stroke="#333"/>"##
            );
            let _ = writeln!(
                svg,
                r##"<polyline points="{:.1},{:.1} {cx:.1},{:.1} {:.1},{:.1}" fill="none" stroke="#333"/>"##,
                cx - 8.0,
                cy - HEAD_R + 1.5,
                cy - HEAD_R - 10.0,
                cx + 8.0,
                cy - HEAD_R + 1.5
            );
            for (c, &(px, py)) in cells.iter().zip(layout.positions()) {
                let dx = cx + px * (HEAD_R - DISK_R - 2.0);
                let dy = cy - py * (HEAD_R - DISK_R - 2.0);
                let (class, color) = match row {
                    0 => ("cond-a", sequential(if max_mean > 0.0 { c.mean_a / max_mean } else { 0.0 })),
                    1 => ("cond-b", sequential(if max_mean > 0.0 { c.mean_b / max_mean } else { 0.0 })),
                    _ => ("diff", diverging(if max_diff > 0.0 { c.diff / max_diff } else { 0.0 })),
                };
                let _ = writeln!(
                    svg,
                    r##"<circle class="{class}" data-channel="{}" cx="{dx:.1}" cy="{dy:.1}" r="{DISK_R}" fill="{}" stroke="#666" stroke-width="0.5"/>"##,
                    c.channel,
                    hex(color)
                );
                if row == 2 && c.significant {
                    let _ = writeln!(svg, "{}", star(dx + DISK_R, dy - DISK_R, 6.0));
                }
            }
        }
    }
    for (row, label) in rows.iter().enumerate() {
        let _ = writeln!(
            svg,
            r##"<text x="8" y="{:.1}">{}</text>"##,
            MARGIN_TOP + row as f64 * PANEL + PANEL / 2.0,
            xml_escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contrasts(diff: impl Fn(usize, usize) -> f64, sig: impl Fn(usize, usize) -> bool) -> Vec<ChannelContrast> {
        let layout = ChannelLayout::standard_16();
        let mut out = Vec::new();
        for (ch, name) in layout.names().iter().enumerate() {
            for band in BandName::ALL {
                let d = diff(ch, band.index());
                out.push(ChannelContrast {
                    channel: name.clone(),
                    band,
                    mean_a: 10.0,
                    mean_b: 10.0 + d,
                    diff: d,
                    t: d,
                    df: 10.0,
                    p: if sig(ch, band.index()) { 0.01 } else { 0.5 },
                    significant: sig(ch, band.index()),
                });
            }
        }
        out
    }

    fn diff_fills(svg: &str) -> Vec<String> {
        svg.lines()
            .filter(|l| l.contains(r#"class="diff""#))
            .map(|l| {
                let i = l.find("fill=\"").unwrap() + 6;
                l[i..i + 7].to_string()
            })
            .collect()
    }

    #[test]
    fn zero_diffs_are_neutral_without_stars() {
        let layout = ChannelLayout::standard_16();
        let svg = emit_topomap(&contrasts(|_, _| 0.0, |_, _| false), &layout, "A", "B");
        let fills = diff_fills(&svg);
        assert_eq!(fills.len(), 80);
        assert!(fills.iter().all(|f| f == &hex(NEUTRAL)));
        assert_eq!(svg.matches(r#"class="star""#).count(), 0);
    }

    #[test]
    fn one_significant_channel_one_star() {
        let layout = ChannelLayout::standard_16();
        let svg = emit_topomap(&contrasts(|c, _| c as f64, |c, b| c == 8 && b == 2), &layout, "A", "B");
        assert_eq!(svg.matches(r#"class="star""#).count(), 1);
    }

    #[test]
    fn diverging_scale_is_symmetric() {
        for i in 0..=20 {
            let v = i as f64 / 20.0;
            let (pos, neg) = (diverging(v), diverging(-v));
            let frac = |c: u8, n: u8, e: u8| (f64::from(c) - f64::from(n)) / (f64::from(e) - f64::from(n));
            assert!((frac(pos.0, NEUTRAL.0, RED.0) - frac(neg.0, NEUTRAL.0, BLUE.0)).abs() < 0.01);
        }
        assert_eq!(diverging(0.0), NEUTRAL);
        assert_eq!(diverging(1.0), RED);
        assert_eq!(diverging(-1.0), BLUE);
    }

    #[test]
    fn swapping_conditions_mirrors_colors() {
        let layout = ChannelLayout::standard_16();
        let d = |c: usize, b: usize| (c as f64 - 7.5) * (b as f64 + 1.0);
        let sig = |c: usize, _| c % 3 == 0;
        let fwd = emit_topomap(&contrasts(d, sig), &layout, "A", "B");
        let rev = emit_topomap(&contrasts(|c, b| -d(c, b), sig), &layout, "B", "A");
        // disks are emitted band-major, channel-minor
        let (f1, f2) = (diff_fills(&fwd), diff_fills(&rev));
        for b in 0..5 {
            let max = (0..16).map(|c| d(c, b).abs()).fold(0.0, f64::max);
            for c in 0..16 {
                let v = d(c, b) / max;
                assert_eq!(f1[b * 16 + c], hex(diverging(v)));
                assert_eq!(f2[b * 16 + c], hex(diverging(-v)));
            }
        }
        let stars = |s: &str| s.lines().filter(|l| l.contains(r#"class="star""#)).map(String::from).collect::<Vec<_>>();
        assert_eq!(stars(&fwd), stars(&rev));
    }

    #[test]
    fn output_is_deterministic() {
        let layout = ChannelLayout::standard_16();
        let c = contrasts(|c, b| (c * b) as f64, |c, _| c == 1);
        assert_eq!(emit_topomap(&c, &layout, "A", "B"), emit_topomap(&c, &layout, "A", "B"));
    }
}

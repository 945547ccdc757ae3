//! Parametric stroke glyphs, one family per class.
//!
//! Each class is a fixed set of lines and arcs, mostly on a shared
//! seven-segment frame, so classes share parts and are separable only by their
//! full shape. Every stroke endpoint receives
//! Gaussian positional jitter and the whole glyph an intensity jitter.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Positional jitter of every control point, in pixels.
pub const POSITION_SIGMA: f64 = 1.0;
/// Half-range of the peak intensity jitter.
pub const INTENSITY_JITTER: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
enum Stroke {
    Line([f64; 2], [f64; 2]),
    /// Center, radius, start and end angle in radians.
    Arc([f64; 2], f64, f64, f64),
}

// Frame on a 28×28 canvas, (x, y) with y downward.
const L: f64 = 9.0;
const R: f64 = 19.0;
const T: f64 = 5.0;
const M: f64 = 14.0;
const B: f64 = 23.0;

fn segment(id: char) -> Stroke {
    match id {
        'a' => Stroke::Line([L, T], [R, T]),
        'b' => Stroke::Line([R, T], [R, M]),
        'c' => Stroke::Line([R, M], [R, B]),
        'd' => Stroke::Line([L, B], [R, B]),
        'e' => Stroke::Line([L, M], [L, B]),
        'f' => Stroke::Line([L, T], [L, M]),
        'g' => Stroke::Line([L, M], [R, M]),
        _ => unreachable!("unknown segment {id}"),
    }
}

fn class_strokes(class: usize) -> Vec<Stroke> {
    use std::f64::consts::PI;
    let segs = |s: &str| s.chars().map(segment).collect::<Vec<_>>();
    match class % 10 {
        0 => vec![Stroke::Arc([M, M], 8.0, 0.0, 2.0 * PI)],
        1 => {
            let mut v = segs("bc");
            v.push(Stroke::Line([R - 4.0, T + 3.0], [R, T]));
            v
        }
        2 => segs("abged"),
        3 => vec![
            Stroke::Arc([M, 9.5], 4.5, -PI, 0.5 * PI),
            Stroke::Arc([M, 18.5], 4.5, -0.5 * PI, PI),
        ],
        4 => segs("fgbc"),
        5 => segs("afgcd"),
        6 => {
            let mut v = segs("afed");
            v.push(Stroke::Arc([M, 18.5], 4.5, -PI, PI));
            v
        }
        7 => vec![segment('a'), Stroke::Line([R, T], [L + 2.0, B])],
        8 => vec![
            Stroke::Arc([M, 9.5], 4.5, 0.0, 2.0 * PI),
            Stroke::Arc([M, 18.5], 4.5, 0.0, 2.0 * PI),
        ],
        _ => vec![
            Stroke::Line([L, T], [R, B]),
            Stroke::Line([R, T], [L, B]),
        ],
    }
}

fn jitter_point<G: Rng>(p: [f64; 2], offset: [f64; 2], noise: &Normal<f64>, rng: &mut G) -> [f64; 2] {
    [
        p[0] + offset[0] + noise.sample(rng),
        p[1] + offset[1] + noise.sample(rng),
    ]
}

fn polyline(stroke: Stroke) -> Vec<[f64; 2]> {
    match stroke {
        Stroke::Line(a, b) => vec![a, b],
        Stroke::Arc(c, r, a0, a1) => {
            let steps = 12;
            (0..=steps)
                .map(|k| {
                    let t = a0 + (a1 - a0) * k as f64 / steps as f64;
                    [c[0] + r * t.cos(), c[1] + r * t.sin()]
                })
                .collect()
        }
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len_sq = dx * dx + dy * dy;
    let t = if len_sq > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()
}

/// Renders the grayscale glyph of `class` at `height × width`, values in `[0, 1]`.
pub fn render<G: Rng>(class: usize, height: usize, width: usize, rng: &mut G) -> Vec<f32> {
    let noise = Normal::new(0.0, POSITION_SIGMA).expect("valid sigma");
    let offset = [noise.sample(rng), noise.sample(rng)];
    let peak = 0.9 + rng.random_range(-INTENSITY_JITTER..=INTENSITY_JITTER);
    let half_width = 1.1;

    // Jitter the control points of each stroke, then flatten to segments.
    let mut segments: Vec<([f64; 2], [f64; 2])> = Vec::new();
    for stroke in class_strokes(class) {
        let jittered = match stroke {
            Stroke::Line(a, b) => Stroke::Line(
                jitter_point(a, offset, &noise, rng),
                jitter_point(b, offset, &noise, rng),
            ),
            Stroke::Arc(c, r, a0, a1) => {
                let c = jitter_point(c, offset, &noise, rng);
                Stroke::Arc(c, (r + 0.5 * noise.sample(rng)).max(1.0), a0, a1)
            }
        };
        let pts = polyline(jittered);
        segments.extend(pts.windows(2).map(|w| (w[0], w[1])));
    }

    let sy = 28.0 / height as f64;
    let sx = 28.0 / width as f64;
    let mut out = vec![0.0f32; height * width];
    for y in 0..height {
        for x in 0..width {
            let p = [(x as f64 + 0.5) * sx, (y as f64 + 0.5) * sy];
            let d = segments
                .iter()
                .map(|&(a, b)| segment_distance(p, a, b))
                .fold(f64::INFINITY, f64::min);
            let v = (1.0 - (d - half_width).max(0.0)).clamp(0.0, 1.0) * peak;
            out[y * width + x] = v as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glyphs_are_in_range_and_non_empty() {
        for class in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(class as u64);
            let g = render(class, 28, 28, &mut rng);
            assert!(g.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let on = g.iter().filter(|&&v| v > 0.0).count();
            assert!(on > 30, "class {class} has {on} lit pixels");
            assert!(on < 28 * 28 / 2);
        }
    }

    #[test]
    fn classes_have_distinct_mean_shapes() {
        let mean = |class: usize| {
            let mut acc = vec![0.0f64; 28 * 28];
            for s in 0..20 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 + s);
                for (a, v) in acc.iter_mut().zip(render(class, 28, 28, &mut rng)) {
                    *a += v as f64 / 20.0;
                }
            }
            acc
        };
        let means: Vec<_> = (0..10).map(mean).collect();
        for i in 0..10 {
            for j in i + 1..10 {
                let d: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(d > 10.0, "classes {i} and {j} too similar: {d}");
            }
        }
    }
}

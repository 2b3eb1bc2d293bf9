//! Stroke glyphs for digits and polygon outlines for shapes, in unit
//! coordinates with y pointing down.

use rand::Rng;

pub type Point = (f64, f64);

pub const DIGIT_NAMES: [&str; 10] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];

/// Stroke descriptors used as core attributes for each digit. Words are
/// not shared between digits so each phrase grounds to one class.
pub fn digit_descriptors(d: usize) -> Vec<String> {
    let v: &[&str] = match d {
        0 => &["oval ring", "hollow middle"],
        1 => &["upright stick", "slanted flag"],
        2 => &["swan neck", "flat base"],
        3 => &["double bump", "open left"],
        4 => &["crossbar", "right post"],
        5 => &["squared shoulder", "round belly"],
        6 => &["tall curl", "bottom bubble"],
        7 => &["top bar", "long diagonal"],
        8 => &["twin loops", "pinched waist"],
        _ => &["head circle", "straight tail"],
    };
    v.iter().map(|s| s.to_string()).collect()
}

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, a0: f64, a1: f64, n: usize) -> Vec<Point> {
    (0..=n)
        .map(|i| {
            let a = (a0 + (a1 - a0) * i as f64 / n as f64).to_radians();
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

/// Polylines making up digit `d`.
pub fn digit_strokes(d: usize) -> Vec<Vec<Point>> {
    match d {
        0 => vec![arc(0.5, 0.5, 0.24, 0.35, 0.0, 360.0, 28)],
        1 => vec![vec![(0.37, 0.25), (0.53, 0.12), (0.53, 0.88)]],
        2 => {
            let mut s = arc(0.5, 0.32, 0.22, 0.2, 170.0, 400.0, 14);
            s.push((0.27, 0.88));
            s.push((0.76, 0.88));
            vec![s]
        }
        3 => vec![
            arc(0.5, 0.3, 0.2, 0.18, 200.0, 450.0, 14),
            arc(0.5, 0.66, 0.23, 0.21, 270.0, 520.0, 14),
        ],
        4 => vec![vec![(0.62, 0.88), (0.62, 0.12), (0.24, 0.64), (0.8, 0.64)]],
        5 => {
            let mut s = vec![(0.72, 0.12), (0.34, 0.12), (0.31, 0.47)];
            s.extend(arc(0.48, 0.65, 0.23, 0.22, 235.0, 520.0, 16));
            vec![s]
        }
        6 => vec![
            vec![(0.68, 0.13), (0.5, 0.2), (0.36, 0.34), (0.29, 0.52), (0.29, 0.66)],
            arc(0.5, 0.66, 0.21, 0.2, 0.0, 360.0, 24),
        ],
        7 => vec![vec![(0.25, 0.13), (0.76, 0.13), (0.44, 0.88)]],
        8 => vec![
            arc(0.5, 0.3, 0.18, 0.17, 0.0, 360.0, 22),
            arc(0.5, 0.68, 0.22, 0.2, 0.0, 360.0, 24),
        ],
        _ => vec![arc(0.5, 0.34, 0.21, 0.2, 0.0, 360.0, 24), vec![(0.71, 0.34), (0.66, 0.88)]],
    }
}

pub const SHAPE_NAMES: [&str; 10] = [
    "circle", "square", "triangle", "diamond", "hexagon", "star", "plus", "cross", "pentagon", "bar",
];

pub fn shape_descriptors(s: usize) -> Vec<String> {
    let v: &[&str] = match s {
        0 => &["round rim", "smooth curve"],
        1 => &["right angles", "equal sides"],
        2 => &["three vertices", "sloped edges"],
        3 => &["tilted rhombus", "sharp tips"],
        4 => &["six facets", "honeycomb cell"],
        5 => &["five spikes", "inner notches"],
        6 => &["upright arms", "plus sign"],
        7 => &["x mark", "slanted limbs"],
        8 => &["house outline", "pointed roof"],
        _ => &["long thin rectangle", "horizontal body"],
    };
    v.iter().map(|s| s.to_string()).collect()
}

fn regular(n: usize, r: f64, start_deg: f64) -> Vec<Point> {
    (0..n)
        .map(|i| {
            let a = (start_deg + 360.0 * i as f64 / n as f64).to_radians();
            (0.5 + r * a.cos(), 0.5 + r * a.sin())
        })
        .collect()
}

fn plus_outline(w: f64, e: f64) -> Vec<Point> {
    let (a, b) = (0.5 - w, 0.5 + w);
    let (lo, hi) = (0.5 - e, 0.5 + e);
    vec![
        (a, lo), (b, lo), (b, a), (hi, a), (hi, b), (b, b),
        (b, hi), (a, hi), (a, b), (lo, b), (lo, a), (a, a),
    ]
}

/// Closed polygon outline of shape `s`.
pub fn shape_polygon(s: usize) -> Vec<Point> {
    match s {
        0 => regular(32, 0.3, 0.0),
        1 => vec![(0.25, 0.25), (0.75, 0.25), (0.75, 0.75), (0.25, 0.75)],
        2 => vec![(0.5, 0.18), (0.8, 0.76), (0.2, 0.76)],
        3 => vec![(0.5, 0.16), (0.77, 0.5), (0.5, 0.84), (0.23, 0.5)],
        4 => regular(6, 0.31, 0.0),
        5 => (0..10)
            .map(|i| {
                let r = if i % 2 == 0 { 0.35 } else { 0.15 };
                let a = (-90.0 + 36.0 * i as f64).to_radians();
                (0.5 + r * a.cos(), 0.5 + r * a.sin())
            })
            .collect(),
        6 => plus_outline(0.09, 0.32),
        7 => rotate(&plus_outline(0.09, 0.34), 45.0),
        8 => regular(5, 0.32, -90.0),
        _ => vec![(0.18, 0.39), (0.82, 0.39), (0.82, 0.61), (0.18, 0.61)],
    }
}

fn rotate(pts: &[Point], deg: f64) -> Vec<Point> {
    let (s, c) = deg.to_radians().sin_cos();
    pts.iter()
        .map(|&(x, y)| {
            let (dx, dy) = (x - 0.5, y - 0.5);
            (0.5 + c * dx - s * dy, 0.5 + s * dx + c * dy)
        })
        .collect()
}

/// Small random similarity transform about the image center.
#[derive(Debug, Clone, Copy)]
pub struct Placement {
    pub scale: f64,
    pub angle_deg: f64,
    pub shear: f64,
    pub dx: f64,
    pub dy: f64,
}

impl Placement {
    pub fn identity() -> Self {
        Self { scale: 1.0, angle_deg: 0.0, shear: 0.0, dx: 0.0, dy: 0.0 }
    }

    pub fn sample(rng: &mut impl Rng, max_angle: f64) -> Self {
        Self {
            scale: rng.random_range(0.82..1.04),
            angle_deg: rng.random_range(-max_angle..=max_angle),
            shear: rng.random_range(-0.15..0.15),
            dx: rng.random_range(-0.07..0.07),
            dy: rng.random_range(-0.07..0.07),
        }
    }

    pub fn apply(&self, (x, y): Point) -> Point {
        let (mut u, v) = (x - 0.5, y - 0.5);
        u += self.shear * v;
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (ru, rv) = (c * u - s * v, s * u + c * v);
        (0.5 + self.scale * ru + self.dx, 0.5 + self.scale * rv + self.dy)
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (p.0 - (a.0 + t * vx), p.1 - (a.1 + t * vy));
    (dx * dx + dy * dy).sqrt()
}

fn polyline_distance(p: Point, lines: &[Vec<Point>]) -> f64 {
    let mut best = f64::INFINITY;
    for line in lines {
        for w in line.windows(2) {
            best = best.min(segment_distance(p, w[0], w[1]));
        }
    }
    best
}

fn inside(p: Point, poly: &[Point]) -> bool {
    let mut c = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + n - 1) % n]);
        if (a.1 > p.1) != (b.1 > p.1) && p.0 < (b.0 - a.0) * (p.1 - a.1) / (b.1 - a.1) + a.0 {
            c = !c;
        }
    }
    c
}

fn closed(poly: &[Point]) -> Vec<Vec<Point>> {
    let mut ring = poly.to_vec();
    ring.push(poly[0]);
    vec![ring]
}

/// Coverage in `[0, 1]` of a stroke of half-width `thickness` on a
/// `size`×`size` grid (unit coordinates, one value per pixel, row-major).
pub fn stroke_coverage(lines: &[Vec<Point>], thickness: f64, size: usize) -> Vec<f64> {
    let px = 1.0 / size as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let p = ((x as f64 + 0.5) * px, (y as f64 + 0.5) * px);
            let d = polyline_distance(p, lines);
            out.push(((thickness - d) / px + 0.5).clamp(0.0, 1.0));
        }
    }
    out
}

/// Coverage of a filled polygon, or of its outline when `hollow`.
pub fn polygon_coverage(poly: &[Point], hollow: bool, thickness: f64, size: usize) -> Vec<f64> {
    let px = 1.0 / size as f64;
    let ring = closed(poly);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let p = ((x as f64 + 0.5) * px, (y as f64 + 0.5) * px);
            let d = polyline_distance(p, &ring);
            let c = if hollow {
                (thickness - d) / px + 0.5
            } else {
                let sd = if inside(p, poly) { -d } else { d };
                0.5 - sd / px
            };
            out.push(c.clamp(0.0, 1.0));
        }
    }
    out
}

pub fn transform_lines(lines: &[Vec<Point>], t: &Placement) -> Vec<Vec<Point>> {
    lines.iter().map(|l| l.iter().map(|&p| t.apply(p)).collect()).collect()
}

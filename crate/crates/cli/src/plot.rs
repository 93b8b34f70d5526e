//! Minimal line-chart rasterizer writing binary PPM images.

pub const WIDTH: usize = 480;
pub const HEIGHT: usize = 320;
const MARGIN: usize = 24;
const BACKGROUND: [u8; 3] = [255, 255, 255];
const AXIS: [u8; 3] = [40, 40, 40];
const GRID: [u8; 3] = [225, 225, 225];

pub struct Series<'a> {
    pub color: [u8; 3],
    pub points: &'a [(f64, f64)],
}

struct Canvas {
    pixels: Vec<[u8; 3]>,
}

impl Canvas {
    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if (0..WIDTH as i64).contains(&x) && (0..HEIGHT as i64).contains(&y) {
            self.pixels[y as usize * WIDTH + x as usize] = c;
        }
    }

    fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = ((x1 - x0).signum(), (y1 - y0).signum());
        let mut err = dx + dy;
        loop {
            for (ox, oy) in [(0, 0), (1, 0), (0, 1)] {
                self.set(x0 + ox, y0 + oy, c);
            }
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }
}

/// Plots every series on shared axes spanning the data range; the y range
/// always includes 0. Horizontal grid lines mark tenths of the range.
pub fn render(series: &[Series]) -> Vec<u8> {
    let mut canvas = Canvas {
        pixels: vec![BACKGROUND; WIDTH * HEIGHT],
    };
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) =
        (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, f64::NEG_INFINITY);
    for &(x, y) in all.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    if !x_lo.is_finite() {
        (x_lo, x_hi, y_hi) = (0.0, 1.0, 1.0);
    }
    if x_hi <= x_lo {
        x_hi = x_lo + 1.0;
    }
    if y_hi <= y_lo {
        y_hi = y_lo + 1.0;
    }
    let (left, right) = (MARGIN as f64, (WIDTH - MARGIN) as f64);
    let (top, bottom) = (MARGIN as f64, (HEIGHT - MARGIN) as f64);
    let px = |x: f64| (left + (x - x_lo) / (x_hi - x_lo) * (right - left)).round() as i64;
    let py = |y: f64| (bottom - (y - y_lo) / (y_hi - y_lo) * (bottom - top)).round() as i64;
    for k in 1..10 {
        let y = py(y_lo + (y_hi - y_lo) * k as f64 / 10.0);
        canvas.line((left as i64, y), (right as i64, y), GRID);
    }
    canvas.line(
        (left as i64, bottom as i64),
        (right as i64, bottom as i64),
        AXIS,
    );
    canvas.line(
        (left as i64, top as i64),
        (left as i64, bottom as i64),
        AXIS,
    );
    for s in series {
        let pts: Vec<(i64, i64)> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| (px(x), py(y)))
            .collect();
        for w in pts.windows(2) {
            canvas.line(w[0], w[1], s.color);
        }
        if let [p] = pts.as_slice() {
            canvas.line(*p, *p, s.color);
        }
    }
    let mut out = format!("P6\n{WIDTH} {HEIGHT}\n255\n").into_bytes();
    out.extend(canvas.pixels.iter().flatten());
    out
}

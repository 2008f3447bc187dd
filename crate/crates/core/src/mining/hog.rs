//! 31-channel histogram of oriented gradients per cell: 18 contrast-sensitive
//! orientations, 9 contrast-insensitive orientations and 4 gradient-energy
//! channels, each normalized against the four 2x2 cell blocks touching the
//! cell and truncated at 0.2.
//!
//! Unlike the usual formulation, border cells are kept; blocks that would
//! reach outside the grid reuse the nearest cell's energy.

pub const CHANNELS: usize = 31;
const SENSITIVE: usize = 18;
const INSENSITIVE: usize = 9;
const TRUNCATE: f64 = 0.2;
const EPS: f64 = 1e-4;

/// Features of a square `side x side` image, `(side / cell)^2 * 31` values,
/// cells in row-major order.
pub fn hog(pixels: &[f64], side: usize, cell: usize) -> Vec<f64> {
    assert_eq!(pixels.len(), side * side);
    assert!(cell > 0 && side % cell == 0, "cell size must divide the image side");
    let cells = side / cell;
    let mut hist = vec![0.0; cells * cells * SENSITIVE];
    let at = |x: isize, y: isize| {
        let cx = x.clamp(0, side as isize - 1) as usize;
        let cy = y.clamp(0, side as isize - 1) as usize;
        pixels[cy * side + cx]
    };
    let bin_width = std::f64::consts::TAU / SENSITIVE as f64;
    for y in 0..side {
        for x in 0..side {
            let (xi, yi) = (x as isize, y as isize);
            let dx = at(xi + 1, yi) - at(xi - 1, yi);
            let dy = at(xi, yi + 1) - at(xi, yi - 1);
            let mag = (dx * dx + dy * dy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let angle = dy.atan2(dx).rem_euclid(std::f64::consts::TAU);
            let bin = ((angle / bin_width).round() as usize) % SENSITIVE;
            // Bilinear vote into the four nearest cell centers.
            let fx = (x as f64 + 0.5) / cell as f64 - 0.5;
            let fy = (y as f64 + 0.5) / cell as f64 - 0.5;
            let (x0, y0) = (fx.floor(), fy.floor());
            let (wx, wy) = (fx - x0, fy - y0);
            for (cx, wxk) in [(x0, 1.0 - wx), (x0 + 1.0, wx)] {
                for (cy, wyk) in [(y0, 1.0 - wy), (y0 + 1.0, wy)] {
                    if cx < 0.0 || cy < 0.0 || cx >= cells as f64 || cy >= cells as f64 {
                        continue;
                    }
                    let c = cy as usize * cells + cx as usize;
                    hist[c * SENSITIVE + bin] += wxk * wyk * mag;
                }
            }
        }
    }

    let energy: Vec<f64> = (0..cells * cells)
        .map(|c| {
            (0..INSENSITIVE)
                .map(|o| {
                    let v = hist[c * SENSITIVE + o] + hist[c * SENSITIVE + o + INSENSITIVE];
                    v * v
                })
                .sum()
        })
        .collect();
    let e = |cx: isize, cy: isize| {
        let cx = cx.clamp(0, cells as isize - 1) as usize;
        let cy = cy.clamp(0, cells as isize - 1) as usize;
        energy[cy * cells + cx]
    };

    let mut out = vec![0.0; cells * cells * CHANNELS];
    for cy in 0..cells {
        for cx in 0..cells {
            let c = cy * cells + cx;
            let (x, y) = (cx as isize, cy as isize);
            let norms: Vec<f64> = [(-1, -1), (0, -1), (-1, 0), (0, 0)]
                .iter()
                .map(|&(ox, oy)| {
                    let (bx, by) = (x + ox, y + oy);
                    1.0 / (e(bx, by) + e(bx + 1, by) + e(bx, by + 1) + e(bx + 1, by + 1) + EPS).sqrt()
                })
                .collect();
            let h = &hist[c * SENSITIVE..(c + 1) * SENSITIVE];
            let dst = &mut out[c * CHANNELS..(c + 1) * CHANNELS];
            let mut texture = [0.0; 4];
            for o in 0..SENSITIVE {
                let mut sum = 0.0;
                for (k, n) in norms.iter().enumerate() {
                    let v = (h[o] * n).min(TRUNCATE);
                    sum += v;
                    texture[k] += v;
                }
                dst[o] = 0.5 * sum;
            }
            for o in 0..INSENSITIVE {
                let folded = h[o] + h[o + INSENSITIVE];
                dst[SENSITIVE + o] = 0.5 * norms.iter().map(|n| (folded * n).min(TRUNCATE)).sum::<f64>();
            }
            for k in 0..4 {
                dst[SENSITIVE + INSENSITIVE + k] = 0.2357 * texture[k];
            }
        }
    }
    out
}

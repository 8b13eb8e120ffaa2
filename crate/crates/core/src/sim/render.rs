//! Deterministic flat-shaded rasterization of symbolic scenes.
//!
//! Two scene families share the renderer: grid worlds (objects on a G×G
//! board, drawn inside their cell rectangle, larger size tiers over
//! smaller) and platform rows (objects in a line above a platform bar that
//! is bright when lit and dark when dim, absent in query frames).

pub const BACKGROUND: [u8; 3] = [28, 28, 32];
pub const PLATFORM_LIT: [u8; 3] = [250, 150, 210];
pub const PLATFORM_DIM: [u8; 3] = [70, 35, 55];

/// Palette index 0 is the snitch gold; simulators hand out the rest.
pub const PALETTE: [[u8; 3]; 7] = [
    [255, 200, 40],  // gold
    [210, 60, 50],   // red
    [70, 180, 80],   // green
    [70, 110, 220],  // blue
    [160, 80, 200],  // purple
    [60, 190, 190],  // cyan
    [200, 200, 200], // light gray
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DrawShape {
    Square,
    Circle,
    Triangle,
}

/// One object to rasterize inside a pixel rectangle.
#[derive(Clone, Copy, Debug)]
pub struct DrawObj {
    pub shape: DrawShape,
    pub color: [u8; 3],
    /// Fraction of the rectangle the primitive spans, in (0, 1].
    pub frac: f64,
    /// Two-tone metallic shading (upper half lightened).
    pub metallic: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Platform {
    Lit,
    Dim,
    Hidden,
}

/// Raw RGB frame buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub h: usize,
    pub w: usize,
    pub rgb: Vec<u8>,
}

impl Frame {
    pub fn background(h: usize, w: usize) -> Frame {
        let mut rgb = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            rgb.extend_from_slice(&BACKGROUND);
        }
        Frame { h, w, rgb }
    }

    pub fn put(&mut self, y: usize, x: usize, c: [u8; 3]) {
        let i = (y * self.w + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.w + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Normalized f32 pixels in [0, 1], H×W×C layout.
    pub fn to_f32(&self) -> Vec<f32> {
        self.rgb.iter().map(|&v| v as f32 / 255.0).collect()
    }
}

fn lighten(c: [u8; 3], amount: f64) -> [u8; 3] {
    let mix = |v: u8| (v as f64 + (255.0 - v as f64) * amount).round() as u8;
    [mix(c[0]), mix(c[1]), mix(c[2])]
}

/// Rasterize one primitive inside the rectangle `[y0, y0+size) × [x0, x0+size)`,
/// spanning `frac` of it. Never writes outside the rectangle.
pub fn draw_in_rect(frame: &mut Frame, y0: usize, x0: usize, size: usize, obj: &DrawObj) {
    let span = ((size as f64) * obj.frac).max(1.0);
    let inset = (size as f64 - span) / 2.0;
    let lo_y = y0 as f64 + inset;
    let lo_x = x0 as f64 + inset;
    let hi_y = lo_y + span;
    let hi_x = lo_x + span;
    let cy = (lo_y + hi_y) / 2.0;
    let cx = (lo_x + hi_x) / 2.0;
    let r = span / 2.0;

    let bright = lighten(obj.color, 0.55);
    for y in y0..(y0 + size).min(frame.h) {
        for x in x0..(x0 + size).min(frame.w) {
            let fy = y as f64 + 0.5;
            let fx = x as f64 + 0.5;
            let inside = match obj.shape {
                DrawShape::Square => fy >= lo_y && fy < hi_y && fx >= lo_x && fx < hi_x,
                DrawShape::Circle => {
                    let dy = fy - cy;
                    let dx = fx - cx;
                    dy * dy + dx * dx <= r * r
                }
                DrawShape::Triangle => {
                    // upward triangle: apex at top centre, base at the bottom
                    if fy < lo_y || fy >= hi_y {
                        false
                    } else {
                        let t = (fy - lo_y) / span; // 0 at apex row, 1 at base
                        let half = t * r;
                        (fx - cx).abs() <= half
                    }
                }
            };
            if inside {
                let c = if obj.metallic && fy < cy { bright } else { obj.color };
                frame.put(y, x, c);
            }
        }
    }
}

/// Grid-world frame: every entry is (row, col, object); callers pass the
/// draw list sorted so larger tiers come last (painted on top).
pub fn render_grid(h: usize, w: usize, grid: usize, objs: &[(usize, usize, DrawObj)]) -> Frame {
    let mut frame = Frame::background(h, w);
    let cell = h / grid;
    assert!(cell > 0 && h % grid == 0 && w % grid == 0, "image {h}x{w} not divisible into {grid} cells");
    for &(r, c, ref obj) in objs {
        assert!(r < grid && c < grid, "cell ({r},{c}) outside {grid}x{grid} grid");
        draw_in_rect(&mut frame, r * cell, c * cell, cell, obj);
    }
    frame
}

/// Platform-row frame: up to `slots` objects in a line, platform bar along
/// the bottom unless hidden.
pub fn render_row(h: usize, w: usize, slots: usize, objs: &[(usize, DrawObj)], platform: Platform) -> Frame {
    let mut frame = Frame::background(h, w);
    let platform_h = h / 6;
    match platform {
        Platform::Hidden => {}
        lit_or_dim => {
            let color = if lit_or_dim == Platform::Lit { PLATFORM_LIT } else { PLATFORM_DIM };
            for y in h - platform_h..h {
                for x in 0..w {
                    frame.put(y, x, color);
                }
            }
        }
    }
    let slot_w = w / slots;
    let size = slot_w.min(h - platform_h);
    let y0 = (h - platform_h).saturating_sub(size);
    for &(slot, ref obj) in objs {
        assert!(slot < slots, "slot {slot} outside row of {slots}");
        draw_in_rect(&mut frame, y0, slot * slot_w, size, obj);
    }
    frame
}

/// Bounding rectangle of the primitive drawn by [`draw_in_rect`], in
/// normalized [0, 1] image coordinates (used for detection ground truth).
pub fn rect_bounds(y0: usize, x0: usize, size: usize, frac: f64, h: usize, w: usize) -> (f64, f64, f64, f64) {
    let span = ((size as f64) * frac).max(1.0);
    let inset = (size as f64 - span) / 2.0;
    let ymin = (y0 as f64 + inset) / h as f64;
    let xmin = (x0 as f64 + inset) / w as f64;
    let ymax = (y0 as f64 + inset + span) / h as f64;
    let xmax = (x0 as f64 + inset + span) / w as f64;
    (ymin.clamp(0.0, 1.0), xmin.clamp(0.0, 1.0), ymax.clamp(0.0, 1.0), xmax.clamp(0.0, 1.0))
}

/// Size fraction used for a grid object of the given tier.
pub fn tier_frac(tier: u8) -> f64 {
    match tier {
        0 => 0.40,
        1 => 0.62,
        _ => 0.84,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_is_pure_background_and_bit_stable() {
        let a = render_grid(32, 32, 4, &[]);
        let b = render_grid(32, 32, 4, &[]);
        assert_eq!(a, b);
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(a.get(y, x), BACKGROUND);
            }
        }
    }

    #[test]
    fn same_scene_renders_identical_pixels() {
        let obj = DrawObj { shape: DrawShape::Circle, color: PALETTE[1], frac: 0.6, metallic: false };
        let a = render_grid(64, 64, 4, &[(1, 2, obj)]);
        let b = render_grid(64, 64, 4, &[(1, 2, obj)]);
        assert_eq!(a, b);
    }

    #[test]
    fn object_pixels_confined_to_its_cell() {
        for shape in [DrawShape::Square, DrawShape::Circle, DrawShape::Triangle] {
            let obj = DrawObj { shape, color: PALETTE[2], frac: 0.9, metallic: true };
            let (r, c) = (2usize, 1usize);
            let frame = render_grid(64, 64, 4, &[(r, c, obj)]);
            let cell = 16;
            for y in 0..64 {
                for x in 0..64 {
                    if frame.get(y, x) != BACKGROUND {
                        assert!(
                            y >= r * cell && y < (r + 1) * cell && x >= c * cell && x < (c + 1) * cell,
                            "{shape:?} leaked to ({y},{x})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn larger_tier_paints_over_smaller_at_same_cell() {
        let small = DrawObj { shape: DrawShape::Circle, color: PALETTE[1], frac: tier_frac(0), metallic: false };
        let big = DrawObj { shape: DrawShape::Square, color: PALETTE[3], frac: tier_frac(2), metallic: false };
        let frame = render_grid(64, 64, 4, &[(0, 0, small), (0, 0, big)]);
        // centre pixel must show the big square's color
        assert_eq!(frame.get(8, 8), PALETTE[3]);
    }

    #[test]
    fn platform_states_differ_and_hide() {
        let lit = render_row(64, 64, 6, &[], Platform::Lit);
        let dim = render_row(64, 64, 6, &[], Platform::Dim);
        let hid = render_row(64, 64, 6, &[], Platform::Hidden);
        assert_eq!(lit.get(60, 10), PLATFORM_LIT);
        assert_eq!(dim.get(60, 10), PLATFORM_DIM);
        assert_eq!(hid.get(60, 10), BACKGROUND);
    }
}

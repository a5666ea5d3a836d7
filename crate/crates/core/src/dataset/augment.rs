use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;

/// Training-time augmentation ranges. Shear is an angle in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rotation_deg: f64,
    pub shear_rad: f64,
    pub zoom: (f64, f64),
    pub width_shift: f64,
    pub height_shift: f64,
    pub flip_prob: f64,
    pub brightness: (f64, f64),
    pub intensity_shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 45.0,
            shear_rad: 0.1,
            zoom: (0.9, 1.1),
            width_shift: 0.1,
            height_shift: 0.1,
            flip_prob: 0.5,
            brightness: (0.7, 1.1),
            intensity_shift: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            shear_rad: 0.0,
            zoom: (1.0, 1.0),
            width_shift: 0.0,
            height_shift: 0.0,
            flip_prob: 0.0,
            brightness: (1.0, 1.0),
            intensity_shift: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.rotation_deg,
            self.shear_rad,
            self.zoom.0,
            self.zoom.1,
            self.width_shift,
            self.height_shift,
            self.flip_prob,
            self.brightness.0,
            self.brightness.1,
            self.intensity_shift,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("augmentation bounds must be finite"));
        }
        if self.rotation_deg < 0.0 || self.shear_rad < 0.0 || self.width_shift < 0.0 || self.height_shift < 0.0 || self.intensity_shift < 0.0 {
            return Err(Error::invalid("symmetric augmentation ranges must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid("flip probability must lie in [0,1]"));
        }
        if self.zoom.0 <= 0.0 || self.zoom.0 > self.zoom.1 || self.brightness.0 < 0.0 || self.brightness.0 > self.brightness.1 {
            return Err(Error::invalid("zoom and brightness ranges must be ordered and positive"));
        }
        Ok(())
    }
}

/// One draw of every augmentation parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub rotation_deg: f64,
    pub shear_rad: f64,
    pub zoom_x: f64,
    pub zoom_y: f64,
    /// Shift as a fraction of width / height.
    pub shift_x: f64,
    pub shift_y: f64,
    pub flip: bool,
    pub brightness: f64,
    pub intensity_shift: f64,
}

fn uniform(rng: &mut dyn RngCore, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}

pub fn sample_draw(cfg: &AugmentConfig, rng: &mut dyn RngCore) -> AugmentDraw {
    AugmentDraw {
        rotation_deg: uniform(rng, -cfg.rotation_deg, cfg.rotation_deg),
        shear_rad: uniform(rng, -cfg.shear_rad, cfg.shear_rad),
        zoom_x: uniform(rng, cfg.zoom.0, cfg.zoom.1),
        zoom_y: uniform(rng, cfg.zoom.0, cfg.zoom.1),
        shift_x: uniform(rng, -cfg.width_shift, cfg.width_shift),
        shift_y: uniform(rng, -cfg.height_shift, cfg.height_shift),
        flip: rng.random::<f64>() < cfg.flip_prob,
        brightness: uniform(rng, cfg.brightness.0, cfg.brightness.1),
        intensity_shift: uniform(rng, -cfg.intensity_shift, cfg.intensity_shift),
    }
}

pub fn augment(image: &ImageTensor, cfg: &AugmentConfig, rng: &mut dyn RngCore) -> ImageTensor {
    apply_draw(image, &sample_draw(cfg, rng))
}

/// Maps each output pixel back to a source location and samples bilinearly,
/// clamping to the nearest edge pixel outside the frame.
pub fn apply_draw(image: &ImageTensor, d: &AugmentDraw) -> ImageTensor {
    let (h, w) = (image.height(), image.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let theta = d.rotation_deg.to_radians();
    let rot = [[theta.cos(), -theta.sin()], [theta.sin(), theta.cos()]];
    let shear = [[1.0, -d.shear_rad.sin()], [0.0, d.shear_rad.cos()]];
    let zoom = [[d.zoom_x, 0.0], [0.0, d.zoom_y]];
    let m = mul2(mul2(rot, shear), zoom);
    let (tx, ty) = (d.shift_x * w as f64, d.shift_y * h as f64);

    ImageTensor::from_fn(h, w, |r, c| {
        let c = if d.flip { w - 1 - c } else { c };
        let (dx, dy) = (c as f64 - cx, r as f64 - cy);
        let sx = m[0][0] * dx + m[0][1] * dy + cx - tx;
        let sy = m[1][0] * dx + m[1][1] * dy + cy - ty;
        let v = sample_clamped(image, sy, sx) as f64 * d.brightness + d.intensity_shift;
        v.clamp(0.0, 1.0) as f32
    })
}

fn mul2(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

fn sample_clamped(image: &ImageTensor, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (image.height() - 1) as f64);
    let x = x.clamp(0.0, (image.width() - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let y1 = (y0 + 1).min(image.height() - 1);
    let x1 = (x0 + 1).min(image.width() - 1);
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let lerp = |a: f32, b: f32, t: f32| if t == 0.0 { a } else { a + (b - a) * t };
    let top = lerp(image.get(y0, x0), image.get(y0, x1), fx);
    let bottom = lerp(image.get(y1, x0), image.get(y1, x1), fx);
    lerp(top, bottom, fy)
}

//! Channel reduction, normalization, lung-mask cleanup and ROI cropping.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::imaging::{encode_pgm_bytes, load_raster, resize_bilinear, ImageTensor, Raster};

pub const WORKSPACE_SIDE: usize = 512;
pub const MIN_COMPONENT_FRACTION: f64 = 0.05;
pub const MAX_COMPONENTS: usize = 2;
pub const CROP_MARGIN_FRACTION: f64 = 0.02;

/// Binary grid, values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::invalid(format!("mask {height}x{width} needs {} values", height * width)));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask values must be 0 or 1"));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(u8::from(f(r, c)));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.data[row * self.width + col] = u8::from(on);
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// True where every foreground pixel of `other` is also set here.
    pub fn contains(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a >= b)
    }

    /// Nearest-neighbour resize with half-pixel centres.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        let pick = |dst: usize, dst_len: usize, src_len: usize| {
            (((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize).min(src_len - 1)
        };
        Mask::from_fn(height, width, |r, c| {
            self.get(pick(r, height, self.height), pick(c, width, self.width))
        })
    }
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let raster = load_raster(path)?;
    if raster.channels != 1 {
        return Err(Error::invalid(format!("mask {} is not single-channel", path.display())));
    }
    let data = raster.data.iter().map(|&v| u8::from(v >= 0.5)).collect();
    Mask::new(raster.height, raster.width, data)
}

/// Binary PGM with values 0/255.
pub fn encode_mask(mask: &Mask) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = mask.data.iter().map(|&v| v * 255).collect();
    encode_pgm_bytes(&bytes, mask.width, mask.height)
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    write_atomic(path, &encode_mask(mask)?)
}

/// Channel mean, bilinear resize to the 512 workspace, then min-max scaling.
pub fn standardize(raster: &Raster) -> Result<ImageTensor> {
    standardize_to(raster, WORKSPACE_SIDE)
}

pub fn standardize_to(raster: &Raster, side: usize) -> Result<ImageTensor> {
    if raster.data.is_empty() || raster.channels == 0 {
        return Err(Error::invalid("empty raster"));
    }
    if raster.height < 8 || raster.width < 8 {
        return Err(Error::invalid(format!("raster {}x{} is smaller than 8x8", raster.height, raster.width)));
    }
    if raster.data.len() != raster.height * raster.width * raster.channels {
        return Err(Error::invalid("raster buffer does not match its dimensions"));
    }
    let gray = channel_mean(raster)?;
    let resized = if gray.height() == side && gray.width() == side {
        gray
    } else {
        resize_bilinear(&gray, side, side)
    };
    Ok(min_max_scale(resized))
}

pub fn channel_mean(raster: &Raster) -> Result<ImageTensor> {
    if raster.channels == 0 {
        return Err(Error::invalid("raster has no channels"));
    }
    let gray: Vec<f32> = raster
        .data
        .chunks_exact(raster.channels)
        .map(|px| (px.iter().map(|&v| v as f64).sum::<f64>() / raster.channels as f64) as f32)
        .collect();
    ImageTensor::new(raster.height, raster.width, gray)
}

/// Scales to `[0,1]`; a constant image becomes all zeros.
pub fn min_max_scale(mut image: ImageTensor) -> ImageTensor {
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    for v in image.data_mut() {
        *v = if range > 0.0 { ((*v - lo) / range).clamp(0.0, 1.0) } else { 0.0 };
    }
    image
}

pub fn resize(image: &ImageTensor, side: usize) -> Result<ImageTensor> {
    if side < 8 {
        return Err(Error::invalid(format!("target side {side} is below 8")));
    }
    Ok(resize_bilinear(image, side, side))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskOutcome {
    pub mask: Mask,
    /// Set when the input mask had no foreground.
    pub empty_warning: bool,
    pub separated: bool,
}

/// Fills holes, keeps the large components and separates fused lungs.
pub fn postprocess_mask(mask: &Mask) -> MaskOutcome {
    if mask.is_empty() {
        return MaskOutcome {
            mask: mask.clone(),
            empty_warning: true,
            separated: false,
        };
    }
    let filtered = filter_components(&fill_holes(mask));
    let components = label_components(&filtered);
    let mut separated = false;
    let out = if components.count == 1 && spans_both_halves(&filtered) {
        match separate(&filtered) {
            Some(cut) => {
                separated = true;
                filter_components(&cut)
            }
            None => filtered,
        }
    } else {
        filtered
    };
    MaskOutcome {
        mask: out,
        empty_warning: false,
        separated,
    }
}

/// Background pixels unreachable from the border become foreground.
pub fn fill_holes(mask: &Mask) -> Mask {
    let (h, w) = (mask.height, mask.width);
    let mut outside = vec![false; h * w];
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if (r == 0 || c == 0 || r == h - 1 || c == w - 1) && !mask.get(r, c) {
                outside[r * w + c] = true;
                queue.push_back((r, c));
            }
        }
    }
    while let Some((r, c)) = queue.pop_front() {
        for (nr, nc) in neighbours(r, c, h, w) {
            let i = nr * w + nc;
            if !outside[i] && !mask.get(nr, nc) {
                outside[i] = true;
                queue.push_back((nr, nc));
            }
        }
    }
    Mask {
        height: h,
        width: w,
        data: outside.iter().map(|&o| u8::from(!o)).collect(),
    }
}

fn neighbours(r: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let up = (r > 0).then(|| (r - 1, c));
    let down = (r + 1 < h).then_some((r + 1, c));
    let left = (c > 0).then(|| (r, c - 1));
    let right = (c + 1 < w).then_some((r, c + 1));
    [up, down, left, right].into_iter().flatten()
}

/// 4-connected component labels; 0 is background, components numbered from 1 in scan order.
pub struct Components {
    pub labels: Vec<u32>,
    pub areas: Vec<usize>,
    pub count: usize,
}

pub fn label_components(mask: &Mask) -> Components {
    let (h, w) = (mask.height, mask.width);
    let mut labels = vec![0u32; h * w];
    let mut areas = vec![0usize];
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if mask.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        let id = areas.len() as u32;
        areas.push(0);
        labels[start] = id;
        queue.push_back((start / w, start % w));
        while let Some((r, c)) = queue.pop_front() {
            areas[id as usize] += 1;
            for (nr, nc) in neighbours(r, c, h, w) {
                let i = nr * w + nc;
                if mask.data[i] != 0 && labels[i] == 0 {
                    labels[i] = id;
                    queue.push_back((nr, nc));
                }
            }
        }
    }
    let count = areas.len() - 1;
    Components { labels, areas, count }
}

/// Drops components below 5% of the image area and keeps at most the two largest.
pub fn filter_components(mask: &Mask) -> Mask {
    let comps = label_components(mask);
    let min_area = MIN_COMPONENT_FRACTION * (mask.height * mask.width) as f64;
    let mut ranked: Vec<usize> = (1..=comps.count).filter(|&id| comps.areas[id] as f64 >= min_area).collect();
    ranked.sort_by(|&a, &b| comps.areas[b].cmp(&comps.areas[a]).then(a.cmp(&b)));
    ranked.truncate(MAX_COMPONENTS);
    let mut keep = vec![false; comps.count + 1];
    for id in ranked {
        keep[id] = true;
    }
    Mask {
        height: mask.height,
        width: mask.width,
        data: comps.labels.iter().map(|&l| u8::from(keep[l as usize])).collect(),
    }
}

fn column_extent(mask: &Mask) -> Option<(usize, usize)> {
    let cols: Vec<usize> = (0..mask.width).filter(|&c| (0..mask.height).any(|r| mask.get(r, c))).collect();
    Some((*cols.first()?, *cols.last()?))
}

fn spans_both_halves(mask: &Mask) -> bool {
    let half = mask.width / 2;
    column_extent(mask).is_some_and(|(lo, hi)| lo < half && hi >= half)
}

/// Clears the least-occupied column of the central third that lies strictly
/// inside the foreground's column extent. Ties go to the column nearest the centre.
fn separate(mask: &Mask) -> Option<Mask> {
    let (lo, hi) = column_extent(mask)?;
    let (w, h) = (mask.width, mask.height);
    let start = (w / 3).max(lo + 1);
    let end = (2 * w).div_ceil(3).min(hi);
    let centre = (w as f64 - 1.0) / 2.0;
    let col = (start..end).min_by(|&a, &b| {
        let occ = |c: usize| (0..h).filter(|&r| mask.get(r, c)).count();
        occ(a)
            .cmp(&occ(b))
            .then((a as f64 - centre).abs().total_cmp(&(b as f64 - centre).abs()))
            .then(a.cmp(&b))
    })?;
    let mut out = mask.clone();
    for r in 0..h {
        out.set(r, col, false);
    }
    Some(out)
}

/// Inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl CropBox {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            r0: 0,
            c0: 0,
            r1: height - 1,
            c1: width - 1,
        }
    }

    pub fn height(&self) -> usize {
        self.r1 - self.r0 + 1
    }

    pub fn width(&self) -> usize {
        self.c1 - self.c0 + 1
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.r0..=self.r1).contains(&row) && (self.c0..=self.c1).contains(&col)
    }
}

/// Mask bounding box extended to the last row, widened by a 2% margin, clamped.
/// An empty mask yields the full frame and `true` as the warning flag.
pub fn roi_box(mask: &Mask) -> (CropBox, bool) {
    let (h, w) = (mask.height, mask.width);
    let Some((c_lo, c_hi)) = column_extent(mask) else {
        return (CropBox::full(h, w), true);
    };
    let r_lo = (0..h).find(|&r| (0..w).any(|c| mask.get(r, c))).unwrap_or(0);
    let mr = (CROP_MARGIN_FRACTION * h as f64).floor() as usize;
    let mc = (CROP_MARGIN_FRACTION * w as f64).floor() as usize;
    (
        CropBox {
            r0: r_lo.saturating_sub(mr),
            c0: c_lo.saturating_sub(mc),
            r1: h - 1,
            c1: (c_hi + mc).min(w - 1),
        },
        false,
    )
}

pub fn crop(image: &ImageTensor, bx: &CropBox) -> ImageTensor {
    ImageTensor::from_fn(bx.height(), bx.width(), |r, c| image.get(bx.r0 + r, bx.c0 + c))
}

pub fn crop_to_roi(image: &ImageTensor, mask: &Mask) -> Result<(ImageTensor, CropBox, bool)> {
    if image.height() != mask.height || image.width() != mask.width {
        return Err(Error::invalid(format!(
            "mask {}x{} does not match image {}x{}",
            mask.height,
            mask.width,
            image.height(),
            image.width()
        )));
    }
    let (bx, warn) = roi_box(mask);
    Ok((crop(image, &bx), bx, warn))
}

/// Result of the full per-image chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub image: ImageTensor,
    /// Crop box in 512-workspace coordinates.
    pub crop: CropBox,
    pub warnings: Vec<String>,
}

/// standardize → mask cleanup → crop → resize. Without a mask the full frame is used.
pub fn prepare(raster: &Raster, mask: Option<&Mask>, side: usize) -> Result<Prepared> {
    let image = standardize(raster)?;
    let mut warnings = Vec::new();
    let (cropped, bx) = match mask {
        Some(mask) => {
            let m = mask.resize_nearest(WORKSPACE_SIDE, WORKSPACE_SIDE);
            let outcome = postprocess_mask(&m);
            if outcome.empty_warning {
                warnings.push("empty lung mask".to_string());
            }
            let (img, bx, _) = crop_to_roi(&image, &outcome.mask)?;
            (img, bx)
        }
        None => {
            warnings.push("no lung mask".to_string());
            (image, CropBox::full(WORKSPACE_SIDE, WORKSPACE_SIDE))
        }
    };
    Ok(Prepared {
        image: resize(&cropped, side)?,
        crop: bx,
        warnings,
    })
}

/// Maps a point given in source-image pixel coordinates into the prepared frame.
pub fn map_point(x: f64, y: f64, src_width: usize, src_height: usize, crop: &CropBox, side: usize) -> (f64, f64) {
    let scale_x = WORKSPACE_SIDE as f64 / src_width as f64;
    let scale_y = WORKSPACE_SIDE as f64 / src_height as f64;
    let wx = x * scale_x - crop.c0 as f64;
    let wy = y * scale_y - crop.r0 as f64;
    (wx * side as f64 / crop.width() as f64, wy * side as f64 / crop.height() as f64)
}

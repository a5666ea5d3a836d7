//! Grad-CAM heatmaps, ensemble averaging, overlays and per-sample reports.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::imaging::{encode_pgm, encode_rgb_png, resize_bilinear, ImageTensor};
use crate::nncore::{forward, tap_gradient, Mode, Real, RefNetParams, Tensor};
use crate::trainer::Checkpoint;

#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    pub label: String,
    /// Member name or `"ensemble"`.
    pub source: String,
    pub values: ImageTensor,
}

/// Intermediate Grad-CAM quantities at tap resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct CamParts<T> {
    pub activations: Tensor<T>,
    pub gradient: Tensor<T>,
    pub alpha: Vec<T>,
    /// `ReLU(Σ α_f A_f)`, `[h, h]`.
    pub raw: Vec<T>,
}

pub fn grad_cam_parts<T: Real>(params: &RefNetParams<T>, image: &ImageTensor, label: usize) -> Result<CamParts<T>> {
    let arch = params.arch;
    if label >= arch.labels {
        return Err(Error::invalid(format!("label index {label} out of range for {} labels", arch.labels)));
    }
    let input = Tensor::new(
        vec![1, 1, image.height(), image.width()],
        image.data().iter().map(|&v| T::of(v as f64)).collect(),
    )?;
    let (_, cache) = forward(params, &input, Mode::Eval)?;
    let mut onehot = Tensor::zeros(&[1, arch.labels]);
    onehot.data_mut()[label] = T::one();
    let gradient = tap_gradient(params, &cache, &onehot)?;
    let activations = cache.conv2_activation(0);
    let h = arch.tap_side();
    let plane = h * h;
    let alpha: Vec<T> = gradient
        .data()
        .chunks(plane)
        .map(|g| g.iter().fold(T::zero(), |a, &v| a + v) / T::of(plane as f64))
        .collect();
    let mut raw = vec![T::zero(); plane];
    for (a, act) in alpha.iter().zip(activations.data().chunks(plane)) {
        for (r, &v) in raw.iter_mut().zip(act) {
            *r += *a * v;
        }
    }
    for r in &mut raw {
        if *r < T::zero() {
            *r = T::zero();
        }
    }
    Ok(CamParts {
        activations,
        gradient,
        alpha,
        raw,
    })
}

/// Min-max scaling to `[0,1]`; a constant map becomes zeros.
pub fn normalize_map(raw: &[f32]) -> Vec<f32> {
    let (lo, hi) = raw
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    raw.iter()
        .map(|&v| if range > 0.0 { ((v - lo) / range).clamp(0.0, 1.0) } else { 0.0 })
        .collect()
}

/// Normalized Grad-CAM map for one label, upsampled to the input size.
pub fn grad_cam_map(params: &RefNetParams<f32>, image: &ImageTensor, label: usize) -> Result<ImageTensor> {
    let parts = grad_cam_parts(params, image, label)?;
    let h = params.arch.tap_side();
    let small = ImageTensor::new(h, h, normalize_map(&parts.raw))?;
    Ok(resize_bilinear(&small, image.height(), image.width()))
}

pub fn grad_cam(checkpoint: &Checkpoint, image: &ImageTensor, label: usize) -> Result<HeatMap> {
    let values = grad_cam_map(&checkpoint.params, image, label)?;
    Ok(HeatMap {
        label: checkpoint.labels[label].clone(),
        source: checkpoint.member.name(),
        values,
    })
}

/// Pixel-wise mean; summation order is canonical so member order does not matter.
pub fn ensemble_heatmap(maps: &[HeatMap]) -> Result<HeatMap> {
    let first = maps.first().ok_or_else(|| Error::invalid("no heatmaps to average"))?;
    let (h, w) = (first.values.height(), first.values.width());
    if maps.iter().any(|m| m.values.height() != h || m.values.width() != w) {
        return Err(Error::invalid("heatmaps differ in size"));
    }
    let mut cell = Vec::with_capacity(maps.len());
    let data = (0..h * w)
        .map(|i| {
            cell.clear();
            cell.extend(maps.iter().map(|m| m.values.data()[i] as f64));
            cell.sort_by(f64::total_cmp);
            (cell.iter().sum::<f64>() / maps.len() as f64) as f32
        })
        .collect();
    Ok(HeatMap {
        label: first.label.clone(),
        source: "ensemble".into(),
        values: ImageTensor::new(h, w, data)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlayOptions {
    /// Opacity of the heat colour over heat-active pixels.
    pub alpha: f64,
    /// Heat below this shows the plain image.
    pub min_heat: f64,
}

impl Default for OverlayOptions {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            min_heat: 0.2,
        }
    }
}

/// Single-hue blue ramp: pale blue at 0, deep blue at 1.
pub fn colormap(heat: f64) -> [f64; 3] {
    let h = heat.clamp(0.0, 1.0);
    [0.8 * (1.0 - h), 0.85 * (1.0 - h) + 0.2 * h, 1.0]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Overlay {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
    pub caption: String,
}

pub fn caption(label: &str, probability: f64, agreement: u32, members: usize) -> String {
    format!("{label} p={probability:.2} agreement={agreement}/{members}")
}

pub fn render_overlay(
    image: &ImageTensor,
    heat: &ImageTensor,
    label: &str,
    probability: f64,
    agreement: u32,
    members: usize,
    opts: &OverlayOptions,
) -> Result<Overlay> {
    if image.height() != heat.height() || image.width() != heat.width() {
        return Err(Error::invalid("heatmap and image sizes differ"));
    }
    let mut rgb = Vec::with_capacity(image.data().len() * 3);
    for (&g, &h) in image.data().iter().zip(heat.data()) {
        let g = g.clamp(0.0, 1.0) as f64;
        let px = if (h as f64) < opts.min_heat {
            [g; 3]
        } else {
            colormap(h as f64).map(|c| opts.alpha * c + (1.0 - opts.alpha) * g)
        };
        rgb.extend(px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(Overlay {
        width: image.width(),
        height: image.height(),
        rgb,
        caption: caption(label, probability, agreement, members),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub name: String,
    pub probability: f64,
    pub agreement: String,
    pub caption: String,
    pub heatmap_path: String,
    pub overlay_path: String,
    pub below_threshold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapReport {
    pub sample_id: String,
    pub labels: Vec<LabelEntry>,
}

/// What the report needs about one sample.
pub struct SampleView<'a> {
    pub sample_id: &'a str,
    /// Model-input image.
    pub image: &'a ImageTensor,
    /// CTP probabilities, one per label.
    pub probabilities: &'a [f64],
    pub agreement: &'a [u32],
}

fn file_stem(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Writes `heatmaps/`, `overlays/` and `reports/<sample>.json` under `out_dir`
/// for every label the ensemble predicts positive, or for the most probable
/// label (flagged) when none is.
pub fn report(
    sample: &SampleView<'_>,
    checkpoints: &[Checkpoint],
    threshold: f64,
    opts: &OverlayOptions,
    out_dir: &Path,
) -> Result<HeatmapReport> {
    let first = checkpoints.first().ok_or_else(|| Error::invalid("report needs at least one checkpoint"))?;
    let labels = &first.labels;
    if checkpoints.iter().any(|c| &c.labels != labels) {
        return Err(Error::invalid("checkpoints disagree on labels"));
    }
    if sample.probabilities.len() != labels.len() || sample.agreement.len() != labels.len() {
        return Err(Error::invalid("probabilities or agreement do not match the label count"));
    }
    let mut chosen: Vec<(usize, bool)> = (0..labels.len())
        .filter(|&c| sample.probabilities[c] >= threshold)
        .map(|c| (c, false))
        .collect();
    if chosen.is_empty() {
        let best = (0..labels.len())
            .fold(0, |b, c| if sample.probabilities[c] > sample.probabilities[b] { c } else { b });
        chosen.push((best, true));
    }
    for sub in ["heatmaps", "overlays", "reports"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let stem = file_stem(sample.sample_id);
    let mut entries = Vec::new();
    for (c, below) in chosen {
        let maps = checkpoints
            .iter()
            .map(|ck| grad_cam(ck, sample.image, c))
            .collect::<Result<Vec<_>>>()?;
        let heat = ensemble_heatmap(&maps)?;
        let overlay = render_overlay(
            sample.image,
            &heat.values,
            &labels[c],
            sample.probabilities[c],
            sample.agreement[c],
            checkpoints.len(),
            opts,
        )?;
        let name = format!("{stem}_{}", file_stem(&labels[c]));
        let heatmap_path = format!("heatmaps/{name}.pgm");
        let overlay_path = format!("overlays/{name}.png");
        write_atomic(&out_dir.join(&heatmap_path), &encode_pgm(&heat.values)?)?;
        write_atomic(&out_dir.join(&overlay_path), &encode_rgb_png(&overlay.rgb, overlay.width, overlay.height)?)?;
        entries.push(LabelEntry {
            name: labels[c].clone(),
            probability: sample.probabilities[c],
            agreement: format!("{}/{}", sample.agreement[c], checkpoints.len()),
            caption: overlay.caption,
            heatmap_path,
            overlay_path,
            below_threshold: below,
        });
    }
    let rep = HeatmapReport {
        sample_id: sample.sample_id.to_string(),
        labels: entries,
    };
    let mut json = serde_json::to_vec_pretty(&rep)?;
    json.push(b'\n');
    write_atomic(&out_dir.join(format!("reports/{stem}.json")), &json)?;
    Ok(rep)
}

/// Heat-mass-weighted centroid `(x, y)` in pixel coordinates, if any heat exists.
pub fn heat_centroid(heat: &ImageTensor) -> Option<(f64, f64)> {
    let (mut m, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for r in 0..heat.height() {
        for c in 0..heat.width() {
            let v = heat.get(r, c) as f64;
            m += v;
            sx += v * (c as f64 + 0.5);
            sy += v * (r as f64 + 0.5);
        }
    }
    (m > 0.0).then(|| (sx / m, sy / m))
}

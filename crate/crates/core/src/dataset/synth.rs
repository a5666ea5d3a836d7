//! Synthetic chest-film stand-in: two elliptical lungs over noise, with one
//! geometric motif per active finding and a lung mask carrying the usual
//! segmentation defects (holes, stray blobs, a bridge between the lungs).

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{manifest_bytes, SampleRecord};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::imaging::encode_pgm_bytes;

/// Leaf findings in generator order, each with its parent and motif.
pub const SYNTH_LEAVES: [(&str, &str, Motif); 6] = [
    ("nodule", "opacity", Motif::Disk),
    ("cavitation", "opacity", Motif::Ring),
    ("consolidation", "opacity", Motif::Blob),
    ("atelectasis", "structural", Motif::Bar),
    ("suture", "structural", Motif::Cross),
    ("infarct", "structural", Motif::Wedge),
];

pub const BOXES_HEADER: [&str; 6] = ["image_path", "label", "x0", "y0", "x1", "y1"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Motif {
    Disk,
    Ring,
    Bar,
    Cross,
    Wedge,
    Blob,
}

/// Ground-truth location of a drawn motif, inclusive pixel bounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignBox {
    pub image_path: String,
    pub label: String,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// One prevalence per entry of `SYNTH_LEAVES`.
    pub prevalences: Vec<f64>,
    /// `(a, b, rho)`: with probability `rho`, leaf `b` reuses leaf `a`'s uniform draw.
    pub cooccurrence: Vec<(usize, usize, f64)>,
    pub count: usize,
    pub side: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// Six findings with a worst-case 20:1 imbalance.
    pub fn imbalanced(count: usize, side: usize, seed: u64) -> Self {
        Self {
            prevalences: vec![0.5, 0.3, 0.2, 0.1, 0.05, 0.025],
            cooccurrence: vec![(0, 2, 0.3)],
            count,
            side,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prevalences.len() != SYNTH_LEAVES.len() {
            return Err(Error::invalid(format!(
                "expected {} prevalences, got {}",
                SYNTH_LEAVES.len(),
                self.prevalences.len()
            )));
        }
        if self.prevalences.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::invalid("prevalences must lie in (0,1)"));
        }
        for &(a, b, rho) in &self.cooccurrence {
            if a >= SYNTH_LEAVES.len() || b >= SYNTH_LEAVES.len() || a == b || !(0.0..=1.0).contains(&rho) {
                return Err(Error::invalid(format!("bad co-occurrence pair ({a}, {b}, {rho})")));
            }
        }
        if self.count == 0 {
            return Err(Error::invalid("count must be >= 1"));
        }
        if self.side < 32 {
            return Err(Error::invalid("synthetic image side must be >= 32"));
        }
        Ok(())
    }

    /// Label bits for every image, without rendering.
    pub fn sample_labels(&self) -> Result<Vec<[bool; 6]>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        Ok((0..self.count)
            .map(|_| {
                let mut u: [f64; 6] = std::array::from_fn(|_| rng.random());
                for &(a, b, rho) in &self.cooccurrence {
                    if rng.random::<f64>() < rho {
                        u[b] = u[a];
                    }
                }
                std::array::from_fn(|i| u[i] < self.prevalences[i])
            })
            .collect())
    }
}

/// Taxonomy text: two parents over the six leaves.
pub fn synth_taxonomy() -> String {
    let mut out = String::from("# parent\tchild\n");
    for (leaf, parent, _) in SYNTH_LEAVES {
        out.push_str(&format!("{parent}\t{leaf}\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub records: Vec<SampleRecord>,
    pub boxes: Vec<SignBox>,
}

/// Writes `images/`, `masks/`, `manifest.csv`, `taxonomy.tsv` and `boxes.csv`
/// under `out_dir`. Paths in the CSVs are relative to `out_dir`.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthCorpus> {
    let labels = cfg.sample_labels()?;
    for sub in ["images", "masks"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut patient_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5041_5449_454e_5453);
    let mut records = Vec::with_capacity(cfg.count);
    let mut boxes = Vec::new();
    let mut patient = 0usize;
    let mut left_for_patient = 0usize;
    for (i, bits) in labels.iter().enumerate() {
        if left_for_patient == 0 {
            patient += 1;
            left_for_patient = patient_rng.random_range(1..=3);
        }
        left_for_patient -= 1;
        let name = format!("img_{:05}", i + 1);
        let image_path = format!("images/{name}.pgm");
        let mask_path = format!("masks/{name}.pgm");
        let rendered = render(cfg, i as u64, bits);
        write_atomic(&out_dir.join(&image_path), &encode_pgm_bytes(&rendered.image, cfg.side, cfg.side)?)?;
        write_atomic(&out_dir.join(&mask_path), &encode_pgm_bytes(&rendered.mask, cfg.side, cfg.side)?)?;
        for (leaf, (x0, y0, x1, y1)) in rendered.boxes {
            boxes.push(SignBox {
                image_path: image_path.clone(),
                label: leaf.to_string(),
                x0,
                y0,
                x1,
                y1,
            });
        }
        let present: BTreeSet<String> = SYNTH_LEAVES
            .iter()
            .zip(bits)
            .filter(|(_, &b)| b)
            .map(|((leaf, _, _), _)| leaf.to_string())
            .collect();
        records.push(SampleRecord {
            image_path,
            patient_id: format!("P{patient:05}"),
            labels: present,
            mask_path: Some(mask_path),
            split: None,
        });
    }
    write_atomic(&out_dir.join("manifest.csv"), &manifest_bytes(&records)?)?;
    write_atomic(&out_dir.join("taxonomy.tsv"), synth_taxonomy().as_bytes())?;
    write_boxes(&out_dir.join("boxes.csv"), &boxes)?;
    Ok(SynthCorpus { records, boxes })
}

pub fn write_boxes(path: &Path, boxes: &[SignBox]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(BOXES_HEADER)?;
    for b in boxes {
        w.serialize(b)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn load_boxes(path: &Path) -> Result<Vec<SignBox>> {
    let bytes = crate::fsutil::read_bytes(path)?;
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

struct Rendered {
    image: Vec<u8>,
    mask: Vec<u8>,
    boxes: Vec<(&'static str, (usize, usize, usize, usize))>,
}

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64, shrink: f64) -> bool {
        let dx = (x - self.cx) / (self.rx * shrink);
        let dy = (y - self.cy) / (self.ry * shrink);
        dx * dx + dy * dy <= 1.0
    }
}

fn render(cfg: &SynthConfig, index: u64, bits: &[bool; 6]) -> Rendered {
    let side = cfg.side;
    let s = side as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ index.wrapping_add(1));
    let lungs = [
        Ellipse { cx: 0.3 * s + jitter(&mut rng, 0.02 * s), cy: 0.47 * s + jitter(&mut rng, 0.02 * s), rx: 0.15 * s, ry: 0.3 * s },
        Ellipse { cx: 0.7 * s + jitter(&mut rng, 0.02 * s), cy: 0.47 * s + jitter(&mut rng, 0.02 * s), rx: 0.15 * s, ry: 0.3 * s },
    ];

    let mut img = vec![0f64; side * side];
    for r in 0..side {
        for c in 0..side {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let base = if lungs.iter().any(|l| l.contains(x, y, 1.0)) { 0.2 } else { 0.55 };
            img[r * side + c] = base + 0.04 * (rng.random::<f64>() * 2.0 - 1.0);
        }
    }

    let mut boxes = Vec::new();
    for (k, (leaf, _, motif)) in SYNTH_LEAVES.iter().enumerate() {
        if !bits[k] {
            continue;
        }
        let lung = lungs[rng.random_range(0..2)];
        let (cx, cy) = loop {
            let x = lung.cx + lung.rx * 0.6 * (rng.random::<f64>() * 2.0 - 1.0);
            let y = lung.cy + lung.ry * 0.6 * (rng.random::<f64>() * 2.0 - 1.0);
            if lung.contains(x, y, 0.6) {
                break (x, y);
            }
        };
        let extent = draw_motif(&mut img, side, *motif, cx, cy);
        boxes.push((*leaf, extent));
    }

    let mut mask = vec![0u8; side * side];
    for r in 0..side {
        for c in 0..side {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            if lungs.iter().any(|l| l.contains(x, y, 1.0)) {
                mask[r * side + c] = 255;
            }
        }
    }
    let paint = |mask: &mut Vec<u8>, cx: f64, cy: f64, rad: f64, v: u8| {
        for r in 0..side {
            for c in 0..side {
                let (dx, dy) = (c as f64 + 0.5 - cx, r as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= rad * rad {
                    mask[r * side + c] = v;
                }
            }
        }
    };
    if rng.random::<f64>() < 0.3 {
        let l = lungs[rng.random_range(0..2)];
        paint(&mut mask, l.cx, l.cy + jitter(&mut rng, 0.1 * s), 0.03 * s, 0);
    }
    if rng.random::<f64>() < 0.3 {
        paint(&mut mask, 0.5 * s + jitter(&mut rng, 0.05 * s), 0.9 * s, 0.03 * s, 255);
    }
    if rng.random::<f64>() < 0.2 {
        let row = (lungs[0].cy + lungs[1].cy) / 2.0;
        let r0 = (row as usize).min(side - 2);
        for r in r0..r0 + 2 {
            for c in lungs[0].cx as usize..=lungs[1].cx as usize {
                mask[r * side + c] = 255;
            }
        }
    }

    Rendered {
        image: img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        mask,
        boxes,
    }
}

fn jitter(rng: &mut ChaCha8Rng, amount: f64) -> f64 {
    amount * (rng.random::<f64>() * 2.0 - 1.0)
}

/// Draws one motif centred at `(cx, cy)` and returns its clipped pixel extent.
fn draw_motif(img: &mut [f64], side: usize, motif: Motif, cx: f64, cy: f64) -> (usize, usize, usize, usize) {
    let s = side as f64;
    let (half, amplitude) = match motif {
        Motif::Disk => (0.05 * s, 0.5),
        Motif::Ring => (0.08 * s, 0.45),
        Motif::Bar => (0.1 * s, 0.45),
        Motif::Cross => (0.07 * s, 0.6),
        Motif::Wedge => (0.07 * s, 0.4),
        Motif::Blob => (0.12 * s, 0.4),
    };
    let shape = |dx: f64, dy: f64| -> f64 {
        match motif {
            Motif::Disk => f64::from(dx * dx + dy * dy <= half * half),
            Motif::Ring => {
                let d2 = dx * dx + dy * dy;
                let inner = 0.6 * half;
                f64::from(d2 <= half * half && d2 >= inner * inner)
            }
            Motif::Bar => f64::from(dx.abs() <= half && dy.abs() <= 0.015 * s),
            Motif::Cross => {
                let t = 0.012 * s;
                f64::from((dx.abs() <= half && dy.abs() <= t) || (dy.abs() <= half && dx.abs() <= t))
            }
            Motif::Wedge => {
                // apex at the top, base at the bottom
                let depth = (dy + half) / (2.0 * half);
                f64::from((0.0..=1.0).contains(&depth) && dx.abs() <= depth * half)
            }
            Motif::Blob => {
                let sigma = half / 2.0;
                let g = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                if g < 0.05 {
                    0.0
                } else {
                    g
                }
            }
        }
    };
    let clip = |v: f64| v.floor().clamp(0.0, s - 1.0) as usize;
    let (x0, x1) = (clip(cx - half), clip(cx + half));
    let (y0, y1) = (clip(cy - half), clip(cy + half));
    let mut extent: Option<(usize, usize, usize, usize)> = None;
    for r in y0..=y1 {
        for c in x0..=x1 {
            let w = shape(c as f64 + 0.5 - cx, r as f64 + 0.5 - cy);
            if w > 0.0 {
                img[r * side + c] += amplitude * w;
                extent = Some(match extent {
                    None => (c, r, c, r),
                    Some((a, b, cc, d)) => (a.min(c), b.min(r), cc.max(c), d.max(r)),
                });
            }
        }
    }
    extent.unwrap_or((x0, y0, x1, y1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{parse_term_tree, ViewKind};
    use std::collections::BTreeMap;

    #[test]
    fn half_prevalence_within_binomial_bound() {
        let mut cfg = SynthConfig::imbalanced(1000, 32, 11);
        cfg.prevalences[0] = 0.5;
        let positives = cfg.sample_labels().unwrap().iter().filter(|b| b[0]).count();
        // 2 * sqrt(1000 * 0.25) = 31.6
        assert!((positives as i64 - 500).abs() <= 31, "{positives}");
    }

    #[test]
    fn cooccurrence_keeps_marginals() {
        let cfg = SynthConfig {
            cooccurrence: vec![(0, 1, 1.0)],
            ..SynthConfig::imbalanced(20_000, 32, 5)
        };
        let labels = cfg.sample_labels().unwrap();
        let n = labels.len() as f64;
        let p1 = labels.iter().filter(|b| b[1]).count() as f64 / n;
        assert!((p1 - 0.3).abs() < 4.0 * (0.3f64 * 0.7 / n).sqrt(), "{p1}");
        // rho = 1: every carrier of the rarer label also carries the commoner one
        assert!(labels.iter().all(|b| !b[1] || b[0]));
    }

    #[test]
    fn imbalance_ratio_near_twenty() {
        let labels = SynthConfig::imbalanced(40_000, 32, 2).sample_labels().unwrap();
        let counts: Vec<usize> = (0..6).map(|k| labels.iter().filter(|b| b[k]).count()).collect();
        let ratio = counts[0] as f64 / counts[5] as f64;
        assert!((ratio - 20.0).abs() < 2.0, "{ratio}");
    }

    #[test]
    fn taxonomy_has_two_parents_over_six_leaves() {
        let tree = parse_term_tree(&synth_taxonomy()).unwrap();
        assert_eq!(tree.roots(), vec!["opacity", "structural"]);
        assert_eq!(tree.leaves().len(), 6);
        assert_eq!(crate::taxonomy::LabelView::new(&tree, ViewKind::General).len(), 2);
    }

    #[test]
    fn same_seed_gives_identical_corpus_and_boxes_match_labels() {
        let cfg = SynthConfig::imbalanced(40, 48, 3);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ca = synth_generate(&cfg, a.path()).unwrap();
        let cb = synth_generate(&cfg, b.path()).unwrap();
        assert_eq!(ca, cb);
        let mut names: Vec<_> = fs::read_dir(a.path().join("images")).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names.len(), 40);
        for f in ["manifest.csv", "taxonomy.tsv", "boxes.csv"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        for n in &names {
            for sub in ["images", "masks"] {
                assert_eq!(fs::read(a.path().join(sub).join(n)).unwrap(), fs::read(b.path().join(sub).join(n)).unwrap());
            }
        }

        let mut by_image: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for bx in &ca.boxes {
            by_image.entry(&bx.image_path).or_default().insert(&bx.label);
            assert!(bx.x0 <= bx.x1 && bx.y0 <= bx.y1 && bx.x1 < 48 && bx.y1 < 48);
        }
        for r in &ca.records {
            let boxed = by_image.get(r.image_path.as_str()).cloned().unwrap_or_default();
            let labels: BTreeSet<&str> = r.labels.iter().map(String::as_str).collect();
            assert_eq!(boxed, labels, "{}", r.image_path);
        }
        assert_eq!(load_boxes(&a.path().join("boxes.csv")).unwrap(), ca.boxes);
    }

    #[test]
    fn patients_hold_one_to_three_images() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synth_generate(&SynthConfig::imbalanced(60, 32, 8), dir.path()).unwrap();
        let mut per_patient: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &corpus.records {
            *per_patient.entry(&r.patient_id).or_default() += 1;
        }
        assert!(per_patient.values().all(|&n| (1..=3).contains(&n)));
    }

    #[test]
    fn bad_config_rejected() {
        assert!(SynthConfig::imbalanced(0, 32, 0).validate().is_err());
        let mut cfg = SynthConfig::imbalanced(10, 32, 0);
        cfg.prevalences[2] = 1.0;
        assert!(cfg.validate().is_err());
    }
}

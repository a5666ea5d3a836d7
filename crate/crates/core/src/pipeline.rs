//! Stage orchestration. Every stage reads its inputs from and writes its
//! outputs to a run directory, so stages can run one at a time or chained.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::dataset::{
    load_boxes, load_manifest, stratified_group_split, synth_generate, write_manifest,
    SampleRecord, Split, SynthConfig, MANIFEST_HEADER, BOXES_HEADER,
};
use crate::ensemble::{aggregate, EnsembleOutput, Method, PredictionMatrix};
use crate::error::{Error, Result};
use crate::explain::{ensemble_heatmap, grad_cam, heat_centroid, report, HeatmapReport, SampleView};
use crate::fsutil::{read_bytes, read_to_string, write_atomic};
use crate::imaging::{load_gray, load_raster, save_pgm, ImageTensor};
use crate::metrics::{build_result_table, F1Kind, ResultTable, SystemScores};
use crate::preprocess::{load_mask, map_point, prepare};
use crate::taxonomy::{filter_by_support, label_weights, parse_term_tree, project, LabelStats, LabelView, TermTree};
use crate::trainer::{predict, train_ensemble, Checkpoint, EnsembleSpec, LabeledImages, CHECKPOINT_VERSION};

/// Per-edge growth of a ground-truth box, as a fraction of the image side,
/// when scoring heat-map localization.
pub const LOCALIZATION_DILATION: f64 = 0.25;

/// Fixed file layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn preprocessed_image(&self, sample_id: &str) -> PathBuf {
        self.root.join("preprocessed/images").join(format!("{sample_id}.pgm"))
    }

    pub fn crops(&self) -> PathBuf {
        self.root.join("preprocessed/crops.csv")
    }

    pub fn split_manifest(&self) -> PathBuf {
        self.root.join("split/manifest.csv")
    }

    pub fn labels(&self) -> PathBuf {
        self.root.join("split/labels.txt")
    }

    pub fn split_summary(&self) -> PathBuf {
        self.root.join("split/summary.csv")
    }

    pub fn checkpoint(&self, member: &str) -> PathBuf {
        self.root.join("models").join(format!("{member}.ckpt"))
    }

    pub fn history(&self) -> PathBuf {
        self.root.join("models/history.csv")
    }

    pub fn member_predictions(&self, member: &str) -> PathBuf {
        self.root.join("predictions").join(format!("{member}.csv"))
    }

    pub fn ensemble_output(&self, method: Method) -> PathBuf {
        self.root.join("ensemble").join(format!("{}.csv", method.slug()))
    }

    pub fn agreement(&self) -> PathBuf {
        self.root.join("ensemble/agreement.csv")
    }

    pub fn results_table(&self) -> PathBuf {
        self.root.join("results/table.csv")
    }

    pub fn results_summary(&self) -> PathBuf {
        self.root.join("results/summary.csv")
    }

    pub fn localization(&self) -> PathBuf {
        self.root.join("results/localization.csv")
    }

    pub fn explain_dir(&self) -> PathBuf {
        self.root.join("explain")
    }

    pub fn record(&self, stage: &str) -> PathBuf {
        self.root.join("records").join(format!("{stage}.json"))
    }
}

/// Where the input corpus lives.
#[derive(Debug, Clone)]
pub struct DataSource {
    pub manifest: PathBuf,
    pub taxonomy: PathBuf,
    /// Directory image and mask paths are relative to.
    pub root: PathBuf,
    pub boxes: Option<PathBuf>,
}

impl DataSource {
    /// A generated corpus inside the run directory when `synth.count` is set
    /// and no manifest is given, the configured files otherwise.
    pub fn resolve(cfg: &RunConfig, layout: &RunLayout) -> Result<Self> {
        match (&cfg.manifest, &cfg.synth) {
            (None, Some(_)) => {
                let dir = layout.corpus();
                Ok(Self {
                    manifest: dir.join("manifest.csv"),
                    taxonomy: dir.join("taxonomy.tsv"),
                    boxes: Some(dir.join("boxes.csv")),
                    root: dir,
                })
            }
            (Some(m), _) => {
                let manifest = cfg.resolve(m);
                let taxonomy = cfg
                    .taxonomy
                    .as_deref()
                    .map(|t| cfg.resolve(t))
                    .ok_or_else(|| Error::invalid("'data.taxonomy' is required"))?;
                let root = match &cfg.data_root {
                    Some(r) => cfg.resolve(r),
                    None => manifest.parent().map(Path::to_path_buf).unwrap_or_default(),
                };
                Ok(Self {
                    manifest,
                    taxonomy,
                    root,
                    boxes: cfg.boxes.as_deref().map(|b| cfg.resolve(b)),
                })
            }
            (None, None) => Err(Error::invalid("'data.manifest' is required unless synth.count is set")),
        }
    }

    pub fn tree(&self) -> Result<TermTree> {
        parse_term_tree(&read_to_string(&self.taxonomy)?)
    }
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let n = match threads {
        Some(0) | Some(1) => 1,
        Some(n) => n,
        None => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?
        .install(f)
}

pub fn stage_synth(cfg: &RunConfig, layout: &RunLayout) -> Result<usize> {
    let s = cfg
        .synth
        .as_ref()
        .ok_or_else(|| Error::invalid("synth.count is not set"))?;
    let corpus = synth_generate(&SynthConfig::imbalanced(s.count, s.side, cfg.seed()?), &layout.corpus())?;
    Ok(corpus.records.len())
}

/// One row of `preprocessed/crops.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub sample_id: String,
    pub src_width: usize,
    pub src_height: usize,
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
    pub warnings: String,
}

impl CropRecord {
    pub fn crop_box(&self) -> crate::preprocess::CropBox {
        crate::preprocess::CropBox {
            r0: self.r0,
            c0: self.c0,
            r1: self.r1,
            c1: self.c1,
        }
    }
}

fn unique_ids(records: &[SampleRecord]) -> Result<Vec<String>> {
    let ids: Vec<String> = records.iter().map(SampleRecord::sample_id).collect();
    let mut seen = BTreeSet::new();
    for id in &ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::invalid(format!("two images share the sample id '{id}'")));
        }
    }
    Ok(ids)
}

/// Mask cleanup, crop and resize for every manifest image.
pub fn stage_preprocess(cfg: &RunConfig, layout: &RunLayout, threads: Option<usize>) -> Result<Vec<CropRecord>> {
    let src = DataSource::resolve(cfg, layout)?;
    let records = load_manifest(&src.manifest)?;
    let ids = unique_ids(&records)?;
    let side = cfg.train.side;
    let rows = with_pool(threads, || {
        records
            .par_iter()
            .zip(ids.par_iter())
            .map(|(r, id)| {
                let raster = load_raster(&src.root.join(&r.image_path))?;
                let mask = match &r.mask_path {
                    Some(m) => Some(load_mask(&src.root.join(m))?),
                    None => None,
                };
                let prepared = prepare(&raster, mask.as_ref(), side)?;
                for w in &prepared.warnings {
                    log::warn!("{id}: {w}");
                }
                save_pgm(&layout.preprocessed_image(id), &prepared.image)?;
                Ok(CropRecord {
                    sample_id: id.clone(),
                    src_width: raster.width,
                    src_height: raster.height,
                    r0: prepared.crop.r0,
                    c0: prepared.crop.c0,
                    r1: prepared.crop.r1,
                    c1: prepared.crop.c1,
                    warnings: prepared.warnings.join(";"),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    write_atomic(&layout.crops(), &w.into_inner().map_err(|e| Error::invalid(e.to_string()))?)?;
    Ok(rows)
}

pub fn load_crops(layout: &RunLayout) -> Result<BTreeMap<String, CropRecord>> {
    let bytes = read_bytes(&layout.crops())?;
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    rdr.deserialize::<CropRecord>()
        .map(|r| r.map(|c| (c.sample_id.clone(), c)).map_err(Error::from))
        .collect()
}

/// Labels, records and their subset after the split stage.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub tree: TermTree,
    pub view: LabelView,
    pub records: Vec<SampleRecord>,
}

impl SplitData {
    pub fn labels(&self) -> &[String] {
        self.view.labels()
    }

    pub fn subset(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == Some(split)).collect()
    }

    pub fn targets(&self, records: &[&SampleRecord]) -> Result<Vec<Vec<u8>>> {
        records
            .iter()
            .map(|r| project(r.labels.iter().map(String::as_str), &self.view, &self.tree))
            .collect()
    }

    pub fn load(cfg: &RunConfig, layout: &RunLayout) -> Result<Self> {
        let tree = DataSource::resolve(cfg, layout)?.tree()?;
        let labels: Vec<String> = read_to_string(&layout.labels())?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        let view = LabelView::new(&tree, cfg.view).retain(&labels.iter().cloned().collect());
        if view.labels() != labels.as_slice() {
            return Err(Error::invalid(format!(
                "{} does not match the '{}' view of the taxonomy",
                layout.labels().display(),
                cfg.view
            )));
        }
        let records = load_manifest(&layout.split_manifest())?;
        if records.iter().any(|r| r.split.is_none()) {
            return Err(Error::invalid(format!("{} has rows without a split", layout.split_manifest().display())));
        }
        Ok(Self { tree, view, records })
    }
}

/// Support filtering followed by the patient-grouped stratified split.
pub fn stage_split(cfg: &RunConfig, layout: &RunLayout) -> Result<SplitData> {
    let src = DataSource::resolve(cfg, layout)?;
    let tree = src.tree()?;
    let records = load_manifest(&src.manifest)?;
    unique_ids(&records)?;
    let filtered = filter_by_support(&records, &LabelView::new(&tree, cfg.view), &tree, cfg.support_threshold)?;
    if filtered.view.is_empty() {
        return Err(Error::invalid(format!(
            "no '{}' label has at least {} positive samples",
            cfg.view, cfg.support_threshold
        )));
    }
    let assignment = stratified_group_split(&filtered.records, &filtered.view, &tree, cfg.split, cfg.seed()?)?;
    let data = SplitData {
        records: assignment.apply(&filtered.records),
        view: filtered.view,
        tree,
    };
    write_manifest(&layout.split_manifest(), &data.records)?;
    let mut labels = data.labels().join("\n");
    labels.push('\n');
    write_atomic(&layout.labels(), labels.as_bytes())?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["subset".to_string(), "samples".into(), "patients".into()];
    header.extend(data.labels().iter().cloned());
    w.write_record(&header)?;
    for split in Split::ALL {
        let subset: Vec<SampleRecord> = data.subset(split).into_iter().cloned().collect();
        let patients: BTreeSet<&str> = subset.iter().map(|r| r.patient_id.as_str()).collect();
        let stats = LabelStats::compute(&subset, &data.view, &data.tree)?;
        let mut row = vec![split.as_str().to_string(), subset.len().to_string(), patients.len().to_string()];
        row.extend(stats.counts.iter().map(usize::to_string));
        w.write_record(&row)?;
    }
    write_atomic(&layout.split_summary(), &w.into_inner().map_err(|e| Error::invalid(e.to_string()))?)?;
    Ok(data)
}

fn load_images(layout: &RunLayout, records: &[&SampleRecord]) -> Result<(Vec<String>, Vec<ImageTensor>)> {
    let ids: Vec<String> = records.iter().map(|r| r.sample_id()).collect();
    let images = ids
        .iter()
        .map(|id| load_gray(&layout.preprocessed_image(id)))
        .collect::<Result<Vec<_>>>()?;
    Ok((ids, images))
}

fn labeled(layout: &RunLayout, data: &SplitData, split: Split) -> Result<(Vec<String>, LabeledImages)> {
    let records = data.subset(split);
    let (ids, images) = load_images(layout, &records)?;
    let set = LabeledImages::new(data.labels().to_vec(), images, data.targets(&records)?)?;
    Ok((ids, set))
}

pub fn stage_train(cfg: &RunConfig, layout: &RunLayout, threads: Option<usize>) -> Result<Vec<Checkpoint>> {
    let data = SplitData::load(cfg, layout)?;
    let (_, train) = labeled(layout, &data, Split::Train)?;
    let (_, val) = labeled(layout, &data, Split::Val)?;
    let train_records: Vec<SampleRecord> = data.subset(Split::Train).into_iter().cloned().collect();
    let loss = label_weights(&LabelStats::compute(&train_records, &data.view, &data.tree)?)?;
    let seed = cfg.seed()?;
    let config = crate::trainer::TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let checkpoints = train_ensemble(&EnsembleSpec::standard(seed), &config, &train, &val, &loss, threads)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["member", "epoch", "train_loss", "val_loss"])?;
    for ck in &checkpoints {
        ck.save(&layout.checkpoint(&ck.member.name()))?;
        for h in &ck.history {
            w.write_record([ck.member.name(), h.epoch.to_string(), h.train_loss.to_string(), h.val_loss.to_string()])?;
        }
    }
    write_atomic(&layout.history(), &w.into_inner().map_err(|e| Error::invalid(e.to_string()))?)?;
    Ok(checkpoints)
}

/// Member names do not depend on the seed.
fn member_names() -> Vec<String> {
    EnsembleSpec::standard(0).members.iter().map(|m| m.name()).collect()
}

pub fn load_checkpoints(layout: &RunLayout) -> Result<Vec<Checkpoint>> {
    member_names()
        .iter()
        .map(|m| Checkpoint::load(&layout.checkpoint(m)))
        .collect()
}

/// Per-member probabilities on the test subset.
pub fn stage_predict(cfg: &RunConfig, layout: &RunLayout) -> Result<Vec<PredictionMatrix>> {
    let data = SplitData::load(cfg, layout)?;
    let checkpoints = load_checkpoints(layout)?;
    let (ids, images) = load_images(layout, &data.subset(Split::Test))?;
    let mut out = Vec::with_capacity(checkpoints.len());
    for ck in &checkpoints {
        if ck.labels != data.labels() {
            return Err(Error::invalid(format!("{} was trained on different labels", ck.member.name())));
        }
        let m = predict(ck, &images, ids.clone())?;
        m.save(&layout.member_predictions(&m.member))?;
        out.push(m);
    }
    Ok(out)
}

pub fn load_member_predictions(layout: &RunLayout) -> Result<Vec<PredictionMatrix>> {
    member_names()
        .into_iter()
        .map(|m| PredictionMatrix::load(&layout.member_predictions(&m), m))
        .collect()
}

pub fn stage_ensemble(cfg: &RunConfig, layout: &RunLayout) -> Result<Vec<EnsembleOutput>> {
    let members = load_member_predictions(layout)?;
    let mut outs = Vec::new();
    for method in Method::ALL {
        let out = aggregate(method, &members, cfg.threshold)?;
        write_atomic(&layout.ensemble_output(method), &out.to_csv()?)?;
        outs.push(out);
    }
    let ctp = &outs[0];
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample_id".to_string()];
    header.extend(ctp.labels.iter().cloned());
    w.write_record(&header)?;
    for (id, row) in ctp.sample_ids.iter().zip(&ctp.agreement) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(u32::to_string));
        w.write_record(&rec)?;
    }
    write_atomic(&layout.agreement(), &w.into_inner().map_err(|e| Error::invalid(e.to_string()))?)?;
    Ok(outs)
}

/// Test truth plus member predictions checked against it.
fn aligned_predictions(layout: &RunLayout, data: &SplitData) -> Result<(Vec<Vec<u8>>, Vec<PredictionMatrix>)> {
    let test = data.subset(Split::Test);
    let ids: Vec<String> = test.iter().map(|r| r.sample_id()).collect();
    let truth = data.targets(&test)?;
    let members = load_member_predictions(layout)?;
    for m in &members {
        if m.sample_ids != ids || m.labels != data.labels() {
            return Err(Error::invalid(format!(
                "{} does not match the test subset of {}",
                layout.member_predictions(&m.member).display(),
                layout.split_manifest().display()
            )));
        }
    }
    Ok((truth, members))
}

/// Per-label AUC and F1 for every member and every aggregation rule.
pub fn stage_evaluate(cfg: &RunConfig, layout: &RunLayout) -> Result<ResultTable> {
    let data = SplitData::load(cfg, layout)?;
    let (truth, members) = aligned_predictions(layout, &data)?;
    let mut systems: Vec<SystemScores> = members
        .iter()
        .map(|m| SystemScores {
            name: m.member.clone(),
            scores: m.probs.clone(),
            binary: false,
        })
        .collect();
    for method in Method::ALL {
        let out = aggregate(method, &members, cfg.threshold)?;
        systems.push(SystemScores {
            name: method.as_str().to_string(),
            scores: out.scores,
            binary: method.is_binary(),
        });
    }
    let mut table = build_result_table(&truth, data.labels(), &systems, cfg.threshold, F1Kind::Macro)?;
    table.view = Some(cfg.view.to_string());
    table.save(&layout.results_table(), &layout.results_summary())?;
    Ok(table)
}

/// Heat-map reports for the first `explain.samples` test images.
pub fn stage_explain(cfg: &RunConfig, layout: &RunLayout) -> Result<Vec<HeatmapReport>> {
    let data = SplitData::load(cfg, layout)?;
    let (_, members) = aligned_predictions(layout, &data)?;
    let checkpoints = load_checkpoints(layout)?;
    let ctp = aggregate(Method::Ctp, &members, cfg.threshold)?;
    let test = data.subset(Split::Test);
    let n = cfg.explain_samples.min(test.len());
    let (ids, images) = load_images(layout, &test[..n])?;
    let mut reports = Vec::with_capacity(n);
    for (i, (id, image)) in ids.iter().zip(&images).enumerate() {
        let view = SampleView {
            sample_id: id,
            image,
            probabilities: &ctp.scores[i],
            agreement: &ctp.agreement[i],
        };
        reports.push(report(&view, &checkpoints, cfg.threshold, &cfg.overlay, &layout.explain_dir())?);
    }
    Ok(reports)
}

/// One scored true positive.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizationCase {
    pub sample_id: String,
    pub label: String,
    pub centroid_x: f64,
    pub centroid_y: f64,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub cases: Vec<LocalizationCase>,
}

impl Localization {
    pub fn hits(&self) -> usize {
        self.cases.iter().filter(|c| c.hit).count()
    }

    pub fn rate(&self) -> f64 {
        if self.cases.is_empty() {
            0.0
        } else {
            self.hits() as f64 / self.cases.len() as f64
        }
    }
}

/// For each test true positive of the mean-probability ensemble, checks that
/// the ensemble heat centroid falls inside a ground-truth box of that label,
/// mapped into the model-input frame and grown by `LOCALIZATION_DILATION`.
/// `None` when the corpus carries no boxes.
pub fn stage_localization(cfg: &RunConfig, layout: &RunLayout) -> Result<Option<Localization>> {
    let src = DataSource::resolve(cfg, layout)?;
    let Some(boxes_path) = src.boxes.as_ref() else {
        return Ok(None);
    };
    let boxes = load_boxes(boxes_path)?;
    let data = SplitData::load(cfg, layout)?;
    let (truth, members) = aligned_predictions(layout, &data)?;
    let checkpoints = load_checkpoints(layout)?;
    let crops = load_crops(layout)?;
    let ctp = aggregate(Method::Ctp, &members, cfg.threshold)?;
    let side = cfg.train.side;
    let grow = LOCALIZATION_DILATION * side as f64;
    let test = data.subset(Split::Test);
    let mut cases = Vec::new();
    for (i, r) in test.iter().enumerate() {
        let id = r.sample_id();
        for c in 0..data.labels().len() {
            if truth[i][c] == 0 || ctp.scores[i][c] < cfg.threshold {
                continue;
            }
            let crop = crops
                .get(&id)
                .ok_or_else(|| Error::invalid(format!("{id} is missing from {}", layout.crops().display())))?;
            let image = load_gray(&layout.preprocessed_image(&id))?;
            let maps = checkpoints
                .iter()
                .map(|ck| grad_cam(ck, &image, c))
                .collect::<Result<Vec<_>>>()?;
            let heat = ensemble_heatmap(&maps)?;
            let (cx, cy) = heat_centroid(&heat.values).unwrap_or((f64::NAN, f64::NAN));
            let bx = crop.crop_box();
            let hit = boxes
                .iter()
                .filter(|b| b.image_path == r.image_path && data.view.index_of(&b.label) == Some(c))
                .any(|b| {
                    let (x0, y0) = map_point(b.x0 as f64, b.y0 as f64, crop.src_width, crop.src_height, &bx, side);
                    let (x1, y1) =
                        map_point(b.x1 as f64 + 1.0, b.y1 as f64 + 1.0, crop.src_width, crop.src_height, &bx, side);
                    cx >= x0 - grow && cx <= x1 + grow && cy >= y0 - grow && cy <= y1 + grow
                });
            cases.push(LocalizationCase {
                sample_id: id.clone(),
                label: data.labels()[c].clone(),
                centroid_x: cx,
                centroid_y: cy,
                hit,
            });
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for case in &cases {
        w.serialize(case)?;
    }
    write_atomic(&layout.localization(), &w.into_inner().map_err(|e| Error::invalid(e.to_string()))?)?;
    Ok(Some(Localization { cases }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatVersions {
    pub checkpoint: u16,
    pub manifest_columns: Vec<String>,
    pub boxes_columns: Vec<String>,
}

/// Everything needed to repeat a stage: the canonical config, its hash, the
/// seed, input digests and file-format versions. Holds no timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config_sha256: String,
    pub config: Vec<String>,
    pub inputs: BTreeMap<String, String>,
    pub formats: FormatVersions,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_record(cfg: &RunConfig, layout: &RunLayout, stage: &str) -> Result<RunRecord> {
    let text = cfg.to_text();
    let mut inputs = BTreeMap::new();
    if let Ok(src) = DataSource::resolve(cfg, layout) {
        for (name, path) in [("manifest", &src.manifest), ("taxonomy", &src.taxonomy)] {
            if path.exists() {
                inputs.insert(name.to_string(), sha256_hex(&read_bytes(path)?));
            }
        }
    }
    let record = RunRecord {
        stage: stage.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config_sha256: sha256_hex(text.as_bytes()),
        config: text.lines().map(str::to_string).collect(),
        inputs,
        formats: FormatVersions {
            checkpoint: CHECKPOINT_VERSION,
            manifest_columns: MANIFEST_HEADER.iter().map(|s| s.to_string()).collect(),
            boxes_columns: BOXES_HEADER.iter().map(|s| s.to_string()).collect(),
        },
    };
    let mut json = serde_json::to_vec_pretty(&record)?;
    json.push(b'\n');
    write_atomic(&layout.record(stage), &json)?;
    Ok(record)
}

/// Outcome of a full run.
#[derive(Debug, Clone)]
pub struct PipelineSummary {
    pub table: ResultTable,
    pub localization: Option<Localization>,
    pub checkpoints: Vec<Checkpoint>,
}

/// synth (when configured) → preprocess → split → train → predict →
/// ensemble → evaluate → explain, then the localization score when boxes exist.
pub fn run_pipeline(cfg: &RunConfig, threads: Option<usize>) -> Result<PipelineSummary> {
    cfg.validate()?;
    let layout = RunLayout::new(cfg.output_dir()?);
    if cfg.manifest.is_none() && cfg.synth.is_some() {
        log::info!("synth");
        stage_synth(cfg, &layout)?;
    }
    log::info!("preprocess");
    stage_preprocess(cfg, &layout, threads)?;
    log::info!("split");
    stage_split(cfg, &layout)?;
    log::info!("train");
    let checkpoints = stage_train(cfg, &layout, threads)?;
    log::info!("predict");
    stage_predict(cfg, &layout)?;
    stage_ensemble(cfg, &layout)?;
    log::info!("evaluate");
    let table = stage_evaluate(cfg, &layout)?;
    log::info!("explain");
    stage_explain(cfg, &layout)?;
    let localization = stage_localization(cfg, &layout)?;
    write_record(cfg, &layout, "pipeline")?;
    Ok(PipelineSummary {
        table,
        localization,
        checkpoints,
    })
}

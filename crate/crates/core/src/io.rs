//! File formats.
//!
//! * Trajectories: CSV with header `trajectory_id,frame_index,x,y`. Rows of
//!   one id may be interleaved with other ids; `frame_index` must strictly
//!   increase within an id and only orders the points (gaps are ignored).
//!   Trajectories keep the order in which their ids first appear.
//! * Ground truth: CSV `trajectory_id,point_index`, one row per annotated
//!   split point; indices are 0-based and strictly interior.
//! * Segmentations: CSV `trajectory_id,point_index,label,split`, one row per
//!   point, `split` is 0 or 1.
//! * Models: JSON document with a mandatory `format_version`.
//! * Traces: CSV `variant,iteration,log_likelihood`.
//!
//! Floats are written in shortest round-trip form, so write-then-read is
//! bit-exact.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Display;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analytics::Edge;
use crate::em::{EStepVariant, EmConfig};
use crate::error::{Error, Result};
use crate::hmm::{HmmModel, SegmentConfig};
use crate::linalg::Vec2;
use crate::metrics::{CvReport, MeanStd};
use crate::rdp::EpsilonScore;
use crate::types::{MixtureModel, Segmentation, Trajectory};

pub const FORMAT_VERSION: u32 = 1;

pub fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn group_order<T>(rows: impl IntoIterator<Item = (String, T)>) -> Vec<(String, Vec<T>)> {
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut groups: Vec<(String, Vec<T>)> = Vec::new();
    for (id, row) in rows {
        match index.get(&id) {
            Some(&i) => groups[i].1.push(row),
            None => {
                index.insert(id.clone(), groups.len());
                groups.push((id, vec![row]));
            }
        }
    }
    groups
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryRow {
    trajectory_id: String,
    frame_index: i64,
    x: f64,
    y: f64,
}

pub fn read_trajectories<R: Read>(reader: R) -> Result<Vec<Trajectory>> {
    let mut rows = Vec::new();
    for row in csv::Reader::from_reader(reader).deserialize() {
        let r: TrajectoryRow = row?;
        rows.push((r.trajectory_id, (r.frame_index, Vec2::new(r.x, r.y))));
    }
    if rows.is_empty() {
        return Err(Error::EmptyCorpus("trajectory file has no rows".into()));
    }
    group_order(rows)
        .into_iter()
        .map(|(id, pts)| {
            if let Some(w) = pts.windows(2).find(|w| w[1].0 <= w[0].0) {
                return Err(Error::InvalidTrajectory {
                    id,
                    reason: format!("frame_index {} does not follow {}", w[1].0, w[0].0),
                });
            }
            Trajectory::new(id, pts.into_iter().map(|(_, p)| p).collect())
        })
        .collect()
}

/// Writes `frame_index` as the point index.
pub fn write_trajectories<W: Write>(writer: W, trajs: &[Trajectory]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for t in trajs {
        for (i, p) in t.points().iter().enumerate() {
            w.serialize(TrajectoryRow {
                trajectory_id: t.id().to_string(),
                frame_index: i as i64,
                x: p.x,
                y: p.y,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    read_trajectories(open(path)?)
}

pub fn save_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    write_trajectories(create(path)?, trajs)
}

#[derive(Debug, Serialize, Deserialize)]
struct GroundTruthRow {
    trajectory_id: String,
    point_index: usize,
}

/// Split masks aligned with `trajs`; trajectories without rows get all-false masks.
pub fn read_ground_truth<R: Read>(reader: R, trajs: &[Trajectory]) -> Result<Vec<Vec<bool>>> {
    let lens: HashMap<&str, usize> = trajs.iter().map(|t| (t.id(), t.len())).collect();
    let mut marks: HashMap<String, BTreeSet<usize>> = HashMap::new();
    for row in csv::Reader::from_reader(reader).deserialize() {
        let r: GroundTruthRow = row?;
        let len = *lens.get(r.trajectory_id.as_str()).ok_or_else(|| {
            Error::Format(format!("ground truth names unknown trajectory `{}`", r.trajectory_id))
        })?;
        if r.point_index == 0 || r.point_index + 1 >= len {
            return Err(Error::InvalidTrajectory {
                id: r.trajectory_id,
                reason: format!("ground-truth index {} is not interior to {len} points", r.point_index),
            });
        }
        marks.entry(r.trajectory_id).or_default().insert(r.point_index);
    }
    Ok(trajs
        .iter()
        .map(|t| {
            let mut m = vec![false; t.len()];
            for &i in marks.get(t.id()).into_iter().flatten() {
                m[i] = true;
            }
            m
        })
        .collect())
}

pub fn write_ground_truth<W: Write>(writer: W, trajs: &[Trajectory], masks: &[Vec<bool>]) -> Result<()> {
    if trajs.len() != masks.len() {
        return Err(Error::Format(format!("{} masks for {} trajectories", masks.len(), trajs.len())));
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(["trajectory_id", "point_index"])?;
    for (t, m) in trajs.iter().zip(masks) {
        for i in m.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i) {
            w.serialize(GroundTruthRow {
                trajectory_id: t.id().to_string(),
                point_index: i,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_ground_truth(path: &Path, trajs: &[Trajectory]) -> Result<Vec<Vec<bool>>> {
    read_ground_truth(open(path)?, trajs)
}

#[derive(Debug, Serialize, Deserialize)]
struct SegmentationRow {
    trajectory_id: String,
    point_index: usize,
    label: usize,
    split: u8,
}

pub fn write_segmentations<W: Write>(writer: W, segs: &[Segmentation]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for s in segs {
        for (i, (&label, &split)) in s.labels.iter().zip(&s.split_mask).enumerate() {
            w.serialize(SegmentationRow {
                trajectory_id: s.trajectory_id.clone(),
                point_index: i,
                label,
                split: split as u8,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rows of each id must list point indices `0, 1, ...` in order, and the
/// split column must agree with the label changes.
pub fn read_segmentations<R: Read>(reader: R) -> Result<Vec<Segmentation>> {
    let mut rows = Vec::new();
    for row in csv::Reader::from_reader(reader).deserialize() {
        let r: SegmentationRow = row?;
        rows.push((r.trajectory_id.clone(), r));
    }
    group_order(rows)
        .into_iter()
        .map(|(id, rows)| {
            if rows.iter().enumerate().any(|(i, r)| r.point_index != i) {
                return Err(Error::Format(format!("segmentation `{id}`: point indices must run 0, 1, ...")));
            }
            let seg = Segmentation::from_labels(id.clone(), rows.iter().map(|r| r.label).collect());
            if rows.iter().zip(&seg.split_mask).any(|(r, &s)| r.split > 1 || (r.split == 1) != s) {
                return Err(Error::Format(format!("segmentation `{id}`: split column disagrees with labels")));
            }
            Ok(seg)
        })
        .collect()
}

pub fn load_segmentations(path: &Path) -> Result<Vec<Segmentation>> {
    read_segmentations(open(path)?)
}

pub fn save_segmentations(path: &Path, segs: &[Segmentation]) -> Result<()> {
    write_segmentations(create(path)?, segs)
}

/// A fitted pipeline. Agent indices in every field are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub index_base: u32,
    pub em_config: EmConfig,
    pub mixture: MixtureModel,
    #[serde(default)]
    pub hmm: Option<HmmModel>,
    #[serde(default)]
    pub segment: Option<SegmentConfig>,
}

impl ModelFile {
    pub fn new(em_config: EmConfig, mixture: MixtureModel) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            index_base: 0,
            em_config,
            mixture,
            hmm: None,
            segment: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.index_base != 0 {
            return Err(Error::Format(format!("unsupported index_base {}", self.index_base)));
        }
        self.mixture.clone().validated()?;
        if self.mixture.num_agents() != self.em_config.num_agents {
            return Err(Error::InvalidModel(format!(
                "{} agents but em_config.num_agents = {}",
                self.mixture.num_agents(),
                self.em_config.num_agents
            )));
        }
        if let Some(h) = &self.hmm {
            h.validate()?;
            if h.num_states() != self.mixture.num_agents() {
                return Err(Error::InvalidModel(format!(
                    "hmm has {} states for {} agents",
                    h.num_states(),
                    self.mixture.num_agents()
                )));
            }
        }
        Ok(())
    }
}

pub fn write_model<W: Write>(writer: W, model: &ModelFile) -> Result<()> {
    write_json(writer, model)
}

pub fn read_model<R: Read>(reader: R) -> Result<ModelFile> {
    let m: ModelFile = serde_json::from_reader(reader)?;
    m.validate()?;
    Ok(m)
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    read_model(open(path)?)
}

pub fn save_model(path: &Path, model: &ModelFile) -> Result<()> {
    write_model(create(path)?, model)
}

/// Agents for the sampler: either a full model file or a bare mixture.
pub fn load_mixture(path: &Path) -> Result<MixtureModel> {
    let value: serde_json::Value = serde_json::from_reader(open(path)?)?;
    let mixture = if value.get("format_version").is_some() {
        let m: ModelFile = serde_json::from_value(value)?;
        m.validate()?;
        m.mixture
    } else {
        serde_json::from_value::<MixtureModel>(value)?
    };
    mixture.validated()
}

pub fn write_trace<W: Write>(writer: W, variant: EStepVariant, trace: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["variant", "iteration", "log_likelihood"])?;
    for (i, ll) in trace.iter().enumerate() {
        w.serialize((variant.name(), i, ll))?;
    }
    w.flush()?;
    Ok(())
}

/// Square or rectangular table with a `row,0,1,...` header.
pub fn write_matrix<W: Write, T: Display>(writer: W, rows: &[Vec<T>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let cols = rows.first().map_or(0, |r| r.len());
    let mut header = vec!["row".to_string()];
    header.extend((0..cols).map(|c| c.to_string()));
    w.write_record(&header)?;
    for (i, row) in rows.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a table written by [`write_matrix`]; the first column is the row index.
pub fn read_matrix<R: Read>(reader: R) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (i, rec) in csv::Reader::from_reader(reader).records().enumerate() {
        let rec = rec?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Format(format!("matrix row {i}: `{s}` is not a number")))
        };
        if rec.get(0).map(parse).transpose()? != Some(i as f64) {
            return Err(Error::Format(format!("matrix rows must be numbered 0, 1, ...; row {i}")));
        }
        rows.push(rec.iter().skip(1).map(parse).collect::<Result<Vec<f64>>>()?);
    }
    Ok(rows)
}

pub fn write_edges<W: Write>(writer: W, edges: &[Edge]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["from", "to", "weight"])?;
    for e in edges {
        w.serialize((e.from, e.to, e.weight))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_epsilon_scores<W: Write>(writer: W, scores: &[EpsilonScore]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for s in scores {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<W: Write, T: Serialize>(mut writer: W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut writer, value)?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}

/// One line of the cross-validation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    /// Agent count or chosen epsilon.
    pub setting: String,
    pub positional: MeanStd,
    pub step: MeanStd,
}

impl ReportRow {
    pub fn from_cv(report: &CvReport, setting: impl Into<String>) -> Self {
        Self {
            method: report.method.clone(),
            setting: setting.into(),
            positional: report.positional.clone(),
            step: report.step.clone(),
        }
    }
}

/// Fixed-width text table: method, setting, positional and step error as
/// mean ± standard deviation over folds.
pub fn render_report(rows: &[ReportRow]) -> String {
    let cells: Vec<[String; 4]> = rows
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                r.setting.clone(),
                format!("{:.2} ± {:.2}", r.positional.mean, r.positional.std),
                format!("{:.2} ± {:.2}", r.step.mean, r.step.std),
            ]
        })
        .collect();
    let header = ["method", "setting", "positional error", "step error"].map(String::from);
    let width = |k: usize| {
        cells
            .iter()
            .chain(std::iter::once(&header))
            .map(|c| c[k].chars().count())
            .max()
            .unwrap_or(0)
    };
    let widths: Vec<usize> = (0..4).map(width).collect();
    let line = |c: &[String; 4]| {
        let parts: Vec<String> = c
            .iter()
            .zip(&widths)
            .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(&header);
    for c in &cells {
        out += &line(c);
    }
    out
}

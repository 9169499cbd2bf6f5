//! Benchmark harness: crop, complete, score, and write one CSV row per run.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::crop::{crop_cuboid, crop_plane_in, CropKind};
use super::metrics::{grid_chamfer_x1000, iou};
use super::shapes::{generate_shape, ShapeCategory};
use crate::config::PipelineConfig;
use crate::error::{invalid, Result};
use crate::pipeline::{coarse_only, complete, Inputs};
use crate::retrieval::Embedder;
use crate::voxelgrid::VoxelGrid;

pub const CSV_HEADER: &str = "shape_id,category,crop_kind,crop_ratio,seed,cd_l2_x1000,iou,runtime_s,status";

/// Accepted distance of the realized crop ratio from the nominal one.
pub const DEFAULT_HALF_WIDTH: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct BenchmarkShape {
    pub id: String,
    pub category: String,
    pub grid: VoxelGrid,
}

/// `n` procedural shapes cycling through the categories; shape `i` uses
/// seed `i / 5`.
pub fn procedural_shapes(n: usize, size: usize) -> Result<Vec<BenchmarkShape>> {
    (0..n)
        .map(|i| {
            let category = ShapeCategory::ALL[i % ShapeCategory::ALL.len()];
            let seed = (i / ShapeCategory::ALL.len()) as u64;
            Ok(BenchmarkShape {
                id: format!("{category}_{seed:03}"),
                category: category.name().to_string(),
                grid: generate_shape(category, size, seed)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropSweep {
    pub kind: CropKind,
    /// Nominal deleted fractions. 0 runs the uncropped shape.
    pub ratios: Vec<f64>,
    pub half_width: f64,
    pub seeds: Vec<u64>,
}

impl CropSweep {
    pub fn new(kind: CropKind, ratios: Vec<f64>, seeds: Vec<u64>) -> Self {
        Self {
            kind,
            ratios,
            half_width: DEFAULT_HALF_WIDTH,
            seeds,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() || self.seeds.is_empty() {
            return Err(invalid("crop sweep needs at least one ratio and one seed"));
        }
        if !(self.half_width >= 0.0) {
            return Err(invalid("crop half width must be non-negative"));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(invalid(format!("crop ratio {r} outside [0, 1)")));
        }
        Ok(())
    }

    fn range(&self, ratio: f64) -> (f64, f64) {
        ((ratio - self.half_width).max(1e-9), (ratio + self.half_width).min(1.0 - 1e-9))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BenchOptions {
    /// Skip the full pipeline and emit only coarse-only baseline rows.
    pub coarse_only: bool,
    /// Fill `runtime_s`. Off by default so reports are reproducible.
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub shape_id: String,
    pub category: String,
    pub crop_kind: CropKind,
    pub crop_ratio: f64,
    pub seed: u64,
    pub cd_l2_x1000: Option<f64>,
    pub iou: Option<f64>,
    pub runtime_s: Option<f64>,
    /// `ok`, `baseline`, or `error:<tag>`.
    pub status: String,
    pub realized_ratio: Option<f64>,
    /// Mean jump across blend-block faces; pipeline rows only.
    pub discontinuity: Option<f64>,
    /// Coarse-only row, also when it failed.
    pub baseline: bool,
}

impl BenchRow {
    pub fn is_error(&self) -> bool {
        self.status.starts_with("error:")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub category: String,
    pub crop_ratio: f64,
    pub baseline: bool,
    pub count: usize,
    pub errors: usize,
    pub mean_cd: f64,
    pub median_cd: f64,
    pub mean_iou: f64,
    pub median_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<BenchRow>,
    pub aggregates: Vec<Aggregate>,
}

struct Job<'a> {
    shape: &'a BenchmarkShape,
    ratio: f64,
    seed: u64,
    baseline: bool,
}

/// Runs every shape × ratio × seed. Each crop is scored by the full pipeline
/// and by the coarse-only baseline; failures become error rows.
pub fn run_benchmark(
    shapes: &[BenchmarkShape],
    config: &PipelineConfig,
    sweep: &CropSweep,
    embedders: Option<(&Embedder, &Embedder)>,
    options: BenchOptions,
) -> Result<EvalReport> {
    if shapes.is_empty() {
        return Err(invalid("benchmark needs at least one shape"));
    }
    config.validate()?;
    sweep.validate()?;
    let mut jobs = Vec::new();
    for shape in shapes {
        for &ratio in &sweep.ratios {
            for &seed in &sweep.seeds {
                if !options.coarse_only {
                    jobs.push(Job { shape, ratio, seed, baseline: false });
                }
                jobs.push(Job { shape, ratio, seed, baseline: true });
            }
        }
    }
    let rows: Vec<BenchRow> = jobs.par_iter().map(|j| run_row(j, config, sweep, embedders, options)).collect();
    let aggregates = aggregate(&rows);
    Ok(EvalReport { rows, aggregates })
}

fn run_row(
    job: &Job<'_>,
    config: &PipelineConfig,
    sweep: &CropSweep,
    embedders: Option<(&Embedder, &Embedder)>,
    options: BenchOptions,
) -> BenchRow {
    let start = Instant::now();
    let mut row = BenchRow {
        shape_id: job.shape.id.clone(),
        category: job.shape.category.clone(),
        crop_kind: sweep.kind,
        crop_ratio: job.ratio,
        seed: job.seed,
        cd_l2_x1000: None,
        iou: None,
        runtime_s: None,
        status: String::new(),
        realized_ratio: None,
        discontinuity: None,
        baseline: job.baseline,
    };
    let result = (|| -> Result<()> {
        let gt = &job.shape.grid;
        let partial = if job.ratio == 0.0 {
            row.realized_ratio = Some(0.0);
            gt.clone()
        } else {
            let range = sweep.range(job.ratio);
            let (partial, spec) = match sweep.kind {
                CropKind::Cuboid => crop_cuboid(gt, range, job.seed)?,
                CropKind::Plane => crop_plane_in(gt, Some(range), job.seed)?,
            };
            row.realized_ratio = spec.realized_ratio;
            partial
        };
        let config = PipelineConfig {
            seed: config.seed ^ job.seed,
            ..config.clone()
        };
        let output = if job.baseline {
            coarse_only(&partial, &config, Some(gt))?
        } else {
            let inputs = Inputs {
                gt: Some(gt),
                embedders,
                keep_states: false,
            };
            let done = complete(&partial, &config, inputs)?;
            row.discontinuity = Some(done.diagnostics.mean_discontinuity);
            done.binary
        };
        row.cd_l2_x1000 = Some(grid_chamfer_x1000(&output, gt, job.seed)?);
        row.iou = Some(iou(&output, gt, 0.5)?);
        Ok(())
    })();
    row.status = match result {
        Ok(()) if job.baseline => "baseline".into(),
        Ok(()) => "ok".into(),
        Err(e) => {
            log::warn!("{} ratio {} seed {}: {e}", row.shape_id, row.crop_ratio, row.seed);
            row.cd_l2_x1000 = None;
            row.iou = None;
            format!("error:{}", e.tag())
        }
    };
    if options.timing {
        row.runtime_s = Some(start.elapsed().as_secs_f64());
    }
    row
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Mean and median per category and ratio, plus an `all` category, kept
/// apart for pipeline and baseline rows. Error rows are counted, not scored.
pub fn aggregate(rows: &[BenchRow]) -> Vec<Aggregate> {
    // ratio keyed by its bits; ratios come from the same sweep list
    let mut groups: BTreeMap<(String, u64, bool), Vec<&BenchRow>> = BTreeMap::new();
    for r in rows {
        let baseline = r.baseline;
        for cat in [r.category.clone(), "all".to_string()] {
            groups.entry((cat, r.crop_ratio.to_bits(), baseline)).or_default().push(r);
        }
    }
    let mut out: Vec<Aggregate> = groups
        .into_iter()
        .map(|((category, ratio, baseline), rs)| {
            let ok: Vec<&&BenchRow> = rs.iter().filter(|r| !r.is_error()).collect();
            let cd: Vec<f64> = ok.iter().filter_map(|r| r.cd_l2_x1000).collect();
            let io: Vec<f64> = ok.iter().filter_map(|r| r.iou).collect();
            Aggregate {
                category,
                crop_ratio: f64::from_bits(ratio),
                baseline,
                count: ok.len(),
                errors: rs.len() - ok.len(),
                mean_cd: mean(&cd),
                median_cd: median(&cd),
                mean_iou: mean(&io),
                median_iou: median(&io),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        (a.category == "all", &a.category, a.baseline)
            .cmp(&(b.category == "all", &b.category, b.baseline))
            .then(a.crop_ratio.total_cmp(&b.crop_ratio))
    });
    out
}

/// `x` with 9 significant digits, in plain decimal where that stays short.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..=9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.8e}")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(format_sig9).unwrap_or_default()
}

/// Writes the report rows as CSV.
pub fn write_csv(rows: &[BenchRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| crate::Error::Io(e.into());
    w.write_record(CSV_HEADER.split(',')).map_err(io)?;
    for r in rows {
        w.write_record([
            r.shape_id.clone(),
            r.category.clone(),
            r.crop_kind.name().to_string(),
            format_sig9(r.crop_ratio),
            r.seed.to_string(),
            opt(r.cd_l2_x1000),
            opt(r.iou),
            opt(r.runtime_s),
            r.status.clone(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text table with one column per crop ratio: mean CD for the
/// pipeline and the baseline, per category.
pub fn format_table(report: &EvalReport) -> String {
    let mut ratios: Vec<f64> = report.aggregates.iter().map(|a| a.crop_ratio).collect();
    ratios.sort_by(f64::total_cmp);
    ratios.dedup();
    let mut s = String::from("mean CD x1000 (unit-cube frame: grid coordinates / size)\n");
    s.push_str(&format!("{:<10} {:<9}", "category", "method"));
    for r in &ratios {
        s.push_str(&format!(" {:>10}", format!("{:.0}%", r * 100.0)));
    }
    s.push('\n');
    let mut keys: Vec<(String, bool)> = Vec::new();
    for a in &report.aggregates {
        let k = (a.category.clone(), a.baseline);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    for (cat, baseline) in keys {
        s.push_str(&format!("{:<10} {:<9}", cat, if baseline { "coarse" } else { "pipeline" }));
        for r in &ratios {
            let cell = report
                .aggregates
                .iter()
                .find(|a| a.category == cat && a.baseline == baseline && a.crop_ratio == *r)
                .map(|a| format!("{:.4}", a.mean_cd))
                .unwrap_or_else(|| "-".into());
            s.push_str(&format!(" {cell:>10}"));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coarse::CoarseProvider;
    use crate::config::Preset;

    fn row(status: &str, cat: &str, ratio: f64, cd: Option<f64>) -> BenchRow {
        BenchRow {
            shape_id: "s".into(),
            category: cat.into(),
            crop_kind: CropKind::Cuboid,
            crop_ratio: ratio,
            seed: 0,
            cd_l2_x1000: cd,
            iou: cd.map(|_| 0.5),
            runtime_s: None,
            status: status.into(),
            realized_ratio: None,
            discontinuity: None,
            baseline: status == "baseline",
        }
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.0), "1.00000000");
        assert_eq!(format_sig9(0.123456789123), "0.123456789");
        assert_eq!(format_sig9(12345.6789012), "12345.6789");
        assert_eq!(format_sig9(1.5e-9), "1.50000000e-9");
    }

    #[test]
    fn aggregates_split_baseline_and_skip_errors() {
        let rows = vec![
            row("ok", "chair", 0.1, Some(1.0)),
            row("ok", "chair", 0.1, Some(3.0)),
            row("ok", "chair", 0.1, Some(8.0)),
            row("error:generation", "chair", 0.1, None),
            row("baseline", "chair", 0.1, Some(4.0)),
        ];
        let agg = aggregate(&rows);
        let a = agg.iter().find(|a| a.category == "chair" && !a.baseline).unwrap();
        assert_eq!((a.count, a.errors, a.mean_cd, a.median_cd), (3, 1, 4.0, 3.0));
        let b = agg.iter().find(|a| a.category == "all" && a.baseline).unwrap();
        assert_eq!((b.count, b.mean_cd), (1, 4.0));
    }

    #[test]
    fn csv_layout() {
        let mut buf = Vec::new();
        write_csv(&[row("ok", "lamp", 0.2, Some(0.5)), row("error:io", "lamp", 0.2, None)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "s,lamp,cuboid,0.200000000,0,0.500000000,0.500000000,,ok");
        assert_eq!(lines[2], "s,lamp,cuboid,0.200000000,0,,,,error:io");
        let mut odd = row("ok", "lamp", 0.2, None);
        odd.shape_id = "a,b".into();
        let mut buf = Vec::new();
        write_csv(&[odd], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().lines().nth(1).unwrap().starts_with("\"a,b\",lamp"));
    }

    #[test]
    fn failures_become_rows_and_order_is_fixed() {
        let shapes = procedural_shapes(2, 32).unwrap();
        let config = PipelineConfig {
            coarse: CoarseProvider::GtDownsample,
            ..PipelineConfig::preset(Preset::Small)
        };
        // 0.95 cannot be cut by a box of at most half the grid per axis
        let sweep = CropSweep::new(CropKind::Cuboid, vec![0.95], vec![1]);
        let opts = BenchOptions {
            coarse_only: true,
            ..Default::default()
        };
        let report = run_benchmark(&shapes, &config, &sweep, None, opts).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.rows.iter().all(|r| r.status == "error:generation"));
        assert_eq!(report.rows[0].shape_id, shapes[0].id);
        assert!(run_benchmark(&[], &config, &sweep, None, opts).is_err());
    }

    #[test]
    fn zero_crop_baseline_and_pipeline() {
        let shapes = procedural_shapes(1, 32).unwrap();
        let config = PipelineConfig {
            coarse: CoarseProvider::GtDownsample,
            ..PipelineConfig::preset(Preset::Small)
        };
        let sweep = CropSweep::new(CropKind::Cuboid, vec![0.0], vec![0]);
        let report = run_benchmark(&shapes, &config, &sweep, None, BenchOptions::default()).unwrap();
        assert_eq!(report.rows.len(), 2);
        let (full, base) = (&report.rows[0], &report.rows[1]);
        assert_eq!((full.status.as_str(), base.status.as_str()), ("ok", "baseline"));
        assert!(full.cd_l2_x1000.unwrap() < 0.05, "{full:?}");
        assert!(full.cd_l2_x1000.unwrap() <= base.cd_l2_x1000.unwrap());
        assert!(full.runtime_s.is_none());
    }
}

//! Evaluation grids and the reports derived from stored predictions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Image};
use crate::error::{Error, Result};
use crate::inference::{
    accuracy, eval_batches, network_for, predict_top1, CalibrationCache, InferenceMode, DEFAULT_EVAL_BATCH,
};
use crate::model::Model;
use crate::scalar::Scalar;

/// Top-1 accuracy (percent) of each parameterization resolution (rows) at
/// each test resolution (columns), plus the accuracy of the configured
/// inference mode per column.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyMatrix {
    pub rows: Vec<u32>,
    pub cols: Vec<u32>,
    pub values: Vec<Vec<f64>>,
    pub selected: Vec<f64>,
}

impl AccuracyMatrix {
    pub fn get(&self, row: u32, col: u32) -> Option<f64> {
        let r = self.rows.iter().position(|&x| x == row)?;
        let c = self.cols.iter().position(|&x| x == col)?;
        Some(self.values[r][c])
    }

    pub fn selected_at(&self, col: u32) -> Option<f64> {
        let c = self.cols.iter().position(|&x| x == col)?;
        Some(self.selected[c])
    }

    /// `train\test` header, one line per row, two decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("train\\test");
        for c in &self.cols {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
        for (r, row) in self.rows.iter().zip(&self.values) {
            write!(out, "{r}").unwrap();
            for v in row {
                write!(out, ",{v:.2}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// `test,accuracy` for the per-column mode selection.
    pub fn selected_csv(&self) -> String {
        let mut out = String::from("test,accuracy\n");
        for (c, v) in self.cols.iter().zip(&self.selected) {
            writeln!(out, "{c},{v:.2}").unwrap();
        }
        out
    }

    /// Parse the output of [`to_csv`](Self::to_csv). The selection vector is left empty.
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |why: &str| Error::InvalidInput(format!("matrix CSV: {why}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty"))?;
        let mut cells = header.split(',');
        if cells.next() != Some("train\\test") {
            return Err(bad("first cell must be train\\test"));
        }
        let cols = cells
            .map(|c| c.trim().parse::<u32>().map_err(|_| bad("bad column label")))
            .collect::<Result<Vec<_>>>()?;
        let (mut rows, mut values) = (Vec::new(), Vec::new());
        for line in lines {
            let mut cells = line.split(',');
            rows.push(cells.next().unwrap_or("").trim().parse::<u32>().map_err(|_| bad("bad row label"))?);
            let row = cells
                .map(|c| c.trim().parse::<f64>().map_err(|_| bad("bad value")))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != cols.len() {
                return Err(bad("ragged row"));
            }
            values.push(row);
        }
        Ok(AccuracyMatrix {
            rows,
            cols,
            values,
            selected: Vec::new(),
        })
    }
}

/// Top-1 predictions behind one accuracy matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub mode: InferenceMode,
    pub rows: Vec<u32>,
    pub cols: Vec<u32>,
    pub labels: Vec<usize>,
    /// `(row, col)` to predictions with the row's literal parameterization.
    pub grid: BTreeMap<(u32, u32), Vec<usize>>,
    /// Column to predictions with the configured mode.
    pub selected: BTreeMap<u32, Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct StoreIndex {
    mode: InferenceMode,
    rows: Vec<u32>,
    cols: Vec<u32>,
    samples: usize,
}

const PRED_MAGIC: &[u8; 8] = b"SNPRED01";

fn write_preds(path: &Path, preds: &[usize]) -> Result<()> {
    let mut out = Vec::with_capacity(12 + 2 * preds.len());
    out.extend_from_slice(PRED_MAGIC);
    out.extend_from_slice(&(preds.len() as u32).to_le_bytes());
    for &p in preds {
        let v = u16::try_from(p).map_err(|_| Error::InvalidArgument(format!("class {p} exceeds u16")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_preds(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < 12 || &bytes[..8] != PRED_MAGIC {
        return Err(corrupt("not a prediction file"));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 12 + 2 * n {
        return Err(corrupt("length does not match header"));
    }
    Ok(bytes[12..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect())
}

impl PredictionSet {
    /// Write `index.json`, `labels.bin` and one binary file per evaluated cell.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let index = StoreIndex {
            mode: self.mode,
            rows: self.rows.clone(),
            cols: self.cols.clone(),
            samples: self.labels.len(),
        };
        let path = dir.join("index.json");
        fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
        write_preds(&dir.join("labels.bin"), &self.labels)?;
        for ((r, c), p) in &self.grid {
            write_preds(&dir.join(format!("pred_{r}_{c}.bin")), p)?;
        }
        for (c, p) in &self.selected {
            write_preds(&dir.join(format!("pred_selected_{c}.bin")), p)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: StoreIndex = serde_json::from_str(&text)?;
        let labels = read_preds(&dir.join("labels.bin"))?;
        let check = |p: Vec<usize>, name: &str| -> Result<Vec<usize>> {
            if p.len() != index.samples {
                return Err(Error::Corrupt {
                    path: dir.join(name),
                    reason: format!("{} predictions, expected {}", p.len(), index.samples),
                });
            }
            Ok(p)
        };
        let mut grid = BTreeMap::new();
        let mut selected = BTreeMap::new();
        for &c in &index.cols {
            for &r in &index.rows {
                let name = format!("pred_{r}_{c}.bin");
                grid.insert((r, c), check(read_preds(&dir.join(&name))?, &name)?);
            }
            let name = format!("pred_selected_{c}.bin");
            selected.insert(c, check(read_preds(&dir.join(&name))?, &name)?);
        }
        Ok(PredictionSet {
            mode: index.mode,
            rows: index.rows,
            cols: index.cols,
            labels: check(labels, "labels.bin")?,
            grid,
            selected,
        })
    }

    pub fn accuracy_matrix(&self) -> Result<AccuracyMatrix> {
        let mut values = Vec::with_capacity(self.rows.len());
        for &r in &self.rows {
            let row = self
                .cols
                .iter()
                .map(|&c| accuracy(&self.grid[&(r, c)], &self.labels))
                .collect::<Result<Vec<_>>>()?;
            values.push(row);
        }
        let selected = self
            .cols
            .iter()
            .map(|&c| accuracy(&self.selected[&c], &self.labels))
            .collect::<Result<Vec<_>>>()?;
        Ok(AccuracyMatrix {
            rows: self.rows.clone(),
            cols: self.cols.clone(),
            values,
            selected,
        })
    }

    /// Predictions of each parameterization at its own resolution, for the
    /// rows whose resolution was also a test column.
    pub fn diagonal(&self) -> Vec<(u32, &[usize])> {
        self.rows
            .iter()
            .filter(|r| self.cols.contains(r))
            .map(|&r| (r, self.grid[&(r, r)].as_slice()))
            .collect()
    }
}

/// Evaluate every `(parameterization, test resolution)` pair once, with
/// rows the model's training resolutions, plus the configured mode per column.
pub fn run_matrix_eval<T: Scalar>(
    model: &Model<T>,
    eval: &Dataset,
    test_resolutions: &[u32],
    mode: InferenceMode,
    calibration: Option<&[Image]>,
) -> Result<PredictionSet> {
    if eval.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    if test_resolutions.is_empty() {
        return Err(Error::InvalidArgument("no test resolutions".into()));
    }
    let rows = model.resolutions().to_vec();
    let nets = rows
        .iter()
        .map(|&r| model.parameterize(model.encode(r)?, r))
        .collect::<Result<Vec<_>>>()?;
    let mut cache = CalibrationCache::new();
    let mut grid = BTreeMap::new();
    let mut selected = BTreeMap::new();
    for &t in test_resolutions {
        let batches = eval_batches::<T>(&eval.images, t, DEFAULT_EVAL_BATCH);
        for (&r, net) in rows.iter().zip(&nets) {
            grid.insert((r, t), predict_top1(net, &batches)?);
        }
        let net = network_for(model, t, mode, calibration, &mut cache)?;
        selected.insert(t, predict_top1(&net, &batches)?);
    }
    Ok(PredictionSet {
        mode,
        rows,
        cols: test_resolutions.to_vec(),
        labels: eval.labels.clone(),
        grid,
        selected,
    })
}

/// Fraction of samples that `a` gets wrong and `b` gets right.
pub fn hit_miss(a: &[usize], b: &[usize], labels: &[usize]) -> Result<f64> {
    if a.len() != labels.len() || b.len() != labels.len() {
        return Err(Error::InvalidArgument("prediction and label lengths differ".into()));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let count = a
        .iter()
        .zip(b)
        .zip(labels)
        .filter(|((x, y), l)| x != l && y == l)
        .count();
    Ok(count as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HitMissMatrix {
    pub resolutions: Vec<u32>,
    /// `values[i][j]`: missed by `resolutions[i]`, hit by `resolutions[j]`.
    pub values: Vec<Vec<f64>>,
}

impl HitMissMatrix {
    pub fn build(preds: &[(u32, &[usize])], labels: &[usize]) -> Result<Self> {
        let mut values = vec![vec![0.0; preds.len()]; preds.len()];
        for (i, (_, a)) in preds.iter().enumerate() {
            for (j, (_, b)) in preds.iter().enumerate() {
                values[i][j] = hit_miss(a, b, labels)?;
            }
        }
        Ok(HitMissMatrix {
            resolutions: preds.iter().map(|p| p.0).collect(),
            values,
        })
    }

    /// Percentages with two decimals; first cell `miss\hit`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("miss\\hit");
        for r in &self.resolutions {
            write!(out, ",{r}").unwrap();
        }
        out.push('\n');
        for (r, row) in self.resolutions.iter().zip(&self.values) {
            write!(out, "{r}").unwrap();
            for v in row {
                write!(out, ",{:.2}", 100.0 * v).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// One plotted point of the envelope chart.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvelopePoint {
    pub model: String,
    pub param_resolution: u32,
    pub test_resolution: u32,
    pub accuracy: f64,
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

pub fn envelope_points(matrices: &[(&str, &AccuracyMatrix)]) -> Vec<EnvelopePoint> {
    let mut out = Vec::new();
    for (name, m) in matrices {
        for (r, row) in m.rows.iter().zip(&m.values) {
            for (c, v) in m.cols.iter().zip(row) {
                out.push(EnvelopePoint {
                    model: name.to_string(),
                    param_resolution: *r,
                    test_resolution: *c,
                    accuracy: round2(*v),
                });
            }
        }
    }
    out
}

pub fn envelope_csv(points: &[EnvelopePoint]) -> String {
    let mut out = String::from("model,param_resolution,test_resolution,accuracy\n");
    for p in points {
        writeln!(out, "{},{},{},{:.2}", p.model, p.param_resolution, p.test_resolution, p.accuracy).unwrap();
    }
    out
}

pub fn parse_envelope_csv(text: &str) -> Result<Vec<EnvelopePoint>> {
    let bad = |line: &str| Error::InvalidInput(format!("envelope CSV line {line:?}"));
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 4 {
                return Err(bad(line));
            }
            Ok(EnvelopePoint {
                model: cells[0].to_string(),
                param_resolution: cells[1].parse().map_err(|_| bad(line))?,
                test_resolution: cells[2].parse().map_err(|_| bad(line))?,
                accuracy: cells[3].parse().map_err(|_| bad(line))?,
            })
        })
        .collect()
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Accuracy against test resolution, one polyline per (model, parameterization),
/// x axis logarithmic. The SVG references no external resources.
pub fn envelope_svg(points: &[EnvelopePoint]) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (60.0, 190.0, 20.0, 50.0);
    let mut curves: Vec<((String, u32), Vec<(u32, f64)>)> = Vec::new();
    for p in points {
        let key = (p.model.clone(), p.param_resolution);
        match curves.iter_mut().find(|(k, _)| *k == key) {
            Some((_, pts)) => pts.push((p.test_resolution, p.accuracy)),
            None => curves.push((key, vec![(p.test_resolution, p.accuracy)])),
        }
    }
    let xs: Vec<f64> = points.iter().map(|p| p.test_resolution.max(1) as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.accuracy).collect();
    let (mut x0, mut x1) = xs.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    if points.is_empty() {
        (x0, x1) = (1.0, 2.0);
    }
    if x0 == x1 {
        (x0, x1) = (x0 / 1.25, x1 * 1.25);
    }
    let ymin = ys.iter().copied().fold(100.0, f64::min);
    let y0 = ((ymin / 10.0).floor() * 10.0).clamp(0.0, 90.0);
    let y1 = 100.0;
    let px = |x: f64| left + (x.ln() - x0.ln()) / (x1.ln() - x0.ln()) * (w - left - right);
    let py = |y: f64| top + (y1 - y) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    let (pl, pr, pt, pb) = (left, w - right, top, h - bottom);
    writeln!(s, r#"<rect x="{pl}" y="{pt}" width="{}" height="{}" fill="none" stroke="black"/>"#, pr - pl, pb - pt).unwrap();
    let mut ticks: Vec<u32> = points.iter().map(|p| p.test_resolution).collect();
    ticks.sort_unstable();
    ticks.dedup();
    for t in ticks {
        let x = px(t.max(1) as f64);
        writeln!(s, r##"<line x1="{x:.2}" y1="{pt}" x2="{x:.2}" y2="{pb}" stroke="#ddd"/>"##).unwrap();
        writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{t}</text>"#, pb + 15.0).unwrap();
    }
    let mut y = y0;
    while y <= y1 + 1e-9 {
        let yy = py(y);
        writeln!(s, r##"<line x1="{pl}" y1="{yy:.2}" x2="{pr}" y2="{yy:.2}" stroke="#eee"/>"##).unwrap();
        writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{y:.0}</text>"#, pl - 6.0, yy + 4.0).unwrap();
        y += 10.0;
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">test resolution (log scale)</text>"#,
        (pl + pr) / 2.0,
        h - 12.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text transform="translate(16 {}) rotate(-90)" text-anchor="middle">top-1 accuracy (%)</text>"#,
        (pt + pb) / 2.0
    )
    .unwrap();
    let models: Vec<&String> = {
        let mut m: Vec<&String> = curves.iter().map(|((name, _), _)| name).collect();
        m.dedup();
        m
    };
    for (i, ((name, res), pts)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if models.first() == Some(&name) { "" } else { r#" stroke-dasharray="5 3""# };
        let mut sorted = pts.clone();
        sorted.sort_by_key(|p| p.0);
        let path: Vec<String> = sorted
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x.max(1) as f64), py(y)))
            .collect();
        let label = escape(&format!("{name} @{res}"));
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.8"{dash} points="{}"><title>{label}</title></polyline>"#,
            path.join(" ")
        )
        .unwrap();
        for &(x, y) in &sorted {
            writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"><title>{label} T={x}: {y:.2}</title></circle>"#,
                px(x.max(1) as f64),
                py(y)
            )
            .unwrap();
        }
        let ly = top + 14.0 * i as f64 + 8.0;
        writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/>"#, pr + 10.0, pr + 30.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{label}</text>"#, pr + 35.0, ly + 4.0).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Write `envelope.csv` and `envelope.svg` to `dir`.
pub fn envelope_report(matrices: &[(&str, &AccuracyMatrix)], dir: &Path) -> Result<Vec<EnvelopePoint>> {
    if matrices.is_empty() {
        return Err(Error::InvalidArgument("no matrices to plot".into()));
    }
    let points = envelope_points(matrices);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in [("envelope.csv", envelope_csv(&points)), ("envelope.svg", envelope_svg(&points))] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{desk_dataset, Split};
    use crate::meta::ScaleEncoder;
    use crate::network::BackboneSpec;
    use proptest::prelude::*;

    fn constant_model(class: usize) -> Model<f32> {
        let spec = BackboneSpec::tiny_resnet(3, 4, &[4, 6], &[1, 1], 10);
        let mut m = Model::new(spec, ScaleEncoder::new(0.1, 2).unwrap(), &[16, 12], 0, false, 1).unwrap();
        m.fc.weight.data.iter_mut().for_each(|v| *v = 0.0);
        m.fc.bias[class] = 1.0;
        m
    }

    #[test]
    fn constant_predictor_scores_chance() {
        let eval = desk_dataset(Split::Val, 2, 1).unwrap();
        let preds = run_matrix_eval(&constant_model(3), &eval, &[16, 14, 12], InferenceMode::Proxy, None).unwrap();
        assert_eq!(preds.grid.len(), 6);
        let m = preds.accuracy_matrix().unwrap();
        assert!(m.values.iter().flatten().chain(&m.selected).all(|&v| v == 10.0));
        let csv = m.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("train\\test,16,14,12\n16,10.00,10.00,10.00\n"));
        assert_eq!(AccuracyMatrix::from_csv(&csv).unwrap().values, m.values);
    }

    #[test]
    fn empty_eval_is_rejected() {
        let mut eval = desk_dataset(Split::Val, 1, 1).unwrap();
        eval.images.clear();
        eval.labels.clear();
        assert!(run_matrix_eval(&constant_model(0), &eval, &[16], InferenceMode::Proxy, None).is_err());
    }

    #[test]
    fn prediction_store_round_trip() {
        let eval = desk_dataset(Split::Val, 1, 2).unwrap();
        let preds = run_matrix_eval(&constant_model(1), &eval, &[16, 12], InferenceMode::DataFree, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        preds.save(dir.path()).unwrap();
        let back = PredictionSet::load(dir.path()).unwrap();
        assert_eq!(back, preds);
        assert_eq!(back.accuracy_matrix().unwrap(), preds.accuracy_matrix().unwrap());
        fs::write(dir.path().join("pred_16_12.bin"), b"SNPRED01\x05\x00").unwrap();
        assert!(matches!(PredictionSet::load(dir.path()), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn hit_miss_examples() {
        let labels = [0, 1, 2, 3];
        assert_eq!(hit_miss(&[0, 1, 0, 0], &[0, 1, 0, 0], &labels).unwrap(), 0.0);
        assert_eq!(hit_miss(&[1, 2, 3, 0], &labels, &labels).unwrap(), 1.0);
        assert!(hit_miss(&[0], &[0, 1], &[0, 1]).is_err());
        let a = [0, 0, 2, 0];
        let b = [0, 1, 0, 0];
        let m = HitMissMatrix::build(&[(32, &a), (16, &b)], &labels).unwrap();
        assert_eq!(m.values[0][0], 0.0);
        assert_eq!(m.values[0][1], 0.25);
        assert!(m.to_csv().starts_with("miss\\hit,32,16\n32,0.00,25.00\n"));
    }

    proptest! {
        #[test]
        fn hit_miss_antisymmetry(
            data in proptest::collection::vec((0usize..3, 0usize..3, 0usize..3), 1..60)
        ) {
            let a: Vec<usize> = data.iter().map(|d| d.0).collect();
            let b: Vec<usize> = data.iter().map(|d| d.1).collect();
            let l: Vec<usize> = data.iter().map(|d| d.2).collect();
            let n = l.len() as f64;
            let hits = |p: &[usize]| p.iter().zip(&l).filter(|(x, y)| x == y).count() as f64;
            let lhs = (hit_miss(&a, &b, &l).unwrap() - hit_miss(&b, &a, &l).unwrap()) * n;
            prop_assert!((lhs - (hits(&b) - hits(&a))).abs() < 1e-9);
        }
    }

    #[test]
    fn envelope_single_row_and_round_trip() {
        let m = AccuracyMatrix {
            rows: vec![32],
            cols: vec![32, 24, 16],
            values: vec![vec![81.234, 70.0, 55.555]],
            selected: vec![],
        };
        let points = envelope_points(&[("san", &m)]);
        assert_eq!(points.len(), 3);
        let svg = envelope_svg(&points);
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(!svg.contains("href"));
        let csv = envelope_csv(&points);
        assert_eq!(parse_envelope_csv(&csv).unwrap(), points);
        let dir = tempfile::tempdir().unwrap();
        envelope_report(&[("san", &m)], dir.path()).unwrap();
        assert!(dir.path().join("envelope.svg").exists());
        assert!(envelope_report(&[], dir.path()).is_err());
    }

    #[test]
    fn svg_x_axis_is_logarithmic() {
        let m = AccuracyMatrix {
            rows: vec![32],
            cols: vec![8, 16, 32],
            values: vec![vec![50.0, 60.0, 70.0]],
            selected: vec![],
        };
        let svg = envelope_svg(&envelope_points(&[("m", &m)]));
        let xs: Vec<f64> = svg
            .lines()
            .filter(|l| l.starts_with("<circle"))
            .map(|l| l.split("cx=\"").nth(1).unwrap().split('"').next().unwrap().parse().unwrap())
            .collect();
        assert!(((xs[1] - xs[0]) - (xs[2] - xs[1])).abs() < 0.02);
    }
}

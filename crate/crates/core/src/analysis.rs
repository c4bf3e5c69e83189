//! Token statistics: value histograms, 2-D projections and the spread of
//! repeated decoder encodings. Each report writes a CSV and an SVG.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::textcond::TextSimulator;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// Fraction of values in bins lying entirely within [lo, hi].
    pub fn mass_within(&self, lo: f64, hi: f64) -> f64 {
        let inside: u64 = (0..self.bins())
            .filter(|&i| self.bin_edges[i] >= lo && self.bin_edges[i + 1] <= hi)
            .map(|i| self.counts[i])
            .sum();
        inside as f64 / self.total as f64
    }

    /// Values in bins lying entirely outside [lo, hi].
    pub fn count_outside(&self, lo: f64, hi: f64) -> u64 {
        (0..self.bins())
            .filter(|&i| self.bin_edges[i + 1] <= lo || self.bin_edges[i] >= hi)
            .map(|i| self.counts[i])
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{},{},{c}", self.bin_edges[i], self.bin_edges[i + 1]);
        }
        out
    }

    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 320.0, 30.0);
        let max = self.counts.iter().copied().max().unwrap_or(1).max(1) as f64;
        let bar_w = (w - 2.0 * pad) / self.bins() as f64;
        let mut svg = svg_open(w, h);
        for (i, c) in self.counts.iter().enumerate() {
            let bh = (h - 2.0 * pad) * *c as f64 / max;
            let _ = writeln!(
                svg,
                r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#4a78b5"/>"##,
                pad + i as f64 * bar_w,
                h - pad - bh,
                (bar_w - 1.0).max(0.5),
                bh
            );
        }
        let (lo, hi) = (self.bin_edges[0], self.bin_edges[self.bins()]);
        let _ = writeln!(svg, r#"<text x="{pad}" y="{}" font-size="11">{lo}</text>"#, h - 10.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{hi}</text>"#, w - pad, h - 10.0);
        svg.push_str("</svg>\n");
        svg
    }
}

/// Counts values into `bins` equal-width bins over [lo, hi]. Values outside
/// the range are counted in the first or last bin.
pub fn value_histogram(tokens: &Tensor, bins: usize, range: (f64, f64)) -> Result<Histogram> {
    let (lo, hi) = range;
    if bins == 0 {
        return Err(Error::Param("histogram needs at least one bin".into()));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Param(format!("bad histogram range [{lo}, {hi}]")));
    }
    if tokens.numel() == 0 {
        return Err(Error::Input("cannot histogram an empty tensor".into()));
    }
    let width = (hi - lo) / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + i as f64 * width }).collect();
    let mut counts = vec![0u64; bins];
    for &v in tokens.data() {
        if v.is_nan() {
            return Err(Error::Input("histogram input contains NaN".into()));
        }
        let idx = ((v - lo) / width).floor();
        let idx = if idx < 0.0 { 0 } else { (idx as usize).min(bins - 1) };
        counts[idx] += 1;
    }
    Ok(Histogram { bin_edges, counts, total: tokens.numel() as u64 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Projection2D {
    pub points: Vec<(f64, f64, String)>,
    pub method: String,
}

impl Projection2D {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,label\n");
        for (x, y, label) in &self.points {
            let _ = writeln!(out, "{x},{y},{label}");
        }
        out
    }

    pub fn to_svg(&self) -> String {
        const PALETTE: [&str; 6] = ["#d1495b", "#00798c", "#edae49", "#30638e", "#66a182", "#8d6a9f"];
        let (w, h, pad) = (480.0, 480.0, 30.0);
        let xs = self.points.iter().map(|p| p.0);
        let ys = self.points.iter().map(|p| p.1);
        let (x0, x1) = (xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
        let (y0, y1) = (ys.clone().fold(f64::INFINITY, f64::min), ys.fold(f64::NEG_INFINITY, f64::max));
        let sx = (w - 2.0 * pad) / (x1 - x0).max(1e-12);
        let sy = (h - 2.0 * pad) / (y1 - y0).max(1e-12);
        let mut colors: BTreeMap<&str, &str> = BTreeMap::new();
        let mut svg = svg_open(w, h);
        for (x, y, label) in &self.points {
            let n = colors.len();
            let color = *colors.entry(label.as_str()).or_insert(PALETTE[n % PALETTE.len()]);
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}" fill-opacity="0.7"/>"#,
                pad + (x - x0) * sx,
                h - pad - (y - y0) * sy
            );
        }
        for (i, (label, color)) in colors.iter().enumerate() {
            let _ = writeln!(
                svg,
                r#"<text x="{pad}" y="{}" font-size="12" fill="{color}">{label}</text>"#,
                pad + 14.0 * i as f64
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// Projects labeled token sets onto their top two principal directions.
/// Each direction's sign is fixed so that its first nonzero loading is
/// positive.
pub fn project_2d(sets: &[(String, Tensor)]) -> Result<Projection2D> {
    let mut width = None;
    let mut rows: Vec<(&[f64], &str)> = Vec::new();
    for (label, t) in sets {
        let (n, d) = t.dims2()?;
        if *width.get_or_insert(d) != d {
            return Err(Error::Shape(format!("set `{label}` has width {d}, expected {}", width.unwrap_or(d))));
        }
        rows.extend((0..n).map(|i| (&t.data()[i * d..(i + 1) * d], label.as_str())));
    }
    let d = width.unwrap_or(0);
    if rows.len() < 3 {
        return Err(Error::Input(format!("need at least 3 tokens to project, got {}", rows.len())));
    }
    if d < 2 {
        return Err(Error::Shape("tokens must be at least 2 wide".into()));
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i].0[j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&k| {
            let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let flip = v.iter().find(|c| c.abs() > 1e-12).is_some_and(|c| *c < 0.0);
            v.into_iter().map(|c| if flip { -c } else { c }).collect()
        })
        .collect();
    let points = (0..n)
        .map(|i| {
            let coord = |axis: &[f64]| (0..d).map(|j| centered[(i, j)] * axis[j]).sum::<f64>();
            (coord(&axes[0]), coord(&axes[1]), rows[i].1.to_string())
        })
        .collect();
    Ok(Projection2D { points, method: "pca".into() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FluctuationReport {
    /// Largest per-coordinate variance of the query tokens across encodings.
    pub query_var: f64,
    pub answer_var: f64,
}

impl FluctuationReport {
    pub fn to_csv(&self) -> String {
        format!("set,max_var\nquery,{}\nanswer,{}\n", self.query_var, self.answer_var)
    }

    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (320.0, 240.0, 30.0);
        let max = self.query_var.max(self.answer_var).max(1e-12);
        let mut svg = svg_open(w, h);
        for (i, (label, v)) in [("query", self.query_var), ("answer", self.answer_var)].iter().enumerate() {
            let bh = (h - 2.0 * pad) * v / max;
            let x = pad + i as f64 * 130.0;
            let _ = writeln!(
                svg,
                r##"<rect x="{x}" y="{:.2}" width="100" height="{:.2}" fill="#4a78b5"/>"##,
                h - pad - bh,
                bh
            );
            let _ = writeln!(svg, r#"<text x="{x}" y="{}" font-size="12">{label} {v:.4}</text>"#, h - 10.0);
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// Running mean/variance that stays exactly zero for identical inputs.
#[derive(Clone, Default)]
struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn push(&mut self, x: &[f64]) {
        if self.mean.is_empty() {
            self.mean = vec![0.0; x.len()];
            self.m2 = vec![0.0; x.len()];
        }
        self.n += 1.0;
        for (i, &v) in x.iter().enumerate() {
            let delta = v - self.mean[i];
            self.mean[i] += delta / self.n;
            self.m2[i] += delta * (v - self.mean[i]);
        }
    }

    fn max_variance(&self) -> f64 {
        self.m2.iter().map(|m| m / self.n).fold(0.0, f64::max)
    }
}

/// Encodes `prompt` once per answer seed and reports the largest
/// per-coordinate variance of the query and answer tokens.
pub fn fluctuation_stats(sim: &TextSimulator, prompt: &str, seeds: &[u64]) -> Result<FluctuationReport> {
    if seeds.len() < 2 {
        return Err(Error::Param(format!("need at least 2 encodings, got {}", seeds.len())));
    }
    let (mut query, mut answer) = (Welford::default(), Welford::default());
    for &seed in seeds {
        let (q, a) = sim.encode_decoder(prompt, seed)?;
        query.push(q.data());
        answer.push(a.data());
    }
    Ok(FluctuationReport { query_var: query.max_variance(), answer_var: answer.max_variance() })
}

/// `k` distinct answer seeds derived from `base`.
pub fn fluctuation_seeds(base: u64, k: usize) -> Vec<u64> {
    (0..k as u64).map(|i| base.wrapping_mul(1_000_003).wrapping_add(i)).collect()
}

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

/// Writes `<stem>.csv` and `<stem>.svg` into `dir`.
pub fn write_report(dir: impl AsRef<Path>, stem: &str, csv: &str, svg: &str) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (ext, body) in [("csv", csv), ("svg", svg)] {
        let path = dir.join(format!("{stem}.{ext}"));
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

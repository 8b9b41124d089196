//! Summaries and plots of a finished bundle.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use percolab::isoperimetry::gamma_reference;

use crate::config::ExperimentConfig;
use crate::pipeline::{Failure, Manifest, CONFIG_COPY};

pub struct Row {
    pub quantity: String,
    pub value: String,
    pub reference: String,
}

pub struct Summary {
    pub manifest: Manifest,
    pub rows: Vec<Row>,
    pub plots: Vec<String>,
}

type Table = Vec<BTreeMap<String, String>>;

fn read_csv(dir: &Path, name: &str) -> Result<Option<Table>, Failure> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(None);
    }
    let mut r = csv::Reader::from_path(&path).map_err(|e| Failure::Integrity(format!("{name}: {e}")))?;
    let header = r.headers().map_err(|e| Failure::Integrity(format!("{name}: {e}")))?.clone();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Failure::Integrity(format!("{name}: {e}")))?;
        out.push(header.iter().map(String::from).zip(rec.iter().map(String::from)).collect());
    }
    Ok(Some(out))
}

fn kv(t: &Table) -> BTreeMap<String, String> {
    t.iter().filter_map(|r| Some((r.get("key")?.clone(), r.get("value")?.clone()))).collect()
}

fn num(s: Option<&String>) -> Option<f64> {
    s.and_then(|v| v.parse().ok())
}

fn span(vals: &[f64]) -> String {
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if vals.is_empty() {
        "-".into()
    } else if lo == hi {
        format!("{lo:.4}")
    } else {
        format!("{lo:.4} .. {hi:.4}")
    }
}

/// Verifies the bundle and tabulates its fitted constants.
pub fn summarise(dir: &Path) -> Result<Summary, Failure> {
    let manifest = Manifest::read(dir)?;
    manifest.verify(dir)?;
    let cfg_text = fs::read_to_string(dir.join(CONFIG_COPY)).map_err(|e| Failure::Integrity(e.to_string()))?;
    let cfg = ExperimentConfig::parse(&cfg_text).map_err(|e| Failure::Integrity(format!("config copy: {e}")))?;
    let d = cfg.dim();
    let mut rows = Vec::new();
    let mut plots = Vec::new();
    let mut push = |q: &str, v: String, r: &str| rows.push(Row { quantity: q.into(), value: v, reference: r.into() });

    if let Some(t) = read_csv(dir, "sample.csv")? {
        let m = kv(&t);
        push("occupied density", m.get("density").cloned().unwrap_or_default(), "-");
    }
    if let Some(t) = read_csv(dir, "classify.csv")? {
        for r in &t {
            let level = r.get("level").cloned().unwrap_or_default();
            let bound = level.parse::<i32>().map(|n| format!("{:.3e}", 2.0 * 2f64.powf(-(2f64.powi(n))))).unwrap_or_default();
            push(&format!("bad fraction, level {level}"), r.get("bad_fraction").cloned().unwrap_or_default(), &bound);
        }
    }
    if let Some(t) = read_csv(dir, "perforate.csv")? {
        let m = kv(&t);
        push("perforation volume / full", format!("{} / {}", m["volume"], m["full_volume"]), &format!(">= {} x full", m["product_bound"]));
    }
    if let Some(t) = read_csv(dir, "isop.csv")? {
        let ratios: Vec<f64> = t.iter().filter_map(|r| num(r.get("ratio"))).collect();
        let gamma = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        push("isoperimetric gamma_emp", if ratios.is_empty() { "-".into() } else { format!("{gamma:.4}") }, &format!(">= {:.3e}", gamma_reference(d)));
    }
    if let Some(t) = read_csv(dir, "cluster.csv")? {
        let m = kv(&t);
        push("chemical-distance C", m.get("chemical_ratio").cloned().unwrap_or_default(), "finite");
        push("volume growth c", m.get("volume_ratio").cloned().unwrap_or_default(), "> 0");
    }
    if let Some(t) = read_csv(dir, "chemical.csv")? {
        let pts: Vec<(f64, f64)> =
            t.iter().filter_map(|r| Some((num(r.get("shell"))?, num(r.get("max_ratio"))?))).collect();
        if !pts.is_empty() {
            plots.push(("chemical.svg", svg_plot("chemical ratio by dyadic shell", "shell", &[("max ratio", pts)])));
        }
    }
    if let Some(t) = read_csv(dir, "regularity.csv")? {
        let m = kv(&t);
        push("very good N", m.get("n").cloned().unwrap_or_default(), &format!("<= R^(1/{})", d + 2));
    }
    if let Some(t) = read_csv(dir, "walk_envelope.csv")? {
        let mut series = Vec::new();
        for c in ["c1", "c2", "c3", "c4"] {
            let vals: Vec<f64> = t.iter().filter_map(|r| num(r.get(c))).collect();
            push(&format!("envelope {}", c.to_uppercase()), span(&vals), "-");
            let pts: Vec<(f64, f64)> = t.iter().filter_map(|r| Some((num(r.get("t"))?, num(r.get(c))?))).collect();
            series.push((c, pts));
        }
        plots.push(("envelope.svg", svg_plot("envelope constants", "t", &series)));
    }
    if let Some(t) = read_csv(dir, "walk_harnack.csv")? {
        for r in &t {
            push(&format!("Harnack ratio, R = {}", r["radius"]), r.get("worst").cloned().unwrap_or_default(), "bounded");
        }
    }
    if let Some(t) = read_csv(dir, "walk_qip.csv")? {
        for r in &t {
            let reference = if cfg.model.parameter == 1.0 && cfg.model.kind == crate::config::ModelKind::Bernoulli {
                if r["i"] == r["j"] { format!("{:.4}", 1.0 / d as f64) } else { "0".into() }
            } else {
                "-".into()
            };
            push(&format!("Sigma[{},{}]", r["i"], r["j"]), format!("{} +- {}", r["sigma"], r["se"]), &reference);
        }
    }
    if let Some(t) = read_csv(dir, "walk_green.csv")? {
        let vals: Vec<f64> = t
            .iter()
            .filter_map(|r| Some(num(r.get("extrapolated")).or(num(r.get("value")))? * num(r.get("distance"))?.powi(d as i32 - 2)))
            .collect();
        push("Green g |x|^(d-2)", span(&vals), "[C1, C2]");
    }
    let plots = plots
        .into_iter()
        .map(|(name, svg)| {
            fs::write(dir.join(name), svg).map_err(|e| Failure::Integrity(format!("{name}: {e}")))?;
            Ok(name.to_string())
        })
        .collect::<Result<_, Failure>>()?;
    Ok(Summary { manifest, rows, plots })
}

pub fn render(s: &Summary) -> String {
    let w0 = s.rows.iter().map(|r| r.quantity.len()).max().unwrap_or(8).max(8);
    let w1 = s.rows.iter().map(|r| r.value.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let m = &s.manifest;
    let _ = writeln!(out, "bundle: version {}, config {}, {}", m.version, &m.config_sha256[..12], if m.complete { "complete" } else { "partial" });
    for st in &m.stages {
        let _ = writeln!(out, "  {:<11} {:>8} ms  {} file(s)", st.name, st.wall_ms, st.files.len());
    }
    if let Some(e) = &m.error {
        let _ = writeln!(out, "  error: {e}");
    }
    let _ = writeln!(out, "\n{:<w0$}  {:<w1$}  reference", "quantity", "value");
    for r in &s.rows {
        let _ = writeln!(out, "{:<w0$}  {:<w1$}  {}", r.quantity, r.value, r.reference);
    }
    for p in &s.plots {
        let _ = writeln!(out, "wrote {p}");
    }
    out
}

/// Standalone line chart.
pub fn svg_plot(title: &str, xlabel: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLOURS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if all.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0);
    let _ = writeln!(s, r#"<path d="M{M} {M} V{} H{}" stroke="black" fill="none"/>"#, H - M, W - M);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(s, r#"<text x="{M}" y="{}" text-anchor="start">{x0:.3}</text>"#, H - M + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{x1:.3}</text>"#, W - M, H - M + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y0:.3}</text>"#, M - 4.0, H - M);
    let _ = writeln!(s, r#"<text x="{}" y="{M}" text-anchor="end">{y1:.3}</text>"#, M - 4.0);
    for (k, (name, pts)) in series.iter().enumerate() {
        let c = COLOURS[k % COLOURS.len()];
        let path: Vec<String> = pts.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        if !path.is_empty() {
            let _ = writeln!(s, r#"<polyline points="{}" stroke="{c}" fill="none" stroke-width="1.5"/>"#, path.join(" "));
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{c}">{name}</text>"#, W - M + 4.0, M + 16.0 * k as f64);
    }
    s.push_str("</svg>\n");
    s
}

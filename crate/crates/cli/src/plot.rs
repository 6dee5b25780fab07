//! Curve files: a merged CSV plus one SVG line chart per metric.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use posecast::error::Error;

use crate::commands::{read_report, CliError};
use crate::PlotArgs;

struct Series {
    name: String,
    ade: Vec<f64>,
    pck: Vec<f64>,
}

fn read_csv(path: &Path) -> Result<Series, CliError> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let col = |name: &str| {
        cols.iter().position(|c| *c == name).ok_or_else(|| Error::Format {
            format: "curve csv",
            reason: format!("{}: missing column {name:?}", path.display()),
        })
    };
    let (ia, ip) = (col("ade")?, col("pck")?);
    let mut s = Series {
        name: stem(path),
        ade: Vec::new(),
        pck: Vec::new(),
    };
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        let get = |i: usize| -> Result<f64, Error> {
            fields.get(i).and_then(|v| v.trim().parse().ok()).ok_or_else(|| Error::Format {
                format: "curve csv",
                reason: format!("{}: bad value on line {}", path.display(), n + 2),
            })
        };
        s.ade.push(get(ia)?);
        s.pck.push(get(ip)?);
    }
    Ok(s)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn plot(a: PlotArgs) -> Result<(), CliError> {
    let mut series = Vec::new();
    for p in &a.curves {
        if p.extension().is_some_and(|e| e == "json") {
            let r = read_report(p)?;
            series.push(Series {
                name: if r.method.is_empty() { stem(p) } else { r.method.clone() },
                ade: r.per_timestamp.ade,
                pck: r.per_timestamp.pck,
            });
        } else {
            series.push(read_csv(p)?);
        }
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    let len = series.iter().map(|s| s.ade.len()).max().unwrap_or(0);
    let mut csv = String::from("t");
    for s in &series {
        write!(csv, ",{}_ade,{}_pck", s.name, s.name).unwrap();
    }
    csv.push('\n');
    for t in 0..len {
        write!(csv, "{}", t + 1).unwrap();
        for s in &series {
            let cell = |v: Option<&f64>| v.map(|x| x.to_string()).unwrap_or_default();
            write!(csv, ",{},{}", cell(s.ade.get(t)), cell(s.pck.get(t))).unwrap();
        }
        csv.push('\n');
    }
    let write = |name: &str, body: String| {
        let path = a.out.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))
    };
    write("curves.csv", csv)?;
    let ade: Vec<(&str, &[f64])> = series.iter().map(|s| (s.name.as_str(), s.ade.as_slice())).collect();
    let pck: Vec<(&str, &[f64])> = series.iter().map(|s| (s.name.as_str(), s.pck.as_slice())).collect();
    write("ade.svg", svg("ADE per timestamp", &ade))?;
    write("pck.svg", svg("PCK per timestamp", &pck))?;
    println!("wrote curves.csv, ade.svg and pck.svg to {}", a.out.display());
    Ok(())
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn svg(title: &str, series: &[(&str, &[f64])]) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2);
    let ymax = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let x = |i: usize| m + (w - 2.0 * m) * i as f64 / (n - 1) as f64;
    let y = |v: f64| h - m - (h - 2.0 * m) * v / ymax;
    let mut out = String::new();
    writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{title}</text>"#, w / 2.0).unwrap();
    writeln!(out, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m).unwrap();
    writeln!(out, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m).unwrap();
    writeln!(out, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">1</text>"#, m, h - m + 16.0).unwrap();
    writeln!(out, r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="12">{n}</text>"#, w - m, h - m + 16.0).unwrap();
    writeln!(out, r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="12">{ymax:.3}</text>"#, m - 4.0, m + 4.0).unwrap();
    for (k, (name, values)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| format!("{:.2},{:.2}", x(i), y(*v)))
            .collect();
        writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, points.join(" ")).unwrap();
        writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{color}">{name}</text>"#,
            w - m - 120.0,
            m + 16.0 * (k as f64 + 1.0)
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    out
}

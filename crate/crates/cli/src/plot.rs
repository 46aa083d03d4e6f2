use std::io::BufRead;
use std::path::Path;

use dayolo::evaluation::{read_features_csv, ApTable};
use dayolo::sample::DomainLabel;
use dayolo::training::MetricsLine;
use dayolo::{Error, Result};
use nalgebra::DMatrix;
use plotters::prelude::*;
use serde_json::json;

const SIZE: (u32, u32) = (800, 500);
const COLORS: [RGBColor; 6] = [RED, BLUE, GREEN, MAGENTA, CYAN, BLACK];

fn draw_err(out: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format {
        path: out.into(),
        message: e.to_string(),
    }
}

fn prepare(out: &Path) -> Result<()> {
    match out.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        }),
        None => Ok(()),
    }
}

fn read_lines(log: &Path) -> Result<Vec<MetricsLine>> {
    let file = std::fs::File::open(log).map_err(|e| Error::Io {
        path: log.into(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::Io {
            path: log.into(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: log.into(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

/// Loss terms (log scale) above, validation mAP below.
pub fn metrics(log: &Path, out: &Path) -> Result<()> {
    let lines = read_lines(log)?;
    if lines.is_empty() {
        return Err(Error::Validation(format!(
            "{} has no entries",
            log.display()
        )));
    }
    prepare(out)?;
    let root = SVGBackend::new(out, (SIZE.0, SIZE.1 * 2)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(out, e))?;
    let (top, bottom) = root.split_vertically(SIZE.1);

    let steps = lines.last().map_or(1, |l| l.losses.step + 1) as f64;
    let series: [(&str, fn(&MetricsLine) -> f64); 5] = [
        ("total", |l| l.losses.l_total),
        ("det", |l| l.losses.l_det),
        ("ria", |l| l.losses.l_ria),
        ("msia", |l| l.losses.l_msia),
        ("mlcr", |l| l.losses.l_mlcr),
    ];
    let positive = |v: f64| v.max(1e-6);
    let (lo, hi) = range(
        lines
            .iter()
            .flat_map(|l| series.iter().map(move |(_, f)| positive(f(l)))),
    );
    let mut chart = ChartBuilder::on(&top)
        .caption("losses", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..steps, (lo..hi * 1.1).log_scale())
        .map_err(|e| draw_err(out, e))?;
    chart
        .configure_mesh()
        .x_desc("step")
        .draw()
        .map_err(|e| draw_err(out, e))?;
    for (i, (name, f)) in series.iter().enumerate() {
        if lines.iter().all(|l| f(l) == 0.0) {
            continue;
        }
        let color = COLORS[i % COLORS.len()];
        chart
            .draw_series(LineSeries::new(
                lines.iter().map(|l| (l.losses.step as f64, positive(f(l)))),
                color,
            ))
            .map_err(|e| draw_err(out, e))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .draw()
        .map_err(|e| draw_err(out, e))?;

    let maps: Vec<(f64, f64)> = lines
        .iter()
        .filter_map(|l| l.map.map(|m| (l.losses.step as f64 + 1.0, m)))
        .collect();
    let mut chart = ChartBuilder::on(&bottom)
        .caption("validation mAP", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..steps, 0.0..1.0)
        .map_err(|e| draw_err(out, e))?;
    chart
        .configure_mesh()
        .x_desc("step")
        .draw()
        .map_err(|e| draw_err(out, e))?;
    chart
        .draw_series(LineSeries::new(maps.iter().copied(), BLUE))
        .map_err(|e| draw_err(out, e))?;
    chart
        .draw_series(maps.iter().map(|&p| Circle::new(p, 3, BLUE.filled())))
        .map_err(|e| draw_err(out, e))?;
    root.present().map_err(|e| draw_err(out, e))?;
    println!(
        "{}",
        json!({ "plot": out, "lines": lines.len(), "map_points": maps.len() })
    );
    Ok(())
}

/// One precision/recall curve per class.
pub fn pr_curves(table: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(table).map_err(|e| Error::Io {
        path: table.into(),
        source: e,
    })?;
    let table_data: ApTable = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: table.into(),
        message: e.to_string(),
    })?;
    prepare(out)?;
    let root = SVGBackend::new(out, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(out, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(
            format!("precision / recall (mAP {:.4})", table_data.map),
            ("sans-serif", 20),
        )
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..1.0, 0.0..1.05)
        .map_err(|e| draw_err(out, e))?;
    chart
        .configure_mesh()
        .x_desc("recall")
        .y_desc("precision")
        .draw()
        .map_err(|e| draw_err(out, e))?;
    for (i, c) in table_data.classes.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut points = vec![(0.0, c.pr.first().map_or(0.0, |p| p.1))];
        points.extend(c.pr.iter().copied());
        chart
            .draw_series(LineSeries::new(points, color))
            .map_err(|e| draw_err(out, e))?
            .label(format!("{} AP {:.3}", c.name, c.ap))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .draw()
        .map_err(|e| draw_err(out, e))?;
    root.present().map_err(|e| draw_err(out, e))?;
    println!(
        "{}",
        json!({ "plot": out, "classes": table_data.classes.len() })
    );
    Ok(())
}

/// First two principal components of the rows, signs fixed so that the
/// largest-magnitude loading of each component is positive.
pub fn pca_2d(rows: &[Vec<f32>]) -> Vec<(f64, f64)> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    if n == 0 || d == 0 {
        return vec![(0.0, 0.0); n];
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j] as f64);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let svd = x.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let component = |k: usize| -> Vec<f64> {
        let Some(&row) = order.get(k) else {
            return vec![0.0; n];
        };
        let mut v: Vec<f64> = v_t.row(row).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
        if lead < 0.0 {
            v.iter_mut().for_each(|a| *a = -*a);
        }
        (0..n)
            .map(|i| (0..d).map(|j| x[(i, j)] * v[j]).sum())
            .collect()
    };
    let (a, b) = (component(0), component(1));
    a.into_iter().zip(b).collect()
}

/// Scatter of the 2-D embedding of one scale's pooled features.
pub fn features(csv: &Path, scale: usize, out: &Path) -> Result<()> {
    let records: Vec<_> = read_features_csv(csv)?
        .into_iter()
        .filter(|r| r.scale == scale)
        .collect();
    if records.is_empty() {
        return Err(Error::Validation(format!(
            "{} has no rows at scale {scale}",
            csv.display()
        )));
    }
    let points = pca_2d(&records.iter().map(|r| r.vector.clone()).collect::<Vec<_>>());
    prepare(out)?;
    let root = SVGBackend::new(out, (600, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_err(out, e))?;
    let (x0, x1) = range(points.iter().map(|p| p.0));
    let (y0, y1) = range(points.iter().map(|p| p.1));
    let pad = |lo: f64, hi: f64| (lo - 0.05 * (hi - lo), hi + 0.05 * (hi - lo));
    let ((x0, x1), (y0, y1)) = (pad(x0, x1), pad(y0, y1));
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("scale {scale} features (PCA)"), ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| draw_err(out, e))?;
    chart
        .configure_mesh()
        .draw()
        .map_err(|e| draw_err(out, e))?;
    for (domain, color) in [(DomainLabel::Source, BLUE), (DomainLabel::Target, RED)] {
        let pts: Vec<(f64, f64)> = records
            .iter()
            .zip(&points)
            .filter(|(r, _)| r.domain == domain)
            .map(|(_, &p)| p)
            .collect();
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| draw_err(out, e))?
            .label(domain.name())
            .legend(move |(x, y)| Circle::new((x + 10, y), 3, color.filled()));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .draw()
        .map_err(|e| draw_err(out, e))?;
    root.present().map_err(|e| draw_err(out, e))?;
    println!("{}", json!({ "plot": out, "points": points.len() }));
    Ok(())
}

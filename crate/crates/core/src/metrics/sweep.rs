//! SI-SDR on interferer-only items as a function of enrollment SNR.

use std::fmt::Write as _;
use std::path::Path;

use super::{evaluate_set, write_text, EnrollmentChoice, Enhancer, EvalOptions, MetricError};
use crate::mixsim::{Condition, EvalItem, Sensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub system: String,
    pub sensor: Option<Sensor>,
    pub enroll_snr_db: f64,
    pub si_sdr_db: Option<f64>,
    pub status: String,
}

/// `-inf, -10, -5, 0, 5, 10, +inf`.
pub fn default_sweep_grid() -> Vec<f64> {
    vec![f64::NEG_INFINITY, -10.0, -5.0, 0.0, 5.0, 10.0, f64::INFINITY]
}

pub fn format_db(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        v.to_string()
    }
}

/// Parses a dB value; accepts `inf`, `+inf` and `-inf`.
pub fn parse_db(s: &str) -> Result<f64, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "inf" | "+inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        t => t
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("`{s}` is not a dB value")),
    }
}

fn mean_v(enhancer: &dyn Enhancer, items: &[EvalItem], snr_db: f64) -> crate::Result<f64> {
    let opts = EvalOptions {
        conditions: vec![Condition::V],
        enrollment: EnrollmentChoice::Target { snr_db },
        pesq: None,
    };
    let report = evaluate_set(enhancer, items, &opts)?;
    Ok(report.aggregate()[0].si_sdr_db)
}

/// One row per system and SNR. `systems` must be personalized; any that is
/// not gets `skipped` rows. `references` are evaluated once with their own
/// inputs and repeated across the grid.
pub fn sweep_enroll_snr(
    systems: &[&dyn Enhancer],
    references: &[&dyn Enhancer],
    items: &[EvalItem],
    snrs: &[f64],
) -> crate::Result<Vec<SweepRow>> {
    if !items.iter().any(|i| i.condition == Condition::V) {
        return Err(MetricError::EmptySet.into());
    }
    let mut rows = Vec::new();
    for sys in systems {
        let sensor = sys.enroll_sensor();
        for &snr in snrs {
            let (si_sdr_db, status) = match sensor {
                Some(_) => (Some(mean_v(*sys, items, snr)?), "ok"),
                None => (None, "skipped: not personalized"),
            };
            rows.push(SweepRow {
                system: sys.name().to_string(),
                sensor,
                enroll_snr_db: snr,
                si_sdr_db,
                status: status.into(),
            });
        }
    }
    for r in references {
        let v = mean_v(*r, items, f64::INFINITY)?;
        for &snr in snrs {
            rows.push(SweepRow {
                system: r.name().to_string(),
                sensor: r.enroll_sensor(),
                enroll_snr_db: snr,
                si_sdr_db: Some(v),
                status: "reference".into(),
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("system,sensor,enroll_snr_db,si_sdr_db,status\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.system,
            r.sensor.map(Sensor::name).unwrap_or(""),
            format_db(r.enroll_snr_db),
            r.si_sdr_db.map(|v| v.to_string()).unwrap_or_default(),
            r.status
        )
        .expect("string write");
    }
    s
}

pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<(), MetricError> {
    write_text(path.as_ref(), &sweep_csv(rows))
}

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Line plot with enrollment SNR on the x axis (grid points evenly spaced,
/// infinities at the ends) and mean SI-SDR on the y axis.
pub fn sweep_svg(rows: &[SweepRow]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 170.0, 20.0, 50.0);
    let mut grid: Vec<f64> = rows.iter().map(|r| r.enroll_snr_db).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut series: Vec<(String, Vec<(usize, f64)>)> = Vec::new();
    for r in rows {
        let Some(v) = r.si_sdr_db else { continue };
        let label = match r.sensor {
            Some(s) => format!("{} ({s})", r.system),
            None => r.system.clone(),
        };
        let x = grid.iter().position(|&g| g == r.enroll_snr_db).expect("grid has every snr");
        match series.iter_mut().find(|(l, _)| *l == label) {
            Some((_, pts)) => pts.push((x, v)),
            None => series.push((label, vec![(x, v)])),
        }
    }
    let vals = series.iter().flat_map(|(_, p)| p.iter().map(|&(_, v)| v));
    let (mut lo, mut hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 1.0;
        hi += 1.0;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let px = |i: usize| left + pw * if grid.len() > 1 { i as f64 / (grid.len() - 1) as f64 } else { 0.5 };
    let py = |v: f64| top + ph * (hi - v) / (hi - lo);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    for (i, g) in grid.iter().enumerate() {
        let x = px(i);
        let label = match format_db(*g).as_str() {
            "inf" => "+∞".to_string(),
            "-inf" => "−∞".to_string(),
            other => other.to_string(),
        };
        writeln!(
            s,
            r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{label}</text>"#,
            top + ph,
            top + ph + 5.0,
            top + ph + 20.0
        )
        .unwrap();
    }
    for k in 0..=4 {
        let v = lo + (hi - lo) * f64::from(k) / 4.0;
        let y = py(v);
        writeln!(
            s,
            r#"<line x1="{:.1}" y1="{y:.1}" x2="{left}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            left - 5.0,
            left - 8.0,
            y + 4.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">enrollment SNR (dB)</text>"#,
        left + pw / 2.0,
        h - 10.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text transform="translate(15 {:.1}) rotate(-90)" text-anchor="middle">SI-SDR (dB)</text>"#,
        top + ph / 2.0
    )
    .unwrap();
    for (k, (label, pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let points: Vec<String> = pts.iter().map(|&(i, v)| format!("{:.1},{:.1}", px(i), py(v))).collect();
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        )
        .unwrap();
        let ly = top + 15.0 + 18.0 * k as f64;
        let lx = w - right + 10.0;
        writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{:.1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 20.0,
            lx + 25.0,
            ly + 4.0,
            escape(label)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn write_sweep_svg(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<(), MetricError> {
    write_text(path.as_ref(), &sweep_svg(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn db_round_trip() {
        for v in default_sweep_grid() {
            assert_eq!(parse_db(&format_db(v)).unwrap(), v);
        }
        assert_eq!(parse_db("+inf").unwrap(), f64::INFINITY);
        assert!(parse_db("nan").is_err());
        assert!(parse_db("loud").is_err());
    }

    #[test]
    fn svg_has_one_line_per_series() {
        let row = |sys: &str, snr: f64, v: f64| SweepRow {
            system: sys.into(),
            sensor: Some(Sensor::Outer),
            enroll_snr_db: snr,
            si_sdr_db: Some(v),
            status: "ok".into(),
        };
        let rows = vec![
            row("a", f64::NEG_INFINITY, 1.0),
            row("a", 0.0, 2.0),
            row("a", f64::INFINITY, 3.0),
            row("b", f64::NEG_INFINITY, 0.5),
            row("b", f64::INFINITY, 0.5),
        ];
        let svg = sweep_svg(&rows);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("−∞") && svg.contains("+∞"));
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().nth(1).unwrap(), "a,OM,-inf,1,ok");
    }
}

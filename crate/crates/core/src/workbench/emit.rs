//! Result files: curve CSVs, SVG overlays and the ACA table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{write_atomic, WorkbenchError};
use crate::attacks::{AttackMethod, Norm};
use crate::ensemble::AcaRecord;
use crate::evaluation::{Curve, CurveMeta, CurvePoint};

pub const CURVE_HEADER: [&str; 11] = [
    "scenario", "attack", "targeted", "norm", "epsilon", "asr", "se", "n", "N", "alpha", "seed",
];

#[derive(Serialize, Deserialize)]
struct CurveRow {
    scenario: String,
    attack: String,
    targeted: bool,
    norm: String,
    epsilon: f64,
    asr: f64,
    se: f64,
    n: usize,
    #[serde(rename = "N")]
    n_trials: usize,
    alpha: f64,
    seed: u64,
}

fn csv_err(e: impl std::fmt::Display) -> WorkbenchError {
    WorkbenchError::Csv(e.to_string())
}

/// Serializes curves in long format, one row per grid point.
pub fn curves_csv(curves: &[Curve]) -> Result<Vec<u8>, WorkbenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if curves.is_empty() {
        w.write_record(CURVE_HEADER).map_err(csv_err)?;
    }
    for c in curves {
        let m = &c.meta;
        for p in &c.points {
            w.serialize(CurveRow {
                scenario: m.scenario.clone(),
                attack: m.attack.to_string(),
                targeted: m.targeted,
                norm: m.norm.to_string(),
                epsilon: p.epsilon,
                asr: p.asr,
                se: p.se,
                n: p.n,
                n_trials: m.n_trials,
                alpha: m.alpha,
                seed: m.seed,
            })
            .map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(csv_err)
}

pub fn write_curves_csv(path: &Path, curves: &[Curve]) -> Result<(), WorkbenchError> {
    write_atomic(path, &curves_csv(curves)?)
}

/// Parses a curve CSV; consecutive rows sharing metadata form one curve.
pub fn parse_curves_csv(bytes: &[u8]) -> Result<Vec<Curve>, WorkbenchError> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != CURVE_HEADER {
        return Err(WorkbenchError::Csv(format!("unexpected header {header:?}")));
    }
    let mut curves: Vec<Curve> = Vec::new();
    for row in r.deserialize::<CurveRow>() {
        let row = row.map_err(csv_err)?;
        let meta = CurveMeta {
            scenario: row.scenario,
            attack: row.attack.parse::<AttackMethod>().map_err(csv_err)?,
            targeted: row.targeted,
            norm: row.norm.parse::<Norm>().map_err(csv_err)?,
            n_trials: row.n_trials,
            alpha: row.alpha,
            seed: row.seed,
        };
        let point = CurvePoint {
            epsilon: row.epsilon,
            asr: row.asr,
            se: row.se,
            n: row.n,
        };
        match curves.last_mut() {
            Some(c) if c.meta == meta => c.points.push(point),
            _ => curves.push(Curve {
                points: vec![point],
                meta,
            }),
        }
    }
    Ok(curves)
}

pub fn read_curves_csv(path: &Path) -> Result<Vec<Curve>, WorkbenchError> {
    let bytes = std::fs::read(path).map_err(super::io_err(path))?;
    parse_curves_csv(&bytes)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Line chart of ASR against epsilon, one polyline per curve.
pub fn render_svg(title: &str, curves: &[&Curve]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 420.0, 60.0, 150.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x_max = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.epsilon))
        .fold(0.0_f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let sx = |e: f64| left + pw * e / x_max;
    let sy = |a: f64| top + ph * (1.0 - a);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{left}" y="24" font-size="14">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{left},{top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for k in 0..=4 {
        let a = k as f64 / 4.0;
        let e = x_max * a;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{a:.2}</text><text x="{}" y="{}" text-anchor="middle">{e:.3}</text>"#,
            left - 6.0,
            sy(a) + 4.0,
            sx(e),
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">epsilon</text><text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">ASR</text>"#,
        left + pw / 2.0,
        h - 10.0,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.epsilon), sy(p.asr)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let ly = top + 16.0 * i as f64 + 8.0;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            left + pw + 10.0,
            left + pw + 30.0,
            left + pw + 36.0,
            ly + 4.0,
            escape(&c.meta.scenario)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes one overlay per (attack, target mode, norm) into `dir` and returns the paths.
pub fn write_overlays(dir: &Path, prefix: &str, curves: &[Curve]) -> Result<Vec<PathBuf>, WorkbenchError> {
    let mut groups: BTreeMap<(String, bool, String), Vec<&Curve>> = BTreeMap::new();
    for c in curves {
        let key = (c.meta.attack.to_string(), c.meta.targeted, c.meta.norm.to_string());
        groups.entry(key).or_default().push(c);
    }
    let mut out = Vec::new();
    for ((attack, targeted, norm), group) in groups {
        let mode = if targeted { "targeted" } else { "untargeted" };
        let path = dir.join(format!("{prefix}-{attack}-{mode}-{norm}.svg"));
        let title = format!("{attack} {mode} {norm}");
        write_atomic(&path, render_svg(&title, &group).as_bytes())?;
        out.push(path);
    }
    Ok(out)
}

pub fn aca_csv(table: &[AcaRecord]) -> Result<Vec<u8>, WorkbenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if table.is_empty() {
        w.write_record(["arch_id", "sigma", "clean_accuracy", "aca", "unsmoothable"])
            .map_err(csv_err)?;
    }
    for r in table {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(csv_err)
}

pub fn write_aca_csv(path: &Path, table: &[AcaRecord]) -> Result<(), WorkbenchError> {
    write_atomic(path, &aca_csv(table)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(scenario: &str, attack: AttackMethod) -> Curve {
        Curve {
            points: (0..5)
                .map(|i| CurvePoint {
                    epsilon: 0.1 * i as f64,
                    asr: i as f64 / 7.0,
                    se: 0.013 * i as f64,
                    n: 30,
                })
                .collect(),
            meta: CurveMeta {
                scenario: scenario.into(),
                attack,
                targeted: false,
                norm: Norm::Linf,
                n_trials: 100,
                alpha: 0.3,
                seed: 9,
            },
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let curves = vec![
            curve("A", AttackMethod::Bim),
            curve("F", AttackMethod::Bim),
            curve("A", AttackMethod::Pgd),
        ];
        let bytes = curves_csv(&curves).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("scenario,attack,targeted,norm,epsilon,asr,se,n,N,alpha,seed\n"));
        assert_eq!(parse_curves_csv(&bytes).unwrap(), curves);
    }

    #[test]
    fn bad_header_rejected() {
        assert!(parse_curves_csv(b"a,b\n1,2\n").is_err());
    }

    #[test]
    fn overlays_grouped() {
        let dir = tempfile::tempdir().unwrap();
        let curves = vec![
            curve("A", AttackMethod::Bim),
            curve("F", AttackMethod::Bim),
            curve("A", AttackMethod::Mim),
        ];
        let paths = write_overlays(dir.path(), "run", &curves).unwrap();
        assert_eq!(paths.len(), 2);
        let svg = std::fs::read_to_string(&paths[0]).unwrap();
        assert!(svg.starts_with("<svg") && svg.matches("<polyline").count() == 2);
    }

    #[test]
    fn aca_table_rows() {
        let t = vec![AcaRecord {
            arch_id: "mlp".into(),
            sigma: 0.25,
            clean_accuracy: 0.9,
            aca: 0.8,
            unsmoothable: false,
        }];
        let text = String::from_utf8(aca_csv(&t).unwrap()).unwrap();
        assert_eq!(text, "arch_id,sigma,clean_accuracy,aca,unsmoothable\nmlp,0.25,0.9,0.8,false\n");
    }
}

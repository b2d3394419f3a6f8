//! Pixel AUC under increasing perturbation severity.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use prx_core::datakit::{perturb, Jpeg2000Codec, PerturbationKind, PerturbationSpec};
use prx_core::objectives::{EvalRecord, MetricsReport};
use serde::{Deserialize, Serialize};

use crate::data::LoadedSample;
use crate::error::{Error, Result};
use crate::pipeline::Detector;
use crate::train::write_json;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: PerturbationKind,
    pub severity: u8,
    /// `None` when no sample has both classes of pixels.
    pub auc: Option<f64>,
}

/// Kinds that cannot run in this environment, in request order.
pub fn unsupported_kinds(kinds: &[PerturbationKind], codec: Option<&dyn Jpeg2000Codec>) -> Vec<String> {
    kinds
        .iter()
        .filter(|k| **k == PerturbationKind::Jpeg2000 && codec.is_none())
        .map(|k| k.name().to_string())
        .collect()
}

/// Perturbs every sample at every (kind, severity) pair and reports the
/// mean pixel AUC. Sample `i` uses noise seed `seed + i`. Fails before any
/// work if a requested kind is unsupported.
pub fn sweep(
    detector: &dyn Detector,
    samples: &[LoadedSample],
    kinds: &[PerturbationKind],
    severities: &[u8],
    seed: u64,
    codec: Option<&dyn Jpeg2000Codec>,
) -> Result<Vec<SweepRow>> {
    let unsupported = unsupported_kinds(kinds, codec);
    if !unsupported.is_empty() {
        return Err(Error::Unsupported(unsupported));
    }
    for &s in severities {
        PerturbationSpec::new(PerturbationKind::Brightness, s, 0)?;
    }
    if samples.is_empty() {
        return Err(Error::Data("nothing to sweep: the manifest is empty".into()));
    }
    let mut rows = Vec::with_capacity(kinds.len() * severities.len());
    for &kind in kinds {
        for &severity in severities {
            let records = samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let spec = PerturbationSpec::new(kind, severity, seed.wrapping_add(i as u64))?;
                    let image = perturb(&s.image, &spec, codec)?;
                    // The untouched file can still feed path-based backends.
                    let path = (severity == 0).then_some(s.image_path.as_path());
                    let d = detector.detect(&image, path)?;
                    Ok(EvalRecord {
                        id: s.id.clone(),
                        label: s.label,
                        gt: s.mask.clone(),
                        logits: d.logits,
                        probabilities: d.probabilities,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let report = MetricsReport::from_records(&records, false)?;
            rows.push(SweepRow { kind, severity, auc: report.avg.pixel_auc });
        }
    }
    Ok(rows)
}

pub fn write_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["kind", "severity", "auc"]).map_err(|e| csv_error(path, e))?;
    for r in rows {
        let auc = r.auc.map(|a| a.to_string()).unwrap_or_default();
        w.write_record([r.kind.name(), &r.severity.to_string(), &auc]).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// A line chart of AUC against severity, captioned with the formula.
pub fn chart_svg(kind: PerturbationKind, rows: &[SweepRow]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const L: f64 = 56.0;
    const R: f64 = 20.0;
    const T: f64 = 36.0;
    const B: f64 = 64.0;
    let pts: Vec<(u8, f64)> = rows.iter().filter(|r| r.kind == kind).filter_map(|r| r.auc.map(|a| (r.severity, a))).collect();
    let max_s = rows.iter().filter(|r| r.kind == kind).map(|r| r.severity).max().unwrap_or(0).max(1) as f64;
    let x = |s: f64| L + (W - L - R) * s / max_s;
    let y = |a: f64| T + (H - T - B) * (1.0 - a);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">pixel AUC vs {} severity</text>"#, W / 2.0, kind.name());
    let _ = writeln!(svg, r#"<line x1="{L}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, y(0.0), x(max_s), y(0.0));
    let _ = writeln!(svg, r#"<line x1="{L}" y1="{}" x2="{L}" y2="{}" stroke="black"/>"#, y(0.0), y(1.0));
    for i in 0..=4 {
        let a = i as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{a:.2}</text>"#, L - 6.0, y(a) + 4.0);
    }
    for s in 0..=max_s as u8 {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{s}</text>"#, x(s as f64), y(0.0) + 16.0);
    }
    if !pts.is_empty() {
        let path: Vec<String> = pts.iter().map(|&(s, a)| format!("{:.2},{:.2}", x(s as f64), y(a))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, path.join(" "));
        for &(s, a) in &pts {
            let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#, x(s as f64), y(a));
        }
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">severity s: {}</text>"#, W / 2.0, H - 16.0, escape(kind.formula()));
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Serialize)]
struct FormulaEntry {
    kind: PerturbationKind,
    formula: &'static str,
}

/// Writes `sweep.csv`, one `chart_<kind>.svg` per kind and
/// `perturbations.json` with the severity definitions.
pub fn write_outputs(rows: &[SweepRow], kinds: &[PerturbationKind], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = vec![out_dir.join("sweep.csv")];
    write_csv(rows, &written[0])?;
    for &kind in kinds {
        let path = out_dir.join(format!("chart_{}.svg", kind.name()));
        std::fs::write(&path, chart_svg(kind, rows)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    let formulas: Vec<FormulaEntry> = kinds.iter().map(|&kind| FormulaEntry { kind, formula: kind.formula() }).collect();
    let path = out_dir.join("perturbations.json");
    write_json(&formulas, &path)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Detection;
    use prx_core::image::{Label, Mask, RgbImage};

    /// Scores pixels by red intensity.
    struct Redness;

    impl Detector for Redness {
        fn detect(&self, image: &RgbImage, _: Option<&Path>) -> Result<Detection> {
            Ok(Detection {
                logits: [0.0, 1.0],
                probabilities: image.plane(0).to_vec(),
                height: image.height(),
                width: image.width(),
            })
        }
    }

    fn samples() -> Vec<LoadedSample> {
        (0..3)
            .map(|i| {
                let mut image = RgbImage::filled(16, 16, [0.2, 0.3, 0.4]).unwrap();
                let mut mask = Mask::empty(16, 16);
                for y in 4..10 {
                    for x in 2..8 + i {
                        image.set(0, y, x, 0.25);
                        mask.set(y, x, true);
                    }
                }
                LoadedSample { id: i.to_string(), image_path: PathBuf::new(), image, mask, label: Label::Manipulated }
            })
            .collect()
    }

    #[test]
    fn missing_codec_is_reported_before_work() {
        let kinds = [PerturbationKind::Dither, PerturbationKind::Jpeg2000];
        match sweep(&Redness, &[], &kinds, &[1], 0, None) {
            Err(Error::Unsupported(k)) => assert_eq!(k, vec!["jpeg2000".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn severity_zero_matches_clean_auc() {
        let rows = sweep(&Redness, &samples(), &[PerturbationKind::PinkNoise], &[0, 5], 9, None).unwrap();
        assert_eq!(rows[0].auc, Some(1.0));
        assert!(rows[1].auc.unwrap() < 1.0);
        let again = sweep(&Redness, &samples(), &[PerturbationKind::PinkNoise], &[0, 5], 9, None).unwrap();
        assert_eq!(rows, again);
    }

    #[test]
    fn outputs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let kinds = [PerturbationKind::Darken];
        let rows = sweep(&Redness, &samples(), &kinds, &[0, 1, 2], 0, None).unwrap();
        let files = write_outputs(&rows, &kinds, dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        let csv = std::fs::read_to_string(&files[0]).unwrap();
        assert!(csv.starts_with("kind,severity,auc\ndarken,0,1"), "{csv}");
        let svg = std::fs::read_to_string(&files[1]).unwrap();
        assert!(svg.contains("polyline") && svg.contains("x * (1 - 0.12 s)"));
    }
}

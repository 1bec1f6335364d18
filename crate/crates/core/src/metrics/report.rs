//! CSV report files.
//!
//! A report directory holds `categorical.csv` (CSI per threshold and variant
//! by lead time), `continuous.csv` (RMSE and MAE per variant), `contingency.csv`
//! (the pooled counts behind every cell) and `meta.csv` (sample count,
//! aggregation and config fingerprint).

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ContingencyTable, CsiAgg, MetricsReport, FRAME_MINUTES};
use crate::error::{Error, Result};

pub const CATEGORICAL_CSV: &str = "categorical.csv";
pub const CONTINUOUS_CSV: &str = "continuous.csv";
pub const CONTINGENCY_CSV: &str = "contingency.csv";
pub const META_CSV: &str = "meta.csv";
pub const COMPARISON_CSV: &str = "comparison.csv";

const NA: &str = "NA";

/// `0.1`, `1.0`, `4.0`: shortest round-trip form with at least one decimal.
fn fmt_threshold(t: f64) -> String {
    let s = format!("{t}");
    if s.contains(['.', 'e', 'E']) || !t.is_finite() {
        s
    } else {
        format!("{s}.0")
    }
}

fn fmt_score(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |x| format!("{x:.6}"))
}

fn lead_minutes(frame: usize) -> i64 {
    frame as i64 * FRAME_MINUTES
}

fn check_compatible(reports: &[MetricsReport]) -> Result<&MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidArgument("no reports to write".into()))?;
    for r in reports {
        if r.thresholds != first.thresholds || r.lead_frames != first.lead_frames {
            return Err(Error::InvalidArgument(
                "reports disagree on thresholds or lead frames".into(),
            ));
        }
        if r.variant.is_empty() || r.variant.contains([',', '"', '\n']) {
            return Err(Error::InvalidArgument(format!(
                "unusable variant label `{}`",
                r.variant
            )));
        }
    }
    Ok(first)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(Error::at(path))?;
    f.write_all(body.as_bytes()).map_err(Error::at(path))
}

/// Writes one row per threshold × variant, thresholds outermost.
pub fn write_report(dir: &Path, reports: &[MetricsReport]) -> Result<()> {
    let first = check_compatible(reports)?;
    fs::create_dir_all(dir).map_err(Error::at(dir))?;

    let mut cat = String::from("threshold,variant");
    for &l in &first.lead_frames {
        cat += &format!(",csi_t{}", lead_minutes(l));
    }
    cat.push('\n');
    for (i, &tau) in first.thresholds.iter().enumerate() {
        for r in reports {
            cat += &format!("{},{}", fmt_threshold(tau), r.variant);
            for v in &r.csi[i] {
                cat += &format!(",{}", fmt_score(*v));
            }
            cat.push('\n');
        }
    }

    let mut cont = String::from("variant,rmse,mae\n");
    let mut counts = String::from("variant,threshold,lead_minutes,tp,fp,fn,tn\n");
    let mut meta = String::from("variant,samples,aggregation,fingerprint\n");
    for r in reports {
        cont += &format!("{},{:.6},{:.6}\n", r.variant, r.rmse, r.mae);
        meta += &format!("{},{},{},{}\n", r.variant, r.samples, r.agg, r.fingerprint);
        for (i, &tau) in r.thresholds.iter().enumerate() {
            for (j, &l) in r.lead_frames.iter().enumerate() {
                let t = r.tables[i][j];
                counts += &format!(
                    "{},{},{},{},{},{},{}\n",
                    r.variant,
                    fmt_threshold(tau),
                    lead_minutes(l),
                    t.tp,
                    t.fp,
                    t.fn_,
                    t.tn
                );
            }
        }
    }

    write_file(&dir.join(CATEGORICAL_CSV), &cat)?;
    write_file(&dir.join(CONTINUOUS_CSV), &cont)?;
    write_file(&dir.join(CONTINGENCY_CSV), &counts)?;
    write_file(&dir.join(META_CSV), &meta)
}

/// One row per variant, one column per threshold × lead time.
pub fn write_comparison(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let first = check_compatible(reports)?;
    let mut out = String::from("variant");
    for &tau in &first.thresholds {
        for &l in &first.lead_frames {
            out += &format!(",csi_tau{}_t{}", fmt_threshold(tau), lead_minutes(l));
        }
    }
    out.push('\n');
    for r in reports {
        out += &r.variant;
        for row in &r.csi {
            for v in row {
                out += &format!(",{}", fmt_score(*v));
            }
        }
        out.push('\n');
    }
    write_file(path, &out)
}

fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(Error::at(path))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("report", format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect::<Vec<_>>();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>())
        .collect::<Vec<_>>();
    for (k, r) in rows.iter().enumerate() {
        if r.len() != header.len() {
            return Err(Error::format(
                "report",
                format!(
                    "{} row {}: {} fields, expected {}",
                    path.display(),
                    k + 2,
                    r.len(),
                    header.len()
                ),
            ));
        }
    }
    Ok((header, rows))
}

fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::format("report", format!("bad {what} `{s}`")))
}

fn score(s: &str) -> Result<Option<f64>> {
    if s == NA {
        Ok(None)
    } else {
        num(s, "score").map(Some)
    }
}

/// Parses a directory written by [`write_report`]. Scores carry six decimals.
pub fn read_report(dir: &Path) -> Result<Vec<MetricsReport>> {
    let (meta_h, meta) = read_rows(&dir.join(META_CSV))?;
    if meta_h != ["variant", "samples", "aggregation", "fingerprint"] {
        return Err(Error::format("report", "unexpected meta.csv header"));
    }
    let (cat_h, cat) = read_rows(&dir.join(CATEGORICAL_CSV))?;
    if cat_h.len() < 3 || cat_h[0] != "threshold" || cat_h[1] != "variant" {
        return Err(Error::format("report", "unexpected categorical.csv header"));
    }
    let lead_frames = cat_h[2..]
        .iter()
        .map(|c| {
            let mins: i64 = c
                .strip_prefix("csi_t")
                .ok_or_else(|| Error::format("report", format!("bad lead column `{c}`")))
                .and_then(|m| num(m, "lead"))?;
            if mins <= 0 || mins % FRAME_MINUTES != 0 {
                return Err(Error::format(
                    "report",
                    format!("lead {mins} min is not a whole frame"),
                ));
            }
            Ok((mins / FRAME_MINUTES) as usize)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut thresholds: Vec<f64> = Vec::new();
    for row in &cat {
        let t: f64 = num(&row[0], "threshold")?;
        if !thresholds.contains(&t) {
            thresholds.push(t);
        }
    }

    let mut reports: Vec<MetricsReport> = meta
        .iter()
        .map(|m| {
            Ok(MetricsReport {
                variant: m[0].clone(),
                samples: num(&m[1], "sample count")?,
                agg: m[2].parse::<CsiAgg>()?,
                fingerprint: m[3].clone(),
                thresholds: thresholds.clone(),
                lead_frames: lead_frames.clone(),
                tables: vec![
                    vec![ContingencyTable::default(); lead_frames.len()];
                    thresholds.len()
                ],
                csi: vec![vec![None; lead_frames.len()]; thresholds.len()],
                mae: f64::NAN,
                rmse: f64::NAN,
            })
        })
        .collect::<Result<_>>()?;
    let find = |reports: &[MetricsReport], v: &str| {
        reports
            .iter()
            .position(|r| r.variant == v)
            .ok_or_else(|| Error::format("report", format!("variant `{v}` missing from meta.csv")))
    };

    if cat.len() != thresholds.len() * reports.len() {
        return Err(Error::format(
            "report",
            "categorical.csv row count disagrees with meta.csv",
        ));
    }
    for row in &cat {
        let t: f64 = num(&row[0], "threshold")?;
        let i = thresholds
            .iter()
            .position(|&x| x == t)
            .expect("threshold collected above");
        let k = find(&reports, &row[1])?;
        reports[k].csi[i] = row[2..].iter().map(|s| score(s)).collect::<Result<_>>()?;
    }

    let (cont_h, cont) = read_rows(&dir.join(CONTINUOUS_CSV))?;
    if cont_h != ["variant", "rmse", "mae"] {
        return Err(Error::format("report", "unexpected continuous.csv header"));
    }
    for row in &cont {
        let k = find(&reports, &row[0])?;
        reports[k].rmse = num(&row[1], "rmse")?;
        reports[k].mae = num(&row[2], "mae")?;
    }

    let (cnt_h, cnt) = read_rows(&dir.join(CONTINGENCY_CSV))?;
    if cnt_h
        != [
            "variant",
            "threshold",
            "lead_minutes",
            "tp",
            "fp",
            "fn",
            "tn",
        ]
    {
        return Err(Error::format("report", "unexpected contingency.csv header"));
    }
    for row in &cnt {
        let k = find(&reports, &row[0])?;
        let t: f64 = num(&row[1], "threshold")?;
        let mins: i64 = num(&row[2], "lead")?;
        let i = thresholds.iter().position(|&x| x == t);
        let j = lead_frames.iter().position(|&l| lead_minutes(l) == mins);
        let (Some(i), Some(j)) = (i, j) else {
            return Err(Error::format(
                "report",
                format!("contingency cell ({t}, {mins}) not in categorical.csv"),
            ));
        };
        reports[k].tables[i][j] = ContingencyTable {
            tp: num(&row[3], "count")?,
            fp: num(&row[4], "count")?,
            fn_: num(&row[5], "count")?,
            tn: num(&row[6], "count")?,
        };
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Grid;
    use crate::metrics::{evaluate, EvalSpec};

    fn report(variant: &str, shift: f64) -> MetricsReport {
        let truth: Vec<Grid> = (0..12)
            .map(|k| Grid::from_fn(6, |r, c| ((r * 6 + c + k) % 7) as f64))
            .collect();
        let pred: Vec<Grid> = truth
            .iter()
            .map(|g| g.map(|v| (v - shift).max(0.0)))
            .collect();
        let mut r = evaluate(&[pred], &[truth], &EvalSpec::default()).unwrap();
        r.variant = variant.into();
        r.fingerprint = "abc123".into();
        r
    }

    #[test]
    fn layout_and_na() {
        let dir = tempfile::tempdir().unwrap();
        let mut dry = report("no_pwv", 0.0);
        dry.csi[2][3] = None;
        write_report(dir.path(), &[report("full", 0.5), dry]).unwrap();
        let text = fs::read_to_string(dir.path().join(CATEGORICAL_CSV)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "threshold,variant,csi_t10,csi_t40,csi_t80,csi_t120"
        );
        assert_eq!(lines.len(), 7);
        assert!(lines[1].starts_with("0.1,full,"));
        assert!(lines[4].starts_with("1.0,no_pwv,"));
        assert!(lines[6].starts_with("4.0,no_pwv,") && lines[6].ends_with(",NA"));
        let cont = fs::read_to_string(dir.path().join(CONTINUOUS_CSV)).unwrap();
        assert!(cont.starts_with("variant,rmse,mae\nfull,"));
    }

    #[test]
    fn round_trip_keeps_counts_and_rounded_scores() {
        let dir = tempfile::tempdir().unwrap();
        let written = vec![report("full", 0.5), report("no_prior", 1.5)];
        write_report(dir.path(), &written).unwrap();
        let read = read_report(dir.path()).unwrap();
        for (w, r) in written.iter().zip(&read) {
            assert_eq!(w.tables, r.tables);
            assert_eq!(
                (w.samples, &w.fingerprint, w.agg),
                (r.samples, &r.fingerprint, r.agg)
            );
            assert!((w.mae - r.mae).abs() <= 5e-7);
            for (a, b) in w.csi.iter().flatten().zip(r.csi.iter().flatten()) {
                assert!((a.unwrap() - b.unwrap()).abs() <= 5e-7);
            }
        }
        let again = tempfile::tempdir().unwrap();
        write_report(again.path(), &read).unwrap();
        for f in [CATEGORICAL_CSV, CONTINUOUS_CSV, CONTINGENCY_CSV, META_CSV] {
            assert_eq!(
                fs::read(dir.path().join(f)).unwrap(),
                fs::read(again.path().join(f)).unwrap()
            );
        }
    }

    #[test]
    fn comparison_has_one_row_per_variant() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(COMPARISON_CSV);
        write_comparison(&path, &[report("a", 0.0), report("b", 1.0)]).unwrap();
        let text = fs::read_to_string(path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].split(',').count(), 13);
        assert!(lines[0].contains("csi_tau4.0_t120"));
    }
}

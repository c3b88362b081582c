use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::stats::{welch_t_test, WelchResult};
use crate::error::{Error, Result};

/// Files scanned for final metric values; each holds one seed.
pub const METRIC_FILES: [&str; 2] = ["log.csv", "eval.csv"];

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub welch: WelchResult,
}

fn find_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_files(&p, out)?;
        } else if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| METRIC_FILES.contains(&n)) {
            out.push(p);
        }
    }
    Ok(())
}

/// Last non-empty value of `metric` in a CSV file, or `None` when the
/// column is absent.
fn last_value(path: &Path, metric: &str) -> Result<Option<f64>> {
    let mut rd = csv::Reader::from_path(path)?;
    let Some(col) = rd.headers()?.iter().position(|h| h == metric) else {
        return Ok(None);
    };
    let mut last = None;
    for rec in rd.records() {
        let rec = rec?;
        let cell = rec.get(col).unwrap_or("");
        if !cell.is_empty() {
            last = Some(cell.parse().map_err(|_| Error::Data(format!("bad `{metric}` value `{cell}` in {path:?}")))?);
        }
    }
    Ok(Some(last.ok_or_else(|| Error::Data(format!("`{metric}` has no values in {path:?}")))?))
}

/// Final `metric` of every seed found below `dir`.
pub fn collect_metric(dir: &Path, metric: &str) -> Result<Vec<f64>> {
    let mut files = Vec::new();
    find_files(dir, &mut files)?;
    let mut values = Vec::new();
    for f in files {
        if let Some(v) = last_value(&f, metric)? {
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(Error::Data(format!("no run file under {dir:?} has a `{metric}` column")));
    }
    Ok(values)
}

/// One-sided Welch comparisons of every ordered pair of run sets.
pub fn compare(sets: &[(String, Vec<f64>)]) -> Result<Vec<Comparison>> {
    if sets.len() < 2 {
        return Err(Error::config("compare needs at least two run sets"));
    }
    let mut out = Vec::new();
    for (i, (a, va)) in sets.iter().enumerate() {
        for (j, (b, vb)) in sets.iter().enumerate() {
            if i == j {
                continue;
            }
            let welch = welch_t_test(va, vb)?;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            out.push(Comparison {
                a: a.clone(),
                b: b.clone(),
                n_a: va.len(),
                n_b: vb.len(),
                mean_a: mean(va),
                mean_b: mean(vb),
                welch,
            });
        }
    }
    Ok(out)
}

pub fn compare_dirs(dirs: &[PathBuf], metric: &str) -> Result<Vec<Comparison>> {
    let sets = dirs
        .iter()
        .map(|d| Ok((d.display().to_string(), collect_metric(d, metric)?)))
        .collect::<Result<Vec<_>>>()?;
    compare(&sets)
}

/// Plain-text table with a confidence statement per pair.
pub fn render_table(rows: &[Comparison], metric: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "metric: {metric}");
    let _ = writeln!(
        s,
        "{:<28} {:<28} {:>4} {:>4} {:>12} {:>12} {:>9} {:>8} {:>9}",
        "a", "b", "n_a", "n_b", "mean_a", "mean_b", "t", "df", "p"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<28} {:<28} {:>4} {:>4} {:>12.4} {:>12.4} {:>9.4} {:>8.3} {:>9.6}",
            r.a, r.b, r.n_a, r.n_b, r.mean_a, r.mean_b, r.welch.t, r.welch.df, r.welch.p
        );
    }
    for r in rows {
        let _ = writeln!(
            s,
            "{} outperforms {} with a {:.1}% confidence level",
            r.a,
            r.b,
            100.0 * (1.0 - r.welch.p)
        );
    }
    s
}

pub fn write_csv<W: Write>(out: W, rows: &[Comparison]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["a", "b", "n_a", "n_b", "mean_a", "mean_b", "t", "df", "p", "confidence"])?;
    for r in rows {
        w.write_record([
            r.a.clone(),
            r.b.clone(),
            r.n_a.to_string(),
            r.n_b.to_string(),
            r.mean_a.to_string(),
            r.mean_b.to_string(),
            r.welch.t.to_string(),
            r.welch.df.to_string(),
            r.welch.p.to_string(),
            (1.0 - r.welch.p).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_run(dir: &Path, seed: usize, final_avg: f64) {
        let d = dir.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&d).unwrap();
        std::fs::write(
            d.join("log.csv"),
            format!("kind,avg_return_100\npretrain,\nepisode,-999\nepisode,{final_avg}\npretrain,\n"),
        )
        .unwrap();
    }

    #[test]
    fn self_comparison_is_even() {
        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("a");
        for (i, v) in [-200.0, -180.0, -220.0].into_iter().enumerate() {
            write_run(&a, i, v);
        }
        let rows = compare_dirs(&[a.clone(), a.clone()], "avg_return_100").unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.welch.p == 0.5 && r.n_a == 3));
        assert_eq!(rows[0].mean_a, -200.0);
        let table = render_table(&rows, "avg_return_100");
        assert!(table.contains("with a 50.0% confidence level"));
    }

    #[test]
    fn separated_sets_are_significant() {
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        for (i, v) in [-150.0, -160.0, -140.0, -155.0, -148.0].into_iter().enumerate() {
            write_run(&a, i, v);
        }
        for (i, v) in [-400.0, -380.0, -420.0, -395.0, -410.0].into_iter().enumerate() {
            write_run(&b, i, v);
        }
        let rows = compare_dirs(&[a, b], "avg_return_100").unwrap();
        assert!(rows[0].welch.p < 0.01 && rows[1].welch.p > 0.99);
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }

    #[test]
    fn missing_metric_is_data_error() {
        let tmp = tempfile::tempdir().unwrap();
        write_run(tmp.path(), 0, 1.0);
        write_run(tmp.path(), 1, 2.0);
        let err = collect_metric(tmp.path(), "success_rate").unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}

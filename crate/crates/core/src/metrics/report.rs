use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{psnr, ssim, uiqm, MetricError};
use crate::datakit::{list_images, DataError, ImageRgb8};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    /// UIQM of the generated image.
    pub uiqm: f64,
}

/// Per-image scores with their arithmetic means. Names present on only one
/// side are listed in `unmatched` and take no part in the means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub unmatched: Vec<String>,
    /// `None` when no pair was evaluated.
    pub means: Option<MetricRow>,
    pub scale: Option<usize>,
}

impl MetricReport {
    pub fn from_rows(mut rows: Vec<MetricRow>, unmatched: Vec<String>, scale: Option<usize>) -> Self {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let means = (!rows.is_empty()).then(|| {
            let n = rows.len() as f64;
            MetricRow {
                id: "mean".into(),
                psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
                ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
                uiqm: rows.iter().map(|r| r.uiqm).sum::<f64>() / n,
            }
        });
        MetricReport {
            rows,
            unmatched,
            means,
            scale,
        }
    }

    /// True when every input was paired and at least one pair was scored.
    pub fn is_complete(&self) -> bool {
        self.unmatched.is_empty() && self.means.is_some()
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if let Some(s) = self.scale {
            let _ = writeln!(out, "scale {s}x");
        }
        let width = self.rows.iter().map(|r| r.id.len()).max().unwrap_or(0).max(4);
        let _ = writeln!(out, "{:<width$}  {:>9}  {:>7}  {:>7}", "id", "psnr_db", "ssim", "uiqm");
        for r in self.rows.iter().chain(&self.means) {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9.4}  {:>7.4}  {:>7.4}",
                r.id, r.psnr, r.ssim, r.uiqm
            );
        }
        if self.means.is_none() {
            let _ = writeln!(out, "no matched pairs; no aggregate");
        }
        for u in &self.unmatched {
            let _ = writeln!(out, "unmatched: {u}");
        }
        out
    }

    /// Comma-delimited rows with header `id,psnr,ssim,uiqm`; means are not included.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr,ssim,uiqm\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.id, r.psnr, r.ssim, r.uiqm);
        }
        out
    }

    /// Writes the table to `path` and the CSV next to it (`<path>.csv`).
    /// Returns both paths.
    pub fn write_files(&self, path: impl AsRef<Path>) -> Result<(PathBuf, PathBuf), MetricError> {
        let table = path.as_ref().to_path_buf();
        let mut csv = table.clone().into_os_string();
        csv.push(".csv");
        let csv = PathBuf::from(csv);
        if let Some(dir) = table.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
        }
        fs::write(&table, self.to_table()).map_err(|e| DataError::io(&table, e))?;
        fs::write(&csv, self.to_csv()).map_err(|e| DataError::io(&csv, e))?;
        Ok((table, csv))
    }
}

/// Scores `(id, generated, truth)` triples concurrently.
pub fn evaluate_pairs(
    pairs: &[(String, ImageRgb8, ImageRgb8)],
    scale: Option<usize>,
) -> Result<MetricReport, MetricError> {
    let rows = pairs
        .par_iter()
        .map(|(id, generated, truth)| score(id, generated, truth))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MetricReport::from_rows(rows, Vec::new(), scale))
}

fn score(id: &str, generated: &ImageRgb8, truth: &ImageRgb8) -> Result<MetricRow, MetricError> {
    let ctx = |e: MetricError| MetricError::Contract(format!("{id}: {e}"));
    Ok(MetricRow {
        id: id.to_string(),
        psnr: psnr(generated, truth).map_err(ctx)?,
        ssim: ssim(generated, truth).map_err(ctx)?,
        uiqm: uiqm(generated).map_err(ctx)?.uiqm,
    })
}

fn by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>, MetricError> {
    let mut out = BTreeMap::new();
    for path in list_images(dir)? {
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Pairs images by file stem and scores each pair.
pub fn evaluate_dataset(
    generated_dir: impl AsRef<Path>,
    truth_dir: impl AsRef<Path>,
) -> Result<MetricReport, MetricError> {
    let generated = by_stem(generated_dir.as_ref())?;
    let truth = by_stem(truth_dir.as_ref())?;
    let mut unmatched: Vec<String> = generated
        .iter()
        .filter(|(k, _)| !truth.contains_key(*k))
        .chain(truth.iter().filter(|(k, _)| !generated.contains_key(*k)))
        .map(|(_, p)| p.display().to_string())
        .collect();
    unmatched.sort();
    let matched: Vec<(&String, &PathBuf, &PathBuf)> = generated
        .iter()
        .filter_map(|(k, g)| truth.get(k).map(|t| (k, g, t)))
        .collect();
    let rows = matched
        .par_iter()
        .map(|(id, g, t)| score(id, &ImageRgb8::load(g)?, &ImageRgb8::load(t)?))
        .collect::<Result<Vec<_>, MetricError>>()?;
    Ok(MetricReport::from_rows(rows, unmatched, None))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u8) -> ImageRgb8 {
        ImageRgb8::from_fn(24, 16, |x, y| {
            [(x * 10) as u8 ^ seed, (y * 15) as u8, ((x + y) * 7) as u8 ^ seed]
        })
    }

    #[test]
    fn self_evaluation_hits_the_cap() {
        let dir = tempfile::tempdir().unwrap();
        for (i, name) in ["b", "a", "c"].iter().enumerate() {
            image(i as u8 * 40)
                .save(dir.path().join(format!("{name}.png")))
                .unwrap();
        }
        let r = evaluate_dataset(dir.path(), dir.path()).unwrap();
        let ids: Vec<&str> = r.rows.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        let m = r.means.as_ref().unwrap();
        assert_eq!((m.psnr, m.ssim), (100.0, 1.0));
        assert!(r.is_complete());
    }

    #[test]
    fn unmatched_names_are_reported_and_excluded() {
        let gen = tempfile::tempdir().unwrap();
        let truth = tempfile::tempdir().unwrap();
        image(0).save(gen.path().join("x.png")).unwrap();
        image(9).save(truth.path().join("x.png")).unwrap();
        image(1).save(gen.path().join("only_gen.png")).unwrap();
        image(2).save(truth.path().join("only_truth.png")).unwrap();
        let r = evaluate_dataset(gen.path(), truth.path()).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.unmatched.len(), 2);
        assert!(!r.is_complete());

        let empty = tempfile::tempdir().unwrap();
        image(3).save(empty.path().join("y.png")).unwrap();
        let r = evaluate_dataset(empty.path(), truth.path()).unwrap();
        assert!(r.means.is_none());
        assert!(r.to_table().contains("no aggregate"));
    }

    #[test]
    fn means_match_rows_and_files_are_written() {
        let pairs: Vec<_> = (0..4u8)
            .map(|i| (format!("p{i}"), image(i * 3), image(i * 3 + 1)))
            .collect();
        let r = evaluate_pairs(&pairs, Some(4)).unwrap();
        let m = r.means.clone().unwrap();
        let n = r.rows.len() as f64;
        assert!((m.psnr - r.rows.iter().map(|r| r.psnr).sum::<f64>() / n).abs() < 1e-12);
        assert!((m.uiqm - r.rows.iter().map(|r| r.uiqm).sum::<f64>() / n).abs() < 1e-12);

        let dir = tempfile::tempdir().unwrap();
        let (table, csv) = r.write_files(dir.path().join("report.txt")).unwrap();
        let text = fs::read_to_string(csv).unwrap();
        assert!(text.starts_with("id,psnr,ssim,uiqm\n"));
        assert_eq!(text.lines().count(), 5);
        assert!(fs::read_to_string(table).unwrap().starts_with("scale 4x"));
    }
}

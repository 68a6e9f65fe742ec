//! Batch inference, synthetic rain over directories, and per-image metrics.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::dataset::rain_for;
use crate::data::image_io::list_images;
use crate::data::{load_image, save_image, RainParams};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim};
use crate::model::Derainer;

/// One CSV row; the aggregate row uses the file name `mean`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub filename: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Scores every PNG in `restored` against the same-named file in `clean`.
pub fn evaluate_dirs(clean: &Path, restored: &Path) -> Result<Vec<MetricRow>> {
    let files = list_images(restored)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("no PNG files in {}", restored.display())));
    }
    files
        .iter()
        .map(|path| {
            let name = file_name(path);
            let reference = clean.join(&name);
            if !reference.exists() {
                return Err(Error::Dataset(format!("{name} has no counterpart in {}", clean.display())));
            }
            let (x, y) = (load_image(path)?, load_image(&reference)?);
            Ok(MetricRow { filename: name, psnr_db: psnr(&x, &y, 1.0)?, ssim: ssim(&x, &y, 1.0)? })
        })
        .collect()
}

pub fn mean_row(rows: &[MetricRow]) -> MetricRow {
    let n = rows.len().max(1) as f64;
    MetricRow {
        filename: "mean".into(),
        psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    }
}

/// Writes `filename,psnr_db,ssim`, one row per image, then the mean row.
pub fn write_csv<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows.iter().cloned().chain([mean_row(rows)]) {
        w.serialize(row).map_err(|e| Error::Dataset(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io(Path::new("<csv>"), e))
}

/// A single PNG, or every PNG in a directory.
fn inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        list_images(input)
    } else if input.is_file() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(Error::io(input, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory")))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the stage-two restoration of each input under `out_dir`, keeping
/// file names.
pub fn derain_path(model: &Derainer<f32>, input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out_dir)?;
    inputs(input)?
        .iter()
        .map(|path| {
            let img = load_image(path)?;
            let &[c, h, w] = img.shape() else { unreachable!("load_image returns [3, H, W]") };
            let restored = model.derain(&img.reshape([1, c, h, w])?)?;
            let dest = out_dir.join(file_name(path));
            save_image(&restored, &dest)?;
            Ok(dest)
        })
        .collect()
}

/// Writes a rainy counterpart of every clean PNG; the `i`-th file in name
/// order draws its streaks from stream `(rain.seed, i)`.
pub fn synth_dir(clean: &Path, out_dir: &Path, rain: &RainParams) -> Result<Vec<PathBuf>> {
    rain.validate()?;
    create_dir(out_dir)?;
    inputs(clean)?
        .iter()
        .enumerate()
        .map(|(i, path)| {
            let rainy = rain_for(&load_image(path)?, rain, i as u64)?;
            let dest = out_dir.join(file_name(path));
            save_image(&rainy, &dest)?;
            Ok(dest)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let rows = vec![
            MetricRow { filename: "a.png".into(), psnr_db: 30.0, ssim: 0.5 },
            MetricRow { filename: "b.png".into(), psnr_db: 20.0, ssim: 1.0 },
        ];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "filename,psnr_db,ssim\na.png,30.0,0.5\nb.png,20.0,1.0\nmean,25.0,0.75\n");
    }
}

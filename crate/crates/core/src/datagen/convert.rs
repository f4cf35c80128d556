use super::{density_from_heads, Sample, DENSITY_SCALE};
use crate::error::{BtnError, Result};
use crate::numerics::Tensor;
use image::{DynamicImage, ImageFormat, ImageReader};
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            BtnError::MissingFile(path.into())
        } else {
            BtnError::io(path, e)
        }
    })
}

fn malformed(path: &Path, reason: impl Into<String>) -> BtnError {
    BtnError::Malformed {
        what: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Head rows `row,col` (pixel indices, fractional allowed). A leading
/// non-numeric row is treated as a header.
fn read_heads(path: &Path, h: usize, w: usize) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(open(path)?);
    let mut heads = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| malformed(path, e.to_string()))?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != 2 {
            return Err(malformed(path, format!("row {i}: expected `row,col`, got {} fields", rec.len())));
        }
        let parsed = (rec[0].parse::<f64>(), rec[1].parse::<f64>());
        let (r, c) = match parsed {
            (Ok(r), Ok(c)) if r.is_finite() && c.is_finite() => (r, c),
            _ if i == 0 => continue,
            _ => return Err(malformed(path, format!("row {i}: non-numeric coordinate"))),
        };
        if r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
            return Err(BtnError::HeadOutOfBounds {
                row: i,
                r,
                c,
                height: h,
                width: w,
            });
        }
        heads.push((r + 0.5, c + 0.5));
    }
    Ok(heads)
}

/// Builds a sample from an 8-bit binary PGM and a head-coordinate CSV.
/// Pixel values are scaled to `[0, 1]`; the density uses the same kernel
/// as generated scenes.
pub fn convert_annotated(image_path: impl AsRef<Path>, heads_path: impl AsRef<Path>, gt_sigma: f64) -> Result<Sample<f64>> {
    let (image_path, heads_path) = (image_path.as_ref(), heads_path.as_ref());
    if !(gt_sigma.is_finite() && gt_sigma > 0.0) {
        return Err(BtnError::config("gt_sigma_px", "must be positive"));
    }
    let decoded = ImageReader::with_format(BufReader::new(open(image_path)?), ImageFormat::Pnm)
        .decode()
        .map_err(|e| malformed(image_path, e.to_string()))?;
    let gray = match decoded {
        DynamicImage::ImageLuma8(g) => g,
        other => return Err(malformed(image_path, format!("expected 8-bit grayscale, got {:?}", other.color()))),
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    if h % DENSITY_SCALE != 0 || w % DENSITY_SCALE != 0 || h == 0 || w == 0 {
        return Err(BtnError::Geometry(format!(
            "{h}x{w} image must be non-empty with sides divisible by {DENSITY_SCALE}"
        )));
    }
    let data = gray.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    let image = Tensor::new(vec![1, h, w], data)?;
    let heads = read_heads(heads_path, h, w)?;
    Ok(Sample {
        image,
        gt_density: density_from_heads(h, w, &heads, gt_sigma),
        true_count: heads.len(),
        head_positions: heads,
    })
}

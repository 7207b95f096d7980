//! Loading, normalization, replication, and splitting of 2D point-cloud CSVs.
//!
//! Input files are two-column comma-separated text, `.` decimal separator,
//! with an optional header row (detected by a non-numeric token). Coordinates
//! are normalized per axis to zero mean and unit population variance before
//! any training happens.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Point, Result};

/// A point cloud in its original data units.
#[derive(Debug, Clone)]
pub struct RawPointCloud {
    pub points: Vec<Point>,
    /// Dataset identifier, taken from the file stem on load.
    pub name: String,
}

/// Per-axis mean and population standard deviation, in original units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean_x: f64,
    pub mean_y: f64,
    pub std_x: f64,
    pub std_y: f64,
}

/// A normalized point cloud together with the statistics that produced it.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub stats: NormStats,
}

/// A replicated cloud split into disjoint train and test subsets.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: PointCloud,
    pub test: PointCloud,
    pub split_fraction: f64,
    pub seed: u64,
}

/// Read a two-column CSV into a raw cloud. A first row containing any
/// non-numeric token is treated as a header and skipped.
pub fn load_csv(path: &Path) -> Result<RawPointCloud> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());

    let mut points = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() {
            continue;
        }
        match parse_row(line) {
            Ok(p) => points.push(p),
            Err(msg) => {
                // Header rows are only permitted as the very first row.
                if line_no == 1 && points.is_empty() {
                    continue;
                }
                return Err(Error::parse(path, line_no, msg));
            }
        }
    }
    if points.is_empty() {
        return Err(Error::parse(path, 1, "no data rows"));
    }
    Ok(RawPointCloud { points, name })
}

fn parse_row(line: &str) -> std::result::Result<Point, String> {
    let mut fields = line.split(',');
    let x = fields.next().unwrap_or("").trim();
    let y = fields.next().ok_or_else(|| "expected two comma-separated columns".to_string())?.trim();
    if fields.next().is_some() {
        return Err("expected exactly two columns".to_string());
    }
    let x: f64 = x.parse().map_err(|_| format!("cannot parse '{x}' as a number"))?;
    let y: f64 = y.parse().map_err(|_| format!("cannot parse '{y}' as a number"))?;
    if !x.is_finite() || !y.is_finite() {
        return Err("non-finite coordinate".to_string());
    }
    Ok(Point::new(x, y))
}

/// Write points as a two-column CSV with an `x,y` header. Values carry 17
/// significant digits so a reload reproduces every coordinate bit-exactly.
pub fn write_csv(path: &Path, points: &[Point]) -> Result<()> {
    let mut out = String::from("x,y\n");
    for p in points {
        out.push_str(&format!("{:.16e},{:.16e}\n", p.x, p.y));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Normalize each coordinate to zero mean and unit variance, using the
/// population standard deviation (divide by N).
pub fn normalize(cloud: &RawPointCloud) -> Result<(PointCloud, NormStats)> {
    let n = cloud.points.len();
    if n == 0 {
        return Err(Error::DegenerateData("empty point cloud".to_string()));
    }
    let nf = n as f64;
    let mean_x = cloud.points.iter().map(|p| p.x).sum::<f64>() / nf;
    let mean_y = cloud.points.iter().map(|p| p.y).sum::<f64>() / nf;
    let var_x = cloud.points.iter().map(|p| (p.x - mean_x).powi(2)).sum::<f64>() / nf;
    let var_y = cloud.points.iter().map(|p| (p.y - mean_y).powi(2)).sum::<f64>() / nf;
    let (std_x, std_y) = (var_x.sqrt(), var_y.sqrt());
    if std_x == 0.0 || std_y == 0.0 {
        let axis = if std_x == 0.0 { "x" } else { "y" };
        return Err(Error::DegenerateData(format!("zero variance in {axis} coordinate")));
    }
    let stats = NormStats { mean_x, mean_y, std_x, std_y };
    let points = cloud
        .points
        .iter()
        .map(|p| Point::new((p.x - mean_x) / std_x, (p.y - mean_y) / std_y))
        .collect();
    Ok((PointCloud { points, stats }, stats))
}

/// Concatenate the cloud `copies` times, shuffle the replicated indices with a
/// seeded PRNG, and split at `floor(train_fraction * size)`. Both subsets keep
/// the shuffle order.
pub fn replicate_and_split(
    cloud: &PointCloud,
    copies: usize,
    train_fraction: f64,
    seed: u64,
) -> Result<DataSplit> {
    if copies < 1 {
        return Err(Error::InvalidArgument("copies must be at least 1".to_string()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction must lie strictly between 0 and 1, got {train_fraction}"
        )));
    }
    let base = cloud.points.len();
    let size = base * copies;
    let mut indices: Vec<usize> = (0..size).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);

    let cut = (train_fraction * size as f64).floor() as usize;
    let take = |ix: &[usize]| PointCloud {
        points: ix.iter().map(|&i| cloud.points[i % base]).collect(),
        stats: cloud.stats,
    };
    Ok(DataSplit {
        train: take(&indices[..cut]),
        test: take(&indices[cut..]),
        split_fraction: train_fraction,
        seed,
    })
}

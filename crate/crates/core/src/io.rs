//! File helpers shared by the CLI and dataset code.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Result, SagError};
use crate::guidance::PointSet;

/// Write `bytes` to a sibling temp file, then rename it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| SagError::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn csv_err(e: csv::Error) -> SagError {
    SagError::Parse(e.to_string())
}

/// Point sets are CSV files with the header `x,y`.
pub fn encode_points(points: &PointSet) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x", "y"]).map_err(csv_err)?;
    for &(x, y) in &points.points {
        w.write_record([x.to_string(), y.to_string()]).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| SagError::Io(e.into_error()))
}

pub fn decode_points(bytes: &[u8]) -> Result<PointSet> {
    let mut r = csv::Reader::from_reader(bytes);
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.len() != 2 || &headers[0] != "x" || &headers[1] != "y" {
        return Err(SagError::Parse(format!("point CSV header must be x,y, got {headers:?}")));
    }
    let mut points = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| SagError::Parse(format!("bad coordinate {s:?}")))
        };
        points.push((parse(&rec[0])?, parse(&rec[1])?));
    }
    Ok(PointSet { points })
}

/// Feature matrices are headerless CSV, one patch per row.
pub fn encode_features(features: &Array2<f64>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for row in features.rows() {
        w.write_record(row.iter().map(|v| format!("{v:e}"))).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| SagError::Io(e.into_error()))
}

pub fn decode_features(bytes: &[u8]) -> Result<Array2<f64>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(bytes);
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        if *cols.get_or_insert(rec.len()) != rec.len() {
            return Err(SagError::Parse("ragged feature CSV".into()));
        }
        for field in rec.iter() {
            data.push(
                field
                    .parse::<f64>()
                    .map_err(|_| SagError::Parse(format!("bad feature value {field:?}")))?,
            );
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols.unwrap_or(0)), data).map_err(|e| SagError::Parse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_roundtrip_and_header_check() {
        let ps = PointSet { points: vec![(1.5, 2.0), (0.0, 99.25)] };
        let bytes = encode_points(&ps).unwrap();
        assert!(bytes.starts_with(b"x,y\n"));
        assert_eq!(decode_points(&bytes).unwrap(), ps);
        assert!(decode_points(b"a,b\n1,2\n").is_err());
        assert!(decode_points(b"x,y\n1,nan\n").is_err());
    }

    #[test]
    fn features_roundtrip_bitwise() {
        let m = Array2::from_shape_fn((3, 2), |(i, j)| (i as f64 + 0.1) / (j as f64 + 3.0));
        let back = decode_features(&encode_features(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}

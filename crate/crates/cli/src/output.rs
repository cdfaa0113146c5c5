//! CSV logs and PGM/PPM images.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dense2moe_core::Tensor;

use crate::error::{CliError, Result};

/// Fixed float format: 17 significant digits, so identical values always
/// print identically and parse back exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// A CSV file written row by row.
pub struct CsvWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        w.raw(&header.join(","))?;
        Ok(w)
    }

    fn raw(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}").map_err(|e| CliError::io(&self.path, e))
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        self.raw(&fields.join(","))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

/// Reads a CSV column of floats written by [`CsvWriter`].
pub fn read_column(path: &Path, column: &str) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let idx = header
        .split(',')
        .position(|h| h == column)
        .ok_or_else(|| CliError::Config(format!("{}: no column {column}", path.display())))?;
    lines
        .map(|l| {
            l.split(',')
                .nth(idx)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CliError::Config(format!("{}: bad row {l:?}", path.display())))
        })
        .collect()
}

fn to_byte(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// Lays `[C, H, W]` images side by side, separated by one-pixel gaps.
pub fn grid(images: &[Tensor], columns: usize) -> Result<(usize, usize, usize, Vec<f64>)> {
    let first = images
        .first()
        .ok_or_else(|| CliError::Config("no images to lay out".into()))?;
    let [c, h, w] = [first.shape()[0], first.shape()[1], first.shape()[2]];
    let columns = columns.max(1).min(images.len());
    let rows = images.len().div_ceil(columns);
    let (gh, gw) = (rows * (h + 1) - 1, columns * (w + 1) - 1);
    let mut out = vec![-1.0; c * gh * gw];
    for (i, img) in images.iter().enumerate() {
        let (r0, c0) = ((i / columns) * (h + 1), (i % columns) * (w + 1));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * gh + r0 + y) * gw + c0 + x] = img.data()[(ch * h + y) * w + x];
                }
            }
        }
    }
    Ok((c, gh, gw, out))
}

/// Writes a `[C, H, W]` buffer in `[-1, 1]` as binary PPM (3 channels) or
/// PGM (1 channel; other channel counts use the first channel).
pub fn write_image(path: &Path, channels: usize, height: usize, width: usize, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::new();
    if channels == 3 {
        bytes.extend_from_slice(format!("P6\n{width} {height}\n255\n").as_bytes());
        for p in 0..height * width {
            for ch in 0..3 {
                bytes.push(to_byte(data[ch * height * width + p]));
            }
        }
    } else {
        bytes.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
        bytes.extend(data[..height * width].iter().map(|&v| to_byte(v)));
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Writes a map of small integer labels as PGM with evenly spread grey levels;
/// `None` is black.
pub fn write_label_map(path: &Path, height: usize, width: usize, labels: &[Option<usize>], n_labels: usize) -> Result<()> {
    let step = 255 / n_labels.max(1);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(labels.iter().map(|l| match l {
        Some(i) => (step * (i + 1)).min(255) as u8,
        None => 0,
    }));
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 123456.789, f64::MIN_POSITIVE] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
    }

    #[test]
    fn csv_column_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let mut w = CsvWriter::create(&p, &["step", "loss"]).unwrap();
        w.row(&["0".into(), fmt_f64(0.5)]).unwrap();
        w.row(&["1".into(), fmt_f64(0.25)]).unwrap();
        w.finish().unwrap();
        assert_eq!(read_column(&p, "loss").unwrap(), vec![0.5, 0.25]);
        assert!(read_column(&p, "nope").is_err());
    }

    #[test]
    fn grid_places_images() {
        let a = Tensor::full(&[1, 2, 2], 1.0);
        let b = Tensor::full(&[1, 2, 2], 0.0);
        let (c, h, w, data) = grid(&[a, b], 2).unwrap();
        assert_eq!((c, h, w), (1, 2, 5));
        assert_eq!(&data[..5], &[1.0, 1.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn image_headers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        write_image(&p, 3, 1, 2, &[-1.0, 1.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 128, 255, 255, 128, 255]);
    }
}

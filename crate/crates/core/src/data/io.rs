use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::{Dataset, ImageGeom};
use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Magic number of an unsigned-byte, three-dimensional IDX file (images).
pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
/// One label byte followed by a 32x32x3 channel-planar image.
pub const CIFAR_RECORD_BYTES: usize = 3073;

const CIFAR_GEOM: ImageGeom = ImageGeom {
    height: 32,
    width: 32,
    channels: 3,
};

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_err(path: &Path, message: String) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        message,
    }
}

/// Numeric CSV, one sample per line. Blank lines are ignored; with
/// `has_header` the first line is skipped.
pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| {
        parse_err(path, format!("invalid UTF-8 at byte {}", e.valid_up_to()))
    })?;
    parse_csv(text, has_header).map_err(|m| parse_err(path, m))
}

fn parse_csv(text: &str, has_header: bool) -> std::result::Result<Dataset, String> {
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;
    let mut offset = 0usize;
    for (line_no, raw) in text.split_inclusive('\n').enumerate() {
        let line_start = offset;
        offset += raw.len();
        if has_header && line_no == 0 {
            continue;
        }
        let line = raw.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        let mut count = 0;
        let mut cell_start = line_start;
        for cell in line.split(',') {
            let trimmed = cell.trim();
            let v: f64 = trimmed.parse().map_err(|_| {
                format!(
                    "non-numeric cell {trimmed:?} at line {}, byte offset {cell_start}",
                    line_no + 1
                )
            })?;
            if !v.is_finite() {
                return Err(format!(
                    "non-finite cell {trimmed:?} at line {}, byte offset {cell_start}",
                    line_no + 1
                ));
            }
            data.push(v);
            count += 1;
            cell_start += cell.len() + 1;
        }
        match cols {
            None => cols = Some(count),
            Some(c) if c != count => {
                return Err(format!(
                    "line {} (byte offset {line_start}) has {count} cells, expected {c}",
                    line_no + 1
                ))
            }
            _ => {}
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| "no data rows".to_string())?;
    let samples = Mat::from_vec(rows, cols, data).map_err(|e| e.to_string())?;
    Ok(Dataset::new(samples))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// IDX image file (e.g. MNIST). `n_take` limits the number of images read
/// from the front of the file.
pub fn load_idx(path: impl AsRef<Path>, n_take: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = read(path)?;
    parse_idx(&bytes, n_take).map_err(|m| parse_err(path, m))
}

fn parse_idx(bytes: &[u8], n_take: Option<usize>) -> std::result::Result<Dataset, String> {
    if bytes.len() < 16 {
        return Err(format!(
            "truncated header: {} bytes, need 16 at byte offset 0",
            bytes.len()
        ));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGE_MAGIC {
        return Err(format!(
            "bad magic at byte offset 0: expected {IDX_IMAGE_MAGIC:#010x}, found {magic:#010x}"
        ));
    }
    let count = be_u32(bytes, 4) as usize;
    let height = be_u32(bytes, 8) as usize;
    let width = be_u32(bytes, 12) as usize;
    let pixels = height * width;
    if pixels == 0 {
        return Err(format!("degenerate image shape {height}x{width}"));
    }
    let take = n_take.map_or(count, |n| n.min(count));
    let need = 16 + take * pixels;
    if bytes.len() < need {
        let complete = (bytes.len() - 16) / pixels;
        return Err(format!(
            "truncated file: image {complete} ends at byte offset {}, file has {} bytes",
            16 + (complete + 1) * pixels,
            bytes.len()
        ));
    }
    let data = bytes[16..need].iter().map(|&p| f64::from(p)).collect();
    let samples = Mat::from_vec(take, pixels, data).map_err(|e| e.to_string())?;
    Dataset::new(samples)
        .with_image_geom(ImageGeom {
            height,
            width,
            channels: 1,
        })
        .map_err(|e| e.to_string())
}

/// CIFAR-10 binary batches, concatenated in the given order. Labels are dropped.
pub fn load_cifar_bin<P: AsRef<Path> + Sync>(paths: &[P]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::Config("no CIFAR batch files given".into()));
    }
    let pixels = CIFAR_GEOM.pixels();
    let parts = paths
        .par_iter()
        .map(|p| {
            let path = p.as_ref();
            let bytes = read(path)?;
            if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
                let whole = bytes.len() / CIFAR_RECORD_BYTES;
                return Err(parse_err(
                    path,
                    format!(
                        "truncated record {whole} starting at byte offset {}: file has {} bytes, \
                         records are {CIFAR_RECORD_BYTES} bytes",
                        whole * CIFAR_RECORD_BYTES,
                        bytes.len()
                    ),
                ));
            }
            Ok(bytes
                .chunks_exact(CIFAR_RECORD_BYTES)
                .flat_map(|rec| rec[1..].iter().map(|&b| f64::from(b)))
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let data: Vec<f64> = parts.concat();
    let rows = data.len() / pixels;
    Dataset::new(Mat::from_vec(rows, pixels, data)?).with_image_geom(CIFAR_GEOM)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_bytes(magic: u32, count: u32, h: u32, w: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [magic, count, h, w] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn csv_two_by_two() {
        let ds = parse_csv("1,2\n3,4", false).unwrap();
        assert_eq!(ds.samples().row(0), &[1.0, 2.0]);
        assert_eq!(ds.samples().row(1), &[3.0, 4.0]);
        let ds = parse_csv("x,y\r\n1.5, -2\r\n\n", true).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.samples().row(0), &[1.5, -2.0]);
    }

    #[test]
    fn csv_reports_byte_offset() {
        let err = parse_csv("1,2\n3,abc\n", false).unwrap_err();
        assert!(err.contains("byte offset 6"), "{err}");
        let err = parse_csv("1,2\n3\n", false).unwrap_err();
        assert!(err.contains("has 1 cells"), "{err}");
    }

    #[test]
    fn idx_fixture_decodes_exactly() {
        // one 2x2 image: 0, 17, 128, 255
        let bytes = idx_bytes(0x803, 1, 2, 2, &[0x00, 0x11, 0x80, 0xff]);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        let ds = parse_idx(&bytes, None).unwrap();
        assert_eq!(ds.samples().row(0), &[0.0, 17.0, 128.0, 255.0]);
        assert_eq!(
            ds.image_geom(),
            Some(ImageGeom {
                height: 2,
                width: 2,
                channels: 1
            })
        );
    }

    #[test]
    fn idx_errors() {
        let err = parse_idx(&idx_bytes(0x801, 1, 2, 2, &[0; 4]), None).unwrap_err();
        assert!(err.contains("0x00000803") && err.contains("0x00000801"), "{err}");
        let err = parse_idx(&idx_bytes(0x803, 2, 2, 2, &[0; 6]), None).unwrap_err();
        assert!(err.contains("truncated"), "{err}");
        // taking only the complete prefix is fine
        assert_eq!(parse_idx(&idx_bytes(0x803, 2, 2, 2, &[0; 6]), Some(1)).unwrap().len(), 1);
        assert!(parse_idx(&[0, 0, 8], None).is_err());
    }

    #[test]
    fn cifar_drops_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let mut rec = vec![7u8];
        rec.extend((0..3072).map(|i| (i % 251) as u8));
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(&rec).unwrap();
        f.write_all(&rec).unwrap();
        drop(f);
        let ds = load_cifar_bin(&[&path]).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.n_dim(), 3072);
        assert_eq!(ds.samples()[(1, 0)], 0.0);
        assert_eq!(ds.samples()[(1, 300)], 49.0);

        fs::write(&path, &rec[..100]).unwrap();
        let err = load_cifar_bin(&[&path]).unwrap_err().to_string();
        assert!(err.contains("byte offset 0"), "{err}");
    }

    #[test]
    fn missing_file_is_io() {
        assert!(matches!(
            load_csv("/nonexistent/file.csv", false),
            Err(Error::Io { .. })
        ));
    }
}

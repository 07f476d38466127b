use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{contract, io_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rescales a map to `[0, 1]` by its own min and max; a flat map becomes zeros.
pub fn normalize_frame(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    // also catches NaN extrema
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn hot(v: f64) -> [f64; 3] {
    [
        (3.0 * v).min(1.0),
        (3.0 * v - 1.0).clamp(0.0, 1.0),
        (3.0 * v - 2.0).clamp(0.0, 1.0),
    ]
}

/// Saliency blended over a channel-planar RGB frame `[3, H, W]`.
pub fn heatmap_overlay(
    frame: &[u8],
    saliency: &[f64],
    height: usize,
    width: usize,
) -> Result<RgbImage> {
    let plane = height * width;
    contract!(
        frame.len() == 3 * plane,
        "frame has {} bytes for {height}x{width}",
        frame.len()
    );
    contract!(
        saliency.len() == plane,
        "saliency has {} pixels for {height}x{width}",
        saliency.len()
    );
    let norm = normalize_frame(saliency);
    let mut img = RgbImage::new(width as u32, height as u32);
    for (p, &v) in norm.iter().enumerate() {
        let alpha = 0.7 * v;
        let color = hot(v);
        let px: [u8; 3] = std::array::from_fn(|c| {
            let base = frame[c * plane + p] as f64;
            ((1.0 - alpha) * base + alpha * 255.0 * color[c]).round() as u8
        });
        img.put_pixel((p % width) as u32, (p / width) as u32, Rgb(px));
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a `[rows, cols]` matrix as headerless CSV.
pub fn write_matrix_csv<T: Scalar>(path: &Path, m: &Tensor<T>) -> Result<()> {
    contract!(
        m.shape().len() == 2,
        "expected a matrix, got {:?}",
        m.shape()
    );
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    for row in m.data().chunks(m.shape()[1]) {
        w.write_record(row.iter().map(|v| v.as_f64().to_string()))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Appends per-frame embeddings `[T, D]` as `sequence,frame,e0..` rows.
pub fn write_embeddings<T: Scalar, W: std::io::Write>(
    w: &mut csv::Writer<W>,
    sequence_id: &str,
    embeddings: &Tensor<T>,
) -> Result<()> {
    contract!(
        embeddings.shape().len() == 2,
        "expected [T, D], got {:?}",
        embeddings.shape()
    );
    for (t, row) in embeddings.data().chunks(embeddings.shape()[1]).enumerate() {
        let mut rec = vec![sequence_id.to_string(), t.to_string()];
        rec.extend(row.iter().map(|v| v.as_f64().to_string()));
        w.write_record(&rec)?;
    }
    Ok(())
}

pub fn embedding_header(dim: usize) -> Vec<String> {
    let mut h = vec!["sequence".to_string(), "frame".to_string()];
    h.extend((0..dim).map(|d| format!("e{d}")));
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_is_per_frame() {
        assert_eq!(normalize_frame(&[2.0, 4.0, 3.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(normalize_frame(&[1.0; 3]), vec![0.0; 3]);
    }

    #[test]
    fn overlay_keeps_cold_pixels() {
        let frame: Vec<u8> = (0..12).map(|i| i as u8 * 10).collect();
        let img = heatmap_overlay(&frame, &[0.0, 0.0, 0.0, 1.0], 2, 2).unwrap();
        assert_eq!(img.get_pixel(0, 0).0, [0, 40, 80]);
        // red: 0.3 * 30 + 0.7 * 255
        assert_eq!(img.get_pixel(1, 1).0[0], 188);
        assert!(heatmap_overlay(&frame, &[0.0; 3], 2, 2).is_err());
    }

    #[test]
    fn csv_exports() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        write_matrix_csv(&p, &Tensor::from_vec(&[2, 2], vec![0.0f64, 0.5, 0.5, 0.0])).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "0,0.5\n0.5,0\n");

        let mut w = csv::Writer::from_writer(vec![]);
        w.write_record(embedding_header(2)).unwrap();
        write_embeddings(
            &mut w,
            "s",
            &Tensor::from_vec(&[2, 2], vec![1.0f32, 2.0, 3.0, 4.0]),
        )
        .unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(text, "sequence,frame,e0,e1\ns,0,1,2\ns,1,3,4\n");
    }
}

use crate::data::sequence::EchoSequence;
use crate::error::{contract, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Pairwise L2 distances between the rows of `[T, D]`, divided by the largest
/// distance. A matrix of identical rows is all zeros.
pub fn frame_similarity_matrix<T: Scalar>(rows: &Tensor<T>) -> Result<Tensor<f64>> {
    contract!(
        rows.shape().len() == 2,
        "expected [T, D] rows, got {:?}",
        rows.shape()
    );
    let (t, d) = (rows.shape()[0], rows.shape()[1]);
    contract!(t >= 2, "a similarity matrix needs at least two frames");
    let x: Vec<f64> = rows.data().iter().map(|v| v.as_f64()).collect();
    let mut m = vec![0.0; t * t];
    for a in 0..t {
        for b in a + 1..t {
            let ra = &x[a * d..(a + 1) * d];
            let rb = &x[b * d..(b + 1) * d];
            let dist = ra
                .iter()
                .zip(rb)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt();
            m[a * t + b] = dist;
            m[b * t + a] = dist;
        }
    }
    let max = m.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        m.iter_mut().for_each(|v| *v /= max);
    }
    Ok(Tensor::from_vec(&[t, t], m))
}

/// Similarity matrix of raw frames.
pub fn video_similarity_matrix(seq: &EchoSequence) -> Result<Tensor<f64>> {
    let data = seq.frames().iter().map(|&v| v as f64).collect();
    frame_similarity_matrix(&Tensor::from_vec(
        &[seq.num_frames(), seq.frame_size()],
        data,
    ))
}

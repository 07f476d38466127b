//! Clip sampling (with temporal mirroring for short videos) and labeled-frame batches.

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::sequence::{Dataset, EchoSequence, Mask};
use crate::error::{contract, Error, Result};

/// Clip length and frame stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub length: usize,
    pub stride: usize,
}

impl ClipSpec {
    /// 40 frames at 1 in every 3.
    pub const CSS: ClipSpec = ClipSpec {
        length: 40,
        stride: 3,
    };
    /// 32 frames at 1 in every 2.
    pub const REGRESSION: ClipSpec = ClipSpec {
        length: 32,
        stride: 2,
    };

    /// Source frames covered: `(length - 1) * stride + 1`.
    pub fn span(&self) -> usize {
        span(self.length, self.stride)
    }
}

fn span(length: usize, stride: usize) -> usize {
    (length - 1) * stride + 1
}

/// `[v_h, ..., v_2, v_1, v_2, ..., v_T, v_{T-1}, ..., v_h]` with pivot `h = max(1, floor(T/2))`.
///
/// Output length is `2T - 1` and neighbouring output frames are neighbours in the source.
pub fn temporal_mirror<X: Clone>(frames: &[X]) -> Result<Vec<X>> {
    let t = frames.len();
    contract!(t > 0, "cannot mirror an empty sequence");
    let pivot = (t / 2).max(1);
    // 1-based source positions
    let order = (1..=pivot).rev().chain(2..=t).chain((pivot..t).rev());
    Ok(order.map(|i| frames[i - 1].clone()).collect())
}

/// Where a clip's frames come from after the short-sequence policy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipPlan {
    /// Stride actually used (reduced when the sequence is short).
    pub stride: usize,
    /// Original frame index for each position of the (possibly mirrored) timeline.
    pub timeline: Vec<usize>,
    pub mirrored: usize,
}

impl ClipPlan {
    /// Reduces the stride, then mirrors, until the clip fits `num_frames`.
    pub fn new(num_frames: usize, spec: ClipSpec) -> Result<Self> {
        contract!(num_frames > 0, "sequence has no frames");
        contract!(
            spec.length > 0 && spec.stride > 0,
            "clip length and stride must be positive"
        );
        let mut timeline: Vec<usize> = (0..num_frames).collect();
        let mut mirrored = 0;
        while timeline.len() < spec.length {
            timeline = temporal_mirror(&timeline)?;
            mirrored += 1;
            if timeline.len() == 1 {
                // a single frame never grows under mirroring
                timeline = vec![0; spec.length];
            }
        }
        let max_stride = (timeline.len() - 1) / (spec.length - 1).max(1);
        let stride = if spec.length == 1 {
            spec.stride
        } else {
            spec.stride.min(max_stride).max(1)
        };
        Ok(Self {
            stride,
            timeline,
            mirrored,
        })
    }

    pub fn span(&self, length: usize) -> usize {
        span(length, self.stride)
    }

    /// Number of valid start positions.
    pub fn starts(&self, length: usize) -> usize {
        self.timeline.len() - self.span(length) + 1
    }
}

/// A strided window of frames.
#[derive(Clone, Debug)]
pub struct ClipSample {
    pub sequence: usize,
    pub sequence_id: String,
    /// Ascending positions in the (possibly mirrored) timeline, constant stride.
    pub source_indices: Vec<usize>,
    /// Original frame index of each clip frame.
    pub frame_indices: Vec<usize>,
    pub stride: usize,
    pub mirrored: usize,
    height: usize,
    width: usize,
    /// `[L, 3, H, W]`.
    frames: Vec<u8>,
}

impl ClipSample {
    pub fn len(&self) -> usize {
        self.source_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_indices.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frames(&self) -> &[u8] {
        &self.frames
    }

    /// Source frames covered by the clip.
    pub fn span(&self) -> usize {
        self.source_indices
            .last()
            .map_or(0, |l| l - self.source_indices[0] + 1)
    }
}

/// Clip starting at timeline position `start`.
pub fn clip_at(
    seq: &EchoSequence,
    sequence: usize,
    spec: ClipSpec,
    start: usize,
) -> Result<ClipSample> {
    let plan = ClipPlan::new(seq.num_frames(), spec)?;
    build_clip(seq, sequence, spec, &plan, start)
}

fn build_clip(
    seq: &EchoSequence,
    sequence: usize,
    spec: ClipSpec,
    plan: &ClipPlan,
    start: usize,
) -> Result<ClipSample> {
    let n = plan.starts(spec.length);
    if start >= n {
        return Err(Error::Index(format!(
            "clip start {start} outside the {n} valid starts of sequence {}",
            seq.id
        )));
    }
    let source_indices: Vec<usize> = (0..spec.length).map(|i| start + i * plan.stride).collect();
    let frame_indices: Vec<usize> = source_indices.iter().map(|&i| plan.timeline[i]).collect();
    let mut frames = Vec::with_capacity(spec.length * seq.frame_size());
    for &f in &frame_indices {
        frames.extend_from_slice(seq.frame(f));
    }
    Ok(ClipSample {
        sequence,
        sequence_id: seq.id.clone(),
        source_indices,
        frame_indices,
        stride: plan.stride,
        mirrored: plan.mirrored,
        height: seq.height(),
        width: seq.width(),
        frames,
    })
}

/// Clip with a uniformly drawn start.
pub fn sample_clip<R: Rng + ?Sized>(
    seq: &EchoSequence,
    sequence: usize,
    spec: ClipSpec,
    rng: &mut R,
) -> Result<ClipSample> {
    let plan = ClipPlan::new(seq.num_frames(), spec)?;
    let start = rng.random_range(0..plan.starts(spec.length));
    build_clip(seq, sequence, spec, &plan, start)
}

/// 40-frame clip at stride 3 (118 source frames) for the CSS loss.
pub fn sample_css_clip<R: Rng + ?Sized>(
    seq: &EchoSequence,
    sequence: usize,
    rng: &mut R,
) -> Result<ClipSample> {
    sample_clip(seq, sequence, ClipSpec::CSS, rng)
}

/// 32-frame clip at stride 2 (63 source frames) for EF regression.
pub fn sample_regression_clip<R: Rng + ?Sized>(
    seq: &EchoSequence,
    sequence: usize,
    rng: &mut R,
) -> Result<ClipSample> {
    sample_clip(seq, sequence, ClipSpec::REGRESSION, rng)
}

/// Draws sequence indices epoch by epoch: without replacement inside an
/// epoch, reshuffling when the pool runs out.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    pool: Vec<usize>,
    queue: Vec<usize>,
    epoch: usize,
    warned: bool,
}

impl EpochSampler {
    pub fn new(pool: Vec<usize>) -> Result<Self> {
        contract!(!pool.is_empty(), "cannot sample from an empty labeled set");
        Ok(Self {
            pool,
            queue: Vec::new(),
            epoch: 0,
            warned: false,
        })
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    /// Passes started over the pool.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, batch: usize, rng: &mut R) -> Vec<usize> {
        if batch > self.pool.len() && !self.warned {
            warn!(
                "batch of {batch} exceeds the {} labeled sequences; sampling with replacement",
                self.pool.len()
            );
            self.warned = true;
        }
        (0..batch)
            .map(|_| {
                if self.queue.is_empty() {
                    self.queue = self.pool.clone();
                    self.queue.shuffle(rng);
                    self.epoch += 1;
                }
                self.queue.pop().expect("refilled")
            })
            .collect()
    }

    pub fn replaced(&self) -> bool {
        self.warned
    }
}

/// Labeled ED/ES frames and masks of one sequence.
#[derive(Clone, Copy, Debug)]
pub struct LabeledPair<'a> {
    pub sequence: usize,
    pub ed_frame: &'a [u8],
    pub ed_mask: &'a Mask,
    pub es_frame: &'a [u8],
    pub es_mask: &'a Mask,
}

/// `batch` labeled sequences, i.e. `2 * batch` supervised frames.
pub fn sample_labeled_frames<'a, R: Rng + ?Sized>(
    dataset: &'a Dataset,
    sampler: &mut EpochSampler,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<LabeledPair<'a>>> {
    sampler
        .next_batch(batch, rng)
        .into_iter()
        .map(|i| labeled_pair(dataset, i))
        .collect()
}

pub fn labeled_pair(dataset: &Dataset, i: usize) -> Result<LabeledPair<'_>> {
    let seq = dataset.get(i);
    let missing = || Error::Validation {
        id: seq.id.clone(),
        reason: "sequence has no ED/ES labels".into(),
    };
    let (ed, es) = (
        seq.ed_index.ok_or_else(missing)?,
        seq.es_index.ok_or_else(missing)?,
    );
    Ok(LabeledPair {
        sequence: i,
        ed_frame: seq.frame(ed),
        ed_mask: seq.ed_mask.as_ref().ok_or_else(missing)?,
        es_frame: seq.frame(es),
        es_mask: seq.es_mask.as_ref().ok_or_else(missing)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sequence::Split;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(t: usize) -> EchoSequence {
        let frames = (0..t).flat_map(|i| vec![i as u8; 3]).collect();
        EchoSequence::new("s", Split::Train, 50.0, 1, 1, frames).unwrap()
    }

    #[test]
    fn mirror_hand_cases() {
        assert_eq!(
            temporal_mirror(&[1, 2, 3, 4]).unwrap(),
            vec![2, 1, 2, 3, 4, 3, 2]
        );
        assert_eq!(temporal_mirror(&[1, 2]).unwrap(), vec![1, 2, 1]);
        assert_eq!(temporal_mirror(&[1, 2, 3]).unwrap(), vec![1, 2, 3, 2, 1]);
        assert_eq!(temporal_mirror(&[7]).unwrap(), vec![7]);
        assert!(temporal_mirror::<u8>(&[]).is_err());
    }

    #[test]
    fn css_clip_spans_118_frames() {
        assert_eq!(ClipSpec::CSS.span(), 118);
        assert_eq!(ClipSpec::REGRESSION.span(), 63);
        let plan = ClipPlan::new(175, ClipSpec::CSS).unwrap();
        assert_eq!((plan.stride, plan.starts(40)), (3, 58));
        let plan = ClipPlan::new(118, ClipSpec::CSS).unwrap();
        assert_eq!(plan.starts(40), 1);
        assert_eq!(
            ClipPlan::new(63, ClipSpec::REGRESSION).unwrap().starts(32),
            1
        );
    }

    #[test]
    fn short_sequences_reduce_stride_then_mirror() {
        let plan = ClipPlan::new(60, ClipSpec::CSS).unwrap();
        assert_eq!((plan.stride, plan.mirrored, plan.span(40)), (1, 0, 40));
        let plan = ClipPlan::new(80, ClipSpec::CSS).unwrap();
        assert_eq!(plan.stride, 2);
        let plan = ClipPlan::new(30, ClipSpec::CSS).unwrap();
        assert_eq!(
            (plan.mirrored, plan.timeline.len(), plan.stride),
            (1, 59, 1)
        );
        let plan = ClipPlan::new(1, ClipSpec::CSS).unwrap();
        assert_eq!(plan.timeline.len(), 40);
    }

    #[test]
    fn sampled_clips_have_constant_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in [30, 60, 118, 175] {
            let s = seq(t);
            for _ in 0..20 {
                let c = sample_css_clip(&s, 0, &mut rng).unwrap();
                assert_eq!(c.len(), 40);
                let d: Vec<usize> = c.source_indices.windows(2).map(|w| w[1] - w[0]).collect();
                assert!(d.iter().all(|&x| x == c.stride && x >= 1));
                assert!(c.frame_indices.iter().all(|&f| f < t));
                assert_eq!(c.frames()[3 * 5], c.frame_indices[5] as u8);
            }
        }
    }

    #[test]
    fn epoch_sampler_without_then_with_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = EpochSampler::new((0..10).collect()).unwrap();
        let mut first: Vec<usize> = s.next_batch(5, &mut rng);
        first.extend(s.next_batch(5, &mut rng));
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert!(!s.replaced());

        let mut small = EpochSampler::new((0..5).collect()).unwrap();
        let b = small.next_batch(20, &mut rng);
        assert_eq!(b.len(), 20);
        assert!(small.replaced());
        for i in 0..5 {
            assert_eq!(b.iter().filter(|&&x| x == i).count(), 4);
        }
        assert!(EpochSampler::new(vec![]).is_err());
    }
}

//! Synthetic cyclical videos: a dark elliptical cavity with a bright wall whose
//! area oscillates between an end-diastolic maximum and an end-systolic minimum.
//!
//! Volume is proxied by `area^(3/2)`, so `EF = 100 * (1 - (A_ES / A_ED)^(3/2))`.
//! The stored label is computed from the rasterized ED and ES masks.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::sequence::{Dataset, EchoSequence, Mask, Split, CHANNELS};
use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticParams {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of cycle periods in frames; odd draws are rounded up to even.
    pub period: (usize, usize),
    /// Cardiac cycles per video (at least 2).
    pub cycles: f64,
    /// Inclusive range of target EF percentages.
    pub ef: (f64, f64),
    /// Standard deviation of per-pixel noise as a fraction of full scale.
    pub noise: f64,
    /// How many of the generated videos go to the test split.
    pub test_count: usize,
    pub fps: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            period: (36, 48),
            cycles: 3.5,
            ef: (30.0, 75.0),
            noise: 0.05,
            test_count: 0,
            fps: 50.0,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self, count: usize) -> Result<()> {
        contract!(
            self.height >= 16 && self.width >= 16,
            "frames must be at least 16x16"
        );
        contract!(
            self.period.0 >= 4 && self.period.0 <= self.period.1,
            "period range {:?} must start at 4 frames or more",
            self.period
        );
        contract!(
            self.cycles >= 2.0,
            "at least two cycles per video are required, got {}",
            self.cycles
        );
        contract!(
            self.ef.0 > 0.0 && self.ef.0 <= self.ef.1 && self.ef.1 < 100.0,
            "EF range {:?} must lie inside (0, 100)",
            self.ef
        );
        contract!(
            self.noise >= 0.0 && self.noise.is_finite(),
            "noise must be non-negative"
        );
        contract!(
            self.test_count <= count,
            "test_count {} exceeds count {count}",
            self.test_count
        );
        contract!(self.fps > 0.0, "fps must be positive");
        Ok(())
    }
}

/// `A_ES / A_ED` for a target EF under the `area^(3/2)` volume proxy.
pub fn es_area_ratio(ef: f64) -> f64 {
    (1.0 - ef / 100.0).powf(2.0 / 3.0)
}

/// EF from ED and ES areas under the `area^(3/2)` volume proxy.
pub fn ef_from_areas(ed_area: f64, es_area: f64) -> f64 {
    let (ved, ves) = (ed_area.powf(1.5), es_area.powf(1.5));
    100.0 * (ved - ves) / ved
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalized radius of pixel `(y, x)`'s centre; inside when `<= 1`.
    fn radius(&self, y: usize, x: usize, scale: f64) -> f64 {
        let (dy, dx) = (y as f64 + 0.5 - self.cy, x as f64 + 0.5 - self.cx);
        let u = dy * self.cos + dx * self.sin;
        let v = -dy * self.sin + dx * self.cos;
        ((u / (self.ay * scale)).powi(2) + (v / (self.ax * scale)).powi(2)).sqrt()
    }
}

fn render_video(
    id: String,
    split: Split,
    p: &SyntheticParams,
    rng: &mut ChaCha8Rng,
) -> Result<EchoSequence> {
    let (h, w) = (p.height, p.width);
    let (hf, wf) = (h as f64, w as f64);
    let mut period = rng.random_range(p.period.0..=p.period.1);
    period += period % 2;
    let t_len = (p.cycles * period as f64).ceil() as usize;
    let ef_target = rng.random_range(p.ef.0..=p.ef.1);
    let lv = Ellipse {
        cy: hf * rng.random_range(0.42..0.58),
        cx: wf * rng.random_range(0.42..0.58),
        ay: hf * rng.random_range(0.20..0.27),
        ax: wf * rng.random_range(0.13..0.17),
        cos: 0.0,
        sin: 0.0,
    };
    let angle: f64 = rng.random_range(-0.4..0.4);
    let lv = Ellipse {
        cos: angle.cos(),
        sin: angle.sin(),
        ..lv
    };
    let wall = rng.random_range(0.18..0.28);
    let k_es2 = es_area_ratio(ef_target);
    let ed0 = rng.random_range(0..period);

    // static textured background and one non-cyclic distractor blob
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0.05..0.35),
                rng.random_range(0.05..0.35),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(6.0..14.0),
            )
        })
        .collect();
    let base = rng.random_range(80.0..110.0);
    let background: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            base + waves
                .iter()
                .map(|&(fy, fx, ph, amp)| amp * (fy * y + fx * x + ph).sin())
                .sum::<f64>()
        })
        .collect();
    let blob = {
        let cy = if rng.random_bool(0.5) {
            hf * 0.15
        } else {
            hf * 0.85
        };
        let cx = wf * rng.random_range(0.15..0.85);
        let r = hf * rng.random_range(0.05..0.09);
        Ellipse {
            cy,
            cx,
            ay: r,
            ax: r * rng.random_range(0.8..1.3),
            cos: 1.0,
            sin: 0.0,
        }
    };
    let noise = Normal::new(0.0, p.noise * 255.0).expect("valid noise std");

    let mut frames = Vec::with_capacity(t_len * CHANNELS * h * w);
    let mut masks = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let phase = std::f64::consts::TAU * (t as f64 - ed0 as f64) / period as f64;
        let area = k_es2 + (1.0 - k_es2) * 0.5 * (1.0 + phase.cos());
        let scale = area.sqrt();
        let mut mask = vec![0u8; h * w];
        let mut plane = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let r = lv.radius(y, x, scale);
                let mut v = if r <= 1.0 {
                    mask[i] = 1;
                    25.0
                } else if r <= 1.0 + wall / scale.sqrt() {
                    175.0
                } else if blob.radius(y, x, 1.0) <= 1.0 {
                    35.0
                } else {
                    background[i]
                };
                if p.noise > 0.0 {
                    v += noise.sample(rng);
                }
                plane[i] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        for _ in 0..CHANNELS {
            frames.extend_from_slice(&plane);
        }
        masks.push(Mask::new(h, w, mask)?);
    }

    let ed = ed0;
    let es = ed0 + period / 2;
    let mut seq = EchoSequence::new(id, split, p.fps, h, w, frames)?;
    let (ed_mask, es_mask) = (masks[ed].clone(), masks[es].clone());
    seq.ef = Some(ef_from_areas(ed_mask.area() as f64, es_mask.area() as f64));
    seq.ed_index = Some(ed);
    seq.es_index = Some(es);
    seq.ed_mask = Some(ed_mask);
    seq.es_mask = Some(es_mask);
    seq.frame_masks = Some(masks);
    Ok(seq)
}

/// `count` labeled synthetic videos; the last `params.test_count` go to the test split.
pub fn generate_synthetic(count: usize, params: &SyntheticParams, seed: u64) -> Result<Dataset> {
    params.validate(count)?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let train = count - params.test_count;
    let sequences = (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(master.next_u64());
            let split = if i < train { Split::Train } else { Split::Test };
            render_video(format!("synth{i:05}"), split, params, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(sequences)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticParams {
        SyntheticParams {
            height: 32,
            width: 32,
            period: (12, 16),
            cycles: 2.0,
            ..Default::default()
        }
    }

    #[test]
    fn es_ratio_inverts_proxy() {
        let r = es_area_ratio(60.0);
        assert!((r - 0.4f64.powf(2.0 / 3.0)).abs() < 1e-12);
        assert!((r - 0.5429).abs() < 1e-4);
        assert!((ef_from_areas(1.0, r) - 60.0).abs() < 1e-9);
    }

    #[test]
    fn deterministic_for_seed() {
        let p = SyntheticParams {
            noise: 0.0,
            ..small()
        };
        let a = generate_synthetic(3, &p, 9).unwrap();
        let b = generate_synthetic(3, &p, 9).unwrap();
        for (x, y) in a.sequences.iter().zip(&b.sequences) {
            assert_eq!(x.frames(), y.frames());
            assert_eq!(x.ef, y.ef);
        }
        let c = generate_synthetic(3, &p, 10).unwrap();
        assert_ne!(a.sequences[0].frames(), c.sequences[0].frames());
    }

    #[test]
    fn labels_follow_mask_areas() {
        let ds = generate_synthetic(6, &small(), 1).unwrap();
        for s in &ds.sequences {
            let masks = s.frame_masks.as_ref().unwrap();
            let areas: Vec<usize> = masks.iter().map(Mask::area).collect();
            let (ed, es) = (s.ed_index.unwrap(), s.es_index.unwrap());
            assert!(areas[ed] > areas[es]);
            assert_eq!(areas[ed], *areas.iter().max().unwrap());
            assert_eq!(areas[es], *areas.iter().min().unwrap());
            let max = *areas.iter().max().unwrap() as f64;
            let min = *areas.iter().min().unwrap() as f64;
            assert!((ef_from_areas(max, min) - s.ef.unwrap()).abs() < 0.1);
        }
    }

    #[test]
    fn rejects_single_cycle_and_bad_params() {
        let p = SyntheticParams {
            cycles: 1.0,
            ..small()
        };
        assert!(generate_synthetic(1, &p, 0).is_err());
        let p = SyntheticParams {
            period: (3, 8),
            ..small()
        };
        assert!(generate_synthetic(1, &p, 0).is_err());
        let p = SyntheticParams {
            test_count: 5,
            ..small()
        };
        assert!(generate_synthetic(2, &p, 0).is_err());
    }

    #[test]
    fn test_split_takes_the_tail() {
        let p = SyntheticParams {
            test_count: 2,
            ..small()
        };
        let ds = generate_synthetic(5, &p, 0).unwrap();
        assert_eq!(ds.indices_in(Split::Train), vec![0, 1, 2]);
        assert_eq!(ds.indices_in(Split::Test), vec![3, 4]);
    }
}

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::sequence::{Dataset, Split};
use crate::error::{contract, Error, Result};

/// Exact rational label fraction such as `1/8`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        contract!(
            den > 0 && num > 0 && num <= den,
            "label fraction {num}/{den} must lie in (0, 1]"
        );
        Ok(Self { num, den })
    }

    pub fn one() -> Self {
        Self { num: 1, den: 1 }
    }

    /// `floor(self * n)`.
    pub fn of(&self, n: usize) -> usize {
        (self.num as u128 * n as u128 / self.den as u128) as usize
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Fraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Contract(format!("cannot parse label fraction {s:?}"));
        let s = s.trim();
        if let Some((n, d)) = s.split_once('/') {
            let num = n.trim().parse().map_err(|_| bad())?;
            let den = d.trim().parse().map_err(|_| bad())?;
            return Fraction::new(num, den);
        }
        // decimal form: scale to an exact power-of-ten denominator
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 12 || !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
            return Err(bad());
        }
        let den = 10u64.pow(frac.len() as u32);
        let num: u64 = format!("{int}{frac}").parse().map_err(|_| bad())?;
        let g = gcd(num, den);
        Fraction::new(num / g.max(1), den / g.max(1))
    }
}

impl TryFrom<String> for Fraction {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Fraction> for String {
    fn from(f: Fraction) -> String {
        f.to_string()
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Labeled / unlabeled partition of the training sequences (indices into the dataset).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub fraction: Fraction,
    pub seed: u64,
}

impl DatasetSplit {
    /// Training sequences in either part.
    pub fn all(&self) -> Vec<usize> {
        let mut v = self.labeled.clone();
        v.extend(&self.unlabeled);
        v.sort_unstable();
        v
    }
}

/// Keeps labels on `floor(fraction * N_train)` training sequences chosen by a
/// seeded shuffle; the rest of the training set is treated as unlabeled.
pub fn split_labels(dataset: &Dataset, fraction: Fraction, seed: u64) -> Result<DatasetSplit> {
    Fraction::new(fraction.num, fraction.den)?;
    let train = dataset.indices_in(Split::Train);
    let (mut candidates, never): (Vec<usize>, Vec<usize>) =
        train.iter().partition(|&&i| dataset.get(i).is_labeled());
    let want = fraction.of(train.len()).min(candidates.len());
    // order by id so the split does not depend on manifest row order
    candidates.sort_by(|&a, &b| dataset.get(a).id.cmp(&dataset.get(b).id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    let mut labeled = candidates[..want].to_vec();
    let mut unlabeled: Vec<usize> = candidates[want..].iter().chain(&never).copied().collect();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok(DatasetSplit {
        labeled,
        unlabeled,
        fraction,
        seed,
    })
}

//! Episode sampling protocols.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use tsa_tensor::Tensor;

use super::{Dataset, Split};
use crate::error::{Error, Result};

/// Query images per class in every protocol.
pub const QUERY_PER_CLASS: usize = 10;
const MIN_WAY: usize = 5;
const MAX_WAY: usize = 20;
const MAX_SHOTS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Protocol {
    /// Way uniform in 5..=min(20, classes), shots uniform in 1..=10 per class.
    #[serde(rename = "varying")]
    Varying,
    /// Way as in `Varying`, five shots for every class.
    #[serde(rename = "vw5shot")]
    VaryingWayFiveShot,
    #[serde(rename = "5way1shot")]
    FiveWayOneShot,
}

impl Protocol {
    pub fn code(self) -> &'static str {
        match self {
            Protocol::Varying => "varying",
            Protocol::VaryingWayFiveShot => "vw5shot",
            Protocol::FiveWayOneShot => "5way1shot",
        }
    }

    /// Largest per-class shot count the protocol can request.
    pub fn max_shots(self) -> usize {
        match self {
            Protocol::Varying => MAX_SHOTS,
            Protocol::VaryingWayFiveShot => 5,
            Protocol::FiveWayOneShot => 1,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "varying" => Ok(Protocol::Varying),
            "vw5shot" => Ok(Protocol::VaryingWayFiveShot),
            "5way1shot" => Ok(Protocol::FiveWayOneShot),
            other => Err(Error::config(format!(
                "unknown protocol {other:?} (expected varying, vw5shot or 5way1shot)"
            ))),
        }
    }
}

/// A few-shot task. Labels are remapped to `0..way`; support and query use
/// the same mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Tensor,
    pub support_labels: Vec<usize>,
    pub query: Tensor,
    pub query_labels: Vec<usize>,
    pub way: usize,
    pub shots: Vec<usize>,
    pub domain_id: usize,
    pub episode_index: u64,
    /// Original class id for each episode label.
    pub classes: Vec<usize>,
    /// Dataset indices of the support and query images.
    pub support_ids: Vec<usize>,
    pub query_ids: Vec<usize>,
}

impl Episode {
    pub fn support_len(&self) -> usize {
        self.support_labels.len()
    }

    pub fn query_len(&self) -> usize {
        self.query_labels.len()
    }
}

/// Draws one episode from the classes of `split`.
pub fn sample_episode(
    dataset: &Dataset,
    split: Split,
    protocol: Protocol,
    rng: &mut impl Rng,
    episode_index: u64,
) -> Result<Episode> {
    let pool = dataset.classes_in(split);
    let need = |m: String| {
        Error::Sampling(format!(
            "{} ({split:?} split, protocol {protocol}): {m}",
            dataset.name
        ))
    };
    if pool.len() < MIN_WAY {
        return Err(need(format!("{} classes available, at least {MIN_WAY} required", pool.len())));
    }
    let way = match protocol {
        Protocol::FiveWayOneShot => MIN_WAY,
        _ => rng.gen_range(MIN_WAY..=MAX_WAY.min(pool.len())),
    };
    let classes: Vec<usize> = pool.choose_multiple(rng, way).copied().collect();
    let shots: Vec<usize> = match protocol {
        Protocol::Varying => (0..way).map(|_| rng.gen_range(1..=MAX_SHOTS)).collect(),
        Protocol::VaryingWayFiveShot => vec![5; way],
        Protocol::FiveWayOneShot => vec![1; way],
    };

    let mut support_ids = Vec::new();
    let mut support_labels = Vec::new();
    let mut query_ids = Vec::new();
    let mut query_labels = Vec::new();
    for (label, (&class, &k)) in classes.iter().zip(&shots).enumerate() {
        let available = dataset.indices_of(class);
        if available.len() < k + QUERY_PER_CLASS {
            return Err(need(format!(
                "class {class} has {} images, {k} support + {QUERY_PER_CLASS} query required",
                available.len()
            )));
        }
        let picked: Vec<usize> = available.choose_multiple(rng, k + QUERY_PER_CLASS).copied().collect();
        support_ids.extend_from_slice(&picked[..k]);
        support_labels.extend(std::iter::repeat(label).take(k));
        query_ids.extend_from_slice(&picked[k..]);
        query_labels.extend(std::iter::repeat(label).take(QUERY_PER_CLASS));
    }
    Ok(Episode {
        support: dataset.batch(&support_ids),
        support_labels,
        query: dataset.batch(&query_ids),
        query_labels,
        way,
        shots,
        domain_id: dataset.domain_id,
        episode_index,
        classes,
        support_ids,
        query_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_codes_round_trip() {
        for p in [Protocol::Varying, Protocol::VaryingWayFiveShot, Protocol::FiveWayOneShot] {
            assert_eq!(p.code().parse::<Protocol>().unwrap(), p);
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{}\"", p.code()));
        }
        assert!("10way".parse::<Protocol>().is_err());
    }
}

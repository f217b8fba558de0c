use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::numcore::SeedKey;

/// An N-way K-shot episode. Labels are episode-local (`0..n_way`);
/// `classes[label]` is the dataset class behind each one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub classes: Vec<u32>,
    /// `(sample index, episode label)`, grouped by label.
    pub support: Vec<(usize, u32)>,
    pub query: Vec<(usize, u32)>,
    pub seed: u64,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<u32> {
        self.support.iter().map(|s| s.1).collect()
    }

    pub fn query_labels(&self) -> Vec<u32> {
        self.query.iter().map(|s| s.1).collect()
    }
}

/// Draws `n_way` classes, then `k_shot` support and `query_per_class` query
/// samples from each without overlap.
pub fn sample_episode(
    dataset: &Dataset,
    n_way: usize,
    k_shot: usize,
    query_per_class: usize,
    seed: u64,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::InvalidArgument(format!("{n_way}-way {k_shot}-shot episode")));
    }
    let by_class = dataset.by_class();
    let available: Vec<u32> = (0..by_class.len() as u32).filter(|&c| !by_class[c as usize].is_empty()).collect();
    if available.len() < n_way {
        return Err(Error::InvalidArgument(format!(
            "{n_way}-way episode needs {n_way} classes, dataset has {}",
            available.len()
        )));
    }
    let key = SeedKey::root(seed).derive("episode");
    let mut classes = available;
    classes.shuffle(&mut key.derive("classes").rng());
    classes.truncate(n_way);
    classes.sort_unstable();

    let needed = k_shot + query_per_class;
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * query_per_class);
    for (label, &class) in classes.iter().enumerate() {
        let mut pool = by_class[class as usize].clone();
        if pool.len() < needed {
            return Err(Error::InsufficientSamples {
                class,
                needed,
                available: pool.len(),
            });
        }
        pool.shuffle(&mut key.derive("samples").index(class as u64).rng());
        support.extend(pool[..k_shot].iter().map(|&i| (i, label as u32)));
        query.extend(pool[k_shot..needed].iter().map(|&i| (i, label as u32)));
    }
    Ok(Episode {
        n_way,
        k_shot,
        classes,
        support,
        query,
        seed,
    })
}

/// Training and held-out tiles for segmentation fine-tuning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationSplit {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub seed: u64,
}

/// `k_shot` training tiles and `n_eval` disjoint evaluation tiles, all of
/// which must carry masks.
pub fn sample_segmentation_split(dataset: &Dataset, k_shot: usize, n_eval: usize, seed: u64) -> Result<SegmentationSplit> {
    let mut pool: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.samples[i].mask.is_some()).collect();
    if k_shot == 0 || pool.len() < k_shot + n_eval {
        return Err(Error::InvalidArgument(format!(
            "segmentation split of {k_shot} + {n_eval} tiles from {} masked tiles",
            pool.len()
        )));
    }
    pool.shuffle(&mut SeedKey::root(seed).derive("segmentation-split").rng());
    Ok(SegmentationSplit {
        train: pool[..k_shot].to_vec(),
        eval: pool[k_shot..k_shot + n_eval].to_vec(),
        seed,
    })
}

//! Dataset manifests and reproducible train/test splitting.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::semantic::ArtifactRef;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub item_id: String,
    /// Role name (`image`, `label`, ...) to stored artifact.
    pub roles: BTreeMap<String, ArtifactRef>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub items: Vec<DatasetItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DatasetError {
    #[error("duplicate item id {0:?}")]
    DuplicateItem(String),
    #[error("item {0:?} does not expose the same roles as the first item")]
    RoleSetMismatch(String),
    #[error("split needs at least 2 items, got {0}")]
    TooFewItems(usize),
    #[error("split ratio must lie strictly between 0 and 1")]
    InvalidRatio,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn role_names(&self) -> BTreeSet<String> {
        self.items
            .first()
            .map(|i| i.roles.keys().cloned().collect())
            .unwrap_or_default()
    }

    /// Checks unique item ids and a uniform role set.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut seen = BTreeSet::new();
        let roles = self.role_names();
        for item in &self.items {
            if !seen.insert(item.item_id.as_str()) {
                return Err(DatasetError::DuplicateItem(item.item_id.clone()));
            }
            if !item.roles.keys().eq(roles.iter()) {
                return Err(DatasetError::RoleSetMismatch(item.item_id.clone()));
            }
        }
        Ok(())
    }
}

/// Seeded Fisher-Yates split into `(train, test)`.
///
/// The first `ceil(ratio * n)` shuffled items form the training set, capped
/// at `n - 1` so the test set is never empty. Each part keeps the original
/// manifest order.
pub fn split(
    ds: &DatasetManifest,
    ratio: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), DatasetError> {
    let n = ds.items.len();
    if n < 2 {
        return Err(DatasetError::TooFewItems(n));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::InvalidRatio);
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = (libm::ceil(ratio * n as f64) as usize).clamp(1, n - 1);
    let train_idx: BTreeSet<usize> = order[..n_train].iter().copied().collect();
    let (mut train, mut test) = (DatasetManifest::default(), DatasetManifest::default());
    for (i, item) in ds.items.iter().enumerate() {
        if train_idx.contains(&i) {
            train.items.push(item.clone());
        } else {
            test.items.push(item.clone());
        }
    }
    Ok((train, test))
}

//! Loading the configured train/test splits.

use crate::config::{DataConfig, DataKind};
use smcdo::data::{load_cifar10, load_segmentation_pairs, Dataset, Targets};
use smcdo::tensor::Tensor;
use smcdo::{Error, Result};
use std::path::PathBuf;

/// Raw `[0,1]` images for one split, filtered and truncated as configured.
pub fn load_split(cfg: &DataConfig, paths: &[PathBuf], max: Option<usize>) -> Result<Dataset> {
    let ds = match cfg.kind {
        DataKind::Segmentation => load_segmentation_pairs(&paths[0], cfg.image_size)?,
        DataKind::Cifar10 => {
            let parts = paths.iter().map(load_cifar10).collect::<Result<Vec<_>>>()?;
            let images = Tensor::concat_batch(&parts.iter().map(|d| d.images().clone()).collect::<Vec<_>>())?;
            let labels: Vec<usize> = parts.iter().flat_map(|d| d.position_labels()).collect();
            let all = Dataset::new(images, Targets::Classes(labels.clone()))?;
            match &cfg.classes {
                None => all,
                Some(keep) => {
                    let idx: Vec<usize> = (0..labels.len()).filter(|&i| keep.contains(&labels[i])).collect();
                    if idx.is_empty() {
                        return Err(Error::Data("no examples of the configured classes".into()));
                    }
                    let sub = all.subset(&idx)?;
                    let relabelled =
                        idx.iter().map(|&i| keep.iter().position(|&c| c == labels[i]).expect("filtered")).collect();
                    Dataset::new(sub.images().clone(), Targets::Classes(relabelled))?
                }
            }
        }
    };
    match max {
        Some(n) if n < ds.len() => {
            if n == 0 {
                return Err(Error::Config("max_train / max_test must be >= 1".into()));
            }
            ds.subset(&(0..n).collect::<Vec<_>>())
        }
        _ => Ok(ds),
    }
}

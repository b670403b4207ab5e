//! Finding and loading trained model pairs on disk.

use std::path::{Path, PathBuf};

use gridprompt::checkpoint::{load_mae, load_vq};
use gridprompt::eval::InpaintPredictor;
use gridprompt::mae::HeadKind;
use gridprompt::train::{MAE_CHECKPOINT, VQ_CHECKPOINT};
use gridprompt::{Error, Result};

/// Loads a model; a token-head model needs `vq`.
pub fn load_predictor(id: &str, mae: &Path, vq: Option<&Path>) -> Result<InpaintPredictor> {
    let mae = load_mae(mae)?;
    let vq = match (vq, mae.config.head) {
        (Some(p), _) => Some(load_vq(p)?),
        (None, HeadKind::TokenLogits) => {
            return Err(Error::Config(format!("model {id} has a token head and needs a tokenizer checkpoint")));
        }
        (None, HeadKind::PixelRegression) => None,
    };
    InpaintPredictor::new(id, mae, vq)
}

fn model_in(dir: &Path) -> Option<(PathBuf, Option<PathBuf>)> {
    let mae = dir.join(MAE_CHECKPOINT);
    let vq = dir.join(VQ_CHECKPOINT);
    mae.is_file().then(|| (mae, vq.is_file().then_some(vq)))
}

/// Every directory holding `mae.ckpt` (the given one and its immediate
/// subdirectories) becomes a model named after the directory. A
/// subdirectory without its own `vq.ckpt` borrows the parent's.
pub fn load_models_dir(dir: &Path) -> Result<Vec<InpaintPredictor>> {
    let name = |p: &Path| p.file_name().map_or("model".to_string(), |n| n.to_string_lossy().into_owned());
    let shared_vq = dir.join(VQ_CHECKPOINT);
    let shared_vq = shared_vq.is_file().then_some(shared_vq);
    let mut found = Vec::new();
    if let Some((mae, vq)) = model_in(dir) {
        found.push((name(dir), mae, vq));
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    subdirs.sort();
    for sub in subdirs {
        if let Some((mae, vq)) = model_in(&sub) {
            found.push((name(&sub), mae, vq.or_else(|| shared_vq.clone())));
        }
    }
    if found.is_empty() {
        return Err(Error::Config(format!("no {MAE_CHECKPOINT} found in {} or its subdirectories", dir.display())));
    }
    found.iter().map(|(id, mae, vq)| load_predictor(id, mae, vq.as_deref())).collect()
}

use std::path::Path;

use crate::archive::{f64_from_meta, f64_to_meta, Archive, ArchiveKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub train_accuracy: Option<f64>,
    pub val_accuracy: Option<f64>,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Named parameters plus how they were produced.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightBundle {
    pub params: Vec<(String, Tensor)>,
    pub meta: TrainingMeta,
}

fn opt_to_meta(v: Option<f64>) -> String {
    v.map(f64_to_meta).unwrap_or_default()
}

fn opt_from_meta(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        f64_from_meta(s).map(Some)
    }
}

impl WeightBundle {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_archive(&self) -> Archive {
        let m = &self.meta;
        let curve: Vec<String> = m.loss_curve.iter().map(|&v| f64_to_meta(v)).collect();
        Archive {
            kind: ArchiveKind::Weights,
            meta: vec![
                ("seed".into(), m.seed.to_string()),
                ("epochs".into(), m.epochs.to_string()),
                ("train_accuracy".into(), opt_to_meta(m.train_accuracy)),
                ("val_accuracy".into(), opt_to_meta(m.val_accuracy)),
                ("loss_curve".into(), curve.join(",")),
            ],
            tensors: self.params.clone(),
        }
    }

    pub fn from_archive(a: Archive) -> Result<Self> {
        if a.kind != ArchiveKind::Weights {
            return Err(Error::Integrity(format!("expected a weight bundle, found {:?}", a.kind)));
        }
        let int = |key: &str| -> Result<u64> {
            a.require_meta(key)?
                .parse()
                .map_err(|_| Error::Integrity(format!("bad integer in `{key}`")))
        };
        let curve = a.require_meta("loss_curve")?;
        let meta = TrainingMeta {
            seed: int("seed")?,
            epochs: int("epochs")? as usize,
            train_accuracy: opt_from_meta(a.require_meta("train_accuracy")?)?,
            val_accuracy: opt_from_meta(a.require_meta("val_accuracy")?)?,
            loss_curve: if curve.is_empty() {
                Vec::new()
            } else {
                curve.split(',').map(f64_from_meta).collect::<Result<_>>()?
            },
        };
        Ok(Self {
            params: a.tensors,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(Archive::load(path)?)
    }
}

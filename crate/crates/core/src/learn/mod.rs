//! From-scratch learners: CART trees, random forests, gradient-boosted
//! trees and a single-hidden-layer MLP, plus versioned model serialization.

pub mod forest;
pub mod gbt;
pub mod mlp;
pub mod tree;

use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use forest::{fit_forest, ForestModel, ForestParams};
pub use gbt::{fit_gbt, GbtModel, GbtParams};
pub use mlp::{fit_mlp, MlpModel, MlpParams, Standardizer};
pub use tree::{fit_tree, ColMatrix, DecisionTree, FitTarget, TreeMode, TreeParams};

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Selectable model family for training commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Forest,
    Gbt,
    Mlp,
}

impl ModelFamily {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelFamily::Forest => "forest",
            ModelFamily::Gbt => "gbt",
            ModelFamily::Mlp => "mlp",
        }
    }
}

impl FromStr for ModelFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forest" => Ok(ModelFamily::Forest),
            "gbt" => Ok(ModelFamily::Gbt),
            "mlp" => Ok(ModelFamily::Mlp),
            other => Err(Error::Config(format!(
                "unknown model family {other:?}; valid: forest, gbt, mlp"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelKind {
    Forest(ForestModel),
    Gbt(GbtModel),
    Mlp(MlpModel),
}

/// Self-describing trained model: format version, the raw feature columns
/// it ingests, the imputation fitted on its training split, and the
/// parameters inside each variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedModel {
    pub format_version: u32,
    /// Columns of the raw feature matrix handed to `predict_proba`.
    pub source_columns: Vec<String>,
    /// Training-split median imputation applied before prediction.
    pub imputer: crate::pipeline::features::MedianImputer,
    /// Post-imputation columns the inner model was trained on.
    pub columns: Vec<String>,
    pub model: ModelKind,
}

pub const MODEL_FORMAT_VERSION: u32 = 1;

impl SavedModel {
    pub fn new(
        source_columns: Vec<String>,
        imputer: crate::pipeline::features::MedianImputer,
        columns: Vec<String>,
        model: ModelKind,
    ) -> Self {
        SavedModel { format_version: MODEL_FORMAT_VERSION, source_columns, imputer, columns, model }
    }

    pub fn family(&self) -> ModelFamily {
        match self.model {
            ModelKind::Forest(_) => ModelFamily::Forest,
            ModelKind::Gbt(_) => ModelFamily::Gbt,
            ModelKind::Mlp(_) => ModelFamily::Mlp,
        }
    }

    /// Predict on a raw feature matrix (imputation applied internally).
    pub fn predict_proba(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.source_columns.len() {
            return Err(Error::Data(format!(
                "model expects {} feature columns, got {}",
                self.source_columns.len(),
                x.ncols()
            )));
        }
        let (x_imp, cols) = self.imputer.transform(x, &self.source_columns);
        if cols != self.columns {
            return Err(Error::Data("imputed columns diverge from the trained schema".into()));
        }
        Ok(match &self.model {
            ModelKind::Forest(m) => m.predict_proba(&x_imp),
            ModelKind::Gbt(m) => m.predict_proba(&x_imp),
            ModelKind::Mlp(m) => m.predict_proba(&x_imp),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
        let model: SavedModel = serde_json::from_str(&text)?;
        if model.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported model format version {}",
                model.format_version
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn saved(x: &Array2<f64>, y: &[u8], columns: Vec<String>) -> SavedModel {
        let imputer = crate::pipeline::features::MedianImputer::fit(x);
        let forest =
            fit_forest(x, y, &ForestParams { n_estimators: 5, seed: 1, ..Default::default() })
                .unwrap();
        SavedModel::new(columns.clone(), imputer, columns, ModelKind::Forest(forest))
    }

    #[test]
    fn model_round_trips_through_json() {
        let x = arr2(&[[0.0, 1.0], [1.0, 0.5], [2.0, 2.0], [3.0, 0.1]]);
        let y = vec![0u8, 0, 1, 1];
        let saved = saved(&x, &y, vec!["a".into(), "b".into()]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        saved.save(&path).unwrap();
        let loaded = SavedModel::load(&path).unwrap();
        assert_eq!(saved.predict_proba(&x).unwrap(), loaded.predict_proba(&x).unwrap());
        assert_eq!(loaded.family(), ModelFamily::Forest);
    }

    #[test]
    fn column_count_is_checked() {
        let x = arr2(&[[0.0], [1.0]]);
        let y = vec![0u8, 1];
        let saved = saved(&x, &y, vec!["a".into()]);
        let wide = arr2(&[[0.0, 1.0]]);
        assert!(saved.predict_proba(&wide).is_err());
    }
}

//! Self-contained, versioned JSON model document.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{apply_standardizer, FeatureConfig, FeatureTable, Standardizer};
use crate::shrinkage::VarianceComponents;
use crate::tuning::{Family, GridPoint, Predictor};

pub const FORMAT_VERSION: u32 = 1;

/// Fit-time facts kept for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub selected: GridPoint,
    pub valid_mae: Option<f64>,
    pub grid_points: usize,
    pub failed_points: usize,
    pub train_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub family: Family,
    pub feature_config: FeatureConfig,
    /// Absent for families that ignore covariates.
    pub standardizer: Option<Standardizer>,
    /// Mean training log length used for centering.
    pub global_mean: f64,
    pub variance_components: Option<VarianceComponents>,
    /// `σ₁²` of the lognormal back-transform when enabled.
    pub lognormal_correction: Option<f64>,
    pub predictor: Predictor,
    pub diagnostics: Diagnostics,
}

impl ModelFile {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Corrupt(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Corrupt(e.to_string()))?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Corrupt("missing format_version".into()))?;
        if found != u64::from(FORMAT_VERSION) {
            return Err(Error::VersionMismatch {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: FORMAT_VERSION,
            });
        }
        serde_json::from_value(value).map_err(|e| Error::Corrupt(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Standardized covariates for `table`; zero columns when the family
    /// ignores covariates.
    pub fn design(&self, table: &FeatureTable) -> Result<DMatrix<f64>> {
        match &self.standardizer {
            Some(std) => Ok(apply_standardizer(std, table)?.x),
            None => Ok(DMatrix::zeros(table.n_rows(), 0)),
        }
    }

    /// Predicted session lengths in seconds for standardized rows.
    pub fn predict_rows(&self, x: &DMatrix<f64>, users: &[String]) -> Result<Vec<f64>> {
        if x.nrows() != users.len() {
            return Err(Error::SchemaMismatch(format!(
                "{} rows for {} users",
                x.nrows(),
                users.len()
            )));
        }
        let mut row = vec![0.0; x.ncols()];
        users
            .iter()
            .enumerate()
            .map(|(i, u)| {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = x[(i, j)];
                }
                self.predictor.predict_seconds(&row, u, self.lognormal_correction)
            })
            .collect()
    }

    pub fn predict_table(&self, table: &FeatureTable) -> Result<Vec<f64>> {
        let users: Vec<String> = table.keys.iter().map(|k| k.user_id.clone()).collect();
        self.predict_rows(&self.design(table)?, &users)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bcd::BcdConfig;
    use crate::gbt::GbtParams;
    use crate::simulate::{simulate, SimConfig};
    use crate::tuning::{fit_family, ModelData};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data() -> ModelData {
        let sim = simulate(&SimConfig {
            n_users: 40,
            beta: vec![0.5, -0.3, 0.2],
            corruption_rate: 0.05,
            seed: 3,
            ..SimConfig::default()
        })
        .unwrap();
        ModelData::from_log(sim.x, sim.y.iter().map(|v| v + 5.0).collect(), sim.user_ids).unwrap()
    }

    fn wrap(family: Family, predictor: Predictor) -> ModelFile {
        ModelFile {
            format_version: FORMAT_VERSION,
            family,
            feature_config: FeatureConfig::default(),
            standardizer: None,
            global_mean: 5.0,
            variance_components: None,
            lognormal_correction: None,
            predictor,
            diagnostics: Diagnostics {
                selected: GridPoint::default(),
                valid_mae: Some(1.5),
                grid_points: 1,
                failed_points: 0,
                train_rows: 10,
            },
        }
    }

    #[test]
    fn round_trip_predictions_are_identical() {
        let d = data();
        let points = [
            (
                Family::Model3L2,
                GridPoint {
                    lambda: Some(1.0),
                    alpha: Some(0.3),
                    delta: Some(0.5),
                    gbt: None,
                },
            ),
            (
                Family::Model2L1,
                GridPoint {
                    lambda: Some(1.0),
                    alpha: Some(0.1),
                    delta: None,
                    gbt: None,
                },
            ),
            (
                Family::Model2Gbt,
                GridPoint {
                    lambda: Some(2.0),
                    alpha: None,
                    delta: None,
                    gbt: Some(GbtParams::new(5, 3, 0.1)),
                },
            ),
            (Family::Model1, GridPoint::default()),
            (Family::Baseline, GridPoint::default()),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(100, 3, |_, _| rng.random_range(-0.5..0.5));
        let users: Vec<String> = (0..100).map(|i| d.users[(i * 7) % d.users.len()].clone()).collect();
        for (family, point) in points {
            let m = wrap(family, fit_family(family, &point, &d, &BcdConfig::default()).unwrap());
            let x = if family.uses_covariates() {
                x.clone()
            } else {
                DMatrix::zeros(100, 0)
            };
            let before = m.predict_rows(&x, &users).unwrap();
            let back = ModelFile::from_json(&m.to_json().unwrap()).unwrap();
            assert_eq!(back, m, "{family}");
            assert_eq!(back.predict_rows(&x, &users).unwrap(), before, "{family}");
        }
    }

    #[test]
    fn save_and_load_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = wrap(
            Family::Baseline,
            fit_family(Family::Baseline, &GridPoint::default(), &data(), &BcdConfig::default()).unwrap(),
        );
        m.save(&path).unwrap();
        assert_eq!(ModelFile::load(&path).unwrap(), m);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let m = wrap(
            Family::Baseline,
            fit_family(Family::Baseline, &GridPoint::default(), &data(), &BcdConfig::default()).unwrap(),
        );
        let json = m.to_json().unwrap();
        let err = ModelFile::from_json(&json[..json.len() / 2]).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)));
        assert!(matches!(ModelFile::from_json("{}"), Err(Error::Corrupt(_))));
    }

    #[test]
    fn future_version_is_rejected() {
        let m = wrap(
            Family::Baseline,
            fit_family(Family::Baseline, &GridPoint::default(), &data(), &BcdConfig::default()).unwrap(),
        );
        let json = m
            .to_json()
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(
            ModelFile::from_json(&json),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
    }
}

//! Test-time corruption of a single modality.
//!
//! * feature dropout: each input coordinate is zeroed with probability `rho`
//!   (no rescaling of the survivors);
//! * Gaussian noise: `x + sigma * s_m * eps` with `s_m` the RMS of modality
//!   `m`'s training inputs;
//! * missingness: each sample's embedding block is zeroed with probability
//!   `p`. The synthetic inputs have no temporal axis, so a missing segment is
//!   the whole vector.
//!
//! Every severity reuses the same random draws (stream 0 of the corruption
//! seed), so masks at higher severity contain those at lower severity.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Accuracies, Dataset, Model};
use crate::error::{DagrError, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    FeatureDropout,
    Gaussian,
    Missingness,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] = [Self::FeatureDropout, Self::Gaussian, Self::Missingness];
}

impl std::str::FromStr for CorruptionKind {
    type Err = DagrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature-dropout" | "dropout" => Ok(Self::FeatureDropout),
            "gaussian" => Ok(Self::Gaussian),
            "missingness" | "missing" => Ok(Self::Missingness),
            other => Err(DagrError::Range {
                key: "kind".into(),
                reason: format!("unknown corruption {other:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub target: usize,
    pub severities: Vec<f64>,
    /// Independent of the training seed.
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn default_grid(kind: CorruptionKind) -> Vec<f64> {
        match kind {
            CorruptionKind::Gaussian => vec![0.0, 0.5, 1.0, 2.0, 4.0],
            _ => vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }

    pub fn validate(&self, modalities: usize) -> Result<()> {
        let err = |key: &str, reason: &str| DagrError::Range {
            key: key.into(),
            reason: reason.into(),
        };
        if self.severities.is_empty() {
            return Err(err("severities", "grid must be nonempty"));
        }
        if self.target >= modalities {
            return Err(err("target", "no such modality"));
        }
        for &s in &self.severities {
            let ok = match self.kind {
                CorruptionKind::Gaussian => s >= 0.0 && s.is_finite(),
                _ => (0.0..=1.0).contains(&s),
            };
            if !ok {
                return Err(err("severities", "severity out of range"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationCurve {
    pub kind: CorruptionKind,
    pub target: usize,
    pub severities: Vec<f64>,
    pub accuracies: Vec<Accuracies>,
    /// Accuracy of the corrupted modality's own head per severity.
    pub target_acc: Vec<f64>,
    pub fused_acc: Vec<f64>,
    /// Whether `target_acc` never increases along the grid.
    pub target_monotone: bool,
}

fn rms(x: &DMatrix<f64>) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn robustness_sweep(data: &Dataset, model: &Model, spec: &CorruptionSpec) -> Result<DegradationCurve> {
    spec.validate(model.modalities())?;
    let test = &data.test;
    let m = spec.target;
    let x = &test.inputs[m];
    let scale = rms(&data.train.inputs[m]);
    let clean = model.embed(test)?;

    // one set of draws shared by all severities
    let mut rng = SplitMix64::derive(spec.seed, 0);
    let draws = match spec.kind {
        CorruptionKind::FeatureDropout => DMatrix::from_fn(x.nrows(), x.ncols(), |_, _| rng.next_f64()),
        CorruptionKind::Gaussian => DMatrix::from_fn(x.nrows(), x.ncols(), |_, _| rng.normal()),
        CorruptionKind::Missingness => DMatrix::from_fn(x.nrows(), 1, |_, _| rng.next_f64()),
    };

    let mut accuracies = Vec::with_capacity(spec.severities.len());
    for &s in &spec.severities {
        let mut z = clean.clone();
        match spec.kind {
            CorruptionKind::FeatureDropout => {
                let mut xc = x.clone();
                xc.zip_apply(&draws, |v, u| {
                    if u < s {
                        *v = 0.0;
                    }
                });
                z[m] = model.encoders[m].apply(&xc)?;
            }
            CorruptionKind::Gaussian => {
                if s > 0.0 {
                    let xc = x + &draws * (s * scale);
                    z[m] = model.encoders[m].apply(&xc)?;
                }
            }
            CorruptionKind::Missingness => {
                for i in 0..x.nrows() {
                    if draws[(i, 0)] < s {
                        z[m].row_mut(i).fill(0.0);
                    }
                }
            }
        }
        accuracies.push(model.accuracy_from_embeddings(&z, &test.labels));
    }
    let target_acc: Vec<f64> = accuracies.iter().map(|a| a.unimodal[m]).collect();
    let fused_acc = accuracies.iter().map(|a| a.fused).collect();
    let target_monotone = target_acc.windows(2).all(|w| w[1] <= w[0]);
    Ok(DegradationCurve {
        kind: spec.kind,
        target: m,
        severities: spec.severities.clone(),
        accuracies,
        target_acc,
        fused_acc,
        target_monotone,
    })
}

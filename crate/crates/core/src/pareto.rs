//! Min-norm mixing of the two geometry gradients for one parameter group.
//!
//! For gradients `g_inter`, `g_intra` the mixing weight
//! `alpha* = argmin_{a in [0,1]} ||a g_inter + (1-a) g_intra||^2`
//! has the closed form
//! `clip_[0,1]((||g_intra||^2 - <g_inter, g_intra>) / ||g_inter - g_intra||^2)`.
//! The injected gradient is `beta * (alpha* g_inter + (1 - alpha*) g_intra)`.

use serde::{Deserialize, Serialize};

use crate::error::{DagrError, Result};

/// Denominators below this are treated as `g_inter == g_intra`.
pub const DEGENERATE_DENOM: f64 = 1e-24;

/// Default base scale of the injected geometry gradient.
pub const DEFAULT_BETA: f64 = 0.15;

/// A flattened gradient over one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatGradient {
    pub group: String,
    pub values: Vec<f64>,
}

impl FlatGradient {
    pub fn new(group: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            group: group.into(),
            values,
        }
    }

    pub fn zeros(group: impl Into<String>, len: usize) -> Self {
        Self::new(group, vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dot(&self, other: &FlatGradient) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    /// `a * x + b * y`, keeping `x`'s group id.
    pub fn lin_comb(a: f64, x: &FlatGradient, b: f64, y: &FlatGradient) -> FlatGradient {
        FlatGradient {
            group: x.group.clone(),
            values: x.values.iter().zip(&y.values).map(|(p, q)| a * p + b * q).collect(),
        }
    }

    pub fn scaled(&self, c: f64) -> FlatGradient {
        FlatGradient {
            group: self.group.clone(),
            values: self.values.iter().map(|v| c * v).collect(),
        }
    }

    pub fn add(&self, other: &FlatGradient) -> FlatGradient {
        Self::lin_comb(1.0, self, 1.0, other)
    }
}

fn check_pair(a: &FlatGradient, b: &FlatGradient) -> Result<()> {
    if a.group != b.group {
        return Err(DagrError::GroupMismatch(a.group.clone(), b.group.clone()));
    }
    if a.len() != b.len() {
        return Err(DagrError::ShapeMismatch(format!(
            "group {}: lengths {} vs {}",
            a.group,
            a.len(),
            b.len()
        )));
    }
    for g in [a, b] {
        if g.values.iter().any(|v| !v.is_finite()) {
            return Err(DagrError::NonFiniteGradient(g.group.clone()));
        }
    }
    Ok(())
}

/// Closed-form mixing weight with its unclipped value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSolution {
    pub alpha: f64,
    /// Unclipped minimizer; `None` when the denominator underflowed.
    pub raw: Option<f64>,
    pub degenerate: bool,
}

pub fn solve_alpha_full(g_inter: &FlatGradient, g_intra: &FlatGradient) -> Result<AlphaSolution> {
    check_pair(g_inter, g_intra)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in g_inter.values.iter().zip(&g_intra.values) {
        num += b * b - a * b;
        den += (a - b) * (a - b);
    }
    if den < DEGENERATE_DENOM {
        return Ok(AlphaSolution {
            alpha: 0.5,
            raw: None,
            degenerate: true,
        });
    }
    let raw = num / den;
    Ok(AlphaSolution {
        alpha: raw.clamp(0.0, 1.0),
        raw: Some(raw),
        degenerate: false,
    })
}

pub fn solve_alpha(g_inter: &FlatGradient, g_intra: &FlatGradient) -> Result<f64> {
    solve_alpha_full(g_inter, g_intra).map(|s| s.alpha)
}

/// How the two geometry gradients are combined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Weighting {
    Pareto { beta: f64 },
    Fixed { lambda_intra: f64, lambda_inter: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoDecision {
    /// Mixing weight; 0.5 by convention under fixed weighting.
    pub alpha_star: f64,
    pub g_geom: FlatGradient,
    pub effective_lambda_inter: f64,
    pub effective_lambda_intra: f64,
    pub degenerate: bool,
}

pub fn geometry_gradient(
    g_inter: &FlatGradient,
    g_intra: &FlatGradient,
    weighting: Weighting,
) -> Result<ParetoDecision> {
    match weighting {
        Weighting::Pareto { beta } => {
            if !(beta >= 0.0) {
                return Err(DagrError::Range {
                    key: "beta".into(),
                    reason: format!("must be >= 0, got {beta}"),
                });
            }
            let sol = solve_alpha_full(g_inter, g_intra)?;
            let lam_inter = beta * sol.alpha;
            let lam_intra = beta * (1.0 - sol.alpha);
            let mixed = FlatGradient::lin_comb(sol.alpha, g_inter, 1.0 - sol.alpha, g_intra);
            Ok(ParetoDecision {
                alpha_star: sol.alpha,
                g_geom: mixed.scaled(beta),
                effective_lambda_inter: lam_inter,
                effective_lambda_intra: lam_intra,
                degenerate: sol.degenerate,
            })
        }
        Weighting::Fixed {
            lambda_intra,
            lambda_inter,
        } => {
            check_pair(g_inter, g_intra)?;
            let alpha = if lambda_inter + lambda_intra > 0.0 {
                lambda_inter / (lambda_inter + lambda_intra)
            } else {
                0.5
            };
            Ok(ParetoDecision {
                alpha_star: alpha,
                g_geom: FlatGradient::lin_comb(lambda_inter, g_inter, lambda_intra, g_intra),
                effective_lambda_inter: lambda_inter,
                effective_lambda_intra: lambda_intra,
                degenerate: false,
            })
        }
    }
}

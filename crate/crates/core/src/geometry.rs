//! Cosine and angular geometry on latent embeddings.
//!
//! Every computation runs in `f64` regardless of the storage type of the
//! inputs. Arccos inputs are clamped to `[-1 + ε, 1 - ε]` so that neither the
//! distance nor its derivative is ever NaN or unbounded.

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};

/// Clamp applied to cosine values before `acos`.
pub const ARCCOS_CLAMP_EPS: f64 = 1e-7;

/// Dense latent vector. All latent spaces of the policy (modality features,
/// task references, global latents) are made of these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    /// Wraps `values`, rejecting empty and non-finite vectors.
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(domain("embedding must be non-empty"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(domain(format!("embedding component {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    /// Unit-norm copy. Fails on the zero vector.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 {
            return Err(domain("cannot normalize a zero-norm embedding"));
        }
        Ok(Self(self.0.iter().map(|&v| (v as f64 / n) as f32).collect()))
    }
}

impl AsRef<[f32]> for Embedding {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

/// Distance used inside the feature-adjustment hinge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// `arccos` of the cosine similarity.
    #[default]
    Angle,
    /// `1 - cosine similarity`.
    Cosine,
}

pub(crate) fn norm<T: Copy + Into<f64>>(a: &[T]) -> f64 {
    a.iter().map(|&x| {
        let x: f64 = x.into();
        x * x
    })
    .sum::<f64>()
    .sqrt()
}

fn dot<T: Copy + Into<f64>, U: Copy + Into<f64>>(a: &[T], b: &[U]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.into() * y.into()).sum()
}

struct CosineParts {
    cos: f64,
    norm_a: f64,
    norm_b: f64,
}

fn cosine_parts<T, U>(a: &[T], b: &[U]) -> Result<CosineParts>
where
    T: Copy + Into<f64>,
    U: Copy + Into<f64>,
{
    if a.len() != b.len() {
        return Err(domain(format!(
            "embedding length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let norm_a = norm(a);
    let norm_b = norm(b);
    if norm_a == 0.0 || norm_b == 0.0 {
        return Err(domain("zero-norm embedding in cosine similarity"));
    }
    if !norm_a.is_finite() || !norm_b.is_finite() {
        return Err(domain("non-finite embedding in cosine similarity"));
    }
    Ok(CosineParts {
        cos: dot(a, b) / (norm_a * norm_b),
        norm_a,
        norm_b,
    })
}

/// `aᵀb / (‖a‖‖b‖)`, unclamped.
pub fn cosine_similarity<T, U>(a: &[T], b: &[U]) -> Result<f64>
where
    T: Copy + Into<f64>,
    U: Copy + Into<f64>,
{
    cosine_parts(a, b).map(|p| p.cos)
}

fn clamp_cos(c: f64) -> f64 {
    c.clamp(-1.0 + ARCCOS_CLAMP_EPS, 1.0 - ARCCOS_CLAMP_EPS)
}

/// Angle between `a` and `b` in `[0, π]`.
pub fn angular_distance<T, U>(a: &[T], b: &[U]) -> Result<f64>
where
    T: Copy + Into<f64>,
    U: Copy + Into<f64>,
{
    cosine_similarity(a, b).map(|c| clamp_cos(c).acos())
}

/// Margin `α · d(h_k, h_j)` between two task references.
pub fn adaptive_margin<T, U>(h_k: &[T], h_j: &[U], alpha: f64) -> Result<f64>
where
    T: Copy + Into<f64>,
    U: Copy + Into<f64>,
{
    adaptive_margin_with(DistanceMode::Angle, h_k, h_j, alpha)
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(config(format!("alpha must lie in [0, 1), got {alpha}")));
    }
    Ok(())
}

/// Margin in either distance mode; cosine mode scales `1 - cos`.
pub fn adaptive_margin_with<T, U>(mode: DistanceMode, h_k: &[T], h_j: &[U], alpha: f64) -> Result<f64>
where
    T: Copy + Into<f64>,
    U: Copy + Into<f64>,
{
    check_alpha(alpha)?;
    Ok(alpha * distance(mode, h_k, h_j)?)
}

pub fn distance<T, U>(mode: DistanceMode, a: &[T], b: &[U]) -> Result<f64>
where
    T: Copy + Into<f64>,
    U: Copy + Into<f64>,
{
    match mode {
        DistanceMode::Angle => angular_distance(a, b),
        DistanceMode::Cosine => cosine_similarity(a, b).map(|c| 1.0 - c),
    }
}

/// Distance together with its gradient with respect to `a`.
///
/// In angle mode the arccos derivative is taken at the clamped cosine.
pub fn distance_with_grad<T, U>(mode: DistanceMode, a: &[T], b: &[U]) -> Result<(f64, Vec<f64>)>
where
    T: Copy + Into<f64>,
    U: Copy + Into<f64>,
{
    let CosineParts { cos, norm_a, norm_b } = cosine_parts(a, b)?;
    // d cos / d a = b / (‖a‖‖b‖) - cos · a / ‖a‖²
    let inv_ab = 1.0 / (norm_a * norm_b);
    let c_over_aa = cos / (norm_a * norm_a);
    let (value, outer) = match mode {
        DistanceMode::Angle => {
            let x = clamp_cos(cos);
            (x.acos(), -1.0 / (1.0 - x * x).sqrt())
        }
        DistanceMode::Cosine => (1.0 - cos, -1.0),
    };
    let grad = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| outer * (bi.into() * inv_ab - c_over_aa * ai.into()))
        .collect();
    Ok((value, grad))
}

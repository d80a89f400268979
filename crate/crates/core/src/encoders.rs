//! Image and object encoders.
//!
//! [`OracleEncoder`] stands in for pretrained embedding networks: every grid
//! cell and every object identity owns a fixed unit anchor, and an encoding is
//! the anchor plus isotropic Gaussian noise, renormalized. Cell anchors mix an
//! independent per-cell component with a low-frequency random field over the
//! grid, so nearby places are mildly similar while distinct cells stay well
//! below `tau_image`.
//!
//! Similarity everywhere is cosine *similarity* (higher means more alike);
//! the sameness gates are `similarity >= tau`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TsgmError};
use crate::tensor::{dot, l2_norm, normalized};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub dim_image: usize,
    pub dim_object: usize,
    pub noise_sigma: f64,
    pub tau_image: f64,
    pub tau_object: f64,
    /// Share of each cell anchor's energy drawn from the smooth place field.
    pub place_correlation: f64,
    /// Length scale of the place field, in cells.
    pub place_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim_image: 32,
            dim_object: 16,
            noise_sigma: 0.05,
            tau_image: 0.75,
            tau_object: 0.8,
            place_correlation: 0.45,
            place_scale: 4.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim_image < 2 {
            return Err(TsgmError::validation("encoder.dim_image", "must be >= 2"));
        }
        if self.dim_object < 2 {
            return Err(TsgmError::validation("encoder.dim_object", "must be >= 2"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(TsgmError::validation("encoder.noise_sigma", "must be a finite value >= 0"));
        }
        for (name, tau) in [("encoder.tau_image", self.tau_image), ("encoder.tau_object", self.tau_object)] {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(TsgmError::validation(name, "must lie in (0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.place_correlation) {
            return Err(TsgmError::validation("encoder.place_correlation", "must lie in [0, 1)"));
        }
        if !(self.place_scale > 0.0 && self.place_scale.is_finite()) {
            return Err(TsgmError::validation("encoder.place_scale", "must be > 0"));
        }
        Ok(())
    }
}

/// Cosine similarity in `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(TsgmError::invalid(format!(
            "cosine similarity of vectors with dimensions {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(TsgmError::invalid("cosine similarity of a zero vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity of two vectors already known to be unit length.
pub(crate) fn unit_similarity(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0)
}

fn gaussian_vec(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn noisy_unit(anchor: &[f64], sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    if sigma == 0.0 {
        return anchor.to_vec();
    }
    let v: Vec<f64> = anchor
        .iter()
        .map(|a| a + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    // a Gaussian draw cancelling the anchor exactly has probability zero
    normalized(&v).unwrap_or_else(|| anchor.to_vec())
}

const FIELD_TERMS: usize = 96;

/// Oracle encoder for one world: fixed anchors for every cell of a
/// `width x height` grid and for `num_objects` object identities.
#[derive(Debug, Clone)]
pub struct OracleEncoder {
    config: EncoderConfig,
    width: usize,
    cell_anchors: Vec<Vec<f64>>,
    object_anchors: Vec<Vec<f64>>,
}

impl OracleEncoder {
    pub fn new(config: &EncoderConfig, width: usize, height: usize, num_objects: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_A4C8_0E4C_0DE5);
        let d = config.dim_image;

        // random Fourier features of a squared-exponential field
        let terms: Vec<(Vec<f64>, [f64; 2], f64)> = (0..FIELD_TERMS)
            .map(|_| {
                let amp = gaussian_vec(d, &mut rng);
                let w = [
                    rng.sample::<f64, _>(StandardNormal) / config.place_scale,
                    rng.sample::<f64, _>(StandardNormal) / config.place_scale,
                ];
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (amp, w, phase)
            })
            .collect();
        let field_norm = (2.0 / FIELD_TERMS as f64).sqrt();
        let (mix_own, mix_field) = ((1.0 - config.place_correlation).sqrt(), config.place_correlation.sqrt());

        let mut cell_anchors = Vec::with_capacity(width * height);
        for idx in 0..width * height {
            let (x, y) = ((idx % width) as f64, (idx / width) as f64);
            let own = gaussian_vec(d, &mut rng);
            let mut v: Vec<f64> = own.iter().map(|o| mix_own * o).collect();
            if mix_field > 0.0 {
                for (amp, w, phase) in &terms {
                    let c = field_norm * mix_field * (w[0] * x + w[1] * y + phase).cos();
                    for (vi, ai) in v.iter_mut().zip(amp) {
                        *vi += c * ai;
                    }
                }
            }
            cell_anchors.push(normalized(&v).unwrap_or_else(|| normalized(&own).expect("nonzero draw")));
        }

        let object_anchors = (0..num_objects)
            .map(|_| loop {
                if let Some(v) = normalized(&gaussian_vec(config.dim_object, &mut rng)) {
                    break v;
                }
            })
            .collect();

        Ok(OracleEncoder {
            config: config.clone(),
            width,
            cell_anchors,
            object_anchors,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_cells(&self) -> usize {
        self.cell_anchors.len()
    }

    pub fn num_objects(&self) -> usize {
        self.object_anchors.len()
    }

    pub fn cell_index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn cell_anchor(&self, cell: usize) -> Result<&[f64]> {
        self.cell_anchors
            .get(cell)
            .map(Vec::as_slice)
            .ok_or_else(|| TsgmError::invalid(format!("cell {cell} outside the world")))
    }

    pub fn object_anchor(&self, identity: usize) -> Result<&[f64]> {
        self.object_anchors
            .get(identity)
            .map(Vec::as_slice)
            .ok_or_else(|| TsgmError::invalid(format!("object identity {identity} unknown")))
    }

    /// Unit image embedding of a cell.
    pub fn encode_image(&self, cell: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let anchor = self.cell_anchor(cell)?;
        Ok(noisy_unit(anchor, self.config.noise_sigma, rng))
    }

    /// Unit object embedding of an object identity.
    pub fn encode_object(&self, identity: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let anchor = self.object_anchor(identity)?;
        Ok(noisy_unit(anchor, self.config.noise_sigma, rng))
    }
}

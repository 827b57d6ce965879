//! Embedders map a study to a unit vector.

use std::time::Duration;

use image::imageops::{resize, FilterType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{normalize, VragError, DIM};
use crate::model::{FindingLabel, Polarity};
use crate::phantom::{CaseStudy, GroundTruth};
use crate::toolkit::remote::{encode_png, HttpEndpoint, HttpFailure};

pub trait Embedder: Send + Sync {
    fn embed(&self, case: &CaseStudy) -> Result<Vec<f32>, VragError>;
}

const BASE_WEIGHT: f64 = 0.5;
const LABEL_WEIGHT: f64 = 1.0;
const SEVERITY_WEIGHT: f64 = 0.15;
const MEASUREMENT_WEIGHT: f64 = 0.05;
const NOISE_WEIGHT: f64 = 0.1;

/// A pseudo-random direction in [-1, 1]^dim keyed by `key`. Distinct keys
/// give nearly orthogonal directions in high dimension.
fn direction(key: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(key.as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn add(acc: &mut [f64], dir: &[f64], w: f64) {
    let scale = w / dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    for (a, d) in acc.iter_mut().zip(dir) {
        *a += d * scale;
    }
}

/// Deterministic test embedder. For studies with ground truth the vector is
/// a weighted sum of per-label and per-severity directions plus a small
/// study-specific jitter, so studies with the same findings land close
/// together. Studies without truth fall back to their downsampled pixels.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhantomEmbedder;

impl PhantomEmbedder {
    pub fn embed_truth(&self, study_id: &str, truth: &GroundTruth) -> Vec<f32> {
        let mut v = vec![0.0f64; DIM];
        add(&mut v, &direction("base", DIM), BASE_WEIGHT);
        for &label in FindingLabel::ALL {
            if truth.polarity(label) == Polarity::Present {
                add(&mut v, &direction(&format!("label:{}", label.as_snake()), DIM), LABEL_WEIGHT);
            }
        }
        for lesion in &truth.lesions {
            let key = format!("severity:{}:{}", lesion.label.as_snake(), lesion.severity.as_str());
            add(&mut v, &direction(&key, DIM), SEVERITY_WEIGHT);
        }
        let m = &truth.measurements;
        for (name, value) in [
            ("ctr", m.ctr - 0.5),
            ("trachea", m.tracheal_offset_frac * 10.0),
            ("diaphragm", m.diaphragm_delta_rows as f64 / 50.0),
        ] {
            add(&mut v, &direction(&format!("measure:{name}"), DIM), MEASUREMENT_WEIGHT * value.clamp(-1.0, 1.0));
        }
        add(&mut v, &direction(&format!("study:{study_id}"), DIM), NOISE_WEIGHT);
        let v: Vec<f32> = v.into_iter().map(|x| x as f32).collect();
        normalize(&v).expect("base direction keeps the sum nonzero")
    }

    /// 32x24 thumbnail, mean-centered.
    pub fn embed_pixels(&self, case: &CaseStudy) -> Vec<f32> {
        let thumb = resize(case.current_pixels.as_ref(), 32, 24, FilterType::Triangle);
        let px: Vec<f64> = thumb.pixels().map(|p| p[0] as f64).collect();
        let mean = px.iter().sum::<f64>() / px.len() as f64;
        let v: Vec<f32> = px.iter().map(|x| (x - mean) as f32).collect();
        normalize(&v).unwrap_or_else(|_| {
            let base: Vec<f32> = direction("base", DIM).into_iter().map(|x| x as f32).collect();
            normalize(&base).expect("nonzero")
        })
    }
}

impl Embedder for PhantomEmbedder {
    fn embed(&self, case: &CaseStudy) -> Result<Vec<f32>, VragError> {
        Ok(match &case.truth {
            Some(t) => self.embed_truth(case.id(), t),
            None => self.embed_pixels(case),
        })
    }
}

/// `POST /embed {study_id, image}` returning `{vector}`.
pub struct RemoteEmbedder {
    endpoint: HttpEndpoint,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f32>,
}

impl RemoteEmbedder {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        Self {
            endpoint: HttpEndpoint::new(base_url, timeout),
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, case: &CaseStudy) -> Result<Vec<f32>, VragError> {
        let body = json!({"study_id": case.id(), "image": encode_png(&case.current_pixels)});
        let text = self.endpoint.post("/embed", &body).map_err(|f| match f {
            HttpFailure::Status(status, body) => VragError::EmbedderUnavailable(format!("status {status}: {body}")),
            HttpFailure::Transport(detail) => VragError::EmbedderUnavailable(detail),
        })?;
        let resp: EmbedResponse =
            serde_json::from_str(&text).map_err(|e| VragError::EmbedderUnavailable(format!("bad response: {e}")))?;
        if resp.vector.len() != DIM {
            return Err(VragError::DimensionMismatch {
                expected: DIM,
                got: resp.vector.len(),
            });
        }
        normalize(&resp.vector)
    }
}

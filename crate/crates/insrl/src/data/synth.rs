//! Synthetic multi-view datasets.
//!
//! Each sample owns a latent vector drawn from a relation-conditioned Gaussian
//! mixture; every view is a fixed random linear image of that latent plus
//! view-specific Gaussian noise. Per view, a configurable fraction of samples
//! gets its noise inflated, mimicking bags whose sentences carry no signal.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_relations: usize,
    /// Latent dimensionality.
    pub d_latent: usize,
    /// Dimensionality of each emitted view.
    pub d_view: usize,
    /// Base noise standard deviation per view.
    pub noise: [f64; 3],
    /// Probability that view j is the sample's inflated view. At most one
    /// view per sample is inflated; with probability `1 − Σ`, none is.
    pub inflate_prob: [f64; 3],
    /// Multiplier applied to the inflated view's noise.
    pub inflate_factor: f64,
    /// Scale of the mixture means; larger separates the classes more.
    pub class_separation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 2000,
            n_relations: 5,
            d_latent: 16,
            d_view: 12,
            noise: [0.5, 0.5, 0.5],
            inflate_prob: [0.45, 0.3, 0.2],
            inflate_factor: 10.0,
            class_separation: 2.0,
            seed: 13,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_relations < 2 {
            return Err(Error::Config(format!(
                "synthetic generator needs at least 2 relations, got {}",
                self.n_relations
            )));
        }
        if self.n_samples == 0 || self.d_latent == 0 || self.d_view == 0 {
            return Err(Error::Config("synthetic sizes must be positive".into()));
        }
        if self.noise.iter().any(|&s| s < 0.0)
            || self.inflate_prob.iter().any(|&p| !(0.0..=1.0).contains(&p))
            || self.inflate_prob.iter().sum::<f64>() > 1.0 + 1e-12
            || self.inflate_factor < 0.0
        {
            return Err(Error::Config("invalid synthetic noise settings".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureSample {
    pub label: usize,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    pub v3: Vec<f64>,
}

impl FeatureSample {
    pub fn view(&self, j: usize) -> &[f64] {
        match j {
            0 => &self.v1,
            1 => &self.v2,
            _ => &self.v3,
        }
    }
}

/// Generated dataset plus the ground-truth pieces oracle tests need.
#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub config: SynthConfig,
    /// Row-major `d_view × d_latent` generator matrix per view.
    pub maps: [Vec<f64>; 3],
    pub latents: Vec<Vec<f64>>,
    pub samples: Vec<FeatureSample>,
}

/// Fully seed-deterministic generation.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = StandardNormal;

    let mean_scale = Normal::new(0.0, cfg.class_separation)
        .map_err(|e| Error::Config(format!("bad class separation: {e}")))?;
    let means: Vec<Vec<f64>> = (0..cfg.n_relations)
        .map(|_| (0..cfg.d_latent).map(|_| mean_scale.sample(&mut rng)).collect())
        .collect();

    let map_std = 1.0 / (cfg.d_latent as f64).sqrt();
    let maps: [Vec<f64>; 3] = std::array::from_fn(|_| {
        (0..cfg.d_view * cfg.d_latent)
            .map(|_| {
                let z: f64 = std_normal.sample(&mut rng);
                z * map_std
            })
            .collect()
    });

    let mut latents = Vec::with_capacity(cfg.n_samples);
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let label = i % cfg.n_relations;
        let x: Vec<f64> = (0..cfg.d_latent)
            .map(|d| {
                let z: f64 = std_normal.sample(&mut rng);
                means[label][d] + z
            })
            .collect();

        // at most one inflated view per sample
        let draw: f64 = rng.gen();
        let mut acc = 0.0;
        let mut inflated_view = None;
        for (j, &p) in cfg.inflate_prob.iter().enumerate() {
            acc += p;
            if draw < acc {
                inflated_view = Some(j);
                break;
            }
        }

        let mut views: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; cfg.d_view]);
        for (j, view) in views.iter_mut().enumerate() {
            let inflated = inflated_view == Some(j);
            let sigma = cfg.noise[j] * if inflated { cfg.inflate_factor } else { 1.0 };
            for (r, out) in view.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (c, &xv) in x.iter().enumerate() {
                    acc += maps[j][r * cfg.d_latent + c] * xv;
                }
                let z: f64 = std_normal.sample(&mut rng);
                *out = acc + sigma * z;
            }
        }
        let [v1, v2, v3] = views;
        latents.push(x);
        samples.push(FeatureSample { label, v1, v2, v3 });
    }

    Ok(SynthDataset {
        config: cfg.clone(),
        maps,
        latents,
        samples,
    })
}

pub fn write_feature_jsonl(path: &Path, samples: &[FeatureSample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_feature_jsonl(path: &Path) -> Result<Vec<FeatureSample>> {
    let f = File::open(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: format!("cannot open: {e}"),
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: FeatureSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(s);
    }
    Ok(out)
}

//! Latent-factor interaction generator with a known ground truth.
//!
//! Users get factors `U ~ N(0, 1/d)`. Item factors are `V ~ N(0, 1/d)`, or
//! with `clusters > 0`, `V_i = C_{i mod clusters} + spread·ξ_i` for cluster
//! centres `C` and offsets `ξ` drawn the same way. Each user draws their
//! events independently from `softmax((U_u·V_i + skew·pop_i) / τ)` with
//! `pop_i = -ln(i + 1)`; τ = 0 selects the argmax. The teacher's item
//! embedding is a fixed random linear map of `[√d·V_i ‖ noise_scale·η_i]`
//! restricted to the first `teacher_visible_dims` factor columns, so it
//! carries (part of) the item factors but never the popularity term.

use std::path::Path;

use distillrec_autodiff::{write_tensors, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::InteractionDataset;
use crate::error::{CoreError, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub events_per_user: usize,
    pub latent_dim: usize,
    pub teacher_dim: usize,
    /// Extra noise coordinates appended before the teacher map.
    pub noise_dims: usize,
    pub noise_scale: f64,
    /// Leading latent dimensions the teacher sees; 0 means all. The rest is
    /// collaborative signal only present in the interactions.
    pub teacher_visible_dims: usize,
    pub popularity_skew: f64,
    pub temperature: f64,
    /// Number of item clusters; 0 draws item factors independently.
    pub clusters: usize,
    pub cluster_spread: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 2000,
            items: 500,
            events_per_user: 20,
            latent_dim: 16,
            teacher_dim: 32,
            noise_dims: 8,
            noise_scale: 0.5,
            teacher_visible_dims: 0,
            popularity_skew: 0.05,
            temperature: 0.2,
            clusters: 50,
            cluster_spread: 0.3,
        }
    }
}

impl SyntheticConfig {
    pub const KEYS: [&'static str; 12] = [
        "users",
        "items",
        "events_per_user",
        "latent_dim",
        "teacher_dim",
        "noise_dims",
        "noise_scale",
        "teacher_visible_dims",
        "popularity_skew",
        "temperature",
        "clusters",
        "cluster_spread",
    ];

    /// Sets one field from its key (see [`Self::KEYS`]).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || CoreError::Config(format!("synth.{key}: cannot parse `{value}`"));
        let int = || value.parse::<usize>().map_err(|_| bad());
        let float = || value.parse::<f64>().map_err(|_| bad());
        match key {
            "users" => self.users = int()?,
            "items" => self.items = int()?,
            "events_per_user" => self.events_per_user = int()?,
            "latent_dim" => self.latent_dim = int()?,
            "teacher_dim" => self.teacher_dim = int()?,
            "noise_dims" => self.noise_dims = int()?,
            "noise_scale" => self.noise_scale = float()?,
            "teacher_visible_dims" => self.teacher_visible_dims = int()?,
            "popularity_skew" => self.popularity_skew = float()?,
            "temperature" => self.temperature = float()?,
            "clusters" => self.clusters = int()?,
            "cluster_spread" => self.cluster_spread = float()?,
            _ => return Err(CoreError::Config(format!("unknown key synth.{key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if self.users == 0 || self.items < 2 || self.events_per_user == 0 {
            return bad("synthetic data needs users ≥ 1, items ≥ 2, events_per_user ≥ 1");
        }
        if self.latent_dim == 0 || self.teacher_dim == 0 {
            return bad("latent_dim and teacher_dim must be positive");
        }
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !finite_nonneg(self.temperature)
            || !finite_nonneg(self.noise_scale)
            || !finite_nonneg(self.cluster_spread)
            || !self.popularity_skew.is_finite()
        {
            return bad("temperature, noise_scale and cluster_spread must be finite and ≥ 0");
        }
        if self.teacher_visible_dims > self.latent_dim {
            return bad("teacher_visible_dims exceeds latent_dim");
        }
        Ok(())
    }

    fn visible_dims(&self) -> usize {
        match self.teacher_visible_dims {
            0 => self.latent_dim,
            v => v,
        }
    }
}

/// Generator ground truth, row-aligned with the dataset's internal ids.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTruth {
    pub user_factors: Tensor,
    pub item_factors: Tensor,
    pub teacher_embeddings: Tensor,
    pub config: SyntheticConfig,
    pub seed: u64,
}

impl SyntheticTruth {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        use std::io::Write;
        writeln!(
            out,
            "{}",
            serde_json::json!({ "seed": self.seed, "config": self.config })
        )?;
        write_tensors(
            &mut out,
            [
                ("user_factors", &self.user_factors),
                ("item_factors", &self.item_factors),
                ("teacher_embeddings", &self.teacher_embeddings),
            ],
        )?;
        out.flush()?;
        Ok(())
    }
}

fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized above")
}

/// Pure function of `(config, seed)`. Items never drawn are dropped and the
/// remaining ones re-indexed in generation order.
pub fn generate_synthetic(
    config: &SyntheticConfig,
    seed: u64,
) -> Result<(InteractionDataset, SyntheticTruth)> {
    config.validate()?;
    let d = config.latent_dim;
    let n = config.items;
    let mut rng = seed::rng(seed, &[seed::SYNTH_FACTORS]);
    let inv = 1.0 / (d as f64).sqrt();
    let users = normal_matrix(&mut rng, config.users, d, inv);
    let mut items = normal_matrix(&mut rng, n, d, inv);
    if config.clusters > 0 {
        let centres = normal_matrix(&mut rng, config.clusters, d, inv);
        for i in 0..n {
            let c = centres.row(i % config.clusters).to_vec();
            for (v, cv) in items.row_mut(i).iter_mut().zip(c) {
                *v = cv + config.cluster_spread * *v;
            }
        }
    }
    let visible = config.visible_dims();
    let source_dim = visible + config.noise_dims;
    let noise = normal_matrix(&mut rng, n, config.noise_dims, config.noise_scale);
    let map = normal_matrix(
        &mut rng,
        source_dim,
        config.teacher_dim,
        1.0 / (source_dim as f64).sqrt(),
    );
    let mut source = Vec::with_capacity(n * source_dim);
    for i in 0..n {
        source.extend(items.row(i)[..visible].iter().map(|v| v / inv));
        source.extend_from_slice(noise.row(i));
    }
    let teacher = Tensor::matrix(n, source_dim, source)?.matmul(&map)?;

    let popularity: Vec<f64> = (0..n).map(|i| -((i + 1) as f64).ln()).collect();
    let logits = users.matmul_transposed(&items)?;
    let mut rows = Vec::with_capacity(config.users * config.events_per_user);
    for u in 0..config.users {
        let mut urng = seed::rng(seed, &[seed::SYNTH_USER, u as u64]);
        let scores: Vec<f64> = logits
            .row(u)
            .iter()
            .zip(&popularity)
            .map(|(s, p)| s + config.popularity_skew * p)
            .collect();
        let mut stamps: Vec<i64> = (0..config.events_per_user)
            .map(|_| urng.random_range(0..1_000_000_000))
            .collect();
        stamps.sort_unstable();
        if config.temperature == 0.0 {
            let best = argmax(&scores);
            rows.extend(stamps.iter().map(|&t| (u as u64, best as u64, t)));
            continue;
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut cumulative = Vec::with_capacity(n);
        let mut acc = 0.0;
        for s in &scores {
            acc += ((s - max) / config.temperature).exp();
            cumulative.push(acc);
        }
        for &t in &stamps {
            let x = urng.random::<f64>() * acc;
            let i = cumulative.partition_point(|&c| c <= x).min(n - 1);
            rows.push((u as u64, i as u64, t));
        }
    }
    let dataset = InteractionDataset::from_raw(&rows);
    let keep: Vec<usize> = dataset.item_ids.iter().map(|&i| i as usize).collect();
    let select = |t: &Tensor| -> Result<Tensor> {
        let data = keep.iter().flat_map(|&i| t.row(i).to_vec()).collect();
        Ok(Tensor::matrix(keep.len(), t.cols(), data)?)
    };
    let truth = SyntheticTruth {
        user_factors: users,
        item_factors: select(&items)?,
        teacher_embeddings: select(&teacher)?,
        config: config.clone(),
        seed,
    };
    Ok((dataset, truth))
}

/// First index of the maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

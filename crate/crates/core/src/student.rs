//! Sequential student recommenders: item table, sequence encoder and
//! dot-product scorer, with the BCE recommendation loss.
//!
//! Batches are laid out slot-major: a batch of `B` prefixes left-padded to
//! length `L` becomes `L·B` rows where row `t·B + b` is slot `t` of prefix
//! `b`. Padded slots are masked out of both encoders.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use distillrec_autodiff::{read_tensors, write_tensors, Graph, NodeId, ParamStore, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{self, FusionMode};
use crate::error::{CoreError, Result};
use crate::seed;

pub const ITEM_EMB: &str = "item.emb";
const MASK_NEG: f64 = -1e9;
/// Prefixes per inference chunk.
const INFER_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Gated recurrent unit; the output is the last hidden state.
    Recurrent,
    /// One attention block read out at the last position, with learned
    /// position embeddings, residual connections and no normalization.
    SelfAttentive,
}

impl EncoderKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "recurrent" | "gru" => Ok(Self::Recurrent),
            "self-attentive" | "sasrec" => Ok(Self::SelfAttentive),
            _ => Err(CoreError::Config(format!(
                "student kind `{s}` is not recurrent or self-attentive"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Recurrent => "recurrent",
            Self::SelfAttentive => "self-attentive",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub kind: EncoderKind,
    pub item_count: usize,
    pub dim: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub heads: usize,
    pub embed_mode: FusionMode,
    /// Set once teacher embeddings are attached.
    pub teacher_dim: Option<usize>,
}

impl StudentConfig {
    pub fn new(kind: EncoderKind, item_count: usize) -> Self {
        Self {
            kind,
            item_count,
            dim: 64,
            max_len: 50,
            dropout: 0.1,
            heads: 1,
            embed_mode: FusionMode::None,
            teacher_dim: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.item_count < 2 || self.dim == 0 || self.max_len == 0 {
            return bad(format!("student needs ≥ 2 items and positive dims: {self:?}"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("{} heads do not divide dim {}", self.heads, self.dim));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentModel {
    pub config: StudentConfig,
    pub params: ParamStore,
}

fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| bound * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

impl StudentModel {
    /// A freshly initialized student with a free item table.
    pub fn new(mut config: StudentConfig, seed_value: u64) -> Result<Self> {
        config.embed_mode = FusionMode::None;
        config.teacher_dim = None;
        config.validate()?;
        let d = config.dim;
        let std = 1.0 / (d as f64).sqrt();
        let mut rng = seed::rng(seed_value, &[seed::MODEL_INIT]);
        let mut p = ParamStore::new();
        p.insert(ITEM_EMB, normal(&[config.item_count, d], std, &mut rng))?;
        match config.kind {
            EncoderKind::Recurrent => {
                p.insert("gru.wx", uniform(&[d, 3 * d], std, &mut rng))?;
                p.insert("gru.wh", uniform(&[d, 3 * d], std, &mut rng))?;
                p.insert("gru.bx", Tensor::zeros(&[3 * d]))?;
                p.insert("gru.bh", Tensor::zeros(&[3 * d]))?;
            }
            EncoderKind::SelfAttentive => {
                p.insert("pos.emb", normal(&[config.max_len, d], std, &mut rng))?;
                for name in ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.w2"] {
                    p.insert(name, normal(&[d, d], std, &mut rng))?;
                }
                p.insert("ffn.b1", Tensor::zeros(&[d]))?;
                p.insert("ffn.b2", Tensor::zeros(&[d]))?;
            }
        }
        Ok(Self { config, params: p })
    }

    /// Wires teacher embeddings into the item encoder. `teacher` is the raw
    /// teacher table; it is standardized per column here.
    pub fn attach(&mut self, teacher: &Tensor, mode: FusionMode, seed_value: u64) -> Result<()> {
        if self.config.embed_mode != FusionMode::None {
            return Err(CoreError::invalid("teacher embeddings already attached"));
        }
        if !mode.uses_teacher() {
            return Ok(());
        }
        if teacher.rank() != 2 || teacher.rows() != self.config.item_count {
            return Err(CoreError::invalid(format!(
                "teacher embeddings {:?} do not cover {} items",
                teacher.shape(),
                self.config.item_count
            )));
        }
        let z = embed::standardize_columns(teacher);
        embed::attach_params(&mut self.params, &z, self.config.dim, mode, seed_value)?;
        self.config.embed_mode = mode;
        self.config.teacher_dim = Some(teacher.cols());
        Ok(())
    }

    /// Item embedding table node, `[items, dim]`.
    pub fn item_table(&self, g: &mut Graph) -> NodeId {
        let mode = self.config.embed_mode;
        let t = if mode.replaces_table() {
            embed::fused_table_node(g, mode)
        } else {
            g.param(ITEM_EMB)
        };
        g.label(t, "item.table")
    }

    /// Projected teacher table for the hint loss; errors outside hint mode.
    pub fn hint_target(&self, g: &mut Graph) -> Result<NodeId> {
        if self.config.embed_mode != FusionMode::HintAlign {
            return Err(CoreError::invalid("hint loss requires embed mode hint-align"));
        }
        let z = g.param(embed::TEACHER_Z);
        Ok(embed::project_node(g, z))
    }

    fn check_prefixes(&self, prefixes: &[&[usize]]) -> Result<()> {
        if prefixes.is_empty() {
            return Err(CoreError::invalid("empty batch"));
        }
        for p in prefixes {
            if p.is_empty() {
                return Err(CoreError::invalid("empty prefix"));
            }
            if p.len() > self.config.max_len {
                return Err(CoreError::invalid(format!(
                    "prefix of {} items exceeds max_len {}",
                    p.len(),
                    self.config.max_len
                )));
            }
            if let Some(&i) = p.iter().find(|&&i| i >= self.config.item_count) {
                return Err(CoreError::invalid(format!(
                    "item {i} outside catalog of {}",
                    self.config.item_count
                )));
            }
        }
        Ok(())
    }

    /// Sequence representations `[B, dim]` for a batch of prefixes.
    pub fn encode(
        &self,
        g: &mut Graph,
        table: NodeId,
        prefixes: &[&[usize]],
        dropout_seed: u64,
    ) -> Result<NodeId> {
        self.check_prefixes(prefixes)?;
        let b = prefixes.len();
        let l = prefixes.iter().map(|p| p.len()).max().expect("nonempty");
        let mut ids = Vec::with_capacity(l * b);
        let mut live = Vec::with_capacity(l * b);
        for t in 0..l {
            for p in prefixes {
                let pad = l - p.len();
                if t < pad {
                    ids.push(0);
                    live.push(false);
                } else {
                    ids.push(p[t - pad]);
                    live.push(true);
                }
            }
        }
        let x = g.gather(table, ids);
        let x = g.label(x, "seq.items");
        let out = match self.config.kind {
            EncoderKind::Recurrent => {
                let x = g.dropout(x, self.config.dropout, seed::derive(dropout_seed, &[0]));
                self.gru(g, x, &live, b, l)
            }
            EncoderKind::SelfAttentive => self.attention(g, x, prefixes, &live, b, l, dropout_seed)?,
        };
        Ok(g.label(out, "seq.repr"))
    }

    fn gru(&self, g: &mut Graph, x: NodeId, live: &[bool], b: usize, l: usize) -> NodeId {
        let d = self.config.dim;
        let wx = g.param("gru.wx");
        let wh = g.param("gru.wh");
        let bx = g.param("gru.bx");
        let bh = g.param("gru.bh");
        let xw = g.matmul(x, wx);
        let xw = g.add_row(xw, bx);
        let mut h = g.constant(Tensor::zeros(&[b, d]));
        for t in 0..l {
            let mask = &live[t * b..(t + 1) * b];
            let xt = g.slice_rows(xw, t * b, b);
            let hw = g.matmul(h, wh);
            let hw = g.add_row(hw, bh);
            let xr = g.slice_cols(xt, 0, d);
            let hr = g.slice_cols(hw, 0, d);
            let r = g.add(xr, hr);
            let r = g.sigmoid(r);
            let xz = g.slice_cols(xt, d, d);
            let hz = g.slice_cols(hw, d, d);
            let z = g.add(xz, hz);
            let z = g.sigmoid(z);
            let xn = g.slice_cols(xt, 2 * d, d);
            let hn = g.slice_cols(hw, 2 * d, d);
            let rn = g.mul(r, hn);
            let n = g.add(xn, rn);
            let n = g.tanh(n);
            // h' = (1 - z)·n + z·h = n + z·(h - n)
            let hmn = g.sub(h, n);
            let zh = g.mul(z, hmn);
            let next = g.add(n, zh);
            if mask.iter().all(|&m| m) {
                h = next;
            } else if mask.iter().any(|&m| m) {
                let m = g.constant(Tensor::new(vec![b, 1], mask.iter().map(|&m| m as u8 as f64).collect()).expect("sized"));
                let delta = g.sub(next, h);
                let delta = g.mul_col(m, delta);
                h = g.add(h, delta);
            }
        }
        h
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        x: NodeId,
        prefixes: &[&[usize]],
        live: &[bool],
        b: usize,
        l: usize,
        dropout_seed: u64,
    ) -> Result<NodeId> {
        let d = self.config.dim;
        let heads = self.config.heads;
        let dh = d / heads;
        // Positions count from the first item of each prefix.
        let mut pos_ids = Vec::with_capacity(l * b);
        for t in 0..l {
            for p in prefixes {
                let pad = l - p.len();
                pos_ids.push(t.saturating_sub(pad));
            }
        }
        let pos_table = g.param("pos.emb");
        let pos = g.gather(pos_table, pos_ids);
        let x = g.add(x, pos);
        let x = g.dropout(x, self.config.dropout, seed::derive(dropout_seed, &[0]));
        let wq = g.param("attn.wq");
        let wk = g.param("attn.wk");
        let wv = g.param("attn.wv");
        let wo = g.param("attn.wo");
        let last = g.slice_rows(x, (l - 1) * b, b);
        let q = g.matmul(last, wq);
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        let mut mask = vec![0.0; b * l];
        for t in 0..l {
            for bi in 0..b {
                if !live[t * b + bi] {
                    mask[bi * l + t] = MASK_NEG;
                }
            }
        }
        let mask = g.constant(Tensor::matrix(b, l, mask)?);
        let mut parts = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh),
                    g.slice_cols(k, h * dh, dh),
                    g.slice_cols(v, h * dh, dh),
                )
            };
            let s = g.block_dot(qh, kh, l);
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let s = g.add(s, mask);
            let a = g.row_softmax(s);
            let a = g.label(a, "attn.weights");
            parts.push(g.block_mix(a, vh));
        }
        let att = if heads == 1 { parts[0] } else { g.concat_cols(parts) };
        let att = g.matmul(att, wo);
        let y = g.add(last, att);
        let w1 = g.param("ffn.w1");
        let b1 = g.param("ffn.b1");
        let w2 = g.param("ffn.w2");
        let b2 = g.param("ffn.b2");
        let f = g.matmul(y, w1);
        let f = g.add_row(f, b1);
        let f = g.relu(f);
        let f = g.dropout(f, self.config.dropout, seed::derive(dropout_seed, &[1]));
        let f = g.matmul(f, w2);
        let f = g.add_row(f, b2);
        Ok(g.add(y, f))
    }

    /// Item embeddings as the scorer sees them (fused in offset modes).
    pub fn item_matrix(&self) -> Result<Tensor> {
        let mut g = Graph::new(false);
        let t = self.item_table(&mut g);
        g.forward(&self.params, &Default::default())?;
        Ok(g.value(t)?.clone())
    }

    /// Rows of [`Self::item_matrix`] for `ids`, in order.
    pub fn encode_items(&self, ids: &[usize]) -> Result<Tensor> {
        if let Some(&i) = ids.iter().find(|&&i| i >= self.config.item_count) {
            return Err(CoreError::invalid(format!("item {i} outside catalog")));
        }
        let mut g = Graph::new(false);
        let t = self.item_table(&mut g);
        let rows = g.gather(t, ids.to_vec());
        g.forward(&self.params, &Default::default())?;
        Ok(g.value(rows)?.clone())
    }

    /// Evaluation-mode sequence representations, `[prefixes, dim]`.
    pub fn encode_sequences(&self, prefixes: &[&[usize]]) -> Result<Tensor> {
        let items = self.item_matrix()?;
        self.encode_with_items(&items, prefixes)
    }

    fn encode_with_items(&self, items: &Tensor, prefixes: &[&[usize]]) -> Result<Tensor> {
        let mut g = Graph::new(false);
        let table = g.constant(items.clone());
        let out = self.encode(&mut g, table, prefixes, 0)?;
        g.forward(&self.params, &Default::default())?;
        Ok(g.value(out)?.clone())
    }

    /// Full-catalog scores `[prefixes, items]`.
    pub fn score_all(&self, prefixes: &[&[usize]]) -> Result<Tensor> {
        let items = self.item_matrix()?;
        let es = self.encode_with_items(&items, prefixes)?;
        Ok(es.matmul_transposed(&items)?)
    }

    /// Top-`k` items per prefix over the full catalog, scored in parallel
    /// chunks. With `exclude_seen`, prefix items are never recommended.
    pub fn recommend(&self, prefixes: &[&[usize]], k: usize, exclude_seen: bool) -> Result<Vec<Vec<usize>>> {
        if k > self.config.item_count {
            return Err(CoreError::invalid(format!(
                "k = {k} exceeds catalog size {}",
                self.config.item_count
            )));
        }
        if prefixes.is_empty() {
            return Ok(Vec::new());
        }
        let items = self.item_matrix()?;
        let chunks: Vec<Vec<Vec<usize>>> = prefixes
            .par_chunks(INFER_CHUNK)
            .map(|chunk| {
                let es = self.encode_with_items(&items, chunk)?;
                let scores = es.matmul_transposed(&items)?;
                Ok(chunk
                    .iter()
                    .enumerate()
                    .map(|(r, p)| {
                        let mut row = scores.row(r).to_vec();
                        if exclude_seen {
                            for &i in p.iter() {
                                row[i] = f64::NEG_INFINITY;
                            }
                        }
                        top_k(&row, k)
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    /// Writes a JSON config line followed by every parameter tensor.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", serde_json::to_string(&self.config)?)?;
        write_tensors(&mut out, self.params.iter())?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);
        let mut header = String::new();
        input.read_line(&mut header)?;
        let config: StudentConfig = serde_json::from_str(header.trim()).map_err(|e| CoreError::Parse {
            source_name: path.display().to_string(),
            line: 1,
            detail: e.to_string(),
        })?;
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, t) in read_tensors(input, 2)? {
            params.insert(name, t)?;
        }
        if params.contains(embed::TEACHER_Z) {
            params.set_frozen(embed::TEACHER_Z, true)?;
        }
        let model = Self { config, params };
        // Building the item table checks that the expected tensors exist.
        model.item_matrix()?;
        Ok(model)
    }
}

/// Indices of the `k` largest scores, best first, ties by ascending index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

/// `-Σ_s [log σ(ŷ_s+) + Σ_j log σ(-ŷ_sj)]` for logits laid out `[B, 1 + n]`
/// with the positive in column 0. Mean reduction divides by `B`.
pub fn rec_loss_node(g: &mut Graph, logits: NodeId, batch: usize, negatives: usize, reduction: Reduction) -> NodeId {
    let mut signs = vec![-1.0; batch * (1 + negatives)];
    for b in 0..batch {
        signs[b * (1 + negatives)] = 1.0;
    }
    let s = g.constant(Tensor::matrix(batch, 1 + negatives, signs).expect("sized"));
    let signed = g.mul(logits, s);
    let ls = g.log_sigmoid(signed);
    let total = g.sum(ls);
    let scale = match reduction {
        Reduction::Mean => -1.0 / batch as f64,
        Reduction::Sum => -1.0,
    };
    let l = g.scale(total, scale);
    g.label(l, "loss.rec")
}

/// Scalar form of [`rec_loss_node`].
pub fn rec_loss_value(positives: &[f64], negatives: &[Vec<f64>], reduction: Reduction) -> f64 {
    use distillrec_autodiff::log_sigmoid;
    let total: f64 = positives
        .iter()
        .zip(negatives)
        .map(|(&p, ns)| -log_sigmoid(p) - ns.iter().map(|&n| log_sigmoid(-n)).sum::<f64>())
        .sum();
    match reduction {
        Reduction::Mean => total / positives.len() as f64,
        Reduction::Sum => total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use distillrec_autodiff::check_gradients;

    fn cfg(kind: EncoderKind) -> StudentConfig {
        StudentConfig {
            dim: 8,
            max_len: 6,
            ..StudentConfig::new(kind, 12)
        }
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&[0.1, 0.9, 0.5], 2), vec![1, 2]);
        assert_eq!(top_k(&[0.3; 4], 2), vec![0, 1]);
        assert_eq!(top_k(&[0.3, 0.7], 5), vec![1, 0]);
    }

    #[test]
    fn rec_loss_at_zero_logits() {
        let v = rec_loss_value(&[0.0], &[vec![0.0]], Reduction::Sum);
        assert!((v - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
        let mut g = Graph::new(false);
        let logits = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let l = rec_loss_node(&mut g, logits, 1, 1, Reduction::Sum);
        g.forward(&ParamStore::new(), &Default::default()).unwrap();
        assert!((g.value(l).unwrap().item().unwrap() - 1.3862943611198906).abs() < 1e-15);
        assert!(rec_loss_value(&[50.0], &[vec![-50.0]], Reduction::Sum) < 1e-20);
    }

    #[test]
    fn gathered_rows_repeat() {
        let m = StudentModel::new(cfg(EncoderKind::Recurrent), 1).unwrap();
        let e = m.encode_items(&[0, 0]).unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert!(m.encode_items(&[12]).is_err());
    }

    #[test]
    fn gather_adjoint_is_one_hot_rows() {
        let m = StudentModel::new(cfg(EncoderKind::Recurrent), 1).unwrap();
        let mut g = Graph::new(false);
        let t = m.item_table(&mut g);
        let rows = g.gather(t, vec![3, 5, 3]);
        let s = g.sum(rows);
        g.forward(&m.params, &Default::default()).unwrap();
        let grads = g.backward(s, &Tensor::scalar(1.0)).unwrap();
        let ge = grads.get(ITEM_EMB).unwrap();
        for r in 0..12 {
            let want = match r {
                3 => 2.0,
                5 => 1.0,
                _ => 0.0,
            };
            assert!(ge.row(r).iter().all(|&v| v == want));
        }
    }

    #[test]
    fn zero_recurrent_model_outputs_zero() {
        let mut m = StudentModel::new(cfg(EncoderKind::Recurrent), 2).unwrap();
        m.params.get_mut(ITEM_EMB).unwrap().data_mut().fill(0.0);
        let e = m.encode_sequences(&[&[1, 2, 3], &[4]]).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_is_order_sensitive() {
        let m = StudentModel::new(cfg(EncoderKind::SelfAttentive), 3).unwrap();
        let e = m.encode_sequences(&[&[1, 2], &[2, 1]]).unwrap();
        assert_ne!(e.row(0), e.row(1));
    }

    #[test]
    fn single_item_prefix_ignores_padding_and_other_items() {
        let m = StudentModel::new(cfg(EncoderKind::SelfAttentive), 4).unwrap();
        let alone = m.encode_sequences(&[&[7]]).unwrap();
        let padded = m.encode_sequences(&[&[7], &[1, 2, 3, 4, 5]]).unwrap();
        for (a, b) in alone.row(0).iter().zip(padded.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut other = m.clone();
        let emb = other.params.get_mut(ITEM_EMB).unwrap();
        for r in (0..12).filter(|&r| r != 7) {
            emb.row_mut(r).fill(0.5);
        }
        let changed = other.encode_sequences(&[&[7]]).unwrap();
        assert_eq!(alone, changed);
        // Only position 0 matters: perturbing later positions changes nothing.
        let mut pos = m.clone();
        pos.params.get_mut("pos.emb").unwrap().row_mut(3).fill(9.0);
        assert_eq!(alone, pos.encode_sequences(&[&[7]]).unwrap());
    }

    #[test]
    fn recurrent_padding_is_inert() {
        let m = StudentModel::new(cfg(EncoderKind::Recurrent), 5).unwrap();
        let alone = m.encode_sequences(&[&[7, 1]]).unwrap();
        let padded = m.encode_sequences(&[&[7, 1], &[1, 2, 3, 4, 5]]).unwrap();
        for (a, b) in alone.row(0).iter().zip(padded.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn full_catalog_scores_match_loop() {
        for kind in [EncoderKind::Recurrent, EncoderKind::SelfAttentive] {
            let m = StudentModel::new(cfg(kind), 6).unwrap();
            let prefixes: [&[usize]; 2] = [&[1, 2], &[3]];
            let scores = m.score_all(&prefixes).unwrap();
            let es = m.encode_sequences(&prefixes).unwrap();
            let items = m.item_matrix().unwrap();
            for r in 0..2 {
                for i in 0..12 {
                    let dot: f64 = es.row(r).iter().zip(items.row(i)).map(|(a, b)| a * b).sum();
                    assert!((scores.row(r)[i] - dot).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bad_prefixes_rejected() {
        let m = StudentModel::new(cfg(EncoderKind::Recurrent), 1).unwrap();
        assert!(m.encode_sequences(&[&[]]).is_err());
        assert!(m.encode_sequences(&[&[1; 7]]).is_err());
        assert!(m.encode_sequences(&[&[12]]).is_err());
    }

    #[test]
    fn exclude_seen_drops_prefix_items() {
        let m = StudentModel::new(cfg(EncoderKind::Recurrent), 1).unwrap();
        let all = m.recommend(&[&[1, 2]], 12, false).unwrap();
        assert_eq!(all[0].len(), 12);
        let top = m.recommend(&[&[1, 2]], 10, true).unwrap();
        assert!(!top[0].contains(&1) && !top[0].contains(&2));
    }

    #[test]
    fn multi_head_gradients() {
        let mut c = cfg(EncoderKind::SelfAttentive);
        c.heads = 2;
        c.dropout = 0.0;
        let m = StudentModel::new(c, 7).unwrap();
        let mut g = Graph::new(true);
        let t = m.item_table(&mut g);
        let e = m.encode(&mut g, t, &[&[1, 2, 3], &[4]], 0).unwrap();
        let logits = g.gather_dot(e, t, vec![5, 6, 7, 8], 2);
        let l = rec_loss_node(&mut g, logits, 2, 1, Reduction::Mean);
        let r = check_gradients(&mut g, l, &m.params, &Default::default(), 1e-5, 150, 3).unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }
}

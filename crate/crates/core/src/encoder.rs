//! Small transformer encoder mapping token sequences to unit-norm embeddings.
//!
//! Parameter count for vocabulary `V`, block size `T`, width `D`, `L` layers
//! and output dimension `d`:
//!
//! ```text
//! V*D + T*D + L*(12*D^2 + 13*D) + 2*D + D*d + d^2 + 4*d
//! ```

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    gelu, gelu_backward, l2_normalize_rows, l2_normalize_rows_backward, normal_matrix, softmax_rows,
    softmax_rows_backward, LayerNorm, LayerNormCache, Linear, Parameters, ProjectionHead, ProjectionHeadCache,
};
use crate::optim::Optimizer;
use crate::textcodec::{Modality, TokenSequence, PAD};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Cls,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub block_size: usize,
    pub d_model: usize,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    #[serde(default)]
    pub pooling: Pooling,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("block_size", self.block_size),
            ("d_model", self.d_model),
            ("d", self.d),
            ("layers", self.layers),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return Err(Error::config(format!("encoder {name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count (see module docs).
    pub fn param_count(&self) -> usize {
        let (v, t, dm, l, d) = (self.vocab_size, self.block_size, self.d_model, self.layers, self.d);
        v * dm + t * dm + l * (12 * dm * dm + 13 * dm) + 2 * dm + dm * d + d * d + 4 * d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Block {
    fn new(rng: &mut ChaCha8Rng, dm: usize) -> Self {
        Self {
            ln1: LayerNorm::new(dm),
            qkv: Linear::new(rng, dm, 3 * dm, INIT_STD),
            proj: Linear::new(rng, dm, dm, INIT_STD),
            ln2: LayerNorm::new(dm),
            ff1: Linear::new(rng, dm, 4 * dm, INIT_STD),
            ff2: Linear::new(rng, 4 * dm, dm, INIT_STD),
        }
    }
}

impl Parameters for Block {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        self.ln1.visit(f);
        self.qkv.visit(f);
        self.proj.visit(f);
        self.ln2.visit(f);
        self.ff1.visit(f);
        self.ff2.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut [f64])) {
        self.ln1.visit_mut(f);
        self.qkv.visit_mut(f);
        self.proj.visit_mut(f);
        self.ln2.visit_mut(f);
        self.ff1.visit_mut(f);
        self.ff2.visit_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    pub head: ProjectionHead,
}

impl Parameters for EncoderParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a [f64])) {
        f(self.token_embedding.as_slice().expect("contiguous"));
        f(self.position_embedding.as_slice().expect("contiguous"));
        for b in &self.blocks {
            b.visit(f);
        }
        self.final_norm.visit(f);
        self.head.visit(f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut [f64])) {
        f(self.token_embedding.as_slice_mut().expect("contiguous"));
        f(self.position_embedding.as_slice_mut().expect("contiguous"));
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.final_norm.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Unit-norm embeddings for one batch of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub matrix: Array2<f64>,
    pub modality: Modality,
    pub requires_grad: bool,
    /// Identifies the batch of programs the rows were computed from.
    pub batch_key: u64,
}

impl EmbeddingBatch {
    pub fn new(matrix: Array2<f64>, modality: Modality, requires_grad: bool, batch_key: u64) -> Self {
        Self {
            matrix,
            modality,
            requires_grad,
            batch_key,
        }
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn with_key(mut self, batch_key: u64) -> Self {
        self.batch_key = batch_key;
        self
    }
}

struct BlockCache {
    ln1: LayerNormCache,
    a: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ln2: LayerNormCache,
    b: Array2<f64>,
    f1: Array2<f64>,
    g: Array2<f64>,
}

struct SeqCache {
    ids: Vec<usize>,
    positions: Vec<usize>,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
    out: Array2<f64>,
}

/// Everything `backward` needs from a training forward pass.
pub struct ForwardCache {
    seqs: Vec<SeqCache>,
    head: ProjectionHeadCache,
    unit: Array2<f64>,
    norms: Array1<f64>,
}

fn check_finite(x: &Array2<f64>, layer: usize, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            layer,
            msg: format!("non-finite {what}"),
        })
    }
}

/// Stable key for a batch of programs: FNV-1a over their ids in order.
pub fn batch_key_of<S: AsRef<str>>(ids: &[S]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for id in ids {
        for &b in id.as_ref().as_bytes().iter().chain(&[0xff]) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

impl EncoderParams {
    pub fn init(seed: u64, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dm = config.d_model;
        let token_embedding = normal_matrix(&mut rng, config.vocab_size, dm, INIT_STD);
        let position_embedding = normal_matrix(&mut rng, config.block_size, dm, INIT_STD);
        let blocks = (0..config.layers).map(|_| Block::new(&mut rng, dm)).collect();
        let head = ProjectionHead::new(&mut rng, dm, config.d, INIT_STD);
        Ok(Self {
            config: config.clone(),
            token_embedding,
            position_embedding,
            blocks,
            final_norm: LayerNorm::new(dm),
            head,
        })
    }

    fn check_batch(&self, batch: &[&TokenSequence]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::shape("cannot project an empty batch"));
        }
        for seq in batch {
            if seq.len() > self.config.block_size {
                return Err(Error::shape(format!(
                    "sequence of length {} exceeds block size {}",
                    seq.len(),
                    self.config.block_size
                )));
            }
            if let Some(&id) = seq.ids.iter().find(|&&id| id >= self.config.vocab_size) {
                return Err(Error::Range {
                    id,
                    size: self.config.vocab_size,
                });
            }
            if seq.ids.iter().all(|&id| id == PAD) {
                return Err(Error::shape("sequence has no non-PAD tokens"));
            }
        }
        Ok(())
    }

    /// Inference-mode projection.
    pub fn project(&self, batch: &[&TokenSequence]) -> Result<EmbeddingBatch> {
        Ok(self.forward(batch)?.0)
    }

    /// Training-mode projection that also returns the activations for `backward`.
    pub fn forward(&self, batch: &[&TokenSequence]) -> Result<(EmbeddingBatch, ForwardCache)> {
        self.check_batch(batch)?;
        let seqs: Vec<SeqCache> = batch
            .par_iter()
            .map(|seq| self.forward_seq(&seq.ids))
            .collect::<Result<_>>()?;
        let dm = self.config.d_model;
        let mut pooled = Array2::zeros((seqs.len(), dm));
        for (i, sc) in seqs.iter().enumerate() {
            pooled.row_mut(i).assign(&self.pool(sc));
        }
        let (h, head) = self.head.forward(&pooled);
        check_finite(&h, self.config.layers + 1, "projection head output")?;
        let (unit, norms) = l2_normalize_rows(&h);
        let out = EmbeddingBatch::new(unit.clone(), batch[0].modality, true, 0);
        Ok((out, ForwardCache { seqs, head, unit, norms }))
    }

    fn pool(&self, sc: &SeqCache) -> Array1<f64> {
        match self.config.pooling {
            Pooling::Mean => sc.out.mean_axis(Axis(0)).expect("non-empty"),
            Pooling::Cls => sc.out.row(0).to_owned(),
        }
    }

    fn forward_seq(&self, ids: &[usize]) -> Result<SeqCache> {
        let (ids, positions): (Vec<usize>, Vec<usize>) = ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id != PAD)
            .map(|(p, &id)| (id, p))
            .unzip();
        let dm = self.config.d_model;
        let mut x = Array2::zeros((ids.len(), dm));
        for (r, (&id, &p)) in ids.iter().zip(&positions).enumerate() {
            let mut row = x.row_mut(r);
            row += &self.token_embedding.row(id);
            row += &self.position_embedding.row(p);
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let (next, cache) = self.block_forward(block, x);
            check_finite(&next, l, "block output")?;
            blocks.push(cache);
            x = next;
        }
        let (y, final_ln) = self.final_norm.forward(&x);
        check_finite(&y, self.config.layers, "final norm output")?;
        Ok(SeqCache {
            ids,
            positions,
            blocks,
            final_ln,
            out: y,
        })
    }

    fn block_forward(&self, block: &Block, x: Array2<f64>) -> (Array2<f64>, BlockCache) {
        let dm = self.config.d_model;
        let heads = self.config.heads;
        let hd = dm / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (a, ln1) = block.ln1.forward(&x);
        let qkv = block.qkv.forward(&a);
        let mut attn = Array2::zeros((x.nrows(), dm));
        let mut probs = Vec::with_capacity(heads);
        for hi in 0..heads {
            let q = qkv.slice(s![.., hi * hd..(hi + 1) * hd]);
            let k = qkv.slice(s![.., dm + hi * hd..dm + (hi + 1) * hd]);
            let v = qkv.slice(s![.., 2 * dm + hi * hd..2 * dm + (hi + 1) * hd]);
            let p = softmax_rows(&(q.dot(&k.t()) * scale));
            attn.slice_mut(s![.., hi * hd..(hi + 1) * hd]).assign(&p.dot(&v));
            probs.push(p);
        }
        let h = &x + &block.proj.forward(&attn);
        let (b, ln2) = block.ln2.forward(&h);
        let f1 = block.ff1.forward(&b);
        let g = gelu(&f1);
        let out = &h + &block.ff2.forward(&g);
        (
            out,
            BlockCache {
                ln1,
                a,
                qkv,
                probs,
                attn,
                ln2,
                b,
                f1,
                g,
            },
        )
    }

    /// Parameter gradients for an upstream gradient on the unit-norm output rows.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Array2<f64>) -> Result<EncoderParams> {
        if d_out.dim() != cache.unit.dim() {
            return Err(Error::shape(format!(
                "upstream gradient {:?} does not match embeddings {:?}",
                d_out.dim(),
                cache.unit.dim()
            )));
        }
        let mut grad = self.zeros_like();
        let dh = l2_normalize_rows_backward(&cache.unit, &cache.norms, d_out);
        let dpooled = self.head.backward(&cache.head, &dh, &mut grad.head);
        let per_seq: Vec<EncoderParams> = cache
            .seqs
            .par_iter()
            .enumerate()
            .map(|(i, sc)| {
                let mut g = self.zeros_like();
                self.backward_seq(sc, &dpooled.row(i).to_owned(), &mut g);
                g
            })
            .collect();
        for g in &per_seq {
            grad.accumulate(g);
        }
        Ok(grad)
    }

    fn backward_seq(&self, sc: &SeqCache, dpool: &Array1<f64>, grad: &mut EncoderParams) {
        let t = sc.ids.len();
        let dm = self.config.d_model;
        let mut dy = Array2::zeros((t, dm));
        match self.config.pooling {
            Pooling::Mean => {
                let scaled = dpool / t as f64;
                for mut row in dy.rows_mut() {
                    row.assign(&scaled);
                }
            }
            Pooling::Cls => dy.row_mut(0).assign(dpool),
        }
        let mut dx = self.final_norm.backward(&sc.final_ln, &dy, &mut grad.final_norm);
        for (l, block) in self.blocks.iter().enumerate().rev() {
            dx = self.block_backward(block, &sc.blocks[l], &dx, &mut grad.blocks[l]);
        }
        for (r, (&id, &p)) in sc.ids.iter().zip(&sc.positions).enumerate() {
            let row = dx.row(r);
            let mut te = grad.token_embedding.row_mut(id);
            te += &row;
            let mut pe = grad.position_embedding.row_mut(p);
            pe += &row;
        }
    }

    fn block_backward(&self, block: &Block, c: &BlockCache, dout: &Array2<f64>, g: &mut Block) -> Array2<f64> {
        let dm = self.config.d_model;
        let heads = self.config.heads;
        let hd = dm / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let dg = block.ff2.backward(&c.g, dout, &mut g.ff2);
        let df1 = gelu_backward(&c.f1, &dg);
        let db = block.ff1.backward(&c.b, &df1, &mut g.ff1);
        let dh = dout + &block.ln2.backward(&c.ln2, &db, &mut g.ln2);
        let dattn = block.proj.backward(&c.attn, &dh, &mut g.proj);
        let mut dqkv = Array2::zeros(c.qkv.raw_dim());
        for hi in 0..heads {
            let (qs, ks, vs) = (hi * hd, dm + hi * hd, 2 * dm + hi * hd);
            let q = c.qkv.slice(s![.., qs..qs + hd]);
            let k = c.qkv.slice(s![.., ks..ks + hd]);
            let v = c.qkv.slice(s![.., vs..vs + hd]);
            let p = &c.probs[hi];
            let dho = dattn.slice(s![.., qs..qs + hd]);
            let dp = dho.dot(&v.t());
            let dv = p.t().dot(&dho);
            let ds = softmax_rows_backward(p, &dp) * scale;
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![.., qs..qs + hd]).assign(&dq);
            dqkv.slice_mut(s![.., ks..ks + hd]).assign(&dk);
            dqkv.slice_mut(s![.., vs..vs + hd]).assign(&dv);
        }
        let da = block.qkv.backward(&c.a, &dqkv, &mut g.qkv);
        dh + block.ln1.backward(&c.ln1, &da, &mut g.ln1)
    }
}

/// Encoder parameters plus whether optimiser updates are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderHandle {
    pub params: EncoderParams,
    frozen: bool,
}

pub fn freeze(params: EncoderParams) -> EncoderHandle {
    EncoderHandle { params, frozen: true }
}

pub fn trainable(params: EncoderParams) -> EncoderHandle {
    EncoderHandle { params, frozen: false }
}

impl EncoderHandle {
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn project(&self, batch: &[&TokenSequence]) -> Result<EmbeddingBatch> {
        let mut out = self.params.project(batch)?;
        out.requires_grad = !self.frozen;
        Ok(out)
    }

    /// Applies one optimiser step under parameter group `slot`.
    pub fn apply(&mut self, optimizer: &mut dyn Optimizer, slot: &str, grad: &EncoderParams) -> Result<()> {
        if self.frozen {
            return Err(Error::contract(format!(
                "optimizer step requested on frozen encoder `{slot}`"
            )));
        }
        optimizer.step(slot, &mut self.params.slices_mut(), &grad.slices())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::max_rel_err;
    use crate::textcodec::{BOS, EOS};

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 12,
            block_size: 10,
            d_model: 8,
            d: 6,
            layers: 2,
            heads: 2,
            pooling: Pooling::Mean,
        }
    }

    fn seq(ids: &[usize]) -> TokenSequence {
        TokenSequence {
            ids: ids.to_vec(),
            modality: Modality::Binary,
            truncated: false,
        }
    }

    #[test]
    fn param_count_matches_formula() {
        let cfg = EncoderConfig {
            vocab_size: 500,
            block_size: 256,
            d_model: 64,
            d: 32,
            layers: 2,
            heads: 4,
            pooling: Pooling::Mean,
        };
        let p = EncoderParams::init(1, &cfg).unwrap();
        // 500*64 + 256*64 + 2*(12*4096 + 13*64) + 128 + 64*32 + 32*32 + 128
        let hand = 32_000 + 16_384 + 2 * (49_152 + 832) + 128 + 2_048 + 1_024 + 128;
        assert_eq!(hand, 151_680);
        assert_eq!(p.num_params(), hand);
        assert_eq!(cfg.param_count(), hand);
    }

    #[test]
    fn init_is_deterministic_and_validates_heads() {
        let a = EncoderParams::init(3, &tiny()).unwrap();
        let b = EncoderParams::init(3, &tiny()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let mut bad = tiny();
        bad.d_model = 64;
        bad.heads = 3;
        assert!(EncoderParams::init(0, &bad).unwrap_err().is_config());
    }

    #[test]
    fn rows_are_unit_and_padding_is_ignored() {
        let p = EncoderParams::init(5, &tiny()).unwrap();
        let a = seq(&[BOS, 4, 5, 6, EOS]);
        let b = seq(&[BOS, 4, 5, 6, EOS, PAD, PAD]);
        let c = seq(&[BOS, 7, EOS]);
        let out = p.project(&[&a, &b, &c, &a]).unwrap();
        for r in out.matrix.rows() {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-5);
        }
        for j in 0..out.dim() {
            assert!((out.matrix[[0, j]] - out.matrix[[1, j]]).abs() < 1e-5);
            assert_eq!(out.matrix[[0, j]], out.matrix[[3, j]]);
        }
    }

    #[test]
    fn permuting_batch_permutes_rows() {
        let p = EncoderParams::init(5, &tiny()).unwrap();
        let s = [seq(&[BOS, 4, EOS]), seq(&[BOS, 5, 6, EOS]), seq(&[BOS, 9, 9, 8, EOS])];
        let fwd = p.project(&[&s[0], &s[1], &s[2]]).unwrap();
        let rev = p.project(&[&s[2], &s[0], &s[1]]).unwrap();
        assert_eq!(fwd.matrix.row(0), rev.matrix.row(1));
        assert_eq!(fwd.matrix.row(2), rev.matrix.row(0));
    }

    #[test]
    fn empty_and_oversized_batches_rejected() {
        let p = EncoderParams::init(5, &tiny()).unwrap();
        assert!(p.project(&[]).is_err());
        let long = seq(&[4; 11]);
        assert!(matches!(p.project(&[&long]), Err(Error::Shape(_))));
    }

    #[test]
    fn nan_reports_layer() {
        let mut p = EncoderParams::init(5, &tiny()).unwrap();
        p.blocks[1].ff2.bias[0] = f64::NAN;
        match p.project(&[&seq(&[BOS, 4, EOS])]) {
            Err(Error::Numeric { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    fn loss_for(p: &EncoderParams, batch: &[&TokenSequence], w: &Array2<f64>) -> f64 {
        (p.project(batch).unwrap().matrix * w).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        for pooling in [Pooling::Mean, Pooling::Cls] {
            let mut cfg = tiny();
            cfg.pooling = pooling;
            let mut p = EncoderParams::init(11, &cfg).unwrap();
            // Larger weights so every path carries signal.
            p.visit_mut(&mut |s| s.iter_mut().for_each(|x| *x *= 20.0));
            let s = [seq(&[BOS, 4, 5, EOS, PAD]), seq(&[BOS, 6, 7, 8, 9, EOS])];
            let batch: Vec<&TokenSequence> = s.iter().collect();
            let w = normal_matrix(&mut ChaCha8Rng::seed_from_u64(2), 2, cfg.d, 1.0);
            let (_, cache) = p.forward(&batch).unwrap();
            let analytic = p.backward(&cache, &w).unwrap().flat();
            let n = analytic.len();
            let eps = 1e-6;
            let mut numeric = vec![0.0; n];
            for (k, slot) in numeric.iter_mut().enumerate() {
                let bump = |delta: f64| {
                    let mut q = p.clone();
                    let mut idx = 0;
                    q.visit_mut(&mut |sl| {
                        if k >= idx && k < idx + sl.len() {
                            sl[k - idx] += delta;
                        }
                        idx += sl.len();
                    });
                    loss_for(&q, &batch, &w)
                };
                *slot = (bump(eps) - bump(-eps)) / (2.0 * eps);
            }
            let a = Array2::from_shape_vec((1, n), analytic).unwrap();
            let b = Array2::from_shape_vec((1, n), numeric).unwrap();
            assert!(max_rel_err(&a, &b) < 1e-5, "{pooling:?}: {}", max_rel_err(&a, &b));
        }
    }

    #[test]
    fn frozen_handle_rejects_updates() {
        let p = EncoderParams::init(1, &tiny()).unwrap();
        let g = p.zeros_like();
        let mut opt = crate::optim::Sgd::new(0.1);
        let mut h = freeze(p.clone());
        assert!(matches!(h.apply(&mut opt, "anchor", &g), Err(Error::Contract(_))));
        let mut t = trainable(p);
        assert!(t.apply(&mut opt, "binary", &g).is_ok());
    }
}

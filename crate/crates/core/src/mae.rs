//! Masked autoencoder that predicts codebook tokens (or pixels) for masked
//! patches.
//!
//! The encoder only ever sees visible patches; the decoder gets the encoded
//! visible tokens back in place, a learned mask token at every hidden
//! position, and fixed 2-D sin-cos positions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{geometry, Error, Result};
use crate::image::Image;
use crate::mask::PatchMask;
use crate::nn::{join, softmax_row, Block, BlockCache, Float, LayerNorm, LnCache, Linear, Module, Param};
use crate::vq::{TokenGrid, VqConfig, VqModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    TokenLogits,
    PixelRegression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaeConfig {
    pub patch_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
    pub head: HeadKind,
    /// Codebook size; ignored by the pixel head.
    pub vocab: usize,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            grid_rows: 16,
            grid_cols: 16,
            enc_dim: 192,
            enc_depth: 6,
            enc_heads: 6,
            dec_dim: 128,
            dec_depth: 4,
            dec_heads: 4,
            mlp_ratio: 4,
            head: HeadKind::TokenLogits,
            vocab: 256,
        }
    }
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.grid_rows == 0 || self.grid_cols == 0 {
            return bad("patch size and grid must be positive".into());
        }
        for (name, dim, heads) in [("encoder", self.enc_dim, self.enc_heads), ("decoder", self.dec_dim, self.dec_heads)] {
            if dim == 0 || dim % 4 != 0 {
                return bad(format!("{name} width {dim} must be a positive multiple of 4"));
            }
            if heads == 0 || dim % heads != 0 {
                return bad(format!("{name} width {dim} not divisible by {heads} heads"));
            }
        }
        if self.mlp_ratio == 0 {
            return bad("mlp ratio must be positive".into());
        }
        if self.head == HeadKind::TokenLogits && self.vocab < 2 {
            return bad(format!("vocabulary of {} tokens", self.vocab));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn out_dim(&self) -> usize {
        match self.head {
            HeadKind::TokenLogits => self.vocab,
            HeadKind::PixelRegression => self.patch_len(),
        }
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.grid_rows * self.patch_size, self.grid_cols * self.patch_size)
    }
}

/// Row-major patch vectors, each patch flattened row-major (HWC).
pub fn patchify(image: &Image, patch: usize) -> Result<Vec<f32>> {
    let (h, w) = image.dims();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(geometry!("image {h}x{w} not divisible by patch {patch}"));
    }
    let data = image.data();
    let mut out = Vec::with_capacity(data.len());
    for pr in 0..h / patch {
        for pc in 0..w / patch {
            for y in 0..patch {
                let start = ((pr * patch + y) * w + pc * patch) * 3;
                out.extend_from_slice(&data[start..start + patch * 3]);
            }
        }
    }
    Ok(out)
}

pub fn unpatchify(patches: &[f32], rows: usize, cols: usize, patch: usize) -> Result<Image> {
    let (h, w) = (rows * patch, cols * patch);
    if patches.len() != h * w * 3 {
        return Err(geometry!("{} values for {rows}x{cols} patches of size {patch}", patches.len()));
    }
    let mut data = vec![0.0f32; h * w * 3];
    let mut src = 0;
    for pr in 0..rows {
        for pc in 0..cols {
            for y in 0..patch {
                let start = ((pr * patch + y) * w + pc * patch) * 3;
                data[start..start + patch * 3].copy_from_slice(&patches[src..src + patch * 3]);
                src += patch * 3;
            }
        }
    }
    Image::from_raw(h, w, data)
}

/// Fixed 2-D sin-cos embedding: the first half of the channels encodes the
/// row, the second half the column.
pub fn sincos_2d(rows: usize, cols: usize, dim: usize) -> Vec<f64> {
    assert!(dim % 4 == 0, "positional width must be a multiple of 4");
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter).map(|k| 1.0 / 10000f64.powf(k as f64 / quarter as f64)).collect();
    let mut out = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            for pos in [r as f64, c as f64] {
                out.extend(omega.iter().map(|w| (pos * w).sin()));
                out.extend(omega.iter().map(|w| (pos * w).cos()));
            }
        }
    }
    out
}

/// A token-head model and its tokenizer must agree on patch size and
/// vocabulary.
pub fn check_tokenizer(mae: &MaeConfig, vq: &VqConfig) -> Result<()> {
    if mae.head == HeadKind::TokenLogits && (mae.patch_size != vq.patch_size || mae.vocab != vq.codebook_size) {
        return Err(geometry!(
            "model uses {}px patches and {} tokens, tokenizer has {}px patches and {} codes",
            mae.patch_size,
            mae.vocab,
            vq.patch_size,
            vq.codebook_size
        ));
    }
    Ok(())
}

/// Per-position output scores.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLogits {
    pub positions: usize,
    pub vocab: usize,
    pub data: Vec<f32>,
}

impl TokenLogits {
    pub fn new(positions: usize, vocab: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != positions * vocab {
            return Err(Error::Shape(format!("{} logits for {positions}x{vocab}", data.len())));
        }
        Ok(Self { positions, vocab, data })
    }

    pub fn row(&self, pos: usize) -> &[f32] {
        &self.data[pos * self.vocab..(pos + 1) * self.vocab]
    }

    pub fn probabilities(&self, pos: usize) -> Vec<f64> {
        let mut row: Vec<f64> = self.row(pos).iter().map(|&v| v as f64).collect();
        softmax_row(&mut row);
        row
    }

    /// Index of the largest score, lowest index on ties.
    pub fn argmax(&self, pos: usize) -> u32 {
        argmax(self.row(pos)) as u32
    }
}

pub(crate) fn argmax<F: PartialOrd + Copy>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// One training or inference sample: normalised patch vectors plus mask.
pub struct MaeSample<'a, F> {
    pub patches: &'a [F],
    pub mask: &'a PatchMask,
}

pub struct MaeCache<F> {
    visible: Vec<Vec<usize>>,
    masked: Vec<Vec<usize>>,
    embed_in: Vec<F>,
    enc: Vec<BlockCache<F>>,
    enc_ln: LnCache<F>,
    enc_out: Vec<F>,
    dec: Vec<BlockCache<F>>,
    dec_ln: LnCache<F>,
    dec_out: Vec<F>,
}

impl<F: Float> MaeCache<F> {
    /// Decoder attention probabilities of every layer.
    pub fn decoder_attention(&self) -> &[BlockCache<F>] {
        &self.dec
    }
}

#[derive(Clone, Debug)]
pub struct MaeModel<F> {
    pub config: MaeConfig,
    pub patch_embed: Linear<F>,
    pub enc_blocks: Vec<Block<F>>,
    pub enc_norm: LayerNorm<F>,
    pub dec_embed: Linear<F>,
    pub mask_token: Param<F>,
    pub dec_blocks: Vec<Block<F>>,
    pub dec_norm: LayerNorm<F>,
    pub head: Linear<F>,
    enc_pos: Vec<F>,
    dec_pos: Vec<F>,
}

impl<F: Float> MaeModel<F> {
    pub fn new(config: MaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let patch_embed = Linear::new(c.patch_len(), c.enc_dim, &mut rng);
        let enc_blocks = (0..c.enc_depth).map(|_| Block::new(c.enc_dim, c.enc_heads, c.mlp_ratio, &mut rng)).collect();
        let dec_embed = Linear::new(c.enc_dim, c.dec_dim, &mut rng);
        let mask_token = Param::normal(vec![c.dec_dim], 0.02, &mut rng, false);
        let dec_blocks = (0..c.dec_depth).map(|_| Block::new(c.dec_dim, c.dec_heads, c.mlp_ratio, &mut rng)).collect();
        let head = Linear::new(c.dec_dim, c.out_dim(), &mut rng);
        let pos = |d| sincos_2d(c.grid_rows, c.grid_cols, d).into_iter().map(F::of).collect();
        Ok(Self {
            patch_embed,
            enc_blocks,
            enc_norm: LayerNorm::new(c.enc_dim),
            dec_embed,
            mask_token,
            dec_blocks,
            dec_norm: LayerNorm::new(c.dec_dim),
            head,
            enc_pos: pos(c.enc_dim),
            dec_pos: pos(c.dec_dim),
            config,
        })
    }

    /// Normalised model input for an image of the configured size.
    pub fn prepare(&self, image: &Image) -> Result<Vec<F>> {
        let want = self.config.image_dims();
        if image.dims() != want {
            return Err(geometry!("image {:?} does not match model input {:?}", image.dims(), want));
        }
        Ok(patchify(image, self.config.patch_size)?.into_iter().map(|v| F::of(v as f64 - 0.5)).collect())
    }

    fn check_mask(&self, mask: &PatchMask) -> Result<()> {
        if (mask.rows(), mask.cols()) != (self.config.grid_rows, self.config.grid_cols) {
            return Err(geometry!(
                "mask {}x{} does not match patch grid {}x{}",
                mask.rows(),
                mask.cols(),
                self.config.grid_rows,
                self.config.grid_cols
            ));
        }
        if mask.masked_count() == mask.len() {
            return Err(Error::Precondition("every patch is masked".into()));
        }
        Ok(())
    }

    /// Outputs at every position of every sample, packed `(B * N) x out_dim`.
    pub fn forward_batch(&self, batch: &[MaeSample<'_, F>]) -> Result<(Vec<F>, MaeCache<F>)> {
        let c = &self.config;
        let n = c.num_patches();
        let pl = c.patch_len();
        let (ed, dd) = (c.enc_dim, c.dec_dim);
        let mut visible = Vec::with_capacity(batch.len());
        let mut masked = Vec::with_capacity(batch.len());
        let mut embed_in = Vec::new();
        for s in batch {
            self.check_mask(s.mask)?;
            if s.patches.len() != n * pl {
                return Err(geometry!("{} input values for {n} patches of {pl}", s.patches.len()));
            }
            let vis = s.mask.visible_indices();
            for &i in &vis {
                embed_in.extend_from_slice(&s.patches[i * pl..(i + 1) * pl]);
            }
            visible.push(vis);
            masked.push(s.mask.masked_indices());
        }
        let lens_enc: Vec<usize> = visible.iter().map(Vec::len).collect();
        let rows_enc: usize = lens_enc.iter().sum();

        let mut x = self.patch_embed.forward(&embed_in, rows_enc);
        let mut r = 0;
        for vis in &visible {
            for &i in vis {
                for (a, p) in x[r * ed..(r + 1) * ed].iter_mut().zip(&self.enc_pos[i * ed..(i + 1) * ed]) {
                    *a += *p;
                }
                r += 1;
            }
        }
        let mut enc = Vec::with_capacity(self.enc_blocks.len());
        for b in &self.enc_blocks {
            let (y, cache) = b.forward(&x, &lens_enc);
            enc.push(cache);
            x = y;
        }
        let (enc_out, enc_ln) = self.enc_norm.forward(&x, rows_enc);
        let emb = self.dec_embed.forward(&enc_out, rows_enc);

        let b = batch.len();
        let mut x = Vec::with_capacity(b * n * dd);
        for _ in 0..b * n {
            x.extend_from_slice(&self.mask_token.value);
        }
        let mut r = 0;
        for (s, vis) in visible.iter().enumerate() {
            for &i in vis {
                x[(s * n + i) * dd..(s * n + i + 1) * dd].copy_from_slice(&emb[r * dd..(r + 1) * dd]);
                r += 1;
            }
        }
        for s in 0..b {
            for (a, p) in x[s * n * dd..(s + 1) * n * dd].iter_mut().zip(&self.dec_pos) {
                *a += *p;
            }
        }
        let lens_dec = vec![n; b];
        let mut dec = Vec::with_capacity(self.dec_blocks.len());
        for blk in &self.dec_blocks {
            let (y, cache) = blk.forward(&x, &lens_dec);
            dec.push(cache);
            x = y;
        }
        let (dec_out, dec_ln) = self.dec_norm.forward(&x, b * n);
        let out = self.head.forward(&dec_out, b * n);
        let cache = MaeCache { visible, masked, embed_in, enc, enc_ln, enc_out, dec, dec_ln, dec_out };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients for `d_out` (same layout as the
    /// forward output).
    pub fn backward_batch(&mut self, cache: &MaeCache<F>, d_out: &[F]) {
        let c = &self.config;
        let n = c.num_patches();
        let dd = c.dec_dim;
        let b = cache.visible.len();
        let d = self.head.backward(&cache.dec_out, d_out, b * n);
        let mut d = self.dec_norm.backward(&cache.dec_ln, &d, b * n);
        for (blk, bc) in self.dec_blocks.iter_mut().zip(&cache.dec).rev() {
            d = blk.backward(bc, &d);
        }
        let rows_enc: usize = cache.visible.iter().map(Vec::len).sum();
        let mut d_emb = vec![F::zero(); rows_enc * dd];
        let mut r = 0;
        for (s, vis) in cache.visible.iter().enumerate() {
            for &i in vis {
                d_emb[r * dd..(r + 1) * dd].copy_from_slice(&d[(s * n + i) * dd..(s * n + i + 1) * dd]);
                r += 1;
            }
            for &i in &cache.masked[s] {
                for (g, v) in self.mask_token.grad.iter_mut().zip(&d[(s * n + i) * dd..(s * n + i + 1) * dd]) {
                    *g += *v;
                }
            }
        }
        let d = self.dec_embed.backward(&cache.enc_out, &d_emb, rows_enc);
        let mut d = self.enc_norm.backward(&cache.enc_ln, &d, rows_enc);
        for (blk, bc) in self.enc_blocks.iter_mut().zip(&cache.enc).rev() {
            d = blk.backward(bc, &d);
        }
        self.patch_embed.accumulate(&cache.embed_in, &d, rows_enc);
    }

    /// Forward pass on one image; returns `N x out_dim` outputs.
    pub fn forward_image(&self, image: &Image, mask: &PatchMask) -> Result<(Vec<F>, MaeCache<F>)> {
        let patches = self.prepare(image)?;
        self.forward_batch(&[MaeSample { patches: &patches, mask }])
    }

    /// Masked-token cross-entropy over a batch; accumulates gradients and
    /// returns the mean loss. With `all_tokens` every position contributes.
    pub fn train_step_tokens(
        &mut self,
        batch: &[MaeSample<'_, F>],
        targets: &[&[u32]],
        all_tokens: bool,
    ) -> Result<f64> {
        if self.config.head != HeadKind::TokenLogits {
            return Err(Error::Config("token loss needs the token head".into()));
        }
        let (out, cache) = self.forward_batch(batch)?;
        let (loss, grad) = ce_loss_and_grad(&out, self.config.vocab, self.config.num_patches(), batch, targets, all_tokens)?;
        self.backward_batch(&cache, &grad);
        Ok(loss)
    }

    /// Masked-pixel squared error over a batch (targets in image space).
    pub fn train_step_pixels(&mut self, batch: &[MaeSample<'_, F>]) -> Result<f64> {
        if self.config.head != HeadKind::PixelRegression {
            return Err(Error::Config("pixel loss needs the pixel head".into()));
        }
        let (out, cache) = self.forward_batch(batch)?;
        let pl = self.config.patch_len();
        let n = self.config.num_patches();
        let count: usize = batch.iter().map(|s| s.mask.masked_count()).sum::<usize>() * pl;
        let mut grad = vec![F::zero(); out.len()];
        let mut loss = 0.0;
        let half = F::of(0.5);
        let scale = F::of(2.0 / count as f64);
        for (s, sample) in batch.iter().enumerate() {
            for i in sample.mask.masked_indices() {
                let o = (s * n + i) * pl;
                for j in 0..pl {
                    let diff = out[o + j] - (sample.patches[i * pl + j] + half);
                    loss += diff.as_f64() * diff.as_f64();
                    grad[o + j] = scale * diff;
                }
            }
        }
        self.backward_batch(&cache, &grad);
        Ok(loss / count as f64)
    }
}

fn ce_loss_and_grad<F: Float>(
    out: &[F],
    vocab: usize,
    n: usize,
    batch: &[MaeSample<'_, F>],
    targets: &[&[u32]],
    all_tokens: bool,
) -> Result<(f64, Vec<F>)> {
    if targets.len() != batch.len() {
        return Err(Error::Shape(format!("{} targets for {} samples", targets.len(), batch.len())));
    }
    let positions: Vec<Vec<usize>> = batch
        .iter()
        .map(|s| if all_tokens { (0..n).collect() } else { s.mask.masked_indices() })
        .collect();
    let count: usize = positions.iter().map(Vec::len).sum();
    if count == 0 {
        return Err(Error::Precondition("no positions contribute to the loss".into()));
    }
    let mut grad = vec![F::zero(); out.len()];
    let mut loss = 0.0;
    let inv = F::of(1.0 / count as f64);
    for (s, pos) in positions.iter().enumerate() {
        if targets[s].len() != n {
            return Err(Error::Shape(format!("{} targets for {n} positions", targets[s].len())));
        }
        for &i in pos {
            let t = targets[s][i] as usize;
            if t >= vocab {
                return Err(Error::Index(format!("target token {t} outside vocabulary of {vocab}")));
            }
            let o = (s * n + i) * vocab;
            let g = &mut grad[o..o + vocab];
            g.copy_from_slice(&out[o..o + vocab]);
            softmax_row(g);
            loss -= g[t].as_f64().max(f64::MIN_POSITIVE).ln();
            g[t] -= F::one();
            g.iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok((loss / count as f64, grad))
}

impl MaeModel<f32> {
    /// Token logits at every position.
    pub fn forward(&self, image: &Image, mask: &PatchMask) -> Result<TokenLogits> {
        let (out, _) = self.forward_image(image, mask)?;
        TokenLogits::new(self.config.num_patches(), self.config.out_dim(), out)
    }
}

/// Argmax token at each masked position; unmasked positions hold 0.
pub fn predict_tokens(logits: &TokenLogits, mask: &PatchMask) -> Result<TokenGrid> {
    if logits.positions != mask.len() {
        return Err(geometry!("{} logit rows for {} patches", logits.positions, mask.len()));
    }
    let mut tokens = vec![0u32; mask.len()];
    for i in mask.masked_indices() {
        tokens[i] = logits.argmax(i);
    }
    TokenGrid::new(mask.rows(), mask.cols(), tokens)
}

/// Mean negative log-likelihood of the targets over masked positions.
pub fn masked_ce_loss(logits: &TokenLogits, target: &TokenGrid, mask: &PatchMask) -> Result<f64> {
    if mask.masked_count() == 0 {
        return Err(Error::Precondition("mask is empty".into()));
    }
    if logits.positions != mask.len() || target.tokens().len() != mask.len() {
        return Err(geometry!("logits, targets and mask disagree on the patch count"));
    }
    let mut total = 0.0;
    for i in mask.masked_indices() {
        let t = target.tokens()[i] as usize;
        if t >= logits.vocab {
            return Err(Error::Index(format!("target token {t} outside vocabulary of {}", logits.vocab)));
        }
        total -= logits.probabilities(i)[t].ln();
    }
    Ok(total / mask.masked_count() as f64)
}

/// Mean squared pixel error over masked patches. `predicted` holds
/// row-major patch vectors in image space.
pub fn pixel_mae_loss(predicted: &[f32], image: &Image, mask: &PatchMask) -> Result<f64> {
    if mask.masked_count() == 0 {
        return Err(Error::Precondition("mask is empty".into()));
    }
    let patch = image.height() / mask.rows().max(1);
    let target = patchify(image, patch)?;
    if predicted.len() != target.len() || mask.rows() * patch != image.height() || mask.cols() * patch != image.width() {
        return Err(geometry!("prediction, image and mask disagree on geometry"));
    }
    let pl = 3 * patch * patch;
    let mut total = 0.0;
    for i in mask.masked_indices() {
        for j in i * pl..(i + 1) * pl {
            let d = predicted[j] as f64 - target[j] as f64;
            total += d * d;
        }
    }
    Ok(total / (mask.masked_count() * pl) as f64)
}

/// Copies `filled` into `image` at the masked patches.
fn splice(image: &Image, filled: &Image, mask: &PatchMask, patch: usize) -> Result<Image> {
    let mut out = image.clone();
    for i in mask.masked_indices() {
        let (r, c) = (i / mask.cols() * patch, i % mask.cols() * patch);
        out.paste(r, c, &filled.crop(r, c, patch, patch)?)?;
    }
    Ok(out)
}

/// Fills the masked patches: visible positions keep the input's own tokens,
/// masked positions take the predicted tokens, the grid is decoded, and the
/// decoded pixels are pasted back into the masked patches only.
pub fn inpaint(model: &MaeModel<f32>, vq: &VqModel<f32>, image: &Image, mask: &PatchMask) -> Result<Image> {
    if model.config.head != HeadKind::TokenLogits {
        return inpaint_pixels(model, image, mask);
    }
    if model.config.patch_size != vq.config.patch_size || model.config.vocab != vq.config.codebook_size {
        return Err(geometry!(
            "model (patch {}, vocab {}) and tokenizer (patch {}, vocab {}) do not match",
            model.config.patch_size,
            model.config.vocab,
            vq.config.patch_size,
            vq.config.codebook_size
        ));
    }
    let logits = model.forward(image, mask)?;
    let predicted = predict_tokens(&logits, mask)?;
    let mut tokens = vq.encode_image(image)?;
    for i in mask.masked_indices() {
        tokens.set(i, predicted.tokens()[i]);
    }
    let decoded = vq.decode_tokens(&tokens)?;
    splice(image, &decoded, mask, model.config.patch_size)
}

/// Inpainting with the pixel-regression head.
pub fn inpaint_pixels(model: &MaeModel<f32>, image: &Image, mask: &PatchMask) -> Result<Image> {
    if model.config.head != HeadKind::PixelRegression {
        return Err(Error::Config("pixel inpainting needs the pixel head".into()));
    }
    let (out, _) = model.forward_image(image, mask)?;
    let clamped: Vec<f32> = out.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let c = &model.config;
    let filled = unpatchify(&clamped, c.grid_rows, c.grid_cols, c.patch_size)?;
    splice(image, &filled, mask, c.patch_size)
}

/// Decoder attention from a masked query patch, averaged over heads and
/// layers and renormalised; one weight per patch, row-major.
pub fn attention_maps(model: &MaeModel<f32>, image: &Image, mask: &PatchMask, query: (usize, usize)) -> Result<Vec<f64>> {
    let (qr, qc) = query;
    if qr >= mask.rows() || qc >= mask.cols() || !mask.is_masked(qr, qc) {
        return Err(Error::Argument(format!("query patch ({qr}, {qc}) is not a masked position")));
    }
    let (_, cache) = model.forward_image(image, mask)?;
    let n = model.config.num_patches();
    let q = qr * mask.cols() + qc;
    let heads = model.config.dec_heads;
    let mut acc = vec![0.0f64; n];
    for layer in cache.decoder_attention() {
        for h in 0..heads {
            let off = layer.probs_offset(0, h, heads) + q * n;
            for (a, p) in acc.iter_mut().zip(&layer.probs[off..off + n]) {
                *a += *p as f64;
            }
        }
    }
    let sum: f64 = acc.iter().sum();
    if sum > 0.0 {
        acc.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(acc)
}

impl<F: Float> Module<F> for MaeModel<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), out);
        self.enc_blocks.visit(&join(prefix, "enc_blocks"), out);
        self.enc_norm.visit(&join(prefix, "enc_norm"), out);
        self.dec_embed.visit(&join(prefix, "dec_embed"), out);
        out.push((join(prefix, "mask_token"), &self.mask_token));
        self.dec_blocks.visit(&join(prefix, "dec_blocks"), out);
        self.dec_norm.visit(&join(prefix, "dec_norm"), out);
        self.head.visit(&join(prefix, "head"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>) {
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), out);
        self.enc_blocks.visit_mut(&join(prefix, "enc_blocks"), out);
        self.enc_norm.visit_mut(&join(prefix, "enc_norm"), out);
        self.dec_embed.visit_mut(&join(prefix, "dec_embed"), out);
        out.push((join(prefix, "mask_token"), &mut self.mask_token));
        self.dec_blocks.visit_mut(&join(prefix, "dec_blocks"), out);
        self.dec_norm.visit_mut(&join(prefix, "dec_norm"), out);
        self.head.visit_mut(&join(prefix, "head"), out);
    }
}

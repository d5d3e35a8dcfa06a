//! The audio/text dual encoder with a masked-patch reconstruction decoder.
//!
//! Audio: linear patch embedding, learned positions, masking, pre-norm
//! transformer blocks, mean over the visible tokens, linear projection, L2
//! normalisation. Text: word embedding, learned positions, blocks, mean over
//! non-pad tokens, projection, normalisation. Decoder: projection, `[MASK]`
//! fill-in at dropped positions, fixed 2-D sinusoidal positions, blocks and a
//! linear head back to raw patch values.
//!
//! Parameter names follow the module path, e.g. `audio_encoder.block0.attn.wq.w`.

pub mod layers;
mod sincos;

use serde::{Deserialize, Serialize};

pub use layers::BlockDims;
pub use sincos::sinusoid_2d;

use crate::audio::fusion::{averaging_kernel, FUSION_VIEWS};
use crate::audio::patch::{PatchGrid, PatchSize};
use crate::audio::text::{TokenizedCaption, MAX_CAPTION_TOKENS, PAD_ID};
use crate::error::{FlapError, Result};
use crate::masking::{apply_mask, restore_order, MaskPlan};
use crate::numerics::{seeded, Bound, Graph, ParamStore, Stream, Tensor, Var};
use layers::{add_positions, block, init_block, init_layernorm, init_linear, layernorm, linear};

/// FLOP-accounting scope for the audio encoder's transformer blocks.
pub const AUDIO_BLOCKS_SCOPE: &str = "audio_encoder.blocks";
pub const INITIAL_TEMPERATURE: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub depth: usize,
    pub heads: usize,
    pub width: usize,
    pub mlp_ratio: usize,
}

impl StackConfig {
    pub fn dims(&self) -> BlockDims {
        BlockDims {
            width: self.width,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || self.width == 0 || self.mlp_ratio == 0 {
            return Err(FlapError::Config(format!("{name}: dimensions must be positive")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(FlapError::Config(format!(
                "{name}: width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Spectrogram frames fed to the encoder (after pad/crop).
    pub frames: usize,
    pub mels: usize,
    pub patch: PatchSize,
    pub audio: StackConfig,
    pub text: StackConfig,
    pub vocab_size: usize,
    pub shared_dim: usize,
    pub decoder: StackConfig,
    pub fusion: bool,
}

impl ModelConfig {
    /// ViT-B audio encoder on 10 s clips (504 patches of 16×16).
    pub fn vit_base(vocab_size: usize) -> Self {
        ModelConfig {
            frames: 1000,
            mels: 128,
            patch: PatchSize::new(16, 16),
            audio: StackConfig {
                depth: 12,
                heads: 12,
                width: 768,
                mlp_ratio: 4,
            },
            text: StackConfig {
                depth: 4,
                heads: 8,
                width: 512,
                mlp_ratio: 4,
            },
            vocab_size,
            shared_dim: 512,
            decoder: StackConfig {
                depth: 4,
                heads: 4,
                width: 512,
                mlp_ratio: 4,
            },
            fusion: false,
        }
    }

    /// Desk-scale model on 0.64 s clips (32 patches of 16×16).
    pub fn toy(vocab_size: usize) -> Self {
        let stack = |depth| StackConfig {
            depth,
            heads: 4,
            width: 64,
            mlp_ratio: 2,
        };
        ModelConfig {
            frames: 64,
            mels: 128,
            patch: PatchSize::new(16, 16),
            audio: stack(2),
            text: stack(1),
            vocab_size,
            shared_dim: 64,
            decoder: stack(1),
            fusion: false,
        }
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::for_input(self.frames, self.mels, self.patch)
    }

    pub fn num_patches(&self) -> Result<usize> {
        Ok(self.grid()?.num_patches())
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.audio.validate("audio encoder")?;
        self.text.validate("text encoder")?;
        self.decoder.validate("decoder")?;
        if !self.decoder.width.is_multiple_of(4) {
            return Err(FlapError::Config(format!(
                "decoder width {} must be divisible by 4 for 2-D sinusoidal positions",
                self.decoder.width
            )));
        }
        if self.fusion && !self.frames.is_multiple_of(self.patch.time) {
            return Err(FlapError::Config(format!(
                "fusion needs frames ({}) to be a multiple of the patch height ({})",
                self.frames, self.patch.time
            )));
        }
        if self.shared_dim == 0 || self.vocab_size == 0 {
            return Err(FlapError::Config("shared_dim and vocab_size must be positive".into()));
        }
        Ok(())
    }
}

/// Encoder outputs for one audio batch.
#[derive(Clone, Copy, Debug)]
pub struct AudioEncoding {
    /// `[B, D_shared]`, unit rows.
    pub pooled: Var,
    /// `[B, N', D]` visible-token features.
    pub per_token: Var,
}

/// Audio presented to the encoder.
#[derive(Clone, Debug, PartialEq)]
pub enum AudioInput {
    /// `[B, N, P]` spectrogram patches.
    Patches(Tensor),
    /// `[B, 4, T, F]` fusion views, merged by the learned convolution.
    FusionViews(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlapModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl FlapModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed, Stream::Init);
        let mut p = ParamStore::new();
        let n = config.num_patches()?;
        let (a, t, d) = (config.audio, config.text, config.decoder);

        init_linear(
            &mut p,
            "audio_encoder.patch_embed",
            config.patch.dim(),
            a.width,
            &mut rng,
        );
        p.init_uniform("audio_encoder.pos_embed", &[n, a.width], 0.02, &mut rng);
        for i in 0..a.depth {
            init_block(&mut p, &format!("audio_encoder.block{i}"), a.dims(), &mut rng);
        }
        init_layernorm(&mut p, "audio_encoder.norm", a.width);
        init_linear(&mut p, "audio_encoder.proj", a.width, config.shared_dim, &mut rng);

        p.init_uniform(
            "text_encoder.token_embed",
            &[config.vocab_size, t.width],
            0.02,
            &mut rng,
        );
        p.init_uniform("text_encoder.pos_embed", &[MAX_CAPTION_TOKENS, t.width], 0.02, &mut rng);
        for i in 0..t.depth {
            init_block(&mut p, &format!("text_encoder.block{i}"), t.dims(), &mut rng);
        }
        init_layernorm(&mut p, "text_encoder.norm", t.width);
        init_linear(&mut p, "text_encoder.proj", t.width, config.shared_dim, &mut rng);

        init_linear(&mut p, "decoder.embed", a.width, d.width, &mut rng);
        p.init_uniform("decoder.mask_token", &[d.width], 0.02, &mut rng);
        for i in 0..d.depth {
            init_block(&mut p, &format!("decoder.block{i}"), d.dims(), &mut rng);
        }
        init_layernorm(&mut p, "decoder.norm", d.width);
        init_linear(&mut p, "decoder.head", d.width, config.patch.dim(), &mut rng);

        p.insert("loss.log_tau", Tensor::scalar(INITIAL_TEMPERATURE.ln()));
        if config.fusion {
            p.insert("fusion.conv.kernel", averaging_kernel());
            p.insert("fusion.conv.bias", Tensor::scalar(0.0));
        }
        Ok(FlapModel { config, params: p })
    }

    /// Rebuilds a model around loaded parameters, checking every expected
    /// name and shape is present.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = FlapModel::new(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(FlapError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, config expects {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(FlapModel { config, params })
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        self.params.bind(g)
    }

    pub fn temperature(&self) -> f64 {
        self.params
            .get("loss.log_tau")
            .map_or(INITIAL_TEMPERATURE, |t| t.item().exp())
    }

    /// Patch tokens `[B, N, P]` on the graph; fusion views go through the
    /// learned 3×3 merge first.
    pub fn audio_tokens(&self, g: &mut Graph, b: &Bound, input: &AudioInput) -> Result<Var> {
        let n = self.config.num_patches()?;
        let p = self.config.patch.dim();
        match input {
            AudioInput::Patches(t) => {
                if t.rank() != 3 || t.shape()[1..] != [n, p] {
                    return Err(FlapError::shape(
                        "audio_tokens",
                        format!("patches {:?}, model expects [B, {n}, {p}]", t.shape()),
                    ));
                }
                Ok(g.constant(t.clone()))
            }
            AudioInput::FusionViews(views) => {
                let grid = self.config.grid()?;
                let (pt, pf) = (self.config.patch.time, self.config.patch.freq);
                let s = views.shape();
                let padded_t = grid.time * pt;
                debug_assert_eq!(padded_t, self.config.frames);
                if s.len() != 4 || s[1] != FUSION_VIEWS || s[2] != padded_t || s[3] != self.config.mels {
                    return Err(FlapError::shape(
                        "audio_tokens",
                        format!(
                            "fusion views {s:?}, model expects [B, {FUSION_VIEWS}, {padded_t}, {}]",
                            self.config.mels
                        ),
                    ));
                }
                let bsz = s[0];
                let v = g.constant(views.clone());
                let merged = g.conv3x3(v, b.var("fusion.conv.kernel")?, b.var("fusion.conv.bias")?)?;
                let x = g.reshape(merged, &[bsz, grid.time, pt, grid.freq, pf])?;
                let x = g.permute(x, &[0, 1, 3, 2, 4])?;
                g.reshape(x, &[bsz, n, p])
            }
        }
    }

    /// Patch embedding, positions, masking, encoder blocks and pooling.
    pub fn encode_audio(&self, g: &mut Graph, b: &Bound, tokens: Var, plan: &MaskPlan) -> Result<AudioEncoding> {
        let cfg = self.config.audio;
        let x = linear(g, b, "audio_encoder.patch_embed", tokens)?;
        let x = add_positions(g, x, b.var("audio_encoder.pos_embed")?)?;
        let mut x = apply_mask(g, x, plan)?;
        x = g.scoped(AUDIO_BLOCKS_SCOPE, |g| -> Result<Var> {
            for i in 0..cfg.depth {
                x = block(g, b, &format!("audio_encoder.block{i}"), x, cfg.heads, None)?;
            }
            Ok(x)
        })?;
        let per_token = layernorm(g, b, "audio_encoder.norm", x)?;
        let pooled = g.mean_pool(per_token)?;
        let pooled = linear(g, b, "audio_encoder.proj", pooled)?;
        let pooled = g.l2_normalize(pooled);
        Ok(AudioEncoding { pooled, per_token })
    }

    /// `[B, D_shared]` unit caption embeddings; batches are right-padded with
    /// `[PAD]` and padded keys are hidden from attention.
    pub fn encode_text(&self, g: &mut Graph, b: &Bound, captions: &[TokenizedCaption]) -> Result<Var> {
        if captions.is_empty() {
            return Err(FlapError::Input("empty caption batch".into()));
        }
        let cfg = self.config.text;
        let bsz = captions.len();
        let len = captions
            .iter()
            .map(|c| c.len().clamp(1, MAX_CAPTION_TOKENS))
            .max()
            .unwrap_or(1);
        let mut ids = vec![PAD_ID; bsz * len];
        let mut lengths = Vec::with_capacity(bsz);
        for (i, c) in captions.iter().enumerate() {
            let k = c.len().min(len);
            if c.token_ids.iter().any(|&t| t >= self.config.vocab_size) {
                return Err(FlapError::Input(format!(
                    "token id out of range for vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            ids[i * len..i * len + k].copy_from_slice(&c.token_ids[..k]);
            lengths.push(k.max(1));
        }
        let x = g.embedding(b.var("text_encoder.token_embed")?, &ids, &[bsz, len])?;
        let positions: Vec<usize> = (0..bsz).flat_map(|_| 0..len).collect();
        let pos = g.embedding(b.var("text_encoder.pos_embed")?, &positions, &[bsz, len])?;
        let mut x = g.add(x, pos)?;

        let heads = cfg.heads;
        let mut bias = vec![0.0; bsz * heads * len * len];
        for (i, &k) in lengths.iter().enumerate() {
            for h in 0..heads {
                let base = (i * heads + h) * len * len;
                for q in 0..len {
                    for key in k..len {
                        bias[base + q * len + key] = -1e9;
                    }
                }
            }
        }
        let bias = Tensor::new(&[bsz * heads, len, len], bias)?;
        for i in 0..cfg.depth {
            x = block(g, b, &format!("text_encoder.block{i}"), x, heads, Some(&bias))?;
        }
        let x = layernorm(g, b, "text_encoder.norm", x)?;
        let weights: Vec<Vec<f64>> = lengths
            .iter()
            .map(|&k| (0..len).map(|j| if j < k { 1.0 / k as f64 } else { 0.0 }).collect())
            .collect();
        let pooled = g.weighted_pool(x, &weights)?;
        let pooled = linear(g, b, "text_encoder.proj", pooled)?;
        Ok(g.l2_normalize(pooled))
    }

    /// `[B, N', D]` visible features → `[B, N, P]` reconstructed patches.
    pub fn decode_audio(&self, g: &mut Graph, b: &Bound, per_token: Var, plan: &MaskPlan) -> Result<Var> {
        let cfg = self.config.decoder;
        let grid = self.config.grid()?;
        let x = linear(g, b, "decoder.embed", per_token)?;
        let x = restore_order(g, x, b.var("decoder.mask_token")?, plan)?;
        let table = g.constant(sinusoid_2d(grid.time, grid.freq, cfg.width)?);
        let mut x = add_positions(g, x, table)?;
        for i in 0..cfg.depth {
            x = block(g, b, &format!("decoder.block{i}"), x, cfg.heads, None)?;
        }
        let x = layernorm(g, b, "decoder.norm", x)?;
        linear(g, b, "decoder.head", x)
    }

    /// Evaluation-mode audio embeddings (no masking, no gradients).
    pub fn embed_audio(&self, input: &AudioInput) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let tokens = self.audio_tokens(&mut g, &b, input)?;
        let shape = g.shape(tokens).to_vec();
        let plan = MaskPlan::keep_all(shape[1], shape[0]);
        let enc = self.encode_audio(&mut g, &b, tokens, &plan)?;
        Ok(g.value(enc.pooled).clone())
    }

    pub fn embed_text(&self, captions: &[TokenizedCaption]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind_frozen(&mut g);
        let t = self.encode_text(&mut g, &b, captions)?;
        Ok(g.value(t).clone())
    }

    /// Binds parameters as constants so no gradient buffers are allocated.
    fn bind_frozen(&self, g: &mut Graph) -> Bound {
        let mut b = Bound::default();
        for (name, t) in self.params.iter() {
            let v = g.constant(t.clone());
            b.set(name, v);
        }
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::plan_mask_1d;
    use crate::numerics::{seeded, Stream};
    use rand::Rng as _;

    pub(crate) fn tiny_config() -> ModelConfig {
        let stack = StackConfig {
            depth: 1,
            heads: 2,
            width: 8,
            mlp_ratio: 2,
        };
        ModelConfig {
            frames: 8,
            mels: 8,
            patch: PatchSize::new(4, 4),
            audio: stack,
            text: stack,
            vocab_size: 10,
            shared_dim: 4,
            decoder: stack,
            fusion: false,
        }
    }

    fn patches(bsz: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed, Stream::Synth);
        Tensor::from_fn(&[bsz, 4, 16], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn shapes_and_unit_norms() {
        let m = FlapModel::new(tiny_config(), 1).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let x = g.constant(patches(3, 0));
        let plan = plan_mask_1d(4, 0.5, 3, &mut seeded(0, Stream::Mask)).unwrap();
        let enc = m.encode_audio(&mut g, &b, x, &plan).unwrap();
        assert_eq!(g.shape(enc.pooled), &[3, 4]);
        assert_eq!(g.shape(enc.per_token), &[3, 2, 8]);
        for row in g.value(enc.pooled).data().chunks(4) {
            assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        }
        let rec = m.decode_audio(&mut g, &b, enc.per_token, &plan).unwrap();
        assert_eq!(g.shape(rec), &[3, 4, 16]);
    }

    #[test]
    fn keep_all_pooling_matches_mean_of_projected_tokens() {
        let m = FlapModel::new(tiny_config(), 2).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let x = g.constant(patches(1, 3));
        let plan = MaskPlan::keep_all(4, 1);
        let enc = m.encode_audio(&mut g, &b, x, &plan).unwrap();
        let projected = linear(&mut g, &b, "audio_encoder.proj", enc.per_token).unwrap();
        let mean = g.mean_pool(projected).unwrap();
        let normed = g.l2_normalize(mean);
        assert!(g.value(normed).max_abs_diff(g.value(enc.pooled)) < 1e-12);
    }

    #[test]
    fn eval_embedding_is_deterministic_and_masks_change_it() {
        let m = FlapModel::new(tiny_config(), 3).unwrap();
        let input = AudioInput::Patches(patches(1, 4));
        assert_eq!(m.embed_audio(&input).unwrap(), m.embed_audio(&input).unwrap());

        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let AudioInput::Patches(t) = &input else { unreachable!() };
        let x = g.constant(t.clone());
        let p1 = MaskPlan::custom(4, vec![vec![0, 1]]).unwrap();
        let p2 = MaskPlan::custom(4, vec![vec![2, 3]]).unwrap();
        let e1 = m.encode_audio(&mut g, &b, x, &p1).unwrap();
        let e2 = m.encode_audio(&mut g, &b, x, &p2).unwrap();
        let cos = g.cosine_similarity(e1.pooled, e2.pooled).unwrap();
        assert!(g.item(cos) < 1.0 - 1e-9, "{}", g.item(cos));
    }

    #[test]
    fn text_encoder_is_row_equivariant() {
        let m = FlapModel::new(tiny_config(), 4).unwrap();
        let caps = vec![
            TokenizedCaption {
                token_ids: vec![3, 4, 5],
            },
            TokenizedCaption { token_ids: vec![6] },
            TokenizedCaption {
                token_ids: vec![3, 4, 5],
            },
        ];
        let e = m.embed_text(&caps).unwrap();
        assert_eq!(e.row(0), e.row(2));
        let swapped = m.embed_text(&[caps[1].clone(), caps[0].clone()]).unwrap();
        assert!(swapped.row(0).iter().zip(e.row(1)).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(swapped.row(1).iter().zip(e.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
        // Padding does not leak into shorter captions.
        let alone = m.embed_text(&[caps[1].clone()]).unwrap();
        assert!(alone.row(0).iter().zip(e.row(1)).all(|(a, b)| (a - b).abs() < 1e-12));
        let unk = m.embed_text(&[TokenizedCaption { token_ids: vec![] }]).unwrap();
        assert!(unk.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zeroed_decoder_outputs_its_head_bias() {
        let mut m = FlapModel::new(tiny_config(), 5).unwrap();
        for (name, t) in m.params.iter_mut() {
            if name.starts_with("decoder.") && name != "decoder.head.b" {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let head_b: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        m.params
            .insert("decoder.head.b", Tensor::new(&[16], head_b.clone()).unwrap());
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let x = g.constant(patches(2, 6));
        let plan = plan_mask_1d(4, 0.5, 2, &mut seeded(1, Stream::Mask)).unwrap();
        let enc = m.encode_audio(&mut g, &b, x, &plan).unwrap();
        let rec = m.decode_audio(&mut g, &b, enc.per_token, &plan).unwrap();
        for row in g.value(rec).data().chunks(16) {
            assert_eq!(row, head_b.as_slice());
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.audio.heads = 3;
        assert!(FlapModel::new(c, 0).is_err());
        let mut c = tiny_config();
        c.decoder.width = 6;
        c.decoder.heads = 2;
        assert!(FlapModel::new(c, 0).is_err());
    }
}

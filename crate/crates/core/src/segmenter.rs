//! Box-prompted segmentation with a U-shaped image encoder.
//!
//! The image is encoded once into a bottleneck embedding plus three skip
//! levels. Each box prompt becomes two corner tokens; together with a learned
//! mask token they run two-way attention against the bottleneck, after which
//! the updated image embedding is upsampled through the skip pyramid and the
//! mask token's hypernetwork projection produces full-resolution mask logits.

use candle_core::{Device, Module, Tensor};
use ndarray::Array2;

use crate::config::SegmenterConfig;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{
    conv2d, conv_transpose2x, Attention, Conv2d, FourierEncoding, Init, LayerNorm, Mlp, ParamStore,
    UpConv2x,
};

/// Two corner tokens for one box, `(2, D_s)`.
#[derive(Debug, Clone)]
pub struct PromptEmbedding {
    pub tokens: Tensor,
    pub bbox: BBox,
}

#[derive(Debug, Clone)]
pub struct ImageEmbedding {
    /// `(1, D_s, H/8, W/8)`.
    pub bottleneck: Tensor,
    /// Full, half and quarter resolution skip features, `(1, c_k, H/2^k, W/2^k)`.
    pub skips: Vec<Tensor>,
    pub image_size: (usize, usize),
}

/// Decoder output for a batch of `K` prompts.
#[derive(Debug, Clone)]
pub struct MaskBatch {
    /// `(K, H, W)` probabilities.
    pub masks: Tensor,
    /// `(K, H, W)` logits.
    pub logits: Tensor,
    /// `(K, D_s)` mask tokens.
    pub tokens: Tensor,
}

#[derive(Debug, Clone)]
pub struct PartialMaskResult {
    pub mask: Array2<f32>,
    /// `(D_s,)`.
    pub token: Tensor,
    pub source_box: BBox,
    pub query_index: usize,
}

#[derive(Debug, Clone)]
struct TwoWayLayer {
    self_attn: Attention,
    ln1: LayerNorm,
    token_to_image: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
    ln3: LayerNorm,
    image_to_token: Attention,
    ln4: LayerNorm,
}

impl TwoWayLayer {
    fn new(p: &ParamStore, dim: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            self_attn: Attention::new(&p.pp("self_attn"), dim, heads)?,
            ln1: LayerNorm::new(&p.pp("ln1"), dim)?,
            token_to_image: Attention::new(&p.pp("token_to_image"), dim, heads)?,
            ln2: LayerNorm::new(&p.pp("ln2"), dim)?,
            mlp: Mlp::new(&p.pp("mlp"), &[dim, ffn, dim])?,
            ln3: LayerNorm::new(&p.pp("ln3"), dim)?,
            image_to_token: Attention::new(&p.pp("image_to_token"), dim, heads)?,
            ln4: LayerNorm::new(&p.pp("ln4"), dim)?,
        })
    }

    fn forward(
        &self,
        q: &Tensor,
        k: &Tensor,
        q_pe: &Tensor,
        k_pe: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let qp = (q + q_pe)?;
        let q = self
            .ln1
            .forward(&(q + self.self_attn.forward(&qp, &qp, q)?)?)?;
        let qp = (&q + q_pe)?;
        let kp = k.broadcast_add(k_pe)?;
        let q = self
            .ln2
            .forward(&(&q + self.token_to_image.forward(&qp, &kp, k)?)?)?;
        let q = self.ln3.forward(&(&q + self.mlp.forward(&q)?)?)?;
        let qp = (&q + q_pe)?;
        let k = self
            .ln4
            .forward(&(k + self.image_to_token.forward(&kp, &qp, &q)?)?)?;
        Ok((q, k))
    }
}

#[derive(Debug, Clone)]
struct UpStage {
    up: UpConv2x,
    fuse: Conv2d,
}

#[derive(Debug, Clone)]
pub struct Segmenter {
    cfg: SegmenterConfig,
    encoder: Vec<(Conv2d, Conv2d)>,
    pe: FourierEncoding,
    corner_embed: Tensor,
    inside_embed: Tensor,
    outside_embed: Tensor,
    mask_token: Tensor,
    layers: Vec<TwoWayLayer>,
    final_attn: Attention,
    final_ln: LayerNorm,
    up: Vec<UpStage>,
    hyper: Mlp,
}

/// Fraction of each `stride x stride` cell covered by `b`, `(h * w)` row-major.
fn box_coverage(b: &BBox, h: usize, w: usize, stride: usize) -> Vec<f32> {
    let s = stride as f32;
    let overlap = |lo: f32, hi: f32, k: usize| {
        ((hi.min((k + 1) as f32 * s) - lo.max(k as f32 * s)) / s).clamp(0.0, 1.0)
    };
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let oy = overlap(b.y1, b.y2, r);
        for c in 0..w {
            out.push(oy * overlap(b.x1, b.x2, c));
        }
    }
    out
}

impl Segmenter {
    pub fn new(p: &ParamStore, cfg: &SegmenterConfig) -> Result<Self> {
        let d = cfg.dim;
        let [c0, c1, c2] = cfg.channels;
        let enc = p.pp("image_encoder");
        let encoder = vec![
            (
                conv2d(&enc.pp("s0a"), 1, c0, 3, 1)?,
                conv2d(&enc.pp("s0b"), c0, c0, 3, 1)?,
            ),
            (
                conv2d(&enc.pp("s1a"), c0, c1, 3, 2)?,
                conv2d(&enc.pp("s1b"), c1, c1, 3, 1)?,
            ),
            (
                conv2d(&enc.pp("s2a"), c1, c2, 3, 2)?,
                conv2d(&enc.pp("s2b"), c2, c2, 3, 1)?,
            ),
            (
                conv2d(&enc.pp("s3a"), c2, d, 3, 2)?,
                conv2d(&enc.pp("s3b"), d, d, 1, 1)?,
            ),
        ];
        let dec = p.pp("mask_decoder");
        let up_stage = |name: &str, c_in: usize, c_out: usize| -> Result<UpStage> {
            Ok(UpStage {
                up: conv_transpose2x(&dec.pp(&format!("{name}.up")), c_in, c_out)?,
                // upsampled + skip + box indicator channel
                fuse: conv2d(&dec.pp(&format!("{name}.fuse")), 2 * c_out + 1, c_out, 3, 1)?,
            })
        };
        Ok(Self {
            encoder,
            pe: FourierEncoding::new(&p.pp("prompt_encoder.pe"), d)?,
            corner_embed: p.var("prompt_encoder.corner_embed", &[2, d], Init::Normal(1.0))?,
            inside_embed: p.var("prompt_encoder.inside_embed", &[d], Init::Normal(0.1))?,
            outside_embed: p.var("prompt_encoder.outside_embed", &[d], Init::Normal(0.1))?,
            mask_token: dec.var("mask_token", &[1, d], Init::Normal(1.0))?,
            layers: (0..cfg.decoder_depth.max(1))
                .map(|i| TwoWayLayer::new(&dec.pp(&format!("layer{i}")), d, cfg.heads, cfg.ffn_dim))
                .collect::<Result<_>>()?,
            final_attn: Attention::new(&dec.pp("final_attn"), d, cfg.heads)?,
            final_ln: LayerNorm::new(&dec.pp("final_ln"), d)?,
            up: vec![
                up_stage("up2", d, c2)?,
                up_stage("up1", c2, c1)?,
                up_stage("up0", c1, c0)?,
            ],
            hyper: Mlp::new(&dec.pp("hyper"), &[d, d, c0])?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.cfg
    }

    fn device(&self) -> &Device {
        self.mask_token.device()
    }

    /// Two corner points through the Fourier encoding plus learned corner-type
    /// embeddings. Corners are canonicalized first.
    pub fn encode_prompt(
        &self,
        bbox: &BBox,
        slice_extents: (usize, usize),
    ) -> Result<PromptEmbedding> {
        let b = bbox.canonical();
        if !b.is_valid() {
            return Err(Error::param(
                "box",
                format!("degenerate prompt box {bbox:?}"),
            ));
        }
        let (h, w) = slice_extents;
        let coords = Tensor::new(
            &[
                [b.x1 / w as f32, b.y1 / h as f32],
                [b.x2 / w as f32, b.y2 / h as f32],
            ],
            self.device(),
        )?;
        let tokens = (self.pe.encode(&coords)? + &self.corner_embed)?;
        Ok(PromptEmbedding { tokens, bbox: b })
    }

    /// U-shaped encoder: three skip levels and the stride-8 bottleneck.
    pub fn encode_image(&self, slice: &Array2<f32>) -> Result<ImageEmbedding> {
        let (h, w) = slice.dim();
        let s = SegmenterConfig::STRIDE;
        if h % s != 0 || w % s != 0 {
            return Err(Error::shape(
                format!("slice extents divisible by {s}"),
                format!("{h}x{w}"),
            ));
        }
        let x = Tensor::from_iter(slice.iter().copied(), self.device())?.reshape((1, 1, h, w))?;
        let mut x = x;
        let mut skips = Vec::with_capacity(3);
        for (i, (a, b)) in self.encoder.iter().enumerate() {
            x = a.forward(&x)?.relu()?;
            x = b.forward(&x)?;
            if i < 3 {
                x = x.relu()?;
                skips.push(x.clone());
            }
        }
        Ok(ImageEmbedding {
            bottleneck: x,
            skips,
            image_size: (h, w),
        })
    }

    fn image_pe(&self, h: usize, w: usize) -> Result<Tensor> {
        let mut coords = Vec::with_capacity(h * w * 2);
        for r in 0..h {
            for c in 0..w {
                coords.push((c as f32 + 0.5) / w as f32);
                coords.push((r as f32 + 0.5) / h as f32);
            }
        }
        let coords = Tensor::from_vec(coords, (h * w, 2), self.device())?;
        Ok(self.pe.encode(&coords)?.unsqueeze(0)?)
    }

    fn box_indicator(&self, boxes: &[BBox], h: usize, w: usize, stride: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(boxes.len() * h * w);
        for b in boxes {
            data.extend(box_coverage(b, h, w, stride));
        }
        Ok(Tensor::from_vec(
            data,
            (boxes.len(), 1, h, w),
            self.device(),
        )?)
    }

    /// Decodes all prompts against one image embedding.
    pub fn decode_masks(
        &self,
        image: &ImageEmbedding,
        prompts: &[PromptEmbedding],
    ) -> Result<MaskBatch> {
        let k = prompts.len();
        let (h, w) = image.image_size;
        let d = self.cfg.dim;
        if k == 0 {
            let empty = Tensor::zeros((0, h, w), candle_core::DType::F32, self.device())?;
            return Ok(MaskBatch {
                masks: empty.clone(),
                logits: empty,
                tokens: Tensor::zeros((0, d), candle_core::DType::F32, self.device())?,
            });
        }
        let s = SegmenterConfig::STRIDE;
        let (bh, bw) = (h / s, w / s);
        let boxes: Vec<BBox> = prompts.iter().map(|p| p.bbox).collect();

        let sparse: Vec<Tensor> = prompts
            .iter()
            .map(|p| p.tokens.unsqueeze(0))
            .collect::<candle_core::Result<_>>()?;
        let sparse = Tensor::cat(&sparse, 0)?;
        let tokens = Tensor::cat(
            &[self.mask_token.unsqueeze(0)?.repeat((k, 1, 1))?, sparse],
            1,
        )?;

        // Dense prompt: per-cell box coverage mixes the inside/outside embeddings.
        let cover = self
            .box_indicator(&boxes, bh, bw, s)?
            .reshape((k, bh * bw, 1))?;
        let dense = cover
            .broadcast_mul(&self.inside_embed.reshape((1, 1, d))?)?
            .add(&(1.0 - &cover)?.broadcast_mul(&self.outside_embed.reshape((1, 1, d))?)?)?;
        let src = image
            .bottleneck
            .flatten_from(2)?
            .transpose(1, 2)?
            .broadcast_add(&dense)?;
        let k_pe = self.image_pe(bh, bw)?;

        let mut q = tokens.clone();
        let mut keys = src;
        for layer in &self.layers {
            (q, keys) = layer.forward(&q, &keys, &tokens, &k_pe)?;
        }
        let qp = (&q + &tokens)?;
        let kp = keys.broadcast_add(&k_pe)?;
        let q = self
            .final_ln
            .forward(&(&q + self.final_attn.forward(&qp, &kp, &keys)?)?)?;
        let mask_tokens = q.narrow(1, 0, 1)?.squeeze(1)?;

        let mut x = keys.transpose(1, 2)?.reshape((k, d, bh, bw))?;
        for (stage, skip) in self.up.iter().zip(image.skips.iter().rev()) {
            x = stage.up.forward(&x)?.relu()?;
            let (_, c, sh, sw) = skip.dims4()?;
            let ind = self.box_indicator(&boxes, sh, sw, h / sh)?;
            let skip = skip.broadcast_as((k, c, sh, sw))?.contiguous()?;
            x = stage
                .fuse
                .forward(&Tensor::cat(&[&x, &skip, &ind], 1)?)?
                .relu()?;
        }
        let hyper = self.hyper.forward(&mask_tokens)?;
        let c0 = hyper.dim(1)?;
        let logits = hyper
            .reshape((k, 1, c0))?
            .matmul(&x.reshape((k, c0, h * w))?)?
            .reshape((k, h, w))?;
        Ok(MaskBatch {
            masks: candle_nn::ops::sigmoid(&logits)?,
            logits,
            tokens: mask_tokens,
        })
    }

    /// Single-prompt decode.
    pub fn decode_mask(
        &self,
        image: &ImageEmbedding,
        prompt: &PromptEmbedding,
        query_index: usize,
    ) -> Result<PartialMaskResult> {
        let mut out = self.to_results(
            &self.decode_masks(image, std::slice::from_ref(prompt))?,
            &[prompt.bbox],
            &[query_index],
        )?;
        Ok(out.remove(0))
    }

    pub fn to_results(
        &self,
        batch: &MaskBatch,
        boxes: &[BBox],
        query_indices: &[usize],
    ) -> Result<Vec<PartialMaskResult>> {
        let (k, h, w) = batch.masks.dims3()?;
        let masks = batch.masks.flatten_from(1)?.to_vec2::<f32>()?;
        (0..k)
            .map(|i| {
                Ok(PartialMaskResult {
                    mask: Array2::from_shape_vec((h, w), masks[i].clone()).expect("mask extents"),
                    token: batch.tokens.get(i)?,
                    source_box: boxes[i],
                    query_index: query_indices[i],
                })
            })
            .collect()
    }

    /// One result per box in input order; the image is encoded once.
    pub fn segment_candidates(
        &self,
        slice: &Array2<f32>,
        boxes: &[(BBox, usize)],
    ) -> Result<Vec<PartialMaskResult>> {
        if boxes.is_empty() {
            return Ok(Vec::new());
        }
        let image = self.encode_image(slice)?;
        let prompts = boxes
            .iter()
            .map(|(b, _)| self.encode_prompt(b, slice.dim()))
            .collect::<Result<Vec<_>>>()?;
        let batch = self.decode_masks(&image, &prompts)?;
        let bxs: Vec<BBox> = prompts.iter().map(|p| p.bbox).collect();
        let qi: Vec<usize> = boxes.iter().map(|(_, q)| *q).collect();
        self.to_results(&batch, &bxs, &qi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ParamStore, Segmenter) {
        let p = ParamStore::new(0);
        let cfg = SegmenterConfig {
            dim: 16,
            channels: [4, 8, 8],
            heads: 2,
            ffn_dim: 32,
            ..Default::default()
        };
        let s = Segmenter::new(&p, &cfg).unwrap();
        (p, s)
    }

    fn slice(n: usize) -> Array2<f32> {
        Array2::from_shape_fn((n, n), |(r, c)| ((r * 7 + c * 3) % 11) as f32 / 10.0)
    }

    #[test]
    fn prompt_shape_and_canonical_corners() {
        let (_, s) = small();
        let a = s
            .encode_prompt(&BBox::new(4.0, 5.0, 20.0, 30.0), (32, 32))
            .unwrap();
        let b = s
            .encode_prompt(&BBox::new(20.0, 30.0, 4.0, 5.0), (32, 32))
            .unwrap();
        let c = s
            .encode_prompt(&BBox::new(4.0, 5.0, 20.0, 30.0), (32, 32))
            .unwrap();
        assert_eq!(a.tokens.dims(), &[2, 16]);
        assert_eq!(
            a.tokens.to_vec2::<f32>().unwrap(),
            b.tokens.to_vec2::<f32>().unwrap()
        );
        assert_eq!(
            a.tokens.to_vec2::<f32>().unwrap(),
            c.tokens.to_vec2::<f32>().unwrap()
        );
        assert!(s
            .encode_prompt(&BBox::new(4.0, 5.0, 4.0, 30.0), (32, 32))
            .is_err());
    }

    #[test]
    fn image_embedding_shapes() {
        let p = ParamStore::new(0);
        let s = Segmenter::new(&p, &SegmenterConfig::default()).unwrap();
        let emb = s.encode_image(&slice(64)).unwrap();
        assert_eq!(emb.bottleneck.dims(), &[1, 64, 8, 8]);
        assert_eq!(emb.skips.len(), 3);
        assert_eq!(emb.skips[0].dims()[2..], [64, 64]);
        assert_eq!(emb.skips[2].dims()[2..], [16, 16]);
        let all = emb
            .bottleneck
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert!(all.iter().all(|v| v.is_finite()));
        assert!(s.encode_image(&Array2::zeros((30, 32))).is_err());
    }

    #[test]
    fn masks_are_full_resolution_probabilities() {
        let (_, s) = small();
        let res = s
            .segment_candidates(
                &slice(32),
                &[
                    (BBox::new(2.0, 2.0, 12.0, 14.0), 5),
                    (BBox::new(16.0, 8.0, 30.0, 20.0), 2),
                    (BBox::new(2.0, 2.0, 12.0, 14.0), 9),
                ],
            )
            .unwrap();
        assert_eq!(res.len(), 3);
        assert_eq!(
            res.iter().map(|r| r.query_index).collect::<Vec<_>>(),
            vec![5, 2, 9]
        );
        for r in &res {
            assert_eq!(r.mask.dim(), (32, 32));
            assert!(r.mask.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(r.token.dims(), &[16]);
        }
        // Duplicate prompts decode identically.
        assert_eq!(res[0].mask, res[2].mask);
        assert!(s.segment_candidates(&slice(32), &[]).unwrap().is_empty());
    }

    #[test]
    fn zeroed_prompt_changes_mask() {
        let (_, s) = small();
        let img = s.encode_image(&slice(32)).unwrap();
        let prompt = s
            .encode_prompt(&BBox::new(4.0, 4.0, 20.0, 20.0), (32, 32))
            .unwrap();
        let zeroed = PromptEmbedding {
            tokens: prompt.tokens.zeros_like().unwrap(),
            bbox: prompt.bbox,
        };
        let a = s.decode_mask(&img, &prompt, 0).unwrap();
        let b = s.decode_mask(&img, &zeroed, 0).unwrap();
        let diff: f32 = a
            .mask
            .iter()
            .zip(b.mask.iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-4, "diff {diff}");
    }

    #[test]
    fn coverage_fractions() {
        let cov = box_coverage(&BBox::new(4.0, 0.0, 12.0, 8.0), 1, 2, 8);
        assert_eq!(cov, vec![0.5, 0.5]);
    }
}

//! 2.5D sequence-based detector.
//!
//! Stage 1 densely proposes one columnar sequence of per-frame boxes per
//! backbone grid cell and scores it. The best `top_m` columns are RoI-pooled
//! frame by frame into sequence features `(N, L, D)`, encoded with
//! self-attention along the sequence axis only, and decoded by learnable
//! queries that cross-attend over all `N * L` encoded tokens. Each query
//! token yields a box on the anchor slice and a confidence.

use candle_core::{Device, Module, Tensor, D};
use candle_nn::Linear;

use crate::config::DetectorConfig;
use crate::error::{Error, Result};
use crate::geometry::{nms, BBox};
use crate::nn::{conv2d, linear, Attention, Conv2d, Init, LayerNorm, Mlp, ParamStore};
use crate::volume::SliceSequence;

/// Smallest box extent (pixels) produced by any decoding step.
const MIN_BOX: f32 = 1.0;
const MAX_LOG_SCALE: f64 = 2.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceProposal {
    /// One box per frame of the window.
    pub rois: Vec<BBox>,
    pub stage1_score: f32,
    pub column_id: usize,
}

#[derive(Debug, Clone)]
pub struct DetectionSet {
    pub boxes: Vec<BBox>,
    pub confidences: Vec<f32>,
    /// `(N_q, D)`.
    pub objective_tokens: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f32,
    pub query_index: usize,
}

/// Dense stage-1 output over the `G = h * w` grid.
#[derive(Debug, Clone)]
pub struct Stage1Output {
    /// `(G,)` objectness logits.
    pub objectness: Tensor,
    /// `(G, L, 4)` per-frame boxes as pixel `(cx, cy, w, h)`.
    pub boxes: Tensor,
    pub proposals: Vec<SequenceProposal>,
    pub grid: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct DetectorOutput {
    pub stage1: Stage1Output,
    pub screened: Vec<SequenceProposal>,
    /// `(N, L, D)` pooled sequence features.
    pub features: Tensor,
    /// `(N, L, D)` encoder output.
    pub encoded: Tensor,
    /// `(N_q, D)` objective tokens.
    pub tokens: Tensor,
    /// `(N_q, N)` final-layer cross-attention mass per proposal.
    pub attention: Tensor,
    /// `(N_q, 4)` boxes as image-relative `(cx, cy, w, h)` in `(0, 1)`.
    pub boxes: Tensor,
    /// `(N_q,)`.
    pub conf_logits: Tensor,
    /// `(rows, cols)` of the input slices.
    pub image_size: (usize, usize),
    pub pad_mask: Vec<bool>,
}

impl DetectorOutput {
    pub fn detection_set(&self) -> Result<DetectionSet> {
        let (h, w) = self.image_size;
        let raw = self.boxes.to_vec2::<f32>()?;
        let boxes = raw
            .iter()
            .map(|b| {
                BBox::from_center_size(
                    b[0] * w as f32,
                    b[1] * h as f32,
                    b[2] * w as f32,
                    b[3] * h as f32,
                )
                .clip(w as f32, h as f32, MIN_BOX)
            })
            .collect();
        let confidences = candle_nn::ops::sigmoid(&self.conf_logits)?.to_vec1::<f32>()?;
        Ok(DetectionSet {
            boxes,
            confidences,
            objective_tokens: self.tokens.clone(),
        })
    }

    /// Proposal receiving the most final-layer attention from each query;
    /// ties go to the lowest proposal index.
    pub fn routed_proposals(&self) -> Result<Vec<usize>> {
        let att = self.attention.to_vec2::<f32>()?;
        Ok(att
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0usize, f32::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }

    /// Mean of a proposal's sequence-feature row over non-padded frames, `(D,)`.
    pub fn sequence_summary(&self, proposal: usize) -> Result<Tensor> {
        let row = self.features.get(proposal)?;
        let valid: Vec<u32> = self
            .pad_mask
            .iter()
            .enumerate()
            .filter(|(_, p)| !**p)
            .map(|(i, _)| i as u32)
            .collect();
        let idx = Tensor::new(valid.as_slice(), row.device())?;
        Ok(row.index_select(&idx, 0)?.mean(0)?)
    }
}

/// Keeps detections with confidence at or above `conf_threshold`, then
/// applies greedy NMS. Sorted by descending confidence.
pub fn select_detections(dets: &DetectionSet, conf_threshold: f32, nms_iou: f32) -> Vec<Detection> {
    let candidates: Vec<usize> = (0..dets.boxes.len())
        .filter(|&i| dets.confidences[i] >= conf_threshold)
        .collect();
    let boxes: Vec<BBox> = candidates.iter().map(|&i| dets.boxes[i]).collect();
    let scores: Vec<f32> = candidates.iter().map(|&i| dets.confidences[i]).collect();
    nms(&boxes, &scores, nms_iou)
        .into_iter()
        .map(|k| {
            let i = candidates[k];
            Detection {
                bbox: dets.boxes[i],
                confidence: dets.confidences[i],
                query_index: i,
            }
        })
        .collect()
}

/// Top `top_m` proposals by stage-1 score; ties go to the lower column id.
pub fn screen_proposals(proposals: &[SequenceProposal], top_m: usize) -> Vec<SequenceProposal> {
    let mut sorted: Vec<&SequenceProposal> = proposals.iter().collect();
    sorted.sort_by(|a, b| {
        b.stage1_score
            .total_cmp(&a.stage1_score)
            .then(a.column_id.cmp(&b.column_id))
    });
    sorted.into_iter().take(top_m).cloned().collect()
}

/// Bilinear-sampled average pooling of boxes onto a `pool x pool` grid,
/// expressed as a dense sampling matrix `(rois * pool * pool, fh * fw)`.
pub fn roi_sampling_matrix(
    rois: &[BBox],
    stride: usize,
    pool: usize,
    fh: usize,
    fw: usize,
) -> Vec<f32> {
    const SAMPLES: usize = 2;
    let cells = fh * fw;
    let mut m = vec![0f32; rois.len() * pool * pool * cells];
    let s = stride as f32;
    for (ri, roi) in rois.iter().enumerate() {
        // Feature cell k covers pixels [k*s, (k+1)*s); its center sits at k + 0.5.
        let (fx1, fy1) = (roi.x1 / s - 0.5, roi.y1 / s - 0.5);
        let (fx2, fy2) = (roi.x2 / s - 0.5, roi.y2 / s - 0.5);
        let (bw, bh) = ((fx2 - fx1) / pool as f32, (fy2 - fy1) / pool as f32);
        let degenerate = !(bw > 1e-6 && bh > 1e-6);
        for by in 0..pool {
            for bx in 0..pool {
                let row = (ri * pool * pool + by * pool + bx) * cells;
                if degenerate {
                    let cx = ((fx1 + fx2) / 2.0).round().clamp(0.0, (fw - 1) as f32) as usize;
                    let cy = ((fy1 + fy2) / 2.0).round().clamp(0.0, (fh - 1) as f32) as usize;
                    m[row + cy * fw + cx] = 1.0;
                    continue;
                }
                let wsample = 1.0 / (SAMPLES * SAMPLES) as f32;
                for sy in 0..SAMPLES {
                    for sx in 0..SAMPLES {
                        let y = (fy1 + bh * (by as f32 + (sy as f32 + 0.5) / SAMPLES as f32))
                            .clamp(0.0, (fh - 1) as f32);
                        let x = (fx1 + bw * (bx as f32 + (sx as f32 + 0.5) / SAMPLES as f32))
                            .clamp(0.0, (fw - 1) as f32);
                        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                        let (y1, x1) = ((y0 + 1).min(fh - 1), (x0 + 1).min(fw - 1));
                        let (ty, tx) = (y - y0 as f32, x - x0 as f32);
                        m[row + y0 * fw + x0] += wsample * (1.0 - ty) * (1.0 - tx);
                        m[row + y0 * fw + x1] += wsample * (1.0 - ty) * tx;
                        m[row + y1 * fw + x0] += wsample * ty * (1.0 - tx);
                        m[row + y1 * fw + x1] += wsample * ty * tx;
                    }
                }
            }
        }
    }
    m
}

/// RoI pooling followed by a projection of the flattened `pool x pool x C`
/// patch to `D`.
#[derive(Debug, Clone)]
pub struct RoiPooler {
    proj: Linear,
    stride: usize,
    pool: usize,
}

impl RoiPooler {
    fn new(
        p: &ParamStore,
        channels: usize,
        dim: usize,
        stride: usize,
        pool: usize,
    ) -> Result<Self> {
        Ok(Self {
            proj: linear(&p.pp("proj"), pool * pool * channels, dim)?,
            stride,
            pool,
        })
    }

    /// Pools each frame's RoIs. `frames`: `(F, C, fh, fw)`, `rois[f]` the
    /// boxes for frame `f` (same count per frame). Returns `(F, n, D)`.
    pub fn pool_frames(&self, frames: &Tensor, rois: &[Vec<BBox>]) -> Result<Tensor> {
        let (f, c, fh, fw) = frames.dims4()?;
        if rois.len() != f {
            return Err(Error::shape(format!("{f} roi lists"), rois.len()));
        }
        let n = rois.first().map_or(0, |r| r.len());
        let pp = self.pool * self.pool;
        let mut weights = Vec::with_capacity(f * n * pp * fh * fw);
        for frame_rois in rois {
            weights.extend(roi_sampling_matrix(
                frame_rois,
                self.stride,
                self.pool,
                fh,
                fw,
            ));
        }
        let sampler = Tensor::from_vec(weights, (f, n * pp, fh * fw), frames.device())?;
        let flat = frames
            .reshape((f, c, fh * fw))?
            .transpose(1, 2)?
            .contiguous()?;
        let pooled = sampler.matmul(&flat)?.reshape((f, n, pp * c))?;
        Ok(self.proj.forward(&pooled)?)
    }

    /// Single RoI on a single `(C, fh, fw)` map, `(D,)`.
    pub fn pool(&self, feature_map: &Tensor, roi: &BBox) -> Result<Tensor> {
        let frames = feature_map.unsqueeze(0)?;
        Ok(self
            .pool_frames(&frames, &[vec![*roi]])?
            .squeeze(0)?
            .squeeze(0)?)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: Attention,
    ln1: LayerNorm,
    ffn: Mlp,
    ln2: LayerNorm,
}

impl EncoderLayer {
    fn new(p: &ParamStore, dim: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(&p.pp("attn"), dim, heads)?,
            ln1: LayerNorm::new(&p.pp("ln1"), dim)?,
            ffn: Mlp::new(&p.pp("ffn"), &[dim, ffn, dim])?,
            ln2: LayerNorm::new(&p.pp("ln2"), dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.ln1.forward(&(x + self.attn.forward(x, x, x)?)?)?;
        Ok(self.ln2.forward(&(&x + self.ffn.forward(&x)?)?)?)
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: Attention,
    ln1: LayerNorm,
    cross_attn: Attention,
    ln2: LayerNorm,
    ffn: Mlp,
    ln3: LayerNorm,
}

impl DecoderLayer {
    fn new(p: &ParamStore, dim: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            self_attn: Attention::new(&p.pp("self_attn"), dim, heads)?,
            ln1: LayerNorm::new(&p.pp("ln1"), dim)?,
            cross_attn: Attention::new(&p.pp("cross_attn"), dim, heads)?,
            ln2: LayerNorm::new(&p.pp("ln2"), dim)?,
            ffn: Mlp::new(&p.pp("ffn"), &[dim, ffn, dim])?,
            ln3: LayerNorm::new(&p.pp("ln3"), dim)?,
        })
    }

    fn forward(&self, tgt: &Tensor, memory: &Tensor) -> Result<(Tensor, Tensor)> {
        let t = self
            .ln1
            .forward(&(tgt + self.self_attn.forward(tgt, tgt, tgt)?)?)?;
        let (cross, weights) = self.cross_attn.forward_with_weights(&t, memory, memory)?;
        let t = self.ln2.forward(&(&t + cross)?)?;
        let t = self.ln3.forward(&(&t + self.ffn.forward(&t)?)?)?;
        Ok((t, weights))
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    cfg: DetectorConfig,
    backbone: Vec<Conv2d>,
    proposal_head: Conv2d,
    roi: RoiPooler,
    seq_pos: Tensor,
    box_embed: Linear,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    queries: Tensor,
    box_head: Mlp,
    conf_head: Linear,
}

impl Detector {
    pub fn new(p: &ParamStore, cfg: &DetectorConfig) -> Result<Self> {
        if !cfg.stride.is_power_of_two() || cfg.stride < 2 {
            return Err(Error::param(
                "stride",
                format!("must be a power of two >= 2, got {}", cfg.stride),
            ));
        }
        let d = cfg.feat_dim;
        let [c0, c1] = cfg.backbone_channels;
        let n_down = cfg.stride.trailing_zeros() as usize;
        let mut backbone = vec![conv2d(&p.pp("backbone.0"), 1, c0, 3, 1)?];
        let mut prev = c0;
        for k in 0..n_down {
            let out = if k + 1 == n_down { d } else { c1 };
            backbone.push(conv2d(
                &p.pp(&format!("backbone.{}", k + 1)),
                prev,
                out,
                3,
                2,
            )?);
            prev = out;
        }
        let l = cfg.window_size;
        Ok(Self {
            backbone,
            proposal_head: conv2d(&p.pp("proposal_head"), l * d, 1 + 4 * l, 3, 1)?,
            roi: RoiPooler::new(&p.pp("roi"), d, d, cfg.stride, cfg.roi_pool_size)?,
            seq_pos: p.var("seq_pos", &[l, d], Init::Normal(0.1))?,
            box_embed: linear(&p.pp("box_embed"), 4, d)?,
            encoder: (0..cfg.encoder_layers)
                .map(|i| {
                    EncoderLayer::new(&p.pp(&format!("encoder.{i}")), d, cfg.heads, cfg.ffn_dim)
                })
                .collect::<Result<_>>()?,
            decoder: (0..cfg.decoder_layers.max(1))
                .map(|i| {
                    DecoderLayer::new(&p.pp(&format!("decoder.{i}")), d, cfg.heads, cfg.ffn_dim)
                })
                .collect::<Result<_>>()?,
            queries: p.var("queries", &[cfg.n_queries, d], Init::Normal(1.0))?,
            box_head: Mlp::new_zero_last(&p.pp("box_head"), &[d, d, 4])?,
            conf_head: linear(&p.pp("conf_head"), d, 1)?,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn roi_pooler(&self) -> &RoiPooler {
        &self.roi
    }

    pub fn window_tensor(seq: &SliceSequence, device: &Device) -> Result<Tensor> {
        let (h, w) = seq.slice_extents();
        let mut data = Vec::with_capacity(seq.window_size() * h * w);
        for s in &seq.slices {
            data.extend(s.iter().copied());
        }
        Ok(Tensor::from_vec(
            data,
            (seq.window_size(), 1, h, w),
            device,
        )?)
    }

    /// Shared-weight 2-D features for every frame: `(L, D, H/s, W/s)`.
    pub fn backbone_features(&self, frames: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = frames.dims4()?;
        if h % self.cfg.stride != 0 || w % self.cfg.stride != 0 {
            return Err(Error::shape(
                format!("slice extents divisible by {}", self.cfg.stride),
                format!("{h}x{w}"),
            ));
        }
        let mut x = frames.clone();
        let n = self.backbone.len();
        for (i, conv) in self.backbone.iter().enumerate() {
            x = conv.forward(&x)?;
            if i + 1 < n {
                x = x.relu()?;
            }
        }
        Ok(x)
    }

    /// One proposal per grid cell: objectness plus per-frame box offsets
    /// from the cell's base box.
    pub fn generate_sequence_proposals(
        &self,
        frame_features: &Tensor,
        image_size: (usize, usize),
    ) -> Result<Stage1Output> {
        let (l, d, fh, fw) = frame_features.dims4()?;
        if l != self.cfg.window_size {
            return Err(Error::shape(
                format!("window of {}", self.cfg.window_size),
                l,
            ));
        }
        let g = fh * fw;
        let stacked = frame_features.reshape((1, l * d, fh, fw))?;
        let out = self
            .proposal_head
            .forward(&stacked)?
            .reshape((1 + 4 * l, g))?
            .t()?
            .contiguous()?;
        let objectness = out.narrow(1, 0, 1)?.squeeze(1)?;
        let deltas = out.narrow(1, 1, 4 * l)?.reshape((g, l, 4))?;

        let s = self.cfg.stride as f32;
        let a = self.cfg.anchor_size as f64;
        let mut base = Vec::with_capacity(g * 2);
        for r in 0..fh {
            for c in 0..fw {
                base.push((c as f32 + 0.5) * s);
                base.push((r as f32 + 0.5) * s);
            }
        }
        let base = Tensor::from_vec(base, (g, 1, 2), frame_features.device())?;
        let centers = base.broadcast_add(&(deltas.narrow(2, 0, 2)? * a)?)?;
        let sizes = (deltas
            .narrow(2, 2, 2)?
            .clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE)?
            .exp()?
            * a)?;
        let boxes = Tensor::cat(&[centers, sizes], 2)?;

        let (h, w) = image_size;
        let raw = boxes.to_vec3::<f32>()?;
        let scores = candle_nn::ops::sigmoid(&objectness)?.to_vec1::<f32>()?;
        let proposals = raw
            .iter()
            .zip(scores)
            .enumerate()
            .map(|(column_id, (frames, stage1_score))| SequenceProposal {
                rois: frames
                    .iter()
                    .map(|b| {
                        BBox::from_center_size(b[0], b[1], b[2], b[3])
                            .clip(w as f32, h as f32, MIN_BOX)
                    })
                    .collect(),
                stage1_score,
                column_id,
            })
            .collect();
        Ok(Stage1Output {
            objectness,
            boxes,
            proposals,
            grid: (fh, fw),
        })
    }

    /// Row `i` is the frame-ordered RoI-pooled features of proposal `i`: `(N, L, D)`.
    pub fn build_sequence_features(
        &self,
        screened: &[SequenceProposal],
        frame_features: &Tensor,
    ) -> Result<Tensor> {
        let l = frame_features.dim(0)?;
        let rois: Vec<Vec<BBox>> = (0..l)
            .map(|j| screened.iter().map(|p| p.rois[j]).collect())
            .collect();
        let pooled = self.roi.pool_frames(frame_features, &rois)?;
        Ok(pooled.transpose(0, 1)?.contiguous()?)
    }

    /// Self-attention along the sequence axis of each proposal independently,
    /// with a learned per-position embedding and an embedding of each RoI's
    /// image-relative coordinates.
    pub fn encode_sequences(
        &self,
        features: &Tensor,
        screened: &[SequenceProposal],
        image_size: (usize, usize),
    ) -> Result<Tensor> {
        let (n, l, _) = features.dims3()?;
        let (h, w) = image_size;
        let mut geo = Vec::with_capacity(n * l * 4);
        for p in screened {
            for b in &p.rois {
                geo.extend([
                    b.x1 / w as f32,
                    b.y1 / h as f32,
                    b.x2 / w as f32,
                    b.y2 / h as f32,
                ]);
            }
        }
        let geo = Tensor::from_vec(geo, (n, l, 4), features.device())?;
        let mut x = features
            .broadcast_add(&self.seq_pos.narrow(0, 0, l)?.unsqueeze(0)?)?
            .add(&self.box_embed.forward(&geo)?)?;
        for layer in &self.encoder {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    /// Queries cross-attend over the flattened `(N * L)` encoded tokens.
    /// Returns the objective tokens `(N_q, D)` and the final layer's
    /// attention summed per proposal `(N_q, N)`.
    pub fn decode_queries(&self, encoded: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, l, d) = encoded.dims3()?;
        let memory = encoded.reshape((1, n * l, d))?;
        let mut tgt = self.queries.unsqueeze(0)?;
        let mut weights = None;
        for layer in &self.decoder {
            let (t, w) = layer.forward(&tgt, &memory)?;
            tgt = t;
            weights = Some(w);
        }
        let weights = weights.expect("at least one decoder layer");
        let nq = self.cfg.n_queries;
        let per_proposal = weights.reshape((nq, n, l))?.sum(D::Minus1)?;
        Ok((tgt.squeeze(0)?, per_proposal))
    }

    /// Box and confidence heads. Each box refines the attention-weighted
    /// anchor-frame box of the proposals its query attends to, in logit space.
    pub fn predict_boxes(
        &self,
        tokens: &Tensor,
        attention: &Tensor,
        screened: &[SequenceProposal],
        anchor_position: usize,
        image_size: (usize, usize),
    ) -> Result<(Tensor, Tensor)> {
        let (h, w) = image_size;
        let mut refs = Vec::with_capacity(screened.len() * 4);
        for p in screened {
            let b = p.rois[anchor_position];
            let (cx, cy) = b.center();
            refs.extend([
                cx / w as f32,
                cy / h as f32,
                b.width() / w as f32,
                b.height() / h as f32,
            ]);
        }
        let refs = Tensor::from_vec(refs, (screened.len(), 4), tokens.device())?;
        let reference = attention.matmul(&refs)?.clamp(1e-4f32, 1.0 - 1e-4)?;
        let ref_logit = (reference.log()? - (1.0 - &reference)?.log()?)?;
        let boxes = candle_nn::ops::sigmoid(&(ref_logit + self.box_head.forward(tokens)?)?)?;
        let conf_logits = self.conf_head.forward(tokens)?.squeeze(1)?;
        Ok((boxes, conf_logits))
    }

    pub fn forward(&self, seq: &SliceSequence) -> Result<DetectorOutput> {
        if seq.window_size() != self.cfg.window_size {
            return Err(Error::shape(
                format!("window of {}", self.cfg.window_size),
                seq.window_size(),
            ));
        }
        let image_size = seq.slice_extents();
        let frames = Self::window_tensor(seq, self.queries.device())?;
        let feats = self.backbone_features(&frames)?;
        let stage1 = self.generate_sequence_proposals(&feats, image_size)?;
        let screened = screen_proposals(&stage1.proposals, self.cfg.top_m);
        let features = self.build_sequence_features(&screened, &feats)?;
        let encoded = self.encode_sequences(&features, &screened, image_size)?;
        let (tokens, attention) = self.decode_queries(&encoded)?;
        let (boxes, conf_logits) = self.predict_boxes(
            &tokens,
            &attention,
            &screened,
            seq.anchor_position(),
            image_size,
        )?;
        Ok(DetectorOutput {
            stage1,
            screened,
            features,
            encoded,
            tokens,
            attention,
            boxes,
            conf_logits,
            image_size,
            pad_mask: seq.pad_mask.clone(),
        })
    }
}

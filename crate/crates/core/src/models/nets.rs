//! Network definitions: conv/dense layers, the three-block autoencoder
//! with skip connections, and the survival classifier with its two head
//! variants (3-layer MLP, single-query attention pooling over the four
//! encoder stages).

use rand::Rng;

use crate::tensor::{NodeId, Tape, Tensor};

use super::{Result, TrainError};

/// Builds the class-logit computation of a model on a tape. Every
/// attribution method and quality metric talks to models through this.
pub trait LogitModel {
    fn build_logits(&self, tape: &mut Tape, x: NodeId) -> crate::tensor::Result<NodeId>;
    fn n_classes(&self) -> usize;
    /// Named conv capture points usable by Grad-CAM.
    fn capture_layers(&self) -> Vec<String> {
        Vec::new()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv3dLayer {
    pub weight: Tensor, // [out, in, k, k, k]
    pub bias: Tensor,   // [out]
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dLayer {
    /// He-style init scaled by fan-in.
    pub fn init<R: Rng>(out_c: usize, in_c: usize, k: usize, rng: &mut R) -> Self {
        let fan_in = (in_c * k * k * k) as f32;
        let std = (2.0 / fan_in).sqrt();
        Conv3dLayer {
            weight: Tensor::rand_normal(&[out_c, in_c, k, k, k], 0.0, std, rng),
            bias: Tensor::zeros(&[out_c]),
            stride: 1,
            padding: k / 2,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
        ids: &mut Vec<NodeId>,
    ) -> crate::tensor::Result<NodeId> {
        let w = tape.leaf(self.weight.clone());
        ids.push(w);
        let b = tape.leaf(self.bias.clone());
        ids.push(b);
        tape.conv3d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor, // [out, in]
    pub bias: Tensor,   // [out]
}

impl DenseLayer {
    pub fn init<R: Rng>(out: usize, inp: usize, rng: &mut R) -> Self {
        let std = (2.0 / inp as f32).sqrt();
        DenseLayer {
            weight: Tensor::rand_normal(&[out, inp], 0.0, std, rng),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
        ids: &mut Vec<NodeId>,
    ) -> crate::tensor::Result<NodeId> {
        let w = tape.leaf(self.weight.clone());
        ids.push(w);
        let b = tape.leaf(self.bias.clone());
        ids.push(b);
        tape.dense(x, w, b)
    }
}

/// Autoencoder architecture: three conv+relu+2x-downsample encoder blocks
/// mirrored by three upsample+conv+relu decoder blocks with skip
/// connections, sigmoid-bounded single-channel output.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderSpec {
    pub input_dims: [usize; 3],
    pub channels: [usize; 3],
}

impl Default for AutoencoderSpec {
    fn default() -> Self {
        AutoencoderSpec {
            input_dims: [32, 32, 32],
            channels: [8, 16, 32],
        }
    }
}

impl AutoencoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dims.iter().any(|d| d % 8 != 0 || *d == 0) {
            return Err(TrainError::InvalidConfig(format!(
                "input dims {:?} must be positive multiples of 8 (three 2x downsamples)",
                self.input_dims
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(TrainError::InvalidConfig("channel widths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn canonical(&self) -> String {
        format!("ae dims={:?} ch={:?}", self.input_dims, self.channels)
    }
}

/// Encoder features exposed to decoder and heads: the three pre-pool
/// stage activations (named s1..s3 on the tape) plus the bottleneck.
pub struct EncoderFeatures {
    pub stages: [NodeId; 3],
    pub bottleneck: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub convs: [Conv3dLayer; 3],
}

impl Encoder {
    pub fn init<R: Rng>(channels: [usize; 3], rng: &mut R) -> Self {
        Encoder {
            convs: [
                Conv3dLayer::init(channels[0], 1, 3, rng),
                Conv3dLayer::init(channels[1], channels[0], 3, rng),
                Conv3dLayer::init(channels[2], channels[1], 3, rng),
            ],
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
        ids: &mut Vec<NodeId>,
    ) -> crate::tensor::Result<EncoderFeatures> {
        let mut cur = x;
        let mut stages = [0usize; 3];
        for (i, conv) in self.convs.iter().enumerate() {
            let c = conv.forward(tape, cur, ids)?;
            let r = tape.relu(c);
            // Capture points are best-effort: repeated forwards on one
            // tape would collide, and only the first pass is captured.
            let _ = tape.name_layer(&format!("s{}", i + 1), r);
            stages[i] = r;
            cur = tape.max_pool3d(r, 2)?;
        }
        Ok(EncoderFeatures {
            stages,
            bottleneck: cur,
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.convs
            .iter()
            .flat_map(|c| [&c.weight, &c.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.convs
            .iter_mut()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub spec: AutoencoderSpec,
    pub encoder: Encoder,
    pub decoder: [Conv3dLayer; 3],
    pub head: Conv3dLayer,
}

impl Autoencoder {
    pub fn init<R: Rng>(spec: &AutoencoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let [c0, c1, c2] = spec.channels;
        let encoder = Encoder::init(spec.channels, rng);
        let decoder = [
            Conv3dLayer::init(c1, 2 * c2, 3, rng),
            Conv3dLayer::init(c0, 2 * c1, 3, rng),
            Conv3dLayer::init(c0, 2 * c0, 3, rng),
        ];
        let head = Conv3dLayer::init(1, c0, 1, rng);
        Ok(Autoencoder {
            spec: spec.clone(),
            encoder,
            decoder,
            head,
        })
    }

    /// Forward pass returning the sigmoid-bounded reconstruction node and
    /// the bound parameter ids (in `params()` order).
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
    ) -> crate::tensor::Result<(NodeId, Vec<NodeId>)> {
        let mut ids = Vec::new();
        let feats = self.encoder.forward(tape, x, &mut ids)?;
        let mut d = feats.bottleneck;
        for (i, conv) in self.decoder.iter().enumerate() {
            let up = tape.upsample_nearest3d(d, 2)?;
            let skip = feats.stages[2 - i];
            let cat = tape.concat(&[up, skip])?;
            let c = conv.forward(tape, cat, &mut ids)?;
            d = tape.relu(c);
        }
        let out = self.head.forward(tape, d, &mut ids)?;
        Ok((tape.sigmoid(out), ids))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.iter().flat_map(|c| [&c.weight, &c.bias]));
        p.push(&self.head.weight);
        p.push(&self.head.bias);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self.encoder.params_mut();
        p.extend(
            self.decoder
                .iter_mut()
                .flat_map(|c| [&mut c.weight, &mut c.bias]),
        );
        p.push(&mut self.head.weight);
        p.push(&mut self.head.bias);
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Mlp,
    AttentionPool,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Mlp => "mlp",
            HeadKind::AttentionPool => "attention",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierSpec {
    pub ae: AutoencoderSpec,
    pub head: HeadKind,
    /// Hidden widths of the MLP head.
    pub hidden: [usize; 2],
    /// Token dimension of the attention head.
    pub attn_dim: usize,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        ClassifierSpec {
            ae: AutoencoderSpec::default(),
            head: HeadKind::Mlp,
            hidden: [64, 32],
            attn_dim: 32,
        }
    }
}

impl ClassifierSpec {
    pub const N_CLASSES: usize = 2;

    pub fn validate(&self) -> Result<()> {
        self.ae.validate()?;
        if self.hidden.iter().any(|&h| h == 0) || self.attn_dim == 0 {
            return Err(TrainError::InvalidConfig("head widths must be >= 1".into()));
        }
        Ok(())
    }

    pub fn bottleneck_len(&self) -> usize {
        let d = self.ae.input_dims;
        self.ae.channels[2] * (d[0] / 8) * (d[1] / 8) * (d[2] / 8)
    }

    pub fn canonical(&self) -> String {
        format!(
            "clf {} head={} hidden={:?} attn={}",
            self.ae.canonical(),
            self.head.as_str(),
            self.hidden,
            self.attn_dim
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Mlp {
        layers: [DenseLayer; 3],
    },
    Attention {
        /// One projection per encoder stage (s1, s2, s3, bottleneck).
        projections: [DenseLayer; 4],
        query: Tensor,
        out: DenseLayer,
    },
}

impl Head {
    pub fn init<R: Rng>(spec: &ClassifierSpec, rng: &mut R) -> Self {
        match spec.head {
            HeadKind::Mlp => Head::Mlp {
                layers: [
                    DenseLayer::init(spec.hidden[0], spec.bottleneck_len(), rng),
                    DenseLayer::init(spec.hidden[1], spec.hidden[0], rng),
                    DenseLayer::init(ClassifierSpec::N_CLASSES, spec.hidden[1], rng),
                ],
            },
            HeadKind::AttentionPool => {
                let ch = spec.ae.channels;
                let h = spec.attn_dim;
                Head::Attention {
                    projections: [
                        DenseLayer::init(h, ch[0], rng),
                        DenseLayer::init(h, ch[1], rng),
                        DenseLayer::init(h, ch[2], rng),
                        DenseLayer::init(h, ch[2], rng),
                    ],
                    query: Tensor::rand_normal(&[h], 0.0, (1.0 / h as f32).sqrt(), rng),
                    out: DenseLayer::init(ClassifierSpec::N_CLASSES, h, rng),
                }
            }
        }
    }

    /// Both heads accept the same encoder feature tuple and emit 2 logits.
    pub fn forward(
        &self,
        tape: &mut Tape,
        feats: &EncoderFeatures,
        ids: &mut Vec<NodeId>,
    ) -> crate::tensor::Result<NodeId> {
        match self {
            Head::Mlp { layers } => {
                let n = tape.value(feats.bottleneck).numel();
                let flat = tape.reshape(feats.bottleneck, &[n])?;
                let h1 = layers[0].forward(tape, flat, ids)?;
                let r1 = tape.relu(h1);
                let h2 = layers[1].forward(tape, r1, ids)?;
                let r2 = tape.relu(h2);
                layers[2].forward(tape, r2, ids)
            }
            Head::Attention {
                projections,
                query,
                out,
            } => {
                let stage_nodes = [
                    feats.stages[0],
                    feats.stages[1],
                    feats.stages[2],
                    feats.bottleneck,
                ];
                let q = tape.leaf(query.clone());
                ids.push(q);
                let scale = 1.0 / (query.numel() as f32).sqrt();
                let mut tokens = Vec::with_capacity(4);
                let mut scores = Vec::with_capacity(4);
                for (proj, &node) in projections.iter().zip(&stage_nodes) {
                    let pooled = tape.spatial_mean(node)?;
                    let token = proj.forward(tape, pooled, ids)?;
                    let qd = tape.mul(q, token)?;
                    let dot = tape.sum(qd);
                    scores.push(tape.scale(dot, scale));
                    tokens.push(token);
                }
                let score_vec = tape.concat(&scores)?;
                let alpha = tape.softmax(score_vec)?;
                let mut pooled_feat: Option<NodeId> = None;
                for (i, &token) in tokens.iter().enumerate() {
                    let a = tape.gather_scalar(alpha, i)?;
                    let term = tape.mul(token, a)?;
                    pooled_feat = Some(match pooled_feat {
                        Some(acc) => tape.add(acc, term)?,
                        None => term,
                    });
                }
                out.forward(tape, pooled_feat.expect("four stages"), ids)
            }
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Head::Mlp { layers } => layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect(),
            Head::Attention {
                projections,
                query,
                out,
            } => {
                let mut p = vec![query];
                p.extend(projections.iter().flat_map(|l| [&l.weight, &l.bias]));
                p.push(&out.weight);
                p.push(&out.bias);
                p
            }
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Head::Mlp { layers } => layers
                .iter_mut()
                .flat_map(|l| [&mut l.weight, &mut l.bias])
                .collect(),
            Head::Attention {
                projections,
                query,
                out,
            } => {
                let mut p = vec![query];
                p.extend(
                    projections
                        .iter_mut()
                        .flat_map(|l| [&mut l.weight, &mut l.bias]),
                );
                p.push(&mut out.weight);
                p.push(&mut out.bias);
                p
            }
        }
    }
}

/// Survival classifier: shared encoder plus one of the two heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub spec: ClassifierSpec,
    pub encoder: Encoder,
    pub head: Head,
}

impl Classifier {
    pub fn init<R: Rng>(spec: &ClassifierSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        Ok(Classifier {
            spec: spec.clone(),
            encoder: Encoder::init(spec.ae.channels, rng),
            head: Head::init(spec, rng),
        })
    }

    pub fn with_encoder(spec: &ClassifierSpec, encoder: Encoder, head: Head) -> Result<Self> {
        spec.validate()?;
        Ok(Classifier {
            spec: spec.clone(),
            encoder,
            head,
        })
    }

    /// Forward returning logits plus the encoder/head parameter node ids
    /// (matching `encoder.params()` / `head.params()` order).
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
    ) -> crate::tensor::Result<(NodeId, Vec<NodeId>, Vec<NodeId>)> {
        let mut enc_ids = Vec::new();
        let feats = self.encoder.forward(tape, x, &mut enc_ids)?;
        let mut head_ids = Vec::new();
        let logits = self.head.forward(tape, &feats, &mut head_ids)?;
        Ok((logits, enc_ids, head_ids))
    }
}

impl LogitModel for Classifier {
    fn build_logits(&self, tape: &mut Tape, x: NodeId) -> crate::tensor::Result<NodeId> {
        let (logits, _, _) = self.forward(tape, x)?;
        Ok(logits)
    }

    fn n_classes(&self) -> usize {
        ClassifierSpec::N_CLASSES
    }

    fn capture_layers(&self) -> Vec<String> {
        vec!["s1".into(), "s2".into(), "s3".into()]
    }
}

/// Plain linear logit model `W x + b`; the input is flattened first.
/// Used as the analytic baseline for attribution and faithfulness checks.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    pub weight: Tensor, // [classes, d]
    pub bias: Tensor,   // [classes]
}

impl LinearModel {
    pub fn new(weight: Tensor, bias: Tensor) -> Self {
        assert_eq!(weight.shape().len(), 2);
        assert_eq!(weight.shape()[0], bias.numel());
        LinearModel { weight, bias }
    }
}

impl LogitModel for LinearModel {
    fn build_logits(&self, tape: &mut Tape, x: NodeId) -> crate::tensor::Result<NodeId> {
        let n = tape.value(x).numel();
        let flat = tape.reshape(x, &[n])?;
        let w = tape.leaf(self.weight.clone());
        let b = tape.leaf(self.bias.clone());
        tape.dense(flat, w, b)
    }

    fn n_classes(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn autoencoder_output_shape_equals_input_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = AutoencoderSpec {
            input_dims: [8, 8, 16],
            channels: [2, 3, 4],
        };
        let ae = Autoencoder::init(&spec, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::rand_uniform(&[1, 8, 8, 16], 0.0, 1.0, &mut rng));
        let (y, ids) = ae.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 8, 8, 16]);
        assert_eq!(ids.len(), ae.params().len());
        // Sigmoid keeps the reconstruction in (0, 1).
        assert!(tape.value(y).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn both_heads_accept_the_same_features_and_emit_two_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = AutoencoderSpec {
            input_dims: [8, 8, 8],
            channels: [2, 3, 4],
        };
        for head in [HeadKind::Mlp, HeadKind::AttentionPool] {
            let spec = ClassifierSpec {
                ae: base.clone(),
                head,
                hidden: [8, 4],
                attn_dim: 6,
            };
            let clf = Classifier::init(&spec, &mut rng).unwrap();
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::rand_uniform(&[1, 8, 8, 8], 0.0, 1.0, &mut rng));
            let (logits, enc_ids, head_ids) = clf.forward(&mut tape, x).unwrap();
            assert_eq!(tape.value(logits).shape(), &[2]);
            assert_eq!(enc_ids.len(), clf.encoder.params().len());
            assert_eq!(head_ids.len(), clf.head.params().len());
        }
    }

    #[test]
    fn dims_not_divisible_by_eight_are_rejected()  {
        let spec = AutoencoderSpec {
            input_dims: [12, 8, 8],
            channels: [2, 2, 2],
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn encoder_names_capture_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ClassifierSpec {
            ae: AutoencoderSpec {
                input_dims: [8, 8, 8],
                channels: [2, 2, 2],
            },
            head: HeadKind::Mlp,
            hidden: [4, 4],
            attn_dim: 4,
        };
        let clf = Classifier::init(&spec, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 8, 8, 8]));
        clf.build_logits(&mut tape, x).unwrap();
        for name in ["s1", "s2", "s3"] {
            assert!(tape.layer_id(name).is_some(), "missing capture point {name}");
        }
    }
}

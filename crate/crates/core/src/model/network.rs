use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, ParamStore, Tensor, Var};

use super::layers::{Builder, Conv, ConvBn, Forward, Mode, UpBlock};
use super::{HeadKind, ModelConfig};

const SAME3: ConvGeometry = ConvGeometry::same(3, 1);
const POINT: ConvGeometry = ConvGeometry::new(1, 0, 1);

/// C2 (1/4), C3 (1/8) and C5 (1/32) feature maps.
#[derive(Debug, Clone, Copy)]
pub struct StageFeatures {
    pub c2: Var,
    pub c3: Var,
    pub c5: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutputs {
    pub body: Var,
    /// Face, upper-limb and lower-limb predictions; absent for the baseline head.
    pub aux: Option<[Var; 3]>,
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

impl BasicBlock {
    fn new<R: Rng>(bld: &mut Builder<'_, R>, cin: usize, cout: usize, stride: usize) -> Self {
        let conv1 = bld.scoped("conv1", |b| {
            ConvBn::new(b, cin, cout, 3, ConvGeometry::new(stride, 1, 1), true)
        });
        let conv2 = bld.scoped("conv2", |b| ConvBn::new(b, cout, cout, 3, SAME3, false));
        let shortcut = (stride != 1 || cin != cout).then(|| {
            bld.scoped("shortcut", |b| {
                ConvBn::new(b, cin, cout, 1, ConvGeometry::new(stride, 0, 1), false)
            })
        });
        BasicBlock {
            conv1,
            conv2,
            shortcut,
        }
    }

    fn forward(&self, fx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(fx, x)?;
        let y = self.conv2.forward(fx, y)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(fx, x)?,
            None => x,
        };
        let sum = fx.tape.add(y, skip)?;
        Ok(fx.tape.relu(sum))
    }
}

/// Strided stem (C1, 1/2) followed by four residual stages, each halving resolution.
#[derive(Debug, Clone)]
pub struct Backbone {
    stem: ConvBn,
    stages: Vec<Vec<BasicBlock>>,
}

impl Backbone {
    pub fn new<R: Rng>(bld: &mut Builder<'_, R>, cfg: &ModelConfig) -> Self {
        bld.scoped("backbone", |bld| {
            let ch = cfg.stage_channels;
            let stem = bld.scoped("stem", |b| {
                ConvBn::new(b, 3, ch[0], 3, ConvGeometry::new(2, 1, 1), true)
            });
            let stages = (0..4)
                .map(|s| {
                    bld.scoped(&format!("c{}", s + 2), |bld| {
                        (0..cfg.blocks_per_stage[s])
                            .map(|i| {
                                let (cin, stride) =
                                    if i == 0 { (ch[s], 2) } else { (ch[s + 1], 1) };
                                bld.scoped(&format!("block{i}"), |b| {
                                    BasicBlock::new(b, cin, ch[s + 1], stride)
                                })
                            })
                            .collect()
                    })
                })
                .collect();
            Backbone { stem, stages }
        })
    }

    pub fn forward(&self, fx: &mut Forward<'_>, x: Var) -> Result<StageFeatures> {
        let s = fx.tape.shape(x);
        if !s.h.is_multiple_of(32) || !s.w.is_multiple_of(32) || s.h == 0 || s.w == 0 {
            return Err(Error::invalid(
                "backbone",
                format!("input {}x{} is not divisible by 32", s.h, s.w),
            ));
        }
        if s.c != 3 {
            return Err(Error::mismatch("backbone", "input channels", 3, s.c));
        }
        let mut y = self.stem.forward(fx, x)?;
        let mut taps = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                y = block.forward(fx, y)?;
            }
            taps.push(y);
        }
        Ok(StageFeatures {
            c2: taps[0],
            c3: taps[1],
            c5: taps[3],
        })
    }
}

fn upsampler<R: Rng>(bld: &mut Builder<'_, R>, cin: usize, width: usize) -> Vec<UpBlock> {
    (0..3)
        .map(|i| {
            bld.scoped(&format!("up{i}"), |b| {
                UpBlock::new(b, if i == 0 { cin } else { width }, width)
            })
        })
        .collect()
}

fn upsample(blocks: &[UpBlock], fx: &mut Forward<'_>, x: Var) -> Result<Var> {
    blocks.iter().try_fold(x, |y, b| b.forward(fx, y))
}

/// Face, upper-limb, lower-limb and hybrid branches lifting C5 to 1/4 resolution.
#[derive(Debug, Clone)]
pub struct StructureSupervision {
    branches: [Vec<UpBlock>; 4],
    heads: [Conv; 3],
}

impl StructureSupervision {
    pub fn new<R: Rng>(bld: &mut Builder<'_, R>, cfg: &ModelConfig) -> Self {
        let (c5, f) = (cfg.stage_channels[4], cfg.feature_width);
        bld.scoped("ss", |bld| {
            let names = ["face", "upper", "lower", "hybrid"];
            let branches = names.map(|n| bld.scoped(n, |b| upsampler(b, c5, f)));
            let heads = std::array::from_fn(|i| {
                let k = cfg.part_partition[i].len();
                bld.scoped(names[i], |b| b.scoped("head", |b| Conv::head(b, f, k)))
            });
            StructureSupervision { branches, heads }
        })
    }

    /// Four branch features (face, upper, lower, hybrid) and three auxiliary heatmaps.
    pub fn forward(&self, fx: &mut Forward<'_>, c5: Var) -> Result<([Var; 4], [Var; 3])> {
        let mut feats = [c5; 4];
        for (slot, branch) in feats.iter_mut().zip(&self.branches) {
            *slot = upsample(branch, fx, c5)?;
        }
        let mut aux = [c5; 3];
        for (i, head) in self.heads.iter().enumerate() {
            aux[i] = head.forward(fx, feats[i])?;
        }
        Ok((feats, aux))
    }
}

/// Parallel dilated 3×3 convolutions plus an image-level pooling branch.
#[derive(Debug, Clone)]
pub struct Aspp {
    atrous: Vec<ConvBn>,
    pool: Conv,
    project: ConvBn,
}

impl Aspp {
    pub fn new<R: Rng>(bld: &mut Builder<'_, R>, width: usize, rates: &[usize]) -> Self {
        bld.scoped("aspp", |bld| {
            let atrous = rates
                .iter()
                .map(|&r| {
                    bld.scoped(&format!("rate{r}"), |b| {
                        ConvBn::new(b, width, width, 3, ConvGeometry::same(3, r), true)
                    })
                })
                .collect();
            let pool = bld.scoped("pool", |b| Conv::new(b, width, width, 1, POINT, true));
            let cat = width * (rates.len() + 1);
            let project = bld.scoped("project", |b| ConvBn::new(b, cat, width, 1, POINT, true));
            Aspp {
                atrous,
                pool,
                project,
            }
        })
    }

    pub fn forward(&self, fx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let mut parts = Vec::with_capacity(self.atrous.len() + 1);
        for branch in &self.atrous {
            parts.push(branch.forward(fx, x)?);
        }
        parts.push(self.image_level(fx, x)?);
        let cat = fx.tape.concat_channels(&parts)?;
        self.project.forward(fx, cat)
    }

    /// The pooled branch, broadcast back to the input resolution.
    pub fn image_level(&self, fx: &mut Forward<'_>, x: Var) -> Result<Var> {
        let s = fx.tape.shape(x);
        image_pool(fx, &[&self.pool], x, s.h, s.w)
    }
}

/// Global average pool → 1×1 conv + ReLU (per layer) → broadcast to `h × w`.
/// No normalization here: batch statistics of a 1×1 map are degenerate for small batches.
fn image_pool(fx: &mut Forward<'_>, convs: &[&Conv], x: Var, h: usize, w: usize) -> Result<Var> {
    let mut y = fx.tape.global_avg_pool(x)?;
    for conv in convs {
        let z = conv.forward(fx, y)?;
        y = fx.tape.relu(z);
    }
    fx.tape.resize_bilinear(y, h, w)
}

/// Conv2, Conv3 and Conv2GP branches on shallow features.
#[derive(Debug, Clone)]
pub struct SapPath {
    conv2: [ConvBn; 2],
    conv3: Option<[ConvBn; 2]>,
    conv2gp: Option<[Conv; 2]>,
    reduce: ConvBn,
}

impl SapPath {
    pub fn new<R: Rng>(bld: &mut Builder<'_, R>, cfg: &ModelConfig) -> Self {
        let (c2, c3, f) = (
            cfg.stage_channels[1],
            cfg.stage_channels[2],
            cfg.feature_width,
        );
        bld.scoped("sap", |bld| {
            let pair = |bld: &mut Builder<'_, R>, name: &str, cin: usize| {
                bld.scoped(name, |b| {
                    [
                        b.scoped("conv3x3", |b| ConvBn::new(b, cin, f, 3, SAME3, true)),
                        b.scoped("conv1x1", |b| ConvBn::new(b, f, f, 1, POINT, true)),
                    ]
                })
            };
            let conv2 = pair(bld, "conv2", c2);
            let conv3 = cfg.sap_conv3.then(|| pair(bld, "conv3", c3));
            let conv2gp = cfg.sap_conv2gp.then(|| {
                bld.scoped("conv2gp", |b| {
                    [
                        b.scoped("fc0", |b| Conv::new(b, c2, f, 1, POINT, true)),
                        b.scoped("fc1", |b| Conv::new(b, f, f, 1, POINT, true)),
                    ]
                })
            });
            let branches = 1 + usize::from(cfg.sap_conv3) + usize::from(cfg.sap_conv2gp);
            let reduce = bld.scoped("reduce", |b| {
                ConvBn::new(b, branches * f, f, 1, POINT, true)
            });
            SapPath {
                conv2,
                conv3,
                conv2gp,
                reduce,
            }
        })
    }

    /// Channel count of the concatenation before the final 1×1 reduction.
    pub fn concat_channels(&self, width: usize) -> usize {
        width * (1 + usize::from(self.conv3.is_some()) + usize::from(self.conv2gp.is_some()))
    }

    pub fn forward(&self, fx: &mut Forward<'_>, c2: Var, c3: Var) -> Result<Var> {
        let parts = self.branches(fx, c2, c3)?;
        let cat = fx.tape.concat_channels(&parts)?;
        self.reduce.forward(fx, cat)
    }

    /// Enabled branch outputs at C2 resolution, in the order Conv2, Conv3, Conv2GP.
    pub fn branches(&self, fx: &mut Forward<'_>, c2: Var, c3: Var) -> Result<Vec<Var>> {
        let (s2, s3) = (fx.tape.shape(c2), fx.tape.shape(c3));
        if s3.h * 2 != s2.h || s3.w * 2 != s2.w {
            return Err(Error::invalid(
                "sap",
                format!("c3 {}x{} is not half of c2 {}x{}", s3.h, s3.w, s2.h, s2.w),
            ));
        }
        let mut parts = Vec::with_capacity(3);
        let y = self.conv2[0].forward(fx, c2)?;
        parts.push(self.conv2[1].forward(fx, y)?);
        if let Some(conv3) = &self.conv3 {
            let y = conv3[0].forward(fx, c3)?;
            let y = conv3[1].forward(fx, y)?;
            parts.push(fx.tape.resize_bilinear(y, s2.h, s2.w)?);
        }
        if let Some([fc0, fc1]) = &self.conv2gp {
            parts.push(image_pool(fx, &[fc0, fc1], c2, s2.h, s2.w)?);
        }
        Ok(parts)
    }
}

/// Context path, optional spatial path and the heavy head.
#[derive(Debug, Clone)]
pub struct CsaHead {
    ss: StructureSupervision,
    fuse: ConvBn,
    aspp: Option<Aspp>,
    sap: Option<SapPath>,
    hhp: Vec<ConvBn>,
    out: Conv,
}

impl CsaHead {
    pub fn new<R: Rng>(bld: &mut Builder<'_, R>, cfg: &ModelConfig) -> Self {
        let f = cfg.feature_width;
        let ss = StructureSupervision::new(bld, cfg);
        let (fuse, aspp) = bld.scoped("cap", |bld| {
            let fuse = bld.scoped("fuse", |b| ConvBn::new(b, 4 * f, f, 1, POINT, true));
            let aspp = cfg.use_aspp.then(|| Aspp::new(bld, f, &cfg.aspp_rates));
            (fuse, aspp)
        });
        let sap = cfg.use_sap.then(|| SapPath::new(bld, cfg));
        let (hhp, out) = bld.scoped("hhp", |bld| {
            let cin = if cfg.use_sap { 2 * f } else { f };
            let hhp = (0..cfg.hhp_depth)
                .map(|i| {
                    bld.scoped(&format!("conv{i}"), |b| {
                        ConvBn::new(b, if i == 0 { cin } else { f }, f, 3, SAME3, true)
                    })
                })
                .collect();
            let head_in = if cfg.hhp_depth == 0 { cin } else { f };
            let out = bld.scoped("head", |b| Conv::head(b, head_in, cfg.num_keypoints));
            (hhp, out)
        });
        CsaHead {
            ss,
            fuse,
            aspp,
            sap,
            hhp,
            out,
        }
    }

    /// Context features at 1/4 resolution and the three auxiliary heatmaps.
    pub fn cap_forward(&self, fx: &mut Forward<'_>, c5: Var) -> Result<(Var, [Var; 3])> {
        let (feats, aux) = self.ss.forward(fx, c5)?;
        let cat = fx.tape.concat_channels(&feats)?;
        let y = self.fuse.forward(fx, cat)?;
        let y = match &self.aspp {
            Some(aspp) => aspp.forward(fx, y)?,
            None => y,
        };
        Ok((y, aux))
    }

    pub fn hhp_forward(&self, fx: &mut Forward<'_>, cap: Var, sap: Option<Var>) -> Result<Var> {
        let mut y = match sap {
            Some(sap) => fx.tape.concat_channels(&[cap, sap])?,
            None => cap,
        };
        for layer in &self.hhp {
            y = layer.forward(fx, y)?;
        }
        self.out.forward(fx, y)
    }

    pub fn forward(&self, fx: &mut Forward<'_>, feats: &StageFeatures) -> Result<ForwardOutputs> {
        let (cap, aux) = self.cap_forward(fx, feats.c5)?;
        let sap = match &self.sap {
            Some(sap) => Some(sap.forward(fx, feats.c2, feats.c3)?),
            None => None,
        };
        let body = self.hhp_forward(fx, cap, sap)?;
        Ok(ForwardOutputs {
            body,
            aux: Some(aux),
        })
    }

    pub fn structure_supervision(&self) -> &StructureSupervision {
        &self.ss
    }

    pub fn aspp(&self) -> Option<&Aspp> {
        self.aspp.as_ref()
    }

    pub fn sap(&self) -> Option<&SapPath> {
        self.sap.as_ref()
    }
}

/// Three deconvolution blocks on C5 and a 1×1 keypoint head.
#[derive(Debug, Clone)]
pub struct SbnHead {
    up: Vec<UpBlock>,
    out: Conv,
}

impl SbnHead {
    pub fn new<R: Rng>(bld: &mut Builder<'_, R>, cfg: &ModelConfig) -> Self {
        let f = cfg.feature_width;
        bld.scoped("sbn", |bld| SbnHead {
            up: upsampler(bld, cfg.stage_channels[4], f),
            out: bld.scoped("head", |b| Conv::head(b, f, cfg.num_keypoints)),
        })
    }

    pub fn forward(&self, fx: &mut Forward<'_>, feats: &StageFeatures) -> Result<ForwardOutputs> {
        let y = upsample(&self.up, fx, feats.c5)?;
        let body = self.out.forward(fx, y)?;
        Ok(ForwardOutputs { body, aux: None })
    }
}

#[derive(Debug, Clone)]
enum Head {
    Csanet(Box<CsaHead>),
    Sbn(SbnHead),
}

/// Backbone plus the head selected by the config. Parameter names are stable,
/// so two networks built in the same order on fresh stores line up by name.
#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    head: Head,
}

impl Network {
    pub fn new<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut bld = Builder::new(store, rng);
        let backbone = Backbone::new(&mut bld, cfg);
        Ok(Network::with_backbone(cfg, backbone, &mut bld))
    }

    /// Adds a head of `cfg.head` on top of an existing backbone in the same store.
    pub fn with_backbone<R: Rng>(
        cfg: &ModelConfig,
        backbone: Backbone,
        bld: &mut Builder<'_, R>,
    ) -> Self {
        let head = match cfg.head {
            HeadKind::Csanet => Head::Csanet(Box::new(CsaHead::new(bld, cfg))),
            HeadKind::Sbn => Head::Sbn(SbnHead::new(bld, cfg)),
        };
        Network {
            cfg: cfg.clone(),
            backbone,
            head,
        }
    }

    pub fn csa_head(&self) -> Option<&CsaHead> {
        match &self.head {
            Head::Csanet(h) => Some(h),
            Head::Sbn(_) => None,
        }
    }

    pub fn forward(&self, fx: &mut Forward<'_>, x: Var) -> Result<ForwardOutputs> {
        let feats = self.backbone.forward(fx, x)?;
        let out = match &self.head {
            Head::Csanet(h) => h.forward(fx, &feats)?,
            Head::Sbn(h) => h.forward(fx, &feats)?,
        };
        let (xs, bs) = (fx.tape.shape(x), fx.tape.shape(out.body));
        debug_assert_eq!((bs.h * 4, bs.w * 4), (xs.h, xs.w));
        Ok(out)
    }

    pub fn forward_pass<'s>(&self, store: &'s ParamStore, mode: Mode) -> Forward<'s> {
        Forward::new(store, mode, self.cfg.bn_momentum, self.cfg.bn_eps)
    }

    /// Body heatmaps in evaluation mode.
    pub fn predict(&self, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
        let mut fx = self.forward_pass(store, Mode::Eval);
        let x = fx.input(images.clone());
        let out = self.forward(&mut fx, x)?;
        Ok(fx.tape.value(out.body).clone())
    }

    /// Number of scalar parameters reached by a forward pass.
    pub fn num_parameters(&self, store: &ParamStore) -> Result<usize> {
        let (h, w) = (32, 32);
        let mut fx = self.forward_pass(store, Mode::Eval);
        let x = fx.input(Tensor::zeros(crate::tensor::Shape::new(1, 3, h, w)));
        self.forward(&mut fx, x)?;
        Ok(store.num_elements(fx.bound_params()))
    }
}

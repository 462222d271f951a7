use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::layers::{BatchNorm, BnState, Conv, ConvT, Ctx};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Named detector layers whose activations can be distilled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tap {
    /// Output of the first downsampling block.
    Early,
    /// Output of the second transposed-conv upsampling block.
    MidTc,
    /// Feature map feeding the final 1x1 heatmap conv.
    Output,
}

impl Tap {
    pub const ALL: [Tap; 3] = [Tap::Early, Tap::MidTc, Tap::Output];

    pub fn name(self) -> &'static str {
        match self {
            Tap::Early => "early",
            Tap::MidTc => "mid_tc",
            Tap::Output => "output",
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tap::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown tap `{s}` (expected early, mid_tc or output)")))
    }
}

/// Residual downsampling block: stride-2 conv, BN, ReLU, then a 3x3 conv
/// and BN whose output is added back before the final ReLU.
#[derive(Clone, Debug)]
struct DownBlock {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
}

impl DownBlock {
    fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv1.forward(cx, x)?;
        let y = self.bn1.forward(cx, y)?;
        let skip = cx.g.relu(y);
        let y = self.conv2.forward(cx, skip)?;
        let y = self.bn2.forward(cx, y)?;
        let y = cx.g.add(y, skip)?;
        Ok(cx.g.relu(y))
    }
}

#[derive(Clone, Debug)]
struct UpBlock {
    convt: ConvT,
    bn: BatchNorm,
}

impl UpBlock {
    fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.convt.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        Ok(cx.g.relu(y))
    }
}

/// Heatmaps plus the tapped embeddings of one detector forward.
pub struct DetectorOutput {
    pub heatmaps: Var,
    pub early: Var,
    pub mid_tc: Var,
    pub output: Var,
}

impl DetectorOutput {
    pub fn tap(&self, tap: Tap) -> Var {
        match tap {
            Tap::Early => self.early,
            Tap::MidTc => self.mid_tc,
            Tap::Output => self.output,
        }
    }
}

/// Encoder of four residual stride-2 blocks followed by four transposed-
/// conv upsampling blocks and a 1x1 conv emitting `K` heatmaps.
#[derive(Clone, Debug)]
pub struct DetectorModel {
    down: Vec<DownBlock>,
    up: Vec<UpBlock>,
    head: Conv,
    pub keypoints: usize,
}

pub(crate) const DOWNSAMPLE: usize = 16;

impl DetectorModel {
    pub fn new(
        store: &mut ParamStore,
        bn: &mut Vec<BnState>,
        rng: &mut impl Rng,
        in_channels: usize,
        widths: [usize; 4],
        keypoints: usize,
    ) -> Self {
        let mut down = Vec::new();
        let mut cin = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            let name = format!("det.down{i}");
            down.push(DownBlock {
                conv1: Conv::new(store, rng, &format!("{name}.conv1"), cin, w, 3, 2, false),
                bn1: BatchNorm::new(store, bn, &format!("{name}.bn1"), w),
                conv2: Conv::new(store, rng, &format!("{name}.conv2"), w, w, 3, 1, false),
                bn2: BatchNorm::new(store, bn, &format!("{name}.bn2"), w),
            });
            cin = w;
        }
        let up_channels = [widths[2], widths[1], widths[0], widths[0]];
        let mut up = Vec::new();
        for (i, &w) in up_channels.iter().enumerate() {
            let name = format!("det.up{i}");
            up.push(UpBlock {
                convt: ConvT::new(store, rng, &format!("{name}.convt"), cin, w, false),
                bn: BatchNorm::new(store, bn, &format!("{name}.bn"), w),
            });
            cin = w;
        }
        let head = Conv::new(store, rng, "det.head", cin, keypoints, 1, 1, true);
        DetectorModel { down, up, head, keypoints }
    }

    pub fn forward(&self, cx: &mut Ctx, image: Var) -> Result<DetectorOutput> {
        let [_, _, h, w] = cx.g.value(image).dims4("detector")?;
        check_divisible(h, w, "detector input")?;
        let mut x = image;
        let mut early = None;
        for (i, block) in self.down.iter().enumerate() {
            x = block.forward(cx, x)?;
            if i == 0 {
                early = Some(x);
            }
        }
        let mut mid_tc = None;
        for (i, block) in self.up.iter().enumerate() {
            x = block.forward(cx, x)?;
            if i == 1 {
                mid_tc = Some(x);
            }
        }
        let heatmaps = self.head.forward(cx, x)?;
        Ok(DetectorOutput {
            heatmaps,
            early: early.expect("four down blocks"),
            mid_tc: mid_tc.expect("four up blocks"),
            output: x,
        })
    }
}

pub(crate) fn check_divisible(h: usize, w: usize, context: &'static str) -> Result<()> {
    for dim in [h, w] {
        if dim == 0 || dim % DOWNSAMPLE != 0 {
            return Err(Error::Indivisible {
                dim,
                divisor: DOWNSAMPLE,
                context,
            });
        }
    }
    Ok(())
}

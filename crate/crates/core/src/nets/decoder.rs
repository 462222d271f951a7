use rand::Rng;

use super::detector::check_divisible;
use super::layers::{BatchNorm, BnState, Conv, Ctx};
use crate::autodiff::Var;
use crate::error::Result;
use crate::params::ParamStore;

#[derive(Clone, Debug)]
struct ConvBnRelu {
    conv: Conv,
    bn: BatchNorm,
}

impl ConvBnRelu {
    fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        Ok(cx.g.relu(y))
    }
}

/// UNet reconstruction decoder: a stride-2 contracting path mirroring the
/// detector, then four (bilinear upsample, skip concat, 3x3 conv) blocks
/// that each halve the channel count, and a final 1x1 conv to image
/// channels. The output is unclamped.
#[derive(Clone, Debug)]
pub struct DecoderModel {
    down: Vec<ConvBnRelu>,
    up: Vec<ConvBnRelu>,
    out: Conv,
}

impl DecoderModel {
    pub fn new(
        store: &mut ParamStore,
        bn: &mut Vec<BnState>,
        rng: &mut impl Rng,
        image_channels: usize,
        widths: [usize; 4],
    ) -> Self {
        let in_channels = image_channels + 1;
        let mut down = Vec::new();
        let mut cin = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            let name = format!("dec.down{i}");
            down.push(ConvBnRelu {
                conv: Conv::new(store, rng, &format!("{name}.conv"), cin, w, 3, 2, false),
                bn: BatchNorm::new(store, bn, &format!("{name}.bn"), w),
            });
            cin = w;
        }
        // Skips arrive from widths[2], widths[1], widths[0], then the input.
        let skips = [widths[2], widths[1], widths[0], in_channels];
        let mut up = Vec::new();
        for (i, skip) in skips.iter().enumerate() {
            let cout = (cin / 2).max(1);
            let name = format!("dec.up{i}");
            up.push(ConvBnRelu {
                conv: Conv::new(store, rng, &format!("{name}.conv"), cin + skip, cout, 3, 1, false),
                bn: BatchNorm::new(store, bn, &format!("{name}.bn"), cout),
            });
            cin = cout;
        }
        let out = Conv::new(store, rng, "dec.out", cin, image_channels, 1, 1, true);
        DecoderModel { down, up, out }
    }

    pub fn forward(&self, cx: &mut Ctx, composed: Var) -> Result<Var> {
        let [_, _, h, w] = cx.g.value(composed).dims4("decoder")?;
        check_divisible(h, w, "decoder input")?;
        let mut feats = vec![composed];
        let mut x = composed;
        for block in &self.down {
            x = block.forward(cx, x)?;
            feats.push(x);
        }
        // feats = [input, d0 (H/2), d1 (H/4), d2 (H/8), d3 (H/16)]
        for (i, block) in self.up.iter().enumerate() {
            let up = cx.g.upsample2x(x)?;
            let skip = feats[3 - i];
            let cat = cx.g.concat_channels(&[up, skip])?;
            x = block.forward(cx, cat)?;
        }
        self.out.forward(cx, x)
    }

    /// Final 1x1 projection to image channels.
    pub fn out_conv(&self) -> &Conv {
        &self.out
    }
}

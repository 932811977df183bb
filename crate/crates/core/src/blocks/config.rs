use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Architectural hyperparameters of the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Channels of the four pyramid stages, shallow to deep.
    pub channels: [usize; 4],
    /// Parallel depthwise kernel sizes inside each multi-scale block.
    pub kernel_scales: Vec<usize>,
    pub mscb_expansion: f64,
    pub cab_reduction: usize,
    pub sab_kernel: usize,
    pub lgag_kernel: usize,
    /// 1 means binary segmentation.
    pub num_classes: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            channels: [32, 64, 160, 256],
            kernel_scales: vec![1, 3, 5],
            mscb_expansion: 2.0,
            cab_reduction: 16,
            sab_kernel: 7,
            lgag_kernel: 3,
            num_classes: 1,
        }
    }
}

pub const CAB_MIN_HIDDEN: usize = 4;

impl DecoderConfig {
    pub fn tiny(channels: [usize; 4]) -> Self {
        DecoderConfig {
            channels,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels[0] == 0 || self.channels.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "decoder channels must be positive and strictly increasing, got {:?}",
                self.channels
            ));
        }
        if self.kernel_scales.is_empty() || self.kernel_scales.iter().any(|&k| k == 0 || k % 2 == 0) {
            return bad(format!(
                "kernel_scales must be non-empty odd sizes, got {:?}",
                self.kernel_scales
            ));
        }
        if !(self.mscb_expansion > 0.0 && self.mscb_expansion.is_finite()) {
            return bad(format!("mscb_expansion must be positive, got {}", self.mscb_expansion));
        }
        if self.cab_reduction == 0 {
            return bad("cab_reduction must be >= 1".into());
        }
        for (name, k) in [("sab_kernel", self.sab_kernel), ("lgag_kernel", self.lgag_kernel)] {
            if k == 0 || k % 2 == 0 {
                return bad(format!("{name} must be odd, got {k}"));
            }
        }
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        Ok(())
    }

    pub fn expanded(&self, c: usize) -> usize {
        (self.mscb_expansion * c as f64).ceil() as usize
    }

    pub fn cab_hidden(&self, c: usize) -> usize {
        (c / self.cab_reduction).max(CAB_MIN_HIDDEN)
    }
}

/// Encoder pyramid `x1..x4` at strides 4, 8, 16 and 32.
#[derive(Clone, Debug, PartialEq)]
pub struct StageFeatures<T> {
    pub x: [Tensor4<T>; 4],
}

impl<T: Scalar> StageFeatures<T> {
    pub fn new(x1: Tensor4<T>, x2: Tensor4<T>, x3: Tensor4<T>, x4: Tensor4<T>) -> Self {
        StageFeatures { x: [x1, x2, x3, x4] }
    }

    /// Checks channels against `cfg` and the halving of spatial dims.
    pub fn validate(&self, cfg: &DecoderConfig) -> Result<()> {
        for (i, x) in self.x.iter().enumerate() {
            let s = x.shape();
            if s.c != cfg.channels[i] {
                return Err(Error::Shape(format!(
                    "stage {} feature has {} channels, config expects {}",
                    i + 1,
                    s.c,
                    cfg.channels[i]
                )));
            }
            if i > 0 {
                let prev = self.x[i - 1].shape();
                if prev.h != 2 * s.h || prev.w != 2 * s.w || prev.n != s.n {
                    return Err(Error::Shape(format!(
                        "stage {} feature {s} is not half of stage {} feature {prev}",
                        i + 1,
                        i
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Logits of the four heads. `p[0]` (p1) comes from the deepest stage and
/// `p[3]` (p4) from the shallowest, highest-resolution stage; p4 is the
/// final prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct SegOutputs<T> {
    pub p: [Tensor4<T>; 4],
}

impl<T: Scalar> SegOutputs<T> {
    pub fn final_map(&self) -> &Tensor4<T> {
        &self.p[3]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        DecoderConfig::default().validate().unwrap();
        DecoderConfig::tiny([8, 16, 24, 32]).validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = DecoderConfig::default();
        c.channels = [32, 32, 64, 128];
        assert!(c.validate().is_err());
        let mut c = DecoderConfig::default();
        c.kernel_scales = vec![1, 4];
        assert!(c.validate().is_err());
        let mut c = DecoderConfig::default();
        c.num_classes = 0;
        assert!(c.validate().is_err());
        let mut c = DecoderConfig::default();
        c.sab_kernel = 6;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let r: std::result::Result<DecoderConfig, _> = serde_json::from_str(r#"{"chanels": [1,2,3,4]}"#);
        assert!(r.is_err());
    }

    #[test]
    fn cab_hidden_floor() {
        let c = DecoderConfig::default();
        assert_eq!(c.cab_hidden(256), 16);
        assert_eq!(c.cab_hidden(32), 4);
        assert_eq!(c.expanded(32), 64);
    }
}

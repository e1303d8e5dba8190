use serde::{Deserialize, Serialize};

use super::{Image, MAX_INTENSITY};
use crate::error::{Error, Result};

/// Parameters of the windowed SSIM index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window_side: usize,
    pub c1: f64,
    pub c2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    /// 7x7 uniform window, `K1 = 0.01`, `K2 = 0.03` over an 8-bit range.
    fn default() -> Self {
        SsimParams {
            window_side: 7,
            c1: (0.01 * MAX_INTENSITY).powi(2),
            c2: (0.03 * MAX_INTENSITY).powi(2),
            dynamic_range: MAX_INTENSITY,
        }
    }
}

impl SsimParams {
    fn validate(&self) -> Result<()> {
        if self.window_side == 0 || self.window_side % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "window side must be odd, got {}",
                self.window_side
            )));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::InvalidArgument("SSIM stabilizers must be positive".into()));
        }
        Ok(())
    }
}

/// Mean SSIM over all fully contained windows, computed per channel and
/// averaged. Local variances use the unbiased (sample) normalization.
pub fn ssim(a: &Image, b: &Image, params: &SsimParams) -> Result<f64> {
    params.validate()?;
    a.check_same_shape(b)?;
    let (h, w, channels) = a.shape();
    let win = params.window_side;
    if h < win || w < win {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} is smaller than the {win}x{win} window"
        )));
    }
    let n = (win * win) as f64;
    let cov_norm = n / (n - 1.0);
    let (out_h, out_w) = (h - win + 1, w - win + 1);

    let mut total = 0.0;
    for c in 0..channels {
        let mut channel_sum = 0.0;
        for y0 in 0..out_h {
            for x0 in 0..out_w {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + win {
                    for x in x0..x0 + win {
                        let pa = a.get(y, x, c);
                        let pb = b.get(y, x, c);
                        sx += pa;
                        sy += pb;
                        sxx += pa * pa;
                        syy += pb * pb;
                        sxy += pa * pb;
                    }
                }
                let (ux, uy) = (sx / n, sy / n);
                let vx = cov_norm * (sxx / n - ux * ux);
                let vy = cov_norm * (syy / n - uy * uy);
                let vxy = cov_norm * (sxy / n - ux * uy);
                let numerator = (2.0 * ux * uy + params.c1) * (2.0 * vxy + params.c2);
                let denominator = (ux * ux + uy * uy + params.c1) * (vx + vy + params.c2);
                channel_sum += numerator / denominator;
            }
        }
        total += channel_sum / (out_h * out_w) as f64;
    }
    Ok(total / channels as f64)
}

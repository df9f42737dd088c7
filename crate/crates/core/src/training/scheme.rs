//! Training schemes, view-pair and time-offset sampling, exposure counters.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XvwmError};
use crate::sim::ViewId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    SingleView,
    TwoView,
    FourView,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::SingleView, Scheme::TwoView, Scheme::FourView];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn views(self) -> &'static [ViewId] {
        match self {
            Scheme::SingleView => &[ViewId::Ego],
            Scheme::TwoView => &[ViewId::Ego, ViewId::Bev],
            Scheme::FourView => &ViewId::ALL,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::SingleView => "single_view",
            Scheme::TwoView => "two_view",
            Scheme::FourView => "four_view",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = XvwmError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|sc| sc.name() == norm)
            .ok_or_else(|| XvwmError::Config(format!("unknown scheme `{s}` (single_view, two_view, four_view)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    /// Probability that the output view differs from the input view.
    pub cross_view_prob: f64,
    /// Largest |k| drawn during training, in frames.
    pub k_train: usize,
    /// Prediction horizon used by evaluation, in frames.
    pub k_test: usize,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self::new(Scheme::TwoView)
    }
}

impl SchemeConfig {
    pub fn new(scheme: Scheme) -> Self {
        Self {
            scheme,
            cross_view_prob: if scheme == Scheme::SingleView { 0.0 } else { 0.5 },
            k_train: 25,
            k_test: 20,
        }
    }

    pub fn views(&self) -> &'static [ViewId] {
        self.scheme.views()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cross_view_prob) {
            return Err(XvwmError::Config(format!(
                "scheme.cross_view_prob {} outside [0, 1]",
                self.cross_view_prob
            )));
        }
        if self.scheme == Scheme::SingleView && self.cross_view_prob != 0.0 {
            return Err(XvwmError::Config("single_view requires scheme.cross_view_prob = 0".into()));
        }
        if self.k_train == 0 || self.k_test == 0 {
            return Err(XvwmError::Config("scheme.k_train and scheme.k_test must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draw `(input_view, output_view)` under the scheme's law.
pub fn sample_view_pair<R: Rng + ?Sized>(cfg: &SchemeConfig, rng: &mut R) -> (ViewId, ViewId) {
    let views = cfg.views();
    if views.len() == 1 {
        return (views[0], views[0]);
    }
    let i = rng.gen_range(0..views.len());
    if rng.gen::<f64>() < cfg.cross_view_prob {
        // Uniform over the other views: skip index i.
        let mut j = rng.gen_range(0..views.len() - 1);
        if j >= i {
            j += 1;
        }
        (views[i], views[j])
    } else {
        (views[i], views[i])
    }
}

/// Draw a signed frame offset. Same-view pairs use `±1..=±K`; cross-view
/// pairs additionally allow 0, all values equally likely.
pub fn sample_time_offset<R: Rng + ?Sized>(cfg: &SchemeConfig, cross_view: bool, rng: &mut R) -> i64 {
    let k = cfg.k_train as i64;
    if cross_view {
        rng.gen_range(-k..=k)
    } else {
        let u = rng.gen_range(0..2 * k);
        if u < k {
            u - k
        } else {
            u - k + 1
        }
    }
}

/// Samples seen per `(input_view, output_view)` pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Exposure(pub [u64; 16]);

impl Exposure {
    fn slot(input: ViewId, output: ViewId) -> usize {
        input.code() as usize * 4 + output.code() as usize
    }

    pub fn record(&mut self, input: ViewId, output: ViewId) {
        self.0[Self::slot(input, output)] += 1;
    }

    pub fn get(&self, input: ViewId, output: ViewId) -> u64 {
        self.0[Self::slot(input, output)]
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn fraction(&self, input: ViewId, output: ViewId) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.get(input, output) as f64 / t as f64,
        }
    }

    /// Non-zero counters keyed `"input->output"`.
    pub fn to_json(&self) -> serde_json::Map<String, serde_json::Value> {
        let mut m = serde_json::Map::new();
        for i in ViewId::ALL {
            for o in ViewId::ALL {
                let n = self.get(i, o);
                if n > 0 {
                    m.insert(format!("{i}->{o}"), n.into());
                }
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_view_is_degenerate() {
        let cfg = SchemeConfig::new(Scheme::SingleView);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_view_pair(&cfg, &mut rng), (ViewId::Ego, ViewId::Ego));
        }
    }

    #[test]
    fn unit_horizon_same_view() {
        let cfg = SchemeConfig {
            k_train: 1,
            ..SchemeConfig::new(Scheme::TwoView)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut neg = 0;
        for _ in 0..10_000 {
            let k = sample_time_offset(&cfg, false, &mut rng);
            assert!(k == -1 || k == 1);
            neg += (k == -1) as u32;
        }
        assert!((4800..5200).contains(&neg));
    }

    #[test]
    fn validation() {
        assert!(SchemeConfig::default().validate().is_ok());
        let bad = SchemeConfig {
            cross_view_prob: 0.5,
            ..SchemeConfig::new(Scheme::SingleView)
        };
        assert!(bad.validate().is_err());
        assert_eq!("four_view".parse::<Scheme>().unwrap(), Scheme::FourView);
        assert!("both".parse::<Scheme>().is_err());
    }
}

use super::ParamSet;
use crate::error::{invalid, Result};

/// Stochastic weight averaging or an exponential-moving-average shadow.
#[derive(Clone, Debug)]
pub enum WeightAverager {
    Swa { sum: Option<ParamSet>, count: u64 },
    Ema { decay: f64, shadow: ParamSet },
}

impl WeightAverager {
    pub fn swa() -> Self {
        Self::Swa { sum: None, count: 0 }
    }

    /// EMA shadow starting at `init`. `decay = 1` freezes the shadow.
    pub fn ema(decay: f64, init: &ParamSet) -> Result<Self> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(invalid(format!("EMA decay {decay} outside (0, 1]")));
        }
        Ok(Self::Ema {
            decay,
            shadow: init.clone(),
        })
    }

    pub fn count(&self) -> u64 {
        match self {
            Self::Swa { count, .. } => *count,
            Self::Ema { .. } => 0,
        }
    }

    pub fn absorb(&mut self, params: &ParamSet) -> Result<()> {
        match self {
            Self::Swa { sum, count } => {
                match sum {
                    None => *sum = Some(params.clone()),
                    Some(acc) => {
                        if !acc.same_layout(params) {
                            return Err(invalid("snapshot layout differs from the running sum"));
                        }
                        for (name, t) in params.iter() {
                            acc.get_mut(name).unwrap().add_assign(t);
                        }
                    }
                }
                *count += 1;
            }
            Self::Ema { decay, shadow } => {
                if !shadow.same_layout(params) {
                    return Err(invalid("parameter layout differs from the EMA shadow"));
                }
                let d = *decay;
                for (name, t) in params.iter() {
                    let s = shadow.get_mut(name).unwrap();
                    for (si, &pi) in s.data_mut().iter_mut().zip(t.data()) {
                        *si = d * *si + (1.0 - d) * pi;
                    }
                }
            }
        }
        Ok(())
    }

    /// SWA mean of absorbed snapshots, or the EMA shadow.
    pub fn average(&self) -> Option<ParamSet> {
        match self {
            Self::Swa { sum, count } => sum.as_ref().map(|s| {
                let mut out = ParamSet::new();
                let n = *count as f64;
                for (name, t) in s.iter() {
                    out.insert(name.clone(), t.map(|v| v / n));
                }
                out
            }),
            Self::Ema { shadow, .. } => Some(shadow.clone()),
        }
    }
}

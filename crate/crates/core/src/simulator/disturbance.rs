use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Input-additive disturbance `d(t)`, sampled at the start of each plant
/// step and held over it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DisturbanceSignal {
    #[default]
    Zero,
    Constant { value: Vec<f64> },
    /// Uniform in `[−amplitude, amplitude]` per channel, redrawn every `hold`
    /// seconds. The draw for each hold interval depends only on `seed` and
    /// the interval index, so any two runs sharing a seed see the same signal.
    PiecewiseConstantRandom { seed: u64, hold: f64, amplitude: f64 },
    /// `amplitude · sin(2π frequency t)` on every channel.
    Sinusoid { amplitude: f64, frequency: f64 },
}

impl DisturbanceSignal {
    pub fn piecewise(seed: u64, hold: f64, amplitude: f64) -> Self {
        Self::PiecewiseConstantRandom { seed, hold, amplitude }
    }

    /// Declared bound on `‖d(t)‖_∞`.
    pub fn amplitude(&self) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::Constant { value } => value.iter().fold(0.0, |a: f64, v| a.max(v.abs())),
            Self::PiecewiseConstantRandom { amplitude, .. } | Self::Sinusoid { amplitude, .. } => amplitude.abs(),
        }
    }

    pub fn validate(&self, m: usize) -> Result<(), String> {
        match self {
            Self::Zero => Ok(()),
            Self::Constant { value } if value.len() != m => {
                Err(format!("constant disturbance has {} channels, plant has {m} inputs", value.len()))
            }
            Self::Constant { value } if value.iter().any(|v| !v.is_finite()) => {
                Err("constant disturbance must be finite".into())
            }
            Self::Constant { .. } => Ok(()),
            Self::PiecewiseConstantRandom { hold, amplitude, .. } => {
                if !(*hold > 0.0 && hold.is_finite()) {
                    Err(format!("disturbance hold must be positive, got {hold}"))
                } else if !(*amplitude >= 0.0 && amplitude.is_finite()) {
                    Err(format!("disturbance amplitude must be non-negative, got {amplitude}"))
                } else {
                    Ok(())
                }
            }
            Self::Sinusoid { amplitude, frequency } => {
                if amplitude.is_finite() && frequency.is_finite() {
                    Ok(())
                } else {
                    Err("sinusoid parameters must be finite".into())
                }
            }
        }
    }

    pub fn at(&self, t: f64, m: usize) -> DVector<f64> {
        match self {
            Self::Zero => DVector::zeros(m),
            Self::Constant { value } => DVector::from_row_slice(value),
            Self::PiecewiseConstantRandom { seed, hold, amplitude } => {
                if *amplitude == 0.0 {
                    return DVector::zeros(m);
                }
                let interval = (t / hold + 1e-9).floor().max(0.0) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(interval);
                DVector::from_fn(m, |_, _| rng.gen_range(-*amplitude..=*amplitude))
            }
            Self::Sinusoid { amplitude, frequency } => {
                DVector::from_element(m, amplitude * (2.0 * std::f64::consts::PI * frequency * t).sin())
            }
        }
    }
}

//! The built-in populations: the three Gaussian-selection models and the
//! step-selection model.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::population::{IntrinsicModel, SelectionFunction, SelectionScale};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PresetName {
    Wide,
    Narrow,
    Equal,
    /// Gaussian population behind a step selection at -1.
    Truncated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preset {
    pub name: PresetName,
    pub intrinsic: IntrinsicModel,
    pub selection: SelectionFunction,
    pub sigma0: f64,
}

impl PresetName {
    pub const GAUSSIAN: [PresetName; 3] = [PresetName::Wide, PresetName::Narrow, PresetName::Equal];

    pub fn as_str(&self) -> &'static str {
        match self {
            PresetName::Wide => "wide",
            PresetName::Narrow => "narrow",
            PresetName::Equal => "equal",
            PresetName::Truncated => "truncated",
        }
    }

    pub fn preset(self) -> Preset {
        let (mu, sigma, sel, sigma0) = match self {
            PresetName::Wide => (-2.0, 3.0, gauss(0.0, 2.0), 1.0),
            PresetName::Narrow => (-2.0, 0.6, gauss(0.0, 2.0), 1.0),
            PresetName::Equal => (-2.0, 1.0, gauss(0.0, 1.0), 1.0),
            PresetName::Truncated => (0.0, 3.0, SelectionFunction::Step { threshold: -1.0 }, 1.0),
        };
        Preset {
            name: self,
            intrinsic: IntrinsicModel { mu, sigma },
            selection: sel,
            sigma0,
        }
    }
}

fn gauss(mu: f64, sigma: f64) -> SelectionFunction {
    SelectionFunction::Gaussian {
        mu,
        sigma,
        scale: SelectionScale::UnitPeak,
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim().to_ascii_lowercase().as_str() {
            "wide" => Ok(PresetName::Wide),
            "narrow" => Ok(PresetName::Narrow),
            "equal" => Ok(PresetName::Equal),
            "truncated" | "step" => Ok(PresetName::Truncated),
            other => Err(Error::Config(format!("unknown model preset '{other}'"))),
        }
    }
}

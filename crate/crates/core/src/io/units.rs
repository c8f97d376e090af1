//! Quantities with units, e.g. `"1200 veh/h"`, converted to SI.

use std::fmt;

/// Physical dimension a configuration value must carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Length,
    Time,
    Speed,
    Density,
    Flow,
    Rate,
    Ratio,
}

impl Dimension {
    /// Accepted unit spellings with their factor to SI.
    fn units(self) -> &'static [(&'static str, f64)] {
        match self {
            Dimension::Length => &[("m", 1.0), ("km", 1000.0)],
            Dimension::Time => &[("s", 1.0), ("min", 60.0), ("h", 3600.0)],
            Dimension::Speed => &[("m/s", 1.0), ("km/h", 1.0 / 3.6)],
            Dimension::Density => &[("veh/m", 1.0), ("veh/km", 1e-3)],
            Dimension::Flow => &[("veh/s", 1.0), ("veh/min", 1.0 / 60.0), ("veh/h", 1.0 / 3600.0)],
            Dimension::Rate => &[("1/s", 1.0), ("1/min", 1.0 / 60.0), ("1/h", 1.0 / 3600.0)],
            Dimension::Ratio => &[("%", 0.01)],
        }
    }

    pub fn si_unit(self) -> &'static str {
        match self {
            Dimension::Ratio => "",
            d => d.units()[0].0,
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Dimension::Length => "length",
            Dimension::Time => "time",
            Dimension::Speed => "speed",
            Dimension::Density => "density",
            Dimension::Flow => "flow",
            Dimension::Rate => "rate",
            Dimension::Ratio => "ratio",
        };
        f.write_str(name)
    }
}

/// Parses `"<number> <unit>"` (or a bare number, taken as SI) into SI.
/// A `%` may follow the number directly.
pub fn parse_quantity(text: &str, dim: Dimension) -> Result<f64, String> {
    let text = text.trim();
    let (number, unit) = match text.split_once(char::is_whitespace) {
        Some((n, u)) => (n, u.trim()),
        None => match text.strip_suffix('%') {
            Some(n) => (n, "%"),
            None => (text, ""),
        },
    };
    let value: f64 = number.parse().map_err(|_| format!("`{text}` does not start with a number"))?;
    if !value.is_finite() {
        return Err(format!("`{text}` is not finite"));
    }
    if unit.is_empty() {
        return Ok(value);
    }
    dim.units().iter().find(|(name, _)| *name == unit).map(|(_, factor)| value * factor).ok_or_else(|| {
        let known: Vec<&str> = dim.units().iter().map(|u| u.0).collect();
        format!("unknown {dim} unit `{unit}` (expected one of {})", known.join(", "))
    })
}

/// CSV plotting units: veh/km and km/h.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotUnit {
    Density,
    Speed,
}

impl PlotUnit {
    fn factor(self) -> f64 {
        match self {
            PlotUnit::Density => 1000.0,
            PlotUnit::Speed => 3.6,
        }
    }

    pub fn from_si(self, value: f64) -> f64 {
        value * self.factor()
    }

    pub fn to_si(self, value: f64) -> f64 {
        value / self.factor()
    }
}

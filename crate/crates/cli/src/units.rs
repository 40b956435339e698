//! Physical quantities written as strings with a unit suffix, such as
//! `"20ms"` or `"-65mV"`. Values are held in the simulator's base units.

use std::fmt;
use std::marker::PhantomData;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

pub trait Dimension {
    const NAME: &'static str;
    /// Accepted suffixes and their factor to the base unit; the first is the
    /// base unit itself.
    const UNITS: &'static [(&'static str, f64)];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Time;
impl Dimension for Time {
    const NAME: &'static str = "time";
    const UNITS: &'static [(&'static str, f64)] = &[("ms", 1.0), ("us", 1e-3), ("s", 1e3)];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Length;
impl Dimension for Length {
    const NAME: &'static str = "length";
    const UNITS: &'static [(&'static str, f64)] = &[("um", 1.0), ("mm", 1e3)];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Potential;
impl Dimension for Potential {
    const NAME: &'static str = "potential";
    const UNITS: &'static [(&'static str, f64)] = &[("mV", 1.0), ("uV", 1e-3)];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frequency;
impl Dimension for Frequency {
    const NAME: &'static str = "frequency";
    const UNITS: &'static [(&'static str, f64)] = &[("Hz", 1.0), ("kHz", 1e3)];
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bytes;
impl Dimension for Bytes {
    const NAME: &'static str = "size";
    const UNITS: &'static [(&'static str, f64)] = &[
        ("B", 1.0),
        ("KiB", 1024.0),
        ("MiB", 1048576.0),
        ("GiB", 1073741824.0),
    ];
}

#[derive(Clone, Copy, PartialEq)]
pub struct Quantity<D> {
    value: f64,
    dim: PhantomData<D>,
}

pub type Millis = Quantity<Time>;
pub type Micrometres = Quantity<Length>;
pub type Millivolts = Quantity<Potential>;
pub type Hertz = Quantity<Frequency>;
pub type ByteSize = Quantity<Bytes>;

impl<D: Dimension> Quantity<D> {
    pub const fn new(value: f64) -> Self {
        Self {
            value,
            dim: PhantomData,
        }
    }

    pub fn value(self) -> f64 {
        self.value
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let t = text.trim();
        let split = t
            .find(|c: char| c.is_ascii_alphabetic() && c != 'e' && c != 'E')
            .ok_or_else(|| format!("`{text}` has no {} unit", D::NAME))?;
        let (num, unit) = t.split_at(split);
        let factor = D::UNITS
            .iter()
            .find(|(u, _)| *u == unit.trim())
            .map(|&(_, f)| f)
            .ok_or_else(|| {
                let known: Vec<&str> = D::UNITS.iter().map(|(u, _)| *u).collect();
                format!("`{text}`: unknown {} unit `{unit}` (expected one of {})", D::NAME, known.join(", "))
            })?;
        let v: f64 = num
            .trim()
            .parse()
            .map_err(|_| format!("`{text}`: `{}` is not a number", num.trim()))?;
        if !v.is_finite() {
            return Err(format!("`{text}` is not finite"));
        }
        Ok(Self::new(v * factor))
    }
}

impl<D: Dimension> fmt::Debug for Quantity<D> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl<D: Dimension> fmt::Display for Quantity<D> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.value, D::UNITS[0].0)
    }
}

impl<D: Dimension> Serialize for Quantity<D> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de, D: Dimension> Deserialize<'de> for Quantity<D> {
    fn deserialize<De: Deserializer<'de>>(d: De) -> Result<Self, De::Error> {
        struct V<D>(PhantomData<D>);
        impl<D: Dimension> Visitor<'_> for V<D> {
            type Value = Quantity<D>;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                write!(f, "a {} with a unit suffix, such as \"{}{}\"", D::NAME, 1, D::UNITS[0].0)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
                Quantity::parse(v).map_err(E::custom)
            }
        }
        d.deserialize_str(V(PhantomData))
    }
}

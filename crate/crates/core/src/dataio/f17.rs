//! Serde adapters writing `f64` with 17 significant digits.
//!
//! Use as `#[serde(with = "f17")]`, `with = "f17::vec"` or
//! `with = "f17::opt_vec"`. Output is only valid for the JSON serializer.

use serde::de::Deserialize;
use serde::ser::{Error as _, SerializeSeq, Serializer};
use serde::Deserializer;
use serde_json::value::RawValue;

/// `d.ddddddddddddddde±x`: shortest form that still round-trips every f64.
pub fn format(x: f64) -> Option<String> {
    if !x.is_finite() {
        return None;
    }
    Some(format!("{x:.16e}"))
}

fn raw(x: f64) -> Result<Box<RawValue>, String> {
    let s = format(x).ok_or_else(|| format!("cannot serialize non-finite float {x}"))?;
    RawValue::from_string(s).map_err(|e| e.to_string())
}

pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    raw(*x).map_err(S::Error::custom)?.serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    f64::deserialize(d)
}

use serde::Serialize;

pub mod vec {
    use super::*;

    pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(xs.len()))?;
        for &x in xs {
            seq.serialize_element(&raw(x).map_err(S::Error::custom)?)?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<f64>::deserialize(d)
    }
}

pub mod opt_vec {
    use super::*;

    pub fn serialize<S: Serializer>(xs: &Option<Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
        match xs {
            Some(v) => super::vec::serialize(v, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<f64>>, D::Error> {
        Option::<Vec<f64>>::deserialize(d)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct W {
        #[serde(with = "super")]
        x: f64,
        #[serde(with = "super::vec")]
        v: Vec<f64>,
        #[serde(with = "super::opt_vec")]
        o: Option<Vec<f64>>,
    }

    #[test]
    fn fixed_digits() {
        assert_eq!(super::format(0.1).unwrap(), "1.0000000000000001e-1");
        assert_eq!(super::format(-0.0).unwrap(), "-0.0000000000000000e0");
        assert!(super::format(f64::NAN).is_none());
        let w = W { x: 1.0, v: vec![0.5], o: None };
        assert_eq!(
            serde_json::to_string(&w).unwrap(),
            r#"{"x":1.0000000000000000e0,"v":[5.0000000000000000e-1],"o":null}"#
        );
    }

    #[test]
    fn nan_is_an_error() {
        let w = W { x: f64::NAN, v: vec![], o: None };
        assert!(serde_json::to_string(&w).is_err());
    }

    proptest! {
        #[test]
        fn round_trips_bit_exact(x in any::<f64>().prop_filter("finite", |x| x.is_finite()), v in prop::collection::vec(-1e300f64..1e300, 0..5)) {
            let w = W { x, v: v.clone(), o: Some(v) };
            let s = serde_json::to_string(&w).unwrap();
            let back: W = serde_json::from_str(&s).unwrap();
            prop_assert_eq!(back.x.to_bits(), x.to_bits());
            prop_assert_eq!(&back, &w);
            prop_assert_eq!(serde_json::to_string(&back).unwrap(), s);
        }
    }
}

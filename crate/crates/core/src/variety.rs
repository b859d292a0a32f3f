use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// The seven rice varieties. Discriminants are the canonical index used for
/// every probability vector and confusion-matrix row/column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RiceVariety {
    AliKazemi = 0,
    AnbarBoo = 1,
    Hashemi = 2,
    Khazar = 3,
    SadreeDomSiahe = 4,
    SadreeDomZard = 5,
    Shirodi = 6,
}

pub const NUM_CLASSES: usize = 7;

impl RiceVariety {
    pub const ALL: [RiceVariety; NUM_CLASSES] = [
        RiceVariety::AliKazemi,
        RiceVariety::AnbarBoo,
        RiceVariety::Hashemi,
        RiceVariety::Khazar,
        RiceVariety::SadreeDomSiahe,
        RiceVariety::SadreeDomZard,
        RiceVariety::Shirodi,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    /// Directory and serialization name.
    pub fn name(self) -> &'static str {
        match self {
            RiceVariety::AliKazemi => "AliKazemi",
            RiceVariety::AnbarBoo => "AnbarBoo",
            RiceVariety::Hashemi => "Hashemi",
            RiceVariety::Khazar => "Khazar",
            RiceVariety::SadreeDomSiahe => "SadreeDomSiahe",
            RiceVariety::SadreeDomZard => "SadreeDomZard",
            RiceVariety::Shirodi => "Shirodi",
        }
    }

    pub fn names() -> [&'static str; NUM_CLASSES] {
        Self::ALL.map(|v| v.name())
    }
}

impl fmt::Display for RiceVariety {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RiceVariety {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariety(s.to_string()))
    }
}

impl Serialize for RiceVariety {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for RiceVariety {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_name_bijection() {
        for (i, v) in RiceVariety::ALL.iter().enumerate() {
            assert_eq!(v.index(), i);
            assert_eq!(RiceVariety::from_index(i), Some(*v));
            assert_eq!(v.name().parse::<RiceVariety>().unwrap(), *v);
        }
        assert_eq!(RiceVariety::from_index(7), None);
        assert!("Basmati".parse::<RiceVariety>().is_err());
    }

    #[test]
    fn serde_uses_names() {
        let s = serde_json::to_string(&RiceVariety::SadreeDomZard).unwrap();
        assert_eq!(s, "\"SadreeDomZard\"");
        let v: RiceVariety = serde_json::from_str("\"Khazar\"").unwrap();
        assert_eq!(v, RiceVariety::Khazar);
    }
}

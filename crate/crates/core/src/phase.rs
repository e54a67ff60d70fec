use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Phase> {
        Phase::ALL.get(i).copied()
    }

    /// Nominal angle of the balanced positive-sequence set, in radians.
    pub fn nominal_angle(self) -> f64 {
        match self {
            Phase::A => 0.0,
            Phase::B => -2.0 * std::f64::consts::FRAC_PI_3,
            Phase::C => 2.0 * std::f64::consts::FRAC_PI_3,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Phase::A => 'a',
            Phase::B => 'b',
            Phase::C => 'c',
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(Phase::A),
            "b" => Ok(Phase::B),
            "c" => Ok(Phase::C),
            other => Err(format!("unknown phase '{other}'")),
        }
    }
}

/// A subset of {a, b, c}, iterated in a-b-c order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub const ABC: PhaseSet = PhaseSet(0b111);

    pub fn empty() -> Self {
        PhaseSet(0)
    }

    pub fn single(phase: Phase) -> Self {
        PhaseSet(1 << phase.index())
    }

    pub fn contains(self, phase: Phase) -> bool {
        self.0 & (1 << phase.index()) != 0
    }

    pub fn insert(&mut self, phase: Phase) {
        self.0 |= 1 << phase.index();
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: PhaseSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Phase> {
        Phase::ALL.into_iter().filter(move |p| self.contains(*p))
    }

    /// Position of `phase` within the reduced block of this set.
    pub fn position(self, phase: Phase) -> Option<usize> {
        self.iter().position(|p| p == phase)
    }
}

impl FromIterator<Phase> for PhaseSet {
    fn from_iter<I: IntoIterator<Item = Phase>>(iter: I) -> Self {
        let mut set = PhaseSet::empty();
        for p in iter {
            set.insert(p);
        }
        set
    }
}

impl fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in self.iter() {
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PhaseSet({self})")
    }
}

impl FromStr for PhaseSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut set = PhaseSet::empty();
        for ch in s.trim().chars() {
            let phase: Phase = ch.to_string().parse()?;
            if set.contains(phase) {
                return Err(format!("phase '{ch}' repeated in '{s}'"));
            }
            set.insert(phase);
        }
        if set.is_empty() {
            return Err("empty phase set".into());
        }
        Ok(set)
    }
}

impl Serialize for PhaseSet {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PhaseSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Serialize for Phase {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Phase {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_order() {
        let set: PhaseSet = "ca".parse().unwrap();
        assert_eq!(set.iter().collect::<Vec<_>>(), vec![Phase::A, Phase::C]);
        assert_eq!(set.to_string(), "ac");
        assert_eq!(set.position(Phase::C), Some(1));
        assert_eq!(set.position(Phase::B), None);
    }

    #[test]
    fn rejects_bad_sets() {
        assert!("".parse::<PhaseSet>().is_err());
        assert!("aa".parse::<PhaseSet>().is_err());
        assert!("ad".parse::<PhaseSet>().is_err());
    }

    #[test]
    fn subset() {
        let ab: PhaseSet = "ab".parse().unwrap();
        assert!(PhaseSet::single(Phase::B).is_subset(ab));
        assert!(!PhaseSet::ABC.is_subset(ab));
    }
}

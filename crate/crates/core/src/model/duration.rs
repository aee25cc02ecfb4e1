//! ISO-8601 durations of the day-time form (`PnDTnHnMnS`).

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A duration as written in the definition, with its parsed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IsoDuration {
    text: String,
    millis: u64,
}

impl IsoDuration {
    pub fn parse(text: &str) -> Result<IsoDuration, String> {
        let err = || format!("invalid ISO-8601 duration {text:?}");
        let body = text.strip_prefix('P').ok_or_else(err)?;
        if body.is_empty() {
            return Err(err());
        }
        let (date, time) = match body.split_once('T') {
            Some((d, t)) if !t.is_empty() => (d, Some(t)),
            Some(_) => return Err(err()),
            None => (body, None),
        };
        let mut millis: f64 = 0.0;
        let mut consume = |part: &str, units: &[(char, f64)]| -> Result<(), String> {
            let mut num = String::new();
            let mut next_unit = 0;
            for ch in part.chars() {
                if ch.is_ascii_digit() || ch == '.' {
                    num.push(ch);
                    continue;
                }
                let idx = units[next_unit..]
                    .iter()
                    .position(|(u, _)| *u == ch)
                    .ok_or_else(err)?
                    + next_unit;
                let value: f64 = num.parse().map_err(|_| err())?;
                millis += value * units[idx].1;
                num.clear();
                next_unit = idx + 1;
            }
            if num.is_empty() {
                Ok(())
            } else {
                Err(err())
            }
        };
        // Years and months have no fixed length and are not accepted.
        consume(date, &[('W', 604_800_000.0), ('D', 86_400_000.0)])?;
        if let Some(t) = time {
            consume(t, &[('H', 3_600_000.0), ('M', 60_000.0), ('S', 1000.0)])?;
        }
        if !millis.is_finite() || millis > u64::MAX as f64 {
            return Err(err());
        }
        Ok(IsoDuration {
            text: text.to_owned(),
            millis: millis.round() as u64,
        })
    }

    pub fn from_millis(millis: u64) -> IsoDuration {
        let text = if millis % 1000 == 0 {
            format!("PT{}S", millis / 1000)
        } else {
            format!("PT{}.{:03}S", millis / 1000, millis % 1000)
        };
        IsoDuration { text, millis }
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn millis(&self) -> u64 {
        self.millis
    }

    pub fn to_std(&self) -> Duration {
        Duration::from_millis(self.millis)
    }
}

impl fmt::Display for IsoDuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl Serialize for IsoDuration {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for IsoDuration {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        IsoDuration::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_day_time_durations() {
        assert_eq!(IsoDuration::parse("PT5S").unwrap().millis(), 5000);
        assert_eq!(IsoDuration::parse("PT0.25S").unwrap().millis(), 250);
        assert_eq!(IsoDuration::parse("PT1M30S").unwrap().millis(), 90_000);
        assert_eq!(IsoDuration::parse("P1DT1H").unwrap().millis(), 90_000_000);
        assert_eq!(IsoDuration::parse("P1W").unwrap().millis(), 604_800_000);
    }

    #[test]
    fn rejects_malformed() {
        for bad in ["", "P", "PT", "5S", "PT5", "P1M", "P1Y", "PT5S5M", "PTxS", "P1DT"] {
            assert!(IsoDuration::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn from_millis_reparses() {
        for ms in [0, 50, 1000, 1500] {
            let d = IsoDuration::from_millis(ms);
            assert_eq!(IsoDuration::parse(d.as_str()).unwrap(), d);
        }
    }
}

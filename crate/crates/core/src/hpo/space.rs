//! Search spaces and their unit-cube encoding.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Domain {
    Continuous {
        low: f64,
        high: f64,
        #[serde(default)]
        log: bool,
    },
    Integer {
        low: i64,
        high: i64,
    },
    Categorical {
        choices: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    #[serde(flatten)]
    pub domain: Domain,
}

impl Dimension {
    pub fn continuous(name: &str, low: f64, high: f64) -> Self {
        Dimension {
            name: name.into(),
            domain: Domain::Continuous { low, high, log: false },
        }
    }

    pub fn log_continuous(name: &str, low: f64, high: f64) -> Self {
        Dimension {
            name: name.into(),
            domain: Domain::Continuous { low, high, log: true },
        }
    }

    pub fn integer(name: &str, low: i64, high: i64) -> Self {
        Dimension {
            name: name.into(),
            domain: Domain::Integer { low, high },
        }
    }

    pub fn categorical(name: &str, choices: &[&str]) -> Self {
        Dimension {
            name: name.into(),
            domain: Domain::Categorical {
                choices: choices.iter().map(|c| String::from(*c)).collect(),
            },
        }
    }

    pub fn encoded_len(&self) -> usize {
        match &self.domain {
            Domain::Categorical { choices } => choices.len(),
            _ => 1,
        }
    }
}

/// One coordinate of a hyper-parameter assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HpValue {
    Int(i64),
    Float(f64),
    Choice(String),
}

impl fmt::Display for HpValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HpValue::Int(i) => write!(f, "{i}"),
            HpValue::Float(x) => write!(f, "{x}"),
            HpValue::Choice(s) => f.write_str(s),
        }
    }
}

impl HpValue {
    pub fn to_json(&self) -> serde_json::Value {
        match self {
            HpValue::Int(i) => serde_json::Value::from(*i),
            HpValue::Float(x) => serde_json::Value::from(*x),
            HpValue::Choice(s) => serde_json::Value::from(s.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpaceError {
    #[error("dimension {0} is empty or inverted")]
    InvalidDimension(String),
    #[error("log dimension {0} needs a positive lower bound")]
    NonPositiveLog(String),
    #[error("value for {0} is out of bounds")]
    OutOfBounds(String),
    #[error("assignment has {actual} values, space has {expected} dimensions")]
    Arity { expected: usize, actual: usize },
    #[error("duplicate dimension name {0}")]
    DuplicateName(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: Vec<Dimension>,
}

fn lerp_inverse(v: f64, lo: f64, hi: f64) -> f64 {
    (v - lo) / (hi - lo)
}

impl SearchSpace {
    pub fn new(dims: Vec<Dimension>) -> Result<SearchSpace, SpaceError> {
        for (i, d) in dims.iter().enumerate() {
            if dims[..i].iter().any(|e| e.name == d.name) {
                return Err(SpaceError::DuplicateName(d.name.clone()));
            }
            let ok = match &d.domain {
                Domain::Continuous { low, high, log } => {
                    if *log && !(*low > 0.0) {
                        return Err(SpaceError::NonPositiveLog(d.name.clone()));
                    }
                    low.is_finite() && high.is_finite() && low < high
                }
                Domain::Integer { low, high } => low < high,
                Domain::Categorical { choices } => !choices.is_empty(),
            };
            if !ok {
                return Err(SpaceError::InvalidDimension(d.name.clone()));
            }
        }
        Ok(SearchSpace { dims })
    }

    pub fn encoded_len(&self) -> usize {
        self.dims.iter().map(Dimension::encoded_len).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.dims.iter().map(|d| d.name.as_str())
    }

    /// Maps an assignment into the unit cube. Log dimensions are scaled
    /// in the log10 domain; categoricals are one-hot.
    pub fn encode(&self, x: &[HpValue]) -> Result<Vec<f64>, SpaceError> {
        if x.len() != self.dims.len() {
            return Err(SpaceError::Arity {
                expected: self.dims.len(),
                actual: x.len(),
            });
        }
        let mut out = Vec::with_capacity(self.encoded_len());
        for (d, v) in self.dims.iter().zip(x) {
            let oob = || SpaceError::OutOfBounds(d.name.clone());
            match (&d.domain, v) {
                (Domain::Continuous { low, high, log }, _) => {
                    let v = match v {
                        HpValue::Float(f) => *f,
                        HpValue::Int(i) => *i as f64,
                        HpValue::Choice(_) => return Err(oob()),
                    };
                    if !(*low..=*high).contains(&v) {
                        return Err(oob());
                    }
                    out.push(if *log {
                        lerp_inverse(libm::log10(v), libm::log10(*low), libm::log10(*high))
                    } else {
                        lerp_inverse(v, *low, *high)
                    });
                }
                (Domain::Integer { low, high }, HpValue::Int(i)) if (*low..=*high).contains(i) => {
                    out.push(lerp_inverse(*i as f64, *low as f64, *high as f64));
                }
                (Domain::Categorical { choices }, HpValue::Choice(c)) => {
                    let idx = choices.iter().position(|x| x == c).ok_or_else(oob)?;
                    out.extend((0..choices.len()).map(|j| if j == idx { 1.0 } else { 0.0 }));
                }
                _ => return Err(oob()),
            }
        }
        Ok(out)
    }

    /// Inverse of [`encode`](Self::encode) on any point of the cube:
    /// coordinates are clamped, integers rounded and the categorical with
    /// the largest coordinate chosen (lowest index on ties).
    pub fn decode(&self, v: &[f64]) -> Vec<HpValue> {
        assert_eq!(v.len(), self.encoded_len(), "encoded vector length");
        let mut at = 0;
        self.dims
            .iter()
            .map(|d| {
                let u = v[at].clamp(0.0, 1.0);
                let value = match &d.domain {
                    Domain::Continuous { low, high, log } => {
                        let x = if *log {
                            let (a, b) = (libm::log10(*low), libm::log10(*high));
                            libm::pow(10.0, a + u * (b - a))
                        } else {
                            low + u * (high - low)
                        };
                        HpValue::Float(x.clamp(*low, *high))
                    }
                    Domain::Integer { low, high } => {
                        let x = libm::round(*low as f64 + u * (*high - *low) as f64) as i64;
                        HpValue::Int(x.clamp(*low, *high))
                    }
                    Domain::Categorical { choices } => {
                        let seg = &v[at..at + choices.len()];
                        let mut best = 0;
                        for (j, s) in seg.iter().enumerate() {
                            if *s > seg[best] {
                                best = j;
                            }
                        }
                        HpValue::Choice(choices[best].clone())
                    }
                };
                at += d.encoded_len();
                value
            })
            .collect()
    }

    /// Snaps a cube point onto the set of encodable assignments.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.encode(&self.decode(v)).expect("decoded values are in bounds")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};

    fn nuclei_space() -> SearchSpace {
        SearchSpace::new(vec![
            Dimension::integer("epochs", 64, 256),
            Dimension::log_continuous("learning_rate", 1e-4, 1e-2),
            Dimension::categorical("criterion", &["bce", "dice"]),
        ])
        .unwrap()
    }

    #[test]
    fn encoding_examples() {
        let s = nuclei_space();
        assert_eq!(s.encoded_len(), 4);
        let v = s
            .encode(&[HpValue::Int(64), HpValue::Float(0.001), HpValue::Choice("dice".into())])
            .unwrap();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.5).abs() < 1e-12);
        assert_eq!(&v[2..], &[0.0, 1.0]);
        assert_eq!(
            s.encode(&[HpValue::Int(63), HpValue::Float(0.001), HpValue::Choice("bce".into())]),
            Err(SpaceError::OutOfBounds("epochs".into()))
        );
    }

    #[test]
    fn decode_inverts_encode() {
        let s = nuclei_space();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let x = vec![
                HpValue::Int(rng.random_range(64..=256)),
                HpValue::Float(libm::pow(10.0, rng.random_range(-4.0..=-2.0))),
                HpValue::Choice(if rng.random_bool(0.5) { "bce" } else { "dice" }.into()),
            ];
            let back = s.decode(&s.encode(&x).unwrap());
            assert_eq!(back[0], x[0]);
            assert_eq!(back[2], x[2]);
            let (HpValue::Float(a), HpValue::Float(b)) = (&back[1], &x[1]) else { panic!() };
            assert!((a - b).abs() <= 1e-12 * b);
        }
    }

    #[test]
    fn rejects_bad_spaces() {
        assert!(SearchSpace::new(vec![Dimension::continuous("x", 1.0, 1.0)]).is_err());
        assert!(SearchSpace::new(vec![Dimension::log_continuous("x", 0.0, 1.0)]).is_err());
        assert!(SearchSpace::new(vec![Dimension::categorical("c", &[])]).is_err());
        assert!(SearchSpace::new(vec![Dimension::integer("a", 0, 1), Dimension::integer("a", 0, 2)]).is_err());
    }

    #[test]
    fn serde_shape() {
        let d: Dimension =
            serde_json::from_str(r#"{"name":"lr","type":"continuous","low":0.0001,"high":0.01,"log":true}"#).unwrap();
        assert_eq!(d, Dimension::log_continuous("lr", 1e-4, 1e-2));
    }
}

//! Peak-memory proxies (scalar slot counts) for one trainable non-GQA
//! transformer decoder block under different bilevel methods.
//!
//! With hidden size `n`, micro-batch `b`, sequence length `s`, `h` heads and
//! subspace rank `r`:
//!
//! | method  | state | hidden act. | attention | proj. act. | directions |
//! |---------|-------|-------------|-----------|------------|------------|
//! | BROS    | 24n²  | 28/3·bsn    | 2bhs²     | 4bsr       | 62/3·rn    |
//! | MA-SOBA | 24n²  | 15bsn       | 2bhs²     | 0          | 24n²       |
//! | FdeHBO  | 48n²  | 15bsn       | 2bhs²     | 0          | 24n²       |
//! | Penalty | 12n²  | 15bsn       | 2bhs²     | 0          | 12n²       |

use alloc::string::String;
use core::fmt;
use core::str::FromStr;

use num_rational::Ratio;
use num_traits::Zero;

use crate::error::{invalid, Error, Result};

pub type Slots = Ratio<i128>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Bros,
    MaSoba,
    FdeHbo,
    Penalty,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Bros, Method::MaSoba, Method::FdeHbo, Method::Penalty];

    pub fn name(self) -> &'static str {
        match self {
            Method::Bros => "bros",
            Method::MaSoba => "masoba",
            Method::FdeHbo => "fdehbo",
            Method::Penalty => "penalty",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match key.as_str() {
            "bros" => Ok(Method::Bros),
            "masoba" => Ok(Method::MaSoba),
            "fdehbo" => Ok(Method::FdeHbo),
            "penalty" => Ok(Method::Penalty),
            _ => Err(invalid("method", alloc::format!("unknown method {s:?}"))),
        }
    }
}

/// Block dimensions. `r = 0` is accepted as a degenerate lower bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDims {
    pub n: u64,
    pub b: u64,
    pub s: u64,
    pub h: u64,
    pub r: u64,
    pub include_attention: bool,
}

impl BlockDims {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.b == 0 || self.s == 0 || self.h == 0 {
            return Err(invalid("dims", "n, b, s and heads must be positive"));
        }
        if self.r > self.n {
            return Err(invalid("r", "rank must not exceed the hidden size"));
        }
        if self.n > 1 << 24 || self.b * self.s > 1 << 32 || self.h > 1 << 16 {
            return Err(invalid("dims", "too large for exact slot arithmetic"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryBreakdown {
    pub state: Slots,
    pub hidden_activation: Slots,
    pub attention: Slots,
    pub projected_activation: Slots,
    pub directions: Slots,
    pub total: Slots,
}

pub fn slots_to_f64(q: Slots) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

fn int(v: u64) -> Slots {
    Ratio::from_integer(v as i128)
}

pub fn peak_proxy(method: Method, dims: &BlockDims) -> Result<MemoryBreakdown> {
    dims.validate()?;
    let (n, b, s, h, r) = (int(dims.n), int(dims.b), int(dims.s), int(dims.h), int(dims.r));
    let n2 = n * n;
    let bsn = b * s * n;
    let attention = if dims.include_attention {
        int(2) * b * h * s * s
    } else {
        Slots::zero()
    };
    let (state, hidden, proj, dirs) = match method {
        Method::Bros => (
            int(24) * n2,
            Ratio::new(28, 3) * bsn,
            int(4) * b * s * r,
            Ratio::new(62, 3) * r * n,
        ),
        Method::MaSoba => (int(24) * n2, int(15) * bsn, Slots::zero(), int(24) * n2),
        Method::FdeHbo => (int(48) * n2, int(15) * bsn, Slots::zero(), int(24) * n2),
        Method::Penalty => (int(12) * n2, int(15) * bsn, Slots::zero(), int(12) * n2),
    };
    Ok(MemoryBreakdown {
        state,
        hidden_activation: hidden,
        attention,
        projected_activation: proj,
        directions: dirs,
        total: state + hidden + attention + proj + dirs,
    })
}

/// `(total_b − total_a) / total_b`, exactly.
pub fn reduction_ratio(a: Method, b: Method, dims: &BlockDims) -> Result<Slots> {
    let ta = peak_proxy(a, dims)?.total;
    let tb = peak_proxy(b, dims)?.total;
    if tb.is_zero() {
        return Err(invalid("reduction_ratio", "reference total is zero"));
    }
    Ok((tb - ta) / tb)
}

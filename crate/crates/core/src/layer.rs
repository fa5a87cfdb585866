//! Convolution-layer instances, precisions, and derived sizes.
//!
//! A layer is the seven loop extents of the direct convolution nest plus
//! the two strides.  No tensor data is ever allocated; everything here is
//! shape and cost bookkeeping.  Sizes are computed in overflow-checked
//! 128-bit arithmetic because the update count G of realistic layers
//! easily exceeds 2^32.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use thiserror::Error;

/// Identifies one of the three arrays of the convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ArrayId {
    Input,
    Filter,
    Output,
}

impl fmt::Display for ArrayId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArrayId::Input => write!(f, "input"),
            ArrayId::Filter => write!(f, "filter"),
            ArrayId::Output => write!(f, "output"),
        }
    }
}

/// Loop extents and strides of one convolution layer.
///
/// Field order follows the loop nest: images, input channels, output
/// channels, output width/height, filter width/height, then the two
/// strides.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvLayer {
    pub n_images: u64,
    pub c_in: u64,
    pub c_out: u64,
    pub w_out: u64,
    pub h_out: u64,
    pub w_f: u64,
    pub h_f: u64,
    pub stride_w: u64,
    pub stride_h: u64,
}

/// A violated layer invariant. Violations are data, not failures:
/// `validate` returns the full list so callers can report all of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerViolation {
    /// A loop extent or stride is zero.
    ZeroField(&'static str),
    /// stride_w must not exceed w_f (otherwise image columns are skipped).
    StrideWExceedsFilter,
    /// stride_h must not exceed h_f.
    StrideHExceedsFilter,
    /// Small-filter assumption w_f <= stride_w * w_out.
    FilterWTooLarge,
    /// Small-filter assumption h_f <= stride_h * h_out.
    FilterHTooLarge,
}

impl fmt::Display for LayerViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerViolation::ZeroField(name) => write!(f, "{name} must be >= 1"),
            LayerViolation::StrideWExceedsFilter => write!(f, "stride_w <= w_f violated"),
            LayerViolation::StrideHExceedsFilter => write!(f, "stride_h <= h_f violated"),
            LayerViolation::FilterWTooLarge => write!(f, "w_f <= stride_w * w_out violated"),
            LayerViolation::FilterHTooLarge => write!(f, "h_f <= stride_h * h_out violated"),
        }
    }
}

impl ConvLayer {
    /// Checks every layer invariant and returns the violated ones
    /// (empty when the layer is valid).
    pub fn validate(&self) -> Vec<LayerViolation> {
        let mut v = Vec::new();
        let fields = [
            (self.n_images, "N"),
            (self.c_in, "c_in"),
            (self.c_out, "c_out"),
            (self.w_out, "w_out"),
            (self.h_out, "h_out"),
            (self.w_f, "w_f"),
            (self.h_f, "h_f"),
            (self.stride_w, "stride_w"),
            (self.stride_h, "stride_h"),
        ];
        for (value, name) in fields {
            if value == 0 {
                v.push(LayerViolation::ZeroField(name));
            }
        }
        if !v.is_empty() {
            return v;
        }
        if self.stride_w > self.w_f {
            v.push(LayerViolation::StrideWExceedsFilter);
        }
        if self.stride_h > self.h_f {
            v.push(LayerViolation::StrideHExceedsFilter);
        }
        if self.w_f > self.stride_w.saturating_mul(self.w_out) {
            v.push(LayerViolation::FilterWTooLarge);
        }
        if self.h_f > self.stride_h.saturating_mul(self.h_out) {
            v.push(LayerViolation::FilterHTooLarge);
        }
        v
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }

    /// Width of the (padded) input image plane: stride_w * w_out + w_f.
    pub fn in_width(&self) -> u128 {
        self.stride_w as u128 * self.w_out as u128 + self.w_f as u128
    }

    /// Height of the (padded) input image plane: stride_h * h_out + h_f.
    pub fn in_height(&self) -> u128 {
        self.stride_h as u128 * self.h_out as u128 + self.h_f as u128
    }

    /// Extents of the seven loops in nest order (N, c_in, c_out, w_out,
    /// h_out, w_f, h_f).
    pub fn loop_extents(&self) -> [u64; 7] {
        [
            self.n_images,
            self.c_in,
            self.c_out,
            self.w_out,
            self.h_out,
            self.w_f,
            self.h_f,
        ]
    }
}

/// Words per element of each array, as exact rationals.
///
/// Keeping precisions rational (not float) keeps every bound constant
/// exact; tests compare them with `==`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrecisionTriple {
    p_in: BigRational,
    p_f: BigRational,
    p_out: BigRational,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PrecisionError {
    #[error("precision {0} must be strictly positive")]
    NonPositive(ArrayId),
}

impl PrecisionTriple {
    pub fn new(
        p_in: BigRational,
        p_f: BigRational,
        p_out: BigRational,
    ) -> Result<Self, PrecisionError> {
        for (p, id) in [
            (&p_in, ArrayId::Input),
            (&p_f, ArrayId::Filter),
            (&p_out, ArrayId::Output),
        ] {
            if !p.is_positive() {
                return Err(PrecisionError::NonPositive(id));
            }
        }
        Ok(Self { p_in, p_f, p_out })
    }

    /// Integer-precision convenience constructor.
    pub fn from_ints(p_in: u64, p_f: u64, p_out: u64) -> Result<Self, PrecisionError> {
        Self::new(int_rat(p_in), int_rat(p_f), int_rat(p_out))
    }

    /// All three precisions equal to one word.
    pub fn unit() -> Self {
        Self::from_ints(1, 1, 1).unwrap()
    }

    pub fn p_in(&self) -> &BigRational {
        &self.p_in
    }

    pub fn p_f(&self) -> &BigRational {
        &self.p_f
    }

    pub fn p_out(&self) -> &BigRational {
        &self.p_out
    }

    pub fn get(&self, id: ArrayId) -> &BigRational {
        match id {
            ArrayId::Input => &self.p_in,
            ArrayId::Filter => &self.p_f,
            ArrayId::Output => &self.p_out,
        }
    }

    /// p_total = p_in + p_f + p_out.
    pub fn p_total(&self) -> BigRational {
        &self.p_in + &self.p_f + &self.p_out
    }

    /// Product p_in * p_f * p_out.
    pub fn p_product(&self) -> BigRational {
        &self.p_in * &self.p_f * &self.p_out
    }

    /// The array whose precision exceeds the sum of the other two, if any.
    pub fn triangle_violation(&self) -> Option<ArrayId> {
        let rotations = [
            (ArrayId::Input, &self.p_in, &self.p_f, &self.p_out),
            (ArrayId::Filter, &self.p_f, &self.p_in, &self.p_out),
            (ArrayId::Output, &self.p_out, &self.p_in, &self.p_f),
        ];
        for (id, pj, pk, pl) in rotations {
            if pj > &(pk + pl) {
                return Some(id);
            }
        }
        None
    }

    /// True iff p_j <= p_k + p_l for all three rotations.
    pub fn triangle_holds(&self) -> bool {
        self.triangle_violation().is_none()
    }

    /// Scales all three precisions by `c` (used by scaling tests).
    pub fn scaled(&self, c: &BigRational) -> Result<Self, PrecisionError> {
        Self::new(&self.p_in * c, &self.p_f * c, &self.p_out * c)
    }
}

/// Closed-form sizes derived from a layer and its precisions.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivedSizes {
    /// Input element count N * c_in * (stride_w*w_out + w_f) * (stride_h*h_out + h_f).
    pub size_in: u128,
    /// Filter element count c_in * c_out * w_f * h_f.
    pub size_f: u128,
    /// Output element count N * c_out * w_out * h_out.
    pub size_out: u128,
    /// Update count G = N * c_in * c_out * w_out * h_out * w_f * h_f.
    pub g_total: u128,
    /// Largest array in words: max(p_in*|I|, p_f*|F|, p_out*|O|).
    pub a_p: BigRational,
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("layer is invalid: {0:?}")]
    InvalidLayer(Vec<LayerViolation>),
    #[error("size computation overflowed 128-bit arithmetic in field `{field}`")]
    SizeOverflow { field: &'static str },
}

/// Evaluates the closed-form sizes.  Multiplications are checked; an
/// overflow names the field that did not fit.
pub fn derive_sizes(layer: &ConvLayer, prec: &PrecisionTriple) -> Result<DerivedSizes, ModelError> {
    let violations = layer.validate();
    if !violations.is_empty() {
        return Err(ModelError::InvalidLayer(violations));
    }

    fn product(factors: &[u128], field: &'static str) -> Result<u128, ModelError> {
        factors
            .iter()
            .try_fold(1u128, |acc, &f| acc.checked_mul(f))
            .ok_or(ModelError::SizeOverflow { field })
    }

    let n = layer.n_images as u128;
    let ci = layer.c_in as u128;
    let co = layer.c_out as u128;
    let wo = layer.w_out as u128;
    let ho = layer.h_out as u128;
    let wf = layer.w_f as u128;
    let hf = layer.h_f as u128;

    let size_in = product(&[n, ci, layer.in_width(), layer.in_height()], "size_in")?;
    let size_f = product(&[ci, co, wf, hf], "size_f")?;
    let size_out = product(&[n, co, wo, ho], "size_out")?;
    let g_total = product(&[n, ci, co, wo, ho, wf, hf], "g_total")?;

    let words = |p: &BigRational, elems: u128| p * uint_rat(elems);
    let a_p = [
        words(prec.p_in(), size_in),
        words(prec.p_f(), size_f),
        words(prec.p_out(), size_out),
    ]
    .into_iter()
    .max()
    .unwrap();

    Ok(DerivedSizes {
        size_in,
        size_f,
        size_out,
        g_total,
        a_p,
    })
}

impl DerivedSizes {
    pub fn elements(&self, id: ArrayId) -> u128 {
        match id {
            ArrayId::Input => self.size_in,
            ArrayId::Filter => self.size_f,
            ArrayId::Output => self.size_out,
        }
    }

    /// Compulsory traffic p_in*|I| + p_f*|F| + p_out*|O| in words.
    pub fn compulsory_words(&self, prec: &PrecisionTriple) -> BigRational {
        prec.p_in() * uint_rat(self.size_in)
            + prec.p_f() * uint_rat(self.size_f)
            + prec.p_out() * uint_rat(self.size_out)
    }
}

/// Exact rational from an unsigned 128-bit integer.
pub fn uint_rat(v: u128) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

/// Exact rational from an unsigned 64-bit integer.
pub fn int_rat(v: u64) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

// ---------------------------------------------------------------------------
// Layer spec files: `key = value` lines, `#` comments, rationals as `a/b`.
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LayerParseError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: expected `key = value`")]
    Malformed { line: usize },
    #[error("line {line}: invalid value `{value}` for `{key}`")]
    BadValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("missing keys: {0}")]
    MissingKeys(String),
    #[error("precisions must be positive")]
    NonPositivePrecision,
}

const LAYER_KEYS: [&str; 12] = [
    "N", "c_in", "c_out", "w_out", "h_out", "w_f", "h_f", "stride_w", "stride_h", "p_in", "p_f",
    "p_out",
];

/// Parses a layer spec file into a layer and its precision triple.
pub fn parse_layer_spec(text: &str) -> Result<(ConvLayer, PrecisionTriple), LayerParseError> {
    let mut ints: Vec<(&str, u64)> = Vec::new();
    let mut rats: Vec<(&str, BigRational)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(LayerParseError::Malformed { line });
        };
        let key = key.trim();
        let value = value.trim();
        let canonical = LAYER_KEYS
            .iter()
            .find(|k| **k == key)
            .ok_or_else(|| LayerParseError::UnknownKey {
                line,
                key: key.to_string(),
            })?;
        let is_precision = canonical.starts_with("p_");
        let seen = if is_precision {
            rats.iter().any(|(k, _)| *k == *canonical)
        } else {
            ints.iter().any(|(k, _)| *k == *canonical)
        };
        if seen {
            return Err(LayerParseError::DuplicateKey {
                line,
                key: key.to_string(),
            });
        }
        if is_precision {
            let parsed = parse_rational(value).ok_or_else(|| LayerParseError::BadValue {
                line,
                key: key.to_string(),
                value: value.to_string(),
            })?;
            rats.push((canonical, parsed));
        } else {
            let parsed = value
                .parse::<u64>()
                .map_err(|_| LayerParseError::BadValue {
                    line,
                    key: key.to_string(),
                    value: value.to_string(),
                })?;
            ints.push((canonical, parsed));
        }
    }

    let missing: Vec<&str> = LAYER_KEYS
        .iter()
        .filter(|k| {
            !ints.iter().any(|(key, _)| key == *k) && !rats.iter().any(|(key, _)| key == *k)
        })
        .copied()
        .collect();
    if !missing.is_empty() {
        return Err(LayerParseError::MissingKeys(missing.join(", ")));
    }

    let int = |k: &str| ints.iter().find(|(key, _)| *key == k).unwrap().1;
    let rat = |k: &str| rats.iter().find(|(key, _)| *key == k).unwrap().1.clone();

    let layer = ConvLayer {
        n_images: int("N"),
        c_in: int("c_in"),
        c_out: int("c_out"),
        w_out: int("w_out"),
        h_out: int("h_out"),
        w_f: int("w_f"),
        h_f: int("h_f"),
        stride_w: int("stride_w"),
        stride_h: int("stride_h"),
    };
    let prec = PrecisionTriple::new(rat("p_in"), rat("p_f"), rat("p_out"))
        .map_err(|_| LayerParseError::NonPositivePrecision)?;
    Ok((layer, prec))
}

/// Parses `a/b` or a plain integer into a rational.
pub fn parse_rational(s: &str) -> Option<BigRational> {
    let s = s.trim();
    if let Some((num, den)) = s.split_once('/') {
        let num = BigInt::from_str(num.trim()).ok()?;
        let den = BigInt::from_str(den.trim()).ok()?;
        if den.is_zero() {
            return None;
        }
        Some(BigRational::new(num, den))
    } else {
        BigInt::from_str(s).ok().map(BigRational::from_integer)
    }
}

/// Renders a rational the way layer files expect (`a` or `a/b`).
pub fn format_rational(r: &BigRational) -> String {
    if r.denom().is_one() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

/// Serializes a layer (and precisions) in the layer spec file format.
pub fn format_layer_spec(layer: &ConvLayer, prec: &PrecisionTriple) -> String {
    format!(
        "N = {}\nc_in = {}\nc_out = {}\nw_out = {}\nh_out = {}\nw_f = {}\nh_f = {}\n\
         stride_w = {}\nstride_h = {}\np_in = {}\np_f = {}\np_out = {}\n",
        layer.n_images,
        layer.c_in,
        layer.c_out,
        layer.w_out,
        layer.h_out,
        layer.w_f,
        layer.h_f,
        layer.stride_w,
        layer.stride_h,
        format_rational(prec.p_in()),
        format_rational(prec.p_f()),
        format_rational(prec.p_out()),
    )
}

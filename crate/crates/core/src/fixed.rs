//! Fixed-point model arithmetic modulo `2^w`.
//!
//! All update vectors live in the group `Z_{2^w}` per component so that
//! masking noise can be added and later subtracted with exact cancellation.
//! Floating point would not give the bit-equality with the reference
//! aggregation that the protocol promises.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width/scale of the modular fixed-point representation.
///
/// `width` is the modulus exponent w (values live in `Z_{2^w}`), `scale` the
/// number of fractional bits. Defaults are w=32, scale=16.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedParams {
    pub width: u8,
    pub scale: u8,
}

impl Default for FixedParams {
    fn default() -> Self {
        FixedParams { width: 32, scale: 16 }
    }
}

impl FixedParams {
    pub fn new(width: u8, scale: u8) -> Result<Self> {
        if width == 0 || width > 64 || width % 8 != 0 {
            return Err(Error::parameter(format!(
                "fixed-point width must be a multiple of 8 in 8..=64, got {width}"
            )));
        }
        if scale >= width {
            return Err(Error::parameter(format!(
                "fixed-point scale {scale} must be below width {width}"
            )));
        }
        Ok(FixedParams { width, scale })
    }

    #[inline]
    pub fn mask(&self) -> u64 {
        if self.width == 64 {
            u64::MAX
        } else {
            (1u64 << self.width) - 1
        }
    }

    /// Reinterpret a raw residue as a signed integer (two's complement in w bits).
    #[inline]
    pub fn to_signed(&self, raw: u64) -> i64 {
        let raw = raw & self.mask();
        if self.width == 64 {
            raw as i64
        } else if raw >= 1u64 << (self.width - 1) {
            raw as i64 - (1i64 << self.width)
        } else {
            raw as i64
        }
    }

    #[inline]
    pub fn from_signed(&self, v: i64) -> u64 {
        (v as u64) & self.mask()
    }

    pub fn quantize(&self, x: f64) -> u64 {
        let scaled = (x * (1u64 << self.scale) as f64).round();
        self.from_signed(scaled as i64)
    }

    pub fn dequantize(&self, raw: u64) -> f64 {
        self.to_signed(raw) as f64 / (1u64 << self.scale) as f64
    }
}

/// A model (or model-update) vector with component-wise modular arithmetic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterVector {
    raw: Vec<u64>,
    params: FixedParams,
}

impl ParameterVector {
    pub fn zeros(dim: usize, params: FixedParams) -> Self {
        ParameterVector { raw: vec![0; dim], params }
    }

    pub fn from_raw(raw: Vec<u64>, params: FixedParams) -> Self {
        let mask = params.mask();
        ParameterVector { raw: raw.into_iter().map(|v| v & mask).collect(), params }
    }

    pub fn from_f64s(values: &[f64], params: FixedParams) -> Self {
        ParameterVector { raw: values.iter().map(|&x| params.quantize(x)).collect(), params }
    }

    pub fn to_f64s(&self) -> Vec<f64> {
        self.raw.iter().map(|&v| self.params.dequantize(v)).collect()
    }

    pub fn dim(&self) -> usize {
        self.raw.len()
    }

    pub fn params(&self) -> FixedParams {
        self.params
    }

    pub fn raw(&self) -> &[u64] {
        &self.raw
    }

    fn check_shape(&self, other: &ParameterVector) -> Result<()> {
        if self.raw.len() != other.raw.len() || self.params != other.params {
            return Err(Error::Shape { left: self.raw.len(), right: other.raw.len() });
        }
        Ok(())
    }

    pub fn add(&self, other: &ParameterVector) -> Result<ParameterVector> {
        self.check_shape(other)?;
        let mask = self.params.mask();
        let raw = self
            .raw
            .iter()
            .zip(&other.raw)
            .map(|(&a, &b)| a.wrapping_add(b) & mask)
            .collect();
        Ok(ParameterVector { raw, params: self.params })
    }

    pub fn sub(&self, other: &ParameterVector) -> Result<ParameterVector> {
        self.check_shape(other)?;
        let mask = self.params.mask();
        let raw = self
            .raw
            .iter()
            .zip(&other.raw)
            .map(|(&a, &b)| a.wrapping_sub(b) & mask)
            .collect();
        Ok(ParameterVector { raw, params: self.params })
    }

    /// Exact modular multiplication by an integer scalar (no rounding).
    pub fn scale_int(&self, k: u64) -> ParameterVector {
        let mask = self.params.mask();
        let raw = self.raw.iter().map(|&a| a.wrapping_mul(k) & mask).collect();
        ParameterVector { raw, params: self.params }
    }

    /// Component-wise signed division by a positive integer, rounding to the
    /// nearest representable value with ties toward +infinity.
    ///
    /// Half-up tie-breaking is translation invariant (`(a + d*m)/d` rounds to
    /// `round(a/d) + m` for any integer m), which is what makes the masked
    /// aggregation route land on exactly the same bits as direct weighted
    /// averaging of the local models.
    pub fn div_round(&self, divisor: u64) -> Result<ParameterVector> {
        if divisor == 0 {
            return Err(Error::DegenerateRound);
        }
        let d = divisor as i128;
        let raw = self
            .raw
            .iter()
            .map(|&v| {
                let a = self.params.to_signed(v) as i128;
                let q = (2 * a + d).div_euclid(2 * d);
                self.params.from_signed(q as i64)
            })
            .collect();
        Ok(ParameterVector { raw, params: self.params })
    }

    /// Guard against true magnitudes drifting toward the modulus, where the
    /// signed reinterpretation (and thus division) would silently wrap.
    pub fn check_headroom(&self) -> Result<()> {
        let limit = 1i64 << (self.params.width - 2);
        if self.raw.iter().any(|&v| self.params.to_signed(v).abs() >= limit) {
            return Err(Error::OverflowGuard);
        }
        Ok(())
    }

    /// Wire format: dim u32 LE, width u8, scale u8, then each value as a
    /// width-bit little-endian integer.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n_bytes = (self.params.width / 8) as usize;
        let mut out = Vec::with_capacity(6 + self.raw.len() * n_bytes);
        out.extend_from_slice(&(self.raw.len() as u32).to_le_bytes());
        out.push(self.params.width);
        out.push(self.params.scale);
        for &v in &self.raw {
            out.extend_from_slice(&v.to_le_bytes()[..n_bytes]);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParameterVector> {
        if bytes.len() < 6 {
            return Err(Error::Wire("parameter vector header truncated".into()));
        }
        let dim = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let params = FixedParams::new(bytes[4], bytes[5])
            .map_err(|e| Error::Wire(format!("bad fixed-point params: {e}")))?;
        let n_bytes = (params.width / 8) as usize;
        let body = &bytes[6..];
        if body.len() != dim * n_bytes {
            return Err(Error::Wire(format!(
                "parameter vector body length {} != {}",
                body.len(),
                dim * n_bytes
            )));
        }
        let mut raw = Vec::with_capacity(dim);
        for chunk in body.chunks_exact(n_bytes) {
            let mut buf = [0u8; 8];
            buf[..n_bytes].copy_from_slice(chunk);
            raw.push(u64::from_le_bytes(buf));
        }
        Ok(ParameterVector { raw, params })
    }
}

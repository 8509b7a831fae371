//! Exact text encoding of `f64` values as C99-style hexadecimal floats
//! (`0x1.999999999999ap-4`). Parsing also accepts plain decimal literals.

use crate::error::{Error, Result};

const FRAC_BITS: u32 = 52;
const EXP_BIAS: i32 = 1023;

pub fn format(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp_field = ((bits >> FRAC_BITS) & 0x7ff) as i32;
    let frac = bits & ((1u64 << FRAC_BITS) - 1);
    if exp_field == 0 && frac == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, exp) = if exp_field == 0 {
        (0, 1 - EXP_BIAS)
    } else {
        (1, exp_field - EXP_BIAS)
    };
    let digits = format!("{frac:013x}");
    let digits = digits.trim_end_matches('0');
    let exp_sign = if exp >= 0 { "+" } else { "-" };
    if digits.is_empty() {
        format!("{sign}0x{lead}p{exp_sign}{}", exp.abs())
    } else {
        format!("{sign}0x{lead}.{digits}p{exp_sign}{}", exp.abs())
    }
}

/// Exact power of two as an `f64` (normal or subnormal range).
fn pow2(e: i32) -> Option<f64> {
    if (-1022..=1023).contains(&e) {
        Some(f64::from_bits(((e + EXP_BIAS) as u64) << FRAC_BITS))
    } else if (-1074..-1022).contains(&e) {
        Some(f64::from_bits(1u64 << (e + 1074)))
    } else {
        None
    }
}

pub fn parse(s: &str) -> Result<f64> {
    let t = s.trim();
    let err = || Error::Parse(format!("invalid float literal `{t}`"));
    let (neg, body) = match t.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, t.strip_prefix('+').unwrap_or(t)),
    };
    let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) else {
        return t.parse::<f64>().map_err(|_| err());
    };
    let (mant, exp) = hex.split_once(['p', 'P']).ok_or_else(err)?;
    let exp: i32 = exp.parse().map_err(|_| err())?;
    let (int_part, frac_part) = mant.split_once('.').unwrap_or((mant, ""));
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(err());
    }
    let mut mantissa: u64 = 0;
    for c in int_part.chars().chain(frac_part.chars()) {
        let d = c.to_digit(16).ok_or_else(err)? as u64;
        if mantissa >> 56 != 0 {
            return Err(Error::Parse(format!("hex mantissa too long in `{t}`")));
        }
        mantissa = (mantissa << 4) | d;
    }
    let scale = exp - 4 * frac_part.len() as i32;
    let value = if mantissa == 0 {
        0.0
    } else if mantissa < (1u64 << 53) {
        let p = pow2(scale).ok_or_else(err)?;
        mantissa as f64 * p
    } else {
        // Mantissa wider than 53 bits: split to keep each product exact.
        let hi = (mantissa >> 8) as f64 * pow2(scale + 8).ok_or_else(err)?;
        let lo = (mantissa & 0xff) as f64 * pow2(scale).ok_or_else(err)?;
        hi + lo
    };
    Ok(if neg { -value } else { value })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_encodings() {
        assert_eq!(format(1.0), "0x1p+0");
        assert_eq!(format(0.1), "0x1.999999999999ap-4");
        assert_eq!(format(-2.5), "-0x1.4p+1");
        assert_eq!(format(0.0), "0x0p+0");
        assert_eq!(format(-0.0), "-0x0p+0");
        assert_eq!(format(f64::MIN_POSITIVE / 4.0), "0x0.4p-1022");
    }

    #[test]
    fn parses_decimal_and_hex() {
        assert_eq!(parse("0x1.999999999999ap-4").unwrap(), 0.1);
        assert_eq!(parse("0.0787").unwrap(), 0.0787);
        assert_eq!(parse("-0x1p-1074").unwrap(), -f64::from_bits(1));
        assert!(parse("0xzz").is_err());
        assert!(parse("0x1.0").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(bits in any::<u64>()) {
            let v = f64::from_bits(bits);
            prop_assume!(v.is_finite());
            let back = parse(&format(v)).unwrap();
            prop_assert_eq!(back.to_bits(), v.to_bits());
        }
    }
}

//! Hexadecimal floating-point literals (`0x1.8p+1` style).
//!
//! Every finite `f64` formats to a literal that parses back to the same bit
//! pattern. Parsing also accepts plain decimal literals so hand-written
//! configuration stays readable.

/// Formats `x` as a hexadecimal float literal.
pub fn format(x: f64) -> String {
    if x.is_nan() {
        return "nan".to_string();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let bits = x.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    if exp_bits == 0 && frac == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, exp) = if exp_bits == 0 {
        (0, -1022)
    } else {
        (1, exp_bits - 1023)
    };
    let mut digits = format!("{frac:013x}");
    while digits.ends_with('0') {
        digits.pop();
    }
    let exp_sign = if exp < 0 { '-' } else { '+' };
    if digits.is_empty() {
        format!("{sign}0x{lead}p{exp_sign}{}", exp.abs())
    } else {
        format!("{sign}0x{lead}.{digits}p{exp_sign}{}", exp.abs())
    }
}

/// Parses a hexadecimal float literal, or falls back to a decimal literal.
pub fn parse(text: &str) -> Option<f64> {
    let t = text.trim();
    let (negative, body) = match t.as_bytes().first()? {
        b'-' => (true, &t[1..]),
        b'+' => (false, &t[1..]),
        _ => (false, t),
    };
    let hex = match body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        Some(h) => h,
        None => {
            return match body {
                "inf" | "infinity" => Some(if negative { f64::NEG_INFINITY } else { f64::INFINITY }),
                "nan" => Some(f64::NAN),
                _ => body.parse::<f64>().ok().map(|v| if negative { -v } else { v }),
            };
        }
    };
    let (mantissa_text, exp_text) = match hex.find(['p', 'P']) {
        Some(i) => (&hex[..i], &hex[i + 1..]),
        None => (hex, "0"),
    };
    let exponent: i64 = exp_text.parse().ok()?;
    let (int_part, frac_part) = match mantissa_text.find('.') {
        Some(i) => (&mantissa_text[..i], &mantissa_text[i + 1..]),
        None => (mantissa_text, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    let mut mantissa: u64 = 0;
    let mut scale: i64 = 0;
    let mut sticky = false;
    for (i, c) in int_part.chars().chain(frac_part.chars()).enumerate() {
        let d = c.to_digit(16)? as u64;
        let in_frac = i >= int_part.len();
        if mantissa >> 56 == 0 {
            mantissa = (mantissa << 4) | d;
            if in_frac {
                scale -= 4;
            }
        } else {
            // digits beyond 60 bits only matter for rounding
            sticky |= d != 0;
            if !in_frac {
                scale += 4;
            }
        }
    }
    if sticky {
        mantissa |= 1;
    }
    let value = ldexp(mantissa as f64, exponent + scale);
    Some(if negative { -value } else { value })
}

fn ldexp(mut x: f64, mut e: i64) -> f64 {
    let up = f64::from_bits(((1023 + 1000) as u64) << 52);
    let down = f64::from_bits(((1023 - 1000) as u64) << 52);
    while e > 1000 {
        x *= up;
        e -= 1000;
    }
    while e < -1000 {
        x *= down;
        e += 1000;
    }
    x * f64::from_bits(((1023 + e) as u64) << 52)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_literals() {
        assert_eq!(format(1.0), "0x1p+0");
        assert_eq!(format(-0.5), "-0x1p-1");
        assert_eq!(format(3.0), "0x1.8p+1");
        assert_eq!(format(0.0), "0x0p+0");
        assert_eq!(parse("0x1.8p+1"), Some(3.0));
        assert_eq!(parse("0X1P-2"), Some(0.25));
        assert_eq!(parse("2.5"), Some(2.5));
        assert_eq!(parse("-1e-3"), Some(-1e-3));
        assert_eq!(parse("0x"), None);
        assert_eq!(parse("0x1.zp0"), None);
    }

    #[test]
    fn subnormals_and_extremes() {
        for x in [f64::MIN_POSITIVE, 5e-324, f64::MAX, -f64::MAX, 2.2e-310] {
            assert_eq!(parse(&format(x)).unwrap().to_bits(), x.to_bits(), "{x:e}");
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(x.is_finite());
            let back = parse(&format(x)).unwrap();
            prop_assert_eq!(back.to_bits(), x.to_bits());
        }
    }
}

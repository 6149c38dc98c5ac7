//! CSV emission helpers. All float columns use 6 significant digits.

/// Formats with 6 significant digits, plain decimal for moderate
/// magnitudes and scientific notation otherwise.
pub fn sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        // trim trailing zeros but keep at least one digit
        if s.contains('.') {
            let t = s.trim_end_matches('0').trim_end_matches('.');
            t.to_string()
        } else {
            s
        }
    } else {
        format!("{x:.5e}")
    }
}

/// Joins one CSV row; no quoting (callers only pass numeric or
/// separator-free fields).
pub fn csv_row(fields: &[String]) -> String {
    fields.join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(0.123456789), "0.123457");
        assert_eq!(sig6(1234.56789), "1234.57");
        assert_eq!(sig6(-0.5), "-0.5");
        assert_eq!(sig6(123456.7), "123457");
        assert_eq!(sig6(1e-7), "1.00000e-7");
        assert_eq!(sig6(3.0), "3");
    }
}

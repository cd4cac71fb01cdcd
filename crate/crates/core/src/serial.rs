//! Line-oriented JSON helpers shared by the corpus and datastore files.
//!
//! Floats are written with 17 significant digits so every `f64` survives a
//! write/read cycle bit for bit.

use std::fmt::Write as _;

pub(crate) fn fmt_f64(out: &mut String, x: f64) {
    write!(out, "{:.16e}", x).expect("write to String");
}

pub(crate) fn write_f64_array(out: &mut String, xs: &[f64]) {
    out.push('[');
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        fmt_f64(out, *x);
    }
    out.push(']');
}

pub(crate) fn write_str(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("strings always serialize"));
}

pub(crate) fn write_str_array(out: &mut String, xs: &[String]) {
    out.push('[');
    for (i, s) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write_str(out, s);
    }
    out.push(']');
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn seventeen_digits_round_trip(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(x.is_finite());
            let mut s = String::new();
            write_f64_array(&mut s, &[x]);
            let back: Vec<f64> = serde_json::from_str(&s).unwrap();
            prop_assert_eq!(back[0].to_bits(), x.to_bits());
        }
    }
}

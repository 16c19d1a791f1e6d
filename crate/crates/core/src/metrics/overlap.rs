use super::{check_pair, BinaryMask, Metric};
use crate::error::Result;

/// `2|S ∩ G| / (|S| + |G|)`; two empty masks score 1 and are flagged.
pub fn dice(s: &BinaryMask, g: &BinaryMask) -> Result<Metric> {
    check_pair(s, g)?;
    let total = s.count() + g.count();
    if total == 0 {
        return Ok(Metric {
            value: 1.0,
            degenerate: true,
        });
    }
    Ok(Metric {
        value: 2.0 * s.intersection_count(g) as f64 / total as f64,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::new(bits.iter().map(|&b| b == 1).collect(), [1, 1, bits.len()], [1.0; 3]).unwrap()
    }

    #[test]
    fn dice_cases() {
        let s = mask(&[1, 1, 1, 1, 0, 0, 0]);
        let g = mask(&[0, 1, 1, 1, 1, 1, 1]);
        assert_eq!(dice(&s, &g).unwrap().value, 0.6);
        assert_eq!(dice(&s, &s).unwrap().value, 1.0);
        assert_eq!(dice(&mask(&[1, 0]), &mask(&[0, 1])).unwrap().value, 0.0);
        let e = dice(&mask(&[0, 0]), &mask(&[0, 0])).unwrap();
        assert!(e.degenerate && e.value == 1.0);
        assert!(dice(&mask(&[0, 0]), &mask(&[0, 0, 0])).is_err());
    }
}

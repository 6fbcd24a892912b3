use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Serialize, Serializer};

use crate::{Error, Result};

/// Exact `n choose k` by building Pascal's triangle up to row `n`.
///
/// Only the first `k + 1` columns are kept, so the cost is `O(n·k)` big-integer additions.
pub fn binomial(n: u64, k: u64) -> Result<BigUint> {
    if k > n {
        return Err(Error::Domain(format!("binomial({n}, {k}) needs k <= n")));
    }
    let k = k.min(n - k) as usize;
    let mut row: Vec<BigUint> = vec![BigUint::zero(); k + 1];
    row[0] = BigUint::one();
    for i in 1..=n as usize {
        for j in (1..=k.min(i)).rev() {
            let left = row[j - 1].clone();
            row[j] += left;
        }
    }
    Ok(row.swap_remove(k))
}

fn as_decimal<S: Serializer>(v: &BigUint, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&v.to_string())
}

/// Reachable expert combinations with `C` routing steps of `k` experts each,
/// versus one step selecting `C·k` experts, both out of `n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CombinatoricsReport {
    pub n: u64,
    pub k: u64,
    pub c: u64,
    /// `binom(n, k)^C`
    #[serde(serialize_with = "as_decimal")]
    pub combos_coe: BigUint,
    /// `binom(n, C·k)`
    #[serde(serialize_with = "as_decimal")]
    pub combos_moe: BigUint,
    /// `combos_coe / combos_moe` in lowest terms.
    #[serde(serialize_with = "as_decimal")]
    pub ratio_numerator: BigUint,
    #[serde(serialize_with = "as_decimal")]
    pub ratio_denominator: BigUint,
    pub ratio_decimal: f64,
}

pub fn combination_ratio(n: u64, k: u64, c: u64) -> Result<CombinatoricsReport> {
    if k == 0 || c == 0 {
        return Err(Error::Domain(format!("k and C must be positive (k = {k}, C = {c})")));
    }
    let total = c
        .checked_mul(k)
        .filter(|&ck| ck <= n)
        .ok_or_else(|| Error::Domain(format!("C·k = {c}·{k} exceeds n = {n}")))?;
    let per_step = binomial(n, k)?;
    let combos_coe = num_traits::pow(per_step, c as usize);
    let combos_moe = binomial(n, total)?;
    let ratio = BigRational::new(BigInt::from(combos_coe.clone()), BigInt::from(combos_moe.clone()));
    let ratio_decimal = ratio.to_f64().unwrap_or(f64::INFINITY);
    Ok(CombinatoricsReport {
        n,
        k,
        c,
        combos_coe,
        combos_moe,
        ratio_numerator: ratio.numer().magnitude().clone(),
        ratio_denominator: ratio.denom().magnitude().clone(),
        ratio_decimal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_values() {
        assert_eq!(binomial(5, 0).unwrap(), BigUint::from(1u32));
        assert_eq!(binomial(5, 5).unwrap(), BigUint::from(1u32));
        assert_eq!(binomial(5, 2).unwrap(), BigUint::from(10u32));
        assert_eq!(binomial(0, 0).unwrap(), BigUint::from(1u32));
        assert!(binomial(3, 4).is_err());
    }

    #[test]
    fn single_step_ratio_is_one() {
        let r = combination_ratio(64, 4, 1).unwrap();
        assert_eq!(r.combos_coe, r.combos_moe);
        assert_eq!(r.ratio_numerator, BigUint::from(1u32));
        assert_eq!(r.ratio_denominator, BigUint::from(1u32));
        assert_eq!(r.ratio_decimal, 1.0);
    }

    #[test]
    fn hand_enumerated_case() {
        let r = combination_ratio(4, 1, 2).unwrap();
        assert_eq!(r.combos_coe, BigUint::from(16u32));
        assert_eq!(r.combos_moe, BigUint::from(6u32));
        assert_eq!(
            (r.ratio_numerator.clone(), r.ratio_denominator.clone()),
            (BigUint::from(8u32), BigUint::from(3u32))
        );
    }

    #[test]
    fn domain_errors() {
        assert!(combination_ratio(64, 40, 2).is_err());
        assert!(combination_ratio(64, 0, 2).is_err());
    }

    #[test]
    fn json_uses_decimal_strings() {
        let v = serde_json::to_value(combination_ratio(4, 1, 2).unwrap()).unwrap();
        assert_eq!(v["combos_coe"], "16");
        assert_eq!(v["ratio_denominator"], "3");
    }
}

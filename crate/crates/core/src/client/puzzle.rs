use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unrecognized challenge: {0}")]
pub struct PuzzleError(pub String);

/// Answers a `What is A OP B?` challenge. `OP` may be `+`, `-`/`−`, or
/// `×`/`*`/`x`.
pub fn solve_arithmetic_puzzle(challenge: &str) -> Result<i64, PuzzleError> {
    let err = || PuzzleError(challenge.to_owned());
    let body = challenge
        .trim()
        .strip_prefix("What is ")
        .and_then(|s| s.strip_suffix('?'))
        .ok_or_else(err)?;
    let mut parts = body.split_whitespace();
    let (a, op, b) = (parts.next().ok_or_else(err)?, parts.next().ok_or_else(err)?, parts.next().ok_or_else(err)?);
    if parts.next().is_some() {
        return Err(err());
    }
    let a: i64 = a.parse().map_err(|_| err())?;
    let b: i64 = b.parse().map_err(|_| err())?;
    match op {
        "+" => a.checked_add(b),
        "-" | "\u{2212}" => a.checked_sub(b),
        "\u{00d7}" | "*" | "x" => a.checked_mul(b),
        _ => None,
    }
    .ok_or_else(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_examples() {
        assert_eq!(solve_arithmetic_puzzle("What is 4 + 13?"), Ok(17));
        assert_eq!(solve_arithmetic_puzzle("What is 6 \u{00d7} 7?"), Ok(42));
        assert_eq!(solve_arithmetic_puzzle("What is 9 \u{2212} 11?"), Ok(-2));
    }

    #[test]
    fn ascii_operators() {
        assert_eq!(solve_arithmetic_puzzle("What is 9 - 11?"), Ok(-2));
        assert_eq!(solve_arithmetic_puzzle("What is 3 * 5?"), Ok(15));
    }

    #[test]
    fn garbage_is_rejected() {
        for bad in ["", "What is 4 + ?", "What is four + 2?", "Compute 1 + 1", "What is 1 / 2?", "What is 1 + 2 + 3?"] {
            assert!(solve_arithmetic_puzzle(bad).is_err(), "{bad}");
        }
    }
}

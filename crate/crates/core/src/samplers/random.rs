use crate::rng;
use crate::searchspace::{ParamAssignment, SearchSpace};

/// Independent draw from the prior. Every sampler that falls back to the
/// prior goes through this function, so fallbacks match random search
/// draw for draw.
pub fn random_suggest(space: &SearchSpace, seed: u64) -> ParamAssignment {
    space.sample_prior(&mut rng::stream(&[seed]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::default_autoft_space;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn draws_are_in_domain_and_deterministic(seed in any::<u64>()) {
            let space = default_autoft_space(3e-4).unwrap();
            let a = random_suggest(&space, seed);
            prop_assert!(space.validate(&a).is_ok());
            prop_assert_eq!(a, random_suggest(&space, seed));
        }
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Key of a named, splittable random stream.
///
/// Keys form a tree: `StreamKey::root(seed).derive("dropout").index(step)`.
/// Each key seeds a ChaCha8 generator, which is counter-based, so any
/// stream can be replayed from its key alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        Self(mix(seed))
    }

    pub fn derive(self, label: &str) -> Self {
        Self(mix(self.0 ^ mix(fnv1a(label.as_bytes()))))
    }

    pub fn index(self, i: u64) -> Self {
        Self(mix(self.0.rotate_left(17) ^ mix(i ^ 0x5851_f42d_4c95_7f2d)))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::collections::HashSet;

    #[test]
    fn derivation_is_pure() {
        let a = StreamKey::root(7).derive("layer0.attn").index(3);
        let b = StreamKey::root(7).derive("layer0.attn").index(3);
        assert_eq!(a, b);
        assert_eq!(a.rng().random::<u64>(), b.rng().random::<u64>());
    }

    #[test]
    fn siblings_are_distinct() {
        let root = StreamKey::root(1);
        let keys: HashSet<u64> = (0..1000)
            .map(|i| root.index(i).value())
            .chain(
                ["a", "b", "ab", "ba", ""]
                    .iter()
                    .map(|l| root.derive(l).value()),
            )
            .collect();
        assert_eq!(keys.len(), 1005);
        assert_ne!(
            StreamKey::root(1).derive("x"),
            StreamKey::root(2).derive("x")
        );
    }
}

"""Deterministic 64-bit PRNG used everywhere reproducibility matters.

splitmix64 is used instead of numpy's generators because it is trivial to
reimplement bit-exactly in any language, which keeps generated datasets,
initialized models and shuffle orders portable across implementations.
"""

_MASK64 = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + 0x9E3779B97F4A7C15) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def next_float(self) -> float:
        """Uniform double in [0, 1) from the 53 high bits."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def next_below(self, n: int) -> int:
        """Uniform-ish integer in [0, n). Modulo bias is irrelevant for the
        desk-scale ranges used here and keeps the mapping trivial to port."""
        if n <= 0:
            raise ValueError("next_below needs n >= 1")
        return self.next_u64() % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates, high index down."""
        for i in range(len(items) - 1, 0, -1):
            j = self.next_below(i + 1)
            items[i], items[j] = items[j], items[i]

"""Fixed-seed transcripts pinned in tests/golden (run this file to rebuild them)."""

from pathlib import Path

import numpy as np

from passive_causal.ooo_text import VARIANTS, expert_script, join_episodes, render, sample_episode

GOLDEN = Path(__file__).parent / "golden"
SEED = 20240611


def fixed_seed_transcript(variant: str, mode: str) -> str:
    rng = np.random.default_rng(SEED)
    episodes = [expert_script(sample_episode(("color", "shape", "texture"), rng), mode) for _ in range(3)]
    return join_episodes([render(e, VARIANTS[variant]) for e in episodes])


def cases():
    for variant in VARIANTS:
        for mode in ("fixed", "varied"):
            yield variant, mode, GOLDEN / f"seed_{variant}_{mode}.txt"


if __name__ == "__main__":
    for variant, mode, path in cases():
        path.write_text(fixed_seed_transcript(variant, mode), encoding="utf-8", newline="\n")
        print("wrote", path)

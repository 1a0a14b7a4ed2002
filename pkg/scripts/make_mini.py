"""Generate the bundled 30-user synthetic MovieLens-100K-layout dataset.

Ratings come from a small latent-taste model so that rankings carry signal:
``r = round(clip(mu + b_i + <p_u, q_i> + noise, 1, 5))``.  Output is
deterministic and written to ``src/pgrec/data/mini``.
"""

import argparse
from pathlib import Path

import numpy as np

GENRES = ["unknown", "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime", "Documentary",
          "Drama", "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller",
          "War", "Western"]
OCCUPATIONS = ["student", "writer", "artist", "engineer", "educator", "programmer", "librarian"]


def generate(out: Path, n_users=30, n_items=40, seed=7):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(n_users, 3))
    q = rng.normal(size=(n_items, 3))
    bias = rng.normal(scale=0.8, size=n_items)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for u in range(n_users):
        k = int(rng.integers(18, 31))
        for i in np.sort(rng.choice(n_items, size=k, replace=False)):
            r = 3.2 + bias[i] + p[u] @ q[i] * 0.6 + rng.normal(scale=0.4)
            lines.append(f"{u + 1}\t{i + 1}\t{int(np.clip(np.rint(r), 1, 5))}\t{880000000 + len(lines)}\n")
    (out / "u.data").write_text("".join(lines))
    (out / "u.user").write_text("".join(
        f"{u + 1}|{int(rng.integers(12, 70))}|{'MF'[int(rng.integers(2))]}|"
        f"{OCCUPATIONS[int(rng.integers(len(OCCUPATIONS)))]}|{10000 + u}\n" for u in range(n_users)))
    rows = []
    for i in range(n_items):
        flags = np.zeros(len(GENRES), dtype=int)
        flags[1 + rng.choice(len(GENRES) - 1, size=int(rng.integers(1, 4)), replace=False)] = 1
        year = int(rng.integers(1950, 1999))
        rows.append(f"{i + 1}|Synthetic Movie {i + 1} ({year})|01-Jan-{year}||http://example.invalid/{i + 1}|"
                    + "|".join(map(str, flags)) + "\n")
    (out / "u.item").write_text("".join(rows))
    return len(lines)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "src" / "pgrec" / "data" / "mini")
    args = ap.parse_args()
    print(f"wrote {generate(args.out)} ratings to {args.out}")

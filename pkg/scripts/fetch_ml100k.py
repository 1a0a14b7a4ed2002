"""Materialize MovieLens-100K in its native GroupLens layout.

GroupLens itself is not reachable from every build host, but the RecBole wheel
on PyPI bundles the full ML-100K interaction, user and item tables in its
"atomic" tab-separated format.  This script downloads that wheel with pip and
rewrites the three tables as ``u.data``, ``u.user`` and ``u.item`` so that
``pgrec.dataset.parse_movielens(path, "100K")`` can read them unchanged.

Only the release *year* survives in the atomic item table, so ``u.item``
release dates are written as ``01-Jan-<year>``; decade bucketing only needs
the year.

Usage::

    python scripts/fetch_ml100k.py [--out data/ml-100k]
"""

import argparse
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

RECBOLE = "recbole==1.2.1"
PREFIX = "recbole/dataset_example/ml-100k/ml-100k."

# u.genre order of the native distribution
GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
    "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
    "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
]


def _rows(raw: bytes):
    lines = io.TextIOWrapper(io.BytesIO(raw), encoding="latin-1").read().splitlines()
    return [line.split("\t") for line in lines[1:] if line]


def convert(wheel: Path, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(wheel) as zf:
        inter = _rows(zf.read(PREFIX + "inter"))
        users = _rows(zf.read(PREFIX + "user"))
        items = _rows(zf.read(PREFIX + "item"))

    with open(out / "u.data", "w", encoding="latin-1") as fh:
        for user, item, rating, ts in inter:
            fh.write(f"{user}\t{item}\t{int(float(rating))}\t{int(float(ts))}\n")

    with open(out / "u.user", "w", encoding="latin-1") as fh:
        for user, age, gender, occupation, zipcode in users:
            fh.write(f"{user}|{age}|{gender}|{occupation}|{zipcode}\n")

    with open(out / "u.item", "w", encoding="latin-1") as fh:
        for item, title, year, classes in items:
            flags = set(classes.split())
            bits = "|".join("1" if g in flags else "0" for g in GENRES)
            if year.isdigit():
                date, name = f"01-Jan-{year}", f"{title} ({year})"
            else:
                # item 267 has no title or date in the original file either
                date, name = "", "unknown"
            fh.write(f"{item}|{name}|{date}||http://us.imdb.com/|{bits}\n")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=Path("data/ml-100k"))
    parser.add_argument("--wheel", type=Path, help="use an already downloaded RecBole wheel")
    args = parser.parse_args(argv)

    if args.wheel is not None:
        convert(args.wheel, args.out)
    else:
        with tempfile.TemporaryDirectory() as tmp:
            subprocess.run(
                [sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp, RECBOLE],
                check=True,
            )
            convert(next(Path(tmp).glob("recbole-*.whl")), args.out)
    print(f"wrote ML-100K tables to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Fetch MovieLens 100K ratings into ``data/ml-100k/u.data``.

Tries the GroupLens archive first. If that host is unreachable, falls back
to the copy bundled inside the ``pytorch-widedeep`` 1.7.0 wheel on PyPI
(same 100,000 ratings, stored as parquet; needs pandas + pyarrow).
"""

import argparse
import io
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

GROUPLENS_URL = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
WHEEL_SPEC = "pytorch-widedeep==1.7.0"
WHEEL_MEMBER = "pytorch_widedeep/datasets/data/MovieLens100k_data.parquet.brotli"


def from_grouplens(timeout: float) -> bytes:
    with urllib.request.urlopen(GROUPLENS_URL, timeout=timeout) as resp:
        archive = zipfile.ZipFile(io.BytesIO(resp.read()))
    return archive.read("ml-100k/u.data")


def from_wheel() -> bytes:
    import pandas as pd

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp, WHEEL_SPEC],
                       check=True)
        wheel = next(Path(tmp).glob("*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            df = pd.read_parquet(io.BytesIO(zf.read(WHEEL_MEMBER)))
    df = df[["user_id", "movie_id", "rating", "timestamp"]]
    lines = (f"{u}\t{i}\t{r}\t{t}\n" for u, i, r, t in df.itertuples(index=False))
    return "".join(lines).encode("utf-8")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data/ml-100k/u.data")
    parser.add_argument("--timeout", type=float, default=20.0)
    args = parser.parse_args(argv)
    out = Path(args.out)
    if out.exists():
        print(f"{out} already exists")
        return 0
    try:
        payload = from_grouplens(args.timeout)
        source = "grouplens"
    except OSError as exc:
        print(f"GroupLens unavailable ({exc}); using the {WHEEL_SPEC} wheel", file=sys.stderr)
        payload = from_wheel()
        source = "wheel"
    n = payload.count(b"\n")
    if n != 100000:
        print(f"expected 100000 ratings, got {n}", file=sys.stderr)
        return 2
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(payload)
    print(f"wrote {n} ratings to {out} (from {source})")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Per-column count/mean/standard deviation over integer CSV tables.

This is the contracted operation the enclave runs. Integer sums keep the
arithmetic exact; mean and population standard deviation are each rounded
once, correctly, to the nearest float.
"""

from __future__ import annotations

import math
from fractions import Fraction

from . import codec

COLUMNS = ("age", "education_num", "hours_per_week", "capital_gain")
CANARY_PREFIX = b"# canary="


def generate_dataset(rng, rows: int = 500) -> tuple[bytes, bytes]:
    """Return ``(csv_bytes, canary)`` for one owner.

    Values follow the ranges of the UCI adult table's integer columns. The
    first line carries a unique 16-byte canary used for taint scanning.
    """
    canary = rng.bytes(16)
    lines = [CANARY_PREFIX + canary.hex().encode(), ",".join(COLUMNS).encode()]
    for _ in range(rows):
        gain = rng.randint(1, 99_999) if rng.random() < 0.08 else 0
        row = (rng.randint(17, 90), rng.randint(1, 16), rng.randint(1, 99), gain)
        lines.append(",".join(map(str, row)).encode())
    return b"\n".join(lines) + b"\n", canary


def parse_table(raw: bytes) -> tuple[list[str], list[list[int]]]:
    header = None
    rows = []
    for line in raw.decode().splitlines():
        if not line or line.startswith("#"):
            continue
        if header is None:
            header = line.split(",")
            continue
        rows.append([int(v) for v in line.split(",")])
    if header is None:
        raise ValueError("table has no header")
    return header, rows


def _sqrt_fraction(q: Fraction) -> float:
    """Correctly rounded float square root of a non-negative rational."""
    n, d = q.numerator, q.denominator
    if n == 0:
        return 0.0
    # scale so the integer root carries >= 64 significant bits; a sticky low
    # bit marks an inexact root so float() rounds correctly
    shift = max(0, 66 - (n.bit_length() - d.bit_length()) // 2)
    scaled_n = n << (2 * shift)
    root = math.isqrt(scaled_n // d)
    if root * root * d != scaled_n:
        root |= 1
    return math.ldexp(float(root), -shift)


def column_stats(tables: list[bytes]) -> dict:
    header = None
    sums: list[int] = []
    squares: list[int] = []
    count = 0
    for raw in tables:
        cols, rows = parse_table(raw)
        if header is None:
            header = cols
            sums = [0] * len(cols)
            squares = [0] * len(cols)
        elif cols != header:
            raise ValueError("tables disagree on columns")
        for row in rows:
            count += 1
            for i, v in enumerate(row):
                sums[i] += v
                squares[i] += v * v
    if not count:
        raise ValueError("no rows")
    means = [Fraction(s, count) for s in sums]
    variances = [Fraction(sq, count) - m * m for sq, m in zip(squares, means)]
    return {
        "columns": list(header),
        "count": count,
        "mean": [float(m) for m in means],
        "std": [_sqrt_fraction(v) for v in variances],
    }


def encode_result(stats: dict) -> bytes:
    return codec.encode(stats)


def decode_result(raw: bytes) -> dict:
    return codec.decode(raw)

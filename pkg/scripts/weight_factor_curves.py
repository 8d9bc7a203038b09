"""Plot the loss weight factor G(x, y) = -(1 - x)^y and report its spread.

For each exponent the spread max - min over x in [0, 0.99] is printed,
including negative exponents, so the claim that negative y "changes little"
can be checked against y = 1.

    python3 scripts/weight_factor_curves.py --out runs/figure4.png
"""

from __future__ import annotations

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from aneuseg.losses import weight_factor_G  # noqa: E402


def spreads(ys, x_max: float = 0.99, n_x: int = 101) -> dict[float, float]:
    xs = np.linspace(0.0, 1.0, n_x)
    xs = xs[xs <= x_max + 1e-12]
    return {float(y): float(np.ptp(weight_factor_G(xs, y))) for y in ys}


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", type=Path, default=Path("runs/figure4.png"))
    args = p.parse_args()

    pos = np.arange(1, 11) / 10
    neg = -pos
    for y, s in {**spreads(pos), **spreads(neg)}.items():
        print(f"y={y:+.1f} spread={s:.3f}")

    xs = np.linspace(0.0, 0.99, 100)
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    for y in pos:
        a.plot(xs, weight_factor_G(xs, y), label=f"{y:.1f}")
    for y in neg[:4]:
        b.plot(xs, weight_factor_G(xs, y), label=f"{y:.1f}")
    a.set_title("y > 0")
    b.set_title("y < 0")
    for ax in (a, b):
        ax.set_xlabel("x")
        ax.set_ylabel("G(x, y)")
        ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(args.out, dpi=120)
    print(f"figure written to {args.out}")


if __name__ == "__main__":
    main()

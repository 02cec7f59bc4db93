"""Plot dev/test F0.5 and QWK against gamma_aes from a sweep.txt file.

    python3 scripts/plot_sweep.py runs/directional/sweep.txt --out sweep.png

Needs matplotlib (``pip install .[plot]``).  The file is validated first, so
this doubles as a format checker for sweep outputs.
"""

import argparse
import math

from gedaes.training import read_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("sweep")
    ap.add_argument("--out", default="sweep.png")
    args = ap.parse_args()

    rows = read_sweep(args.sweep)
    gammas = [r.gamma_aes for r in rows]
    for r in rows:
        print(f"{r.gamma_aes:.1f}  dev F0.5 {r.dev_f_half:.3f}  dev QWK {r.dev_qwk:.3f}  test QWK {r.test_qwk:.3f}")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(gammas, [r.dev_f_half for r in rows], "o-", label="dev F0.5")
    ax.plot(gammas, [r.dev_qwk for r in rows], "s-", label="dev QWK")
    if not all(math.isnan(r.test_qwk) for r in rows):
        ax.plot(gammas, [r.test_qwk for r in rows], "s--", label="test QWK")
    ax.set_xlabel("gamma_aes")
    ax.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()

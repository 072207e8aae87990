#!/usr/bin/env python3
"""Plot checkpoint overhead and recovery speedup from `ftmine bench` CSV."""

import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd

COLUMNS = [
    "algo", "ft", "p", "theta_or_k", "fault", "total_time", "ckpt_time", "rec_time",
    "bytes", "peak_bytes", "checksum", "overhead_pct", "rec_speedup", "status",
]


def load(path):
    df = pd.read_csv(path)
    missing = [c for c in COLUMNS if c not in df.columns]
    if missing:
        raise SystemExit(f"{path}: missing columns {missing}")
    return df[df["status"] == "ok"]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("csv")
    ap.add_argument("--out", default="bench.png")
    args = ap.parse_args()
    df = load(args.csv)

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4))
    clean = df[(df["fault"] == "none") & (df["ft"] != "none")]
    for ft, g in clean.groupby("ft"):
        g = g.groupby("p")["overhead_pct"].mean()
        ax1.plot(g.index, g.values, marker="o", label=ft)
    ax1.set_xlabel("ranks")
    ax1.set_ylabel("overhead vs ft=none (%)")
    ax1.set_title("checkpoint overhead, fault-free")
    ax1.legend()

    faulted = df[(df["fault"] != "none") & df["rec_speedup"].notna()]
    for ft, g in faulted.groupby("ft"):
        g = g.groupby("fault")["rec_speedup"].mean()
        ax2.plot(g.index, g.values, marker="o", label=ft)
    ax2.set_xlabel("fault (rank@fraction)")
    ax2.set_ylabel("DFT recovery time / recovery time")
    ax2.set_title("recovery speedup over DFT")
    ax2.legend()

    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()

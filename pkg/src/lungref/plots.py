"""Static SVG rendering of the figure CSVs (best effort; the CSVs are the contract)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

SLR_STYLE = dict(color="tab:red", marker="^", linestyle="-")
GAMLSS_STYLE = dict(color="tab:blue", marker="o", linestyle="-")


def _save(fig, path: Path) -> None:
    matplotlib.rcParams["svg.hashsalt"] = "lungref"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def exceedance_svg(csv_path: Path, svg_path: Path, title: str) -> None:
    df = pd.read_csv(csv_path)
    mid = 0.5 * (df["age_lo"] + df["age_hi"])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.fill_between(mid, 100 * df["band_lo"], 100 * df["band_hi"], color="0.85", step="mid")
    ax.plot(mid, 100 * df["slr_proportion"], label="SLR", **SLR_STYLE)
    ax.plot(mid, 100 * df["gamlss_proportion"], label="GAMLSS", **GAMLSS_STYLE)
    ax.axhline(100 * df["level"].iloc[0], color="0.4", linewidth=0.8)
    ax.set_xlabel("age (years)")
    ax.set_ylabel("% below LLN")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, svg_path)


def qq_svg(csv_path: Path, svg_path: Path, title: str, reference_z: float) -> None:
    df = pd.read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.fill_between(df["theoretical_z"], df["band_lo_z"], df["band_hi_z"], color="0.85")
    ax.plot(df["theoretical_z"], df["slr_z"], linestyle="none", marker="^", color="tab:red", markersize=3, label="SLR")
    ax.plot(df["theoretical_z"], df["gamlss_z"], linestyle="none", marker="o", color="tab:blue", markersize=3,
            label="GAMLSS")
    lim = [df["theoretical_z"].min(), df["theoretical_z"].max()]
    ax.plot(lim, lim, color="0.3", linewidth=0.8)
    ax.axvline(reference_z, color="0.5", linewidth=0.8)
    ax.set_xlabel("theoretical quantile")
    ax.set_ylabel("z-score")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, svg_path)


def render_svgs(out: Path, report: dict) -> list[Path]:
    written = []
    for g in report["groups"]:
        key = f"{g['response']}_{g['sex']}"
        files = g["files"]
        first = next(k for k in files if k.startswith("exceedance_"))
        path = out / f"exceedance_{key}.svg"
        exceedance_svg(out / files[first], path, f"{g['response']} ({g['sex']})")
        written.append(path)
        path = out / f"qq_{key}.svg"
        qq = g["qq"]
        qq_svg(out / files["qq"], path, f"{g['response']} ({g['sex']}), ages {qq['age_lo']:g}-{qq['age_hi']:g}",
               qq["reference_z"])
        written.append(path)
    return written

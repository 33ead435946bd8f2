"""Synthetic survey / raster / imagery corpus with known ground truth.

Each cluster gets a wealth level 0..4 and a continuous position inside that
level. Households are drawn around the level's income, the exact aggregated
daily income is recorded, and both the nightlight value and the amount of
bright rectangular "structures" in the cluster's images are fixed monotone
functions of that income.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datapipe import DAYS_PER_YEAR, MONTHS_PER_YEAR, SURVEY_FIELDS, Raster, write_pgm, write_ppm

__all__ = [
    "N_LEVELS",
    "INCOME_RANGE",
    "STRUCTURE_THRESHOLD",
    "SynthCorpus",
    "intensity_of_income",
    "structure_fraction_of_income",
    "structure_fraction",
    "synth_generate",
]

N_LEVELS = 5
INCOME_RANGE = (50.0, 1000.0)
STRUCTURE_THRESHOLD = 170  # min channel value of a structure pixel; background stays below
_SPACING = 4


def _wealth_score(daily_income: float) -> float:
    lo, hi = INCOME_RANGE
    return min(max((daily_income - lo) / (hi - lo), 0.0), 1.0)


def intensity_of_income(daily_income: float) -> float:
    """Noise-free nightlight intensity in [0.05, 0.95]."""
    return 0.05 + 0.9 * _wealth_score(daily_income)


def structure_fraction_of_income(daily_income: float) -> float:
    """Target share of image pixels covered by structures."""
    return 0.04 + 0.5 * _wealth_score(daily_income)


def structure_fraction(image: np.ndarray) -> float:
    """Share of pixels whose darkest channel reaches :data:`STRUCTURE_THRESHOLD`."""
    return float((image.min(axis=2) >= STRUCTURE_THRESHOLD).mean())


@dataclass
class SynthCorpus:
    root: Path
    survey_csv: Path
    clusters_csv: Path
    raster_file: Path
    image_dir: Path
    truth_csv: Path
    truth: list  # dicts, one per cluster


def _households(rng: np.random.Generator, cid: str, target_daily: float):
    """Survey rows plus their exact annual totals (computed from the same numbers)."""
    rows, annual = [], []
    for h in range(int(rng.integers(3, 7))):
        total = target_daily * DAYS_PER_YEAR * rng.uniform(0.8, 1.2)
        shares = rng.dirichlet([6.0, 1.0, 1.0, 1.0, 1.0])
        present = rng.random(5) < np.array([1.0, 0.5, 0.4, 0.3, 0.5])
        shares = np.where(present, shares, 0.0)
        shares /= shares.sum()
        amounts = [round(total * s) for s in shares]
        monthly = amounts[0] // MONTHS_PER_YEAR
        values = [monthly] + amounts[1:]
        cells = [str(v) if p else "" for v, p in zip(values, present)]
        rows.append([f"{cid}_h{h}", cid, *cells])
        annual.append(monthly * MONTHS_PER_YEAR * present[0] + sum(v for v, p in zip(amounts[1:], present[1:]) if p))
    return rows, annual


def _render(rng: np.random.Generator, size: int, fraction: float) -> np.ndarray:
    base = rng.uniform([70, 80, 50], [110, 120, 90])
    img = base[None, None, :] + rng.uniform(-15, 15, size=(size, size, 3))
    mask = np.zeros((size, size), dtype=bool)
    lo, hi = max(2, size // 20), max(3, size // 6)
    target = fraction * size * size
    for _ in range(10000):
        if mask.sum() >= target:
            break
        h, w = rng.integers(lo, hi + 1, size=2)
        r, c = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        mask[r : r + h, c : c + w] = True
        img[r : r + h, c : c + w] = rng.uniform(190, 255) + rng.uniform(-8, 0, size=3)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synth_generate(out_dir, n_clusters: int = 200, images_per_cluster: int = 2,
                   image_size: int = 64, seed: int = 0, noise: float = 0.02) -> SynthCorpus:
    """Write a complete synthetic corpus under ``out_dir``.

    ``noise`` bounds the uniform perturbation added to each cluster's
    nightlight intensity before 8-bit quantization.
    """
    if min(n_clusters, images_per_cluster, image_size) < 1:
        raise ValueError("n_clusters, images_per_cluster and image_size must be >= 1")
    rng = np.random.default_rng(seed)
    root = Path(out_dir)
    image_dir = root / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    levels = rng.permutation(np.arange(n_clusters) % N_LEVELS)
    grid = math.ceil(math.sqrt(n_clusters))
    raster = np.zeros((grid * _SPACING + 1, grid * _SPACING + 1), dtype=np.uint8)
    lo, hi = INCOME_RANGE

    survey_rows, cluster_rows, truth = [], [], []
    for i in range(n_clusters):
        cid = f"c{i:04d}"
        level = int(levels[i])
        score = (level + rng.uniform(0.1, 0.9)) / N_LEVELS
        rows, annual = _households(rng, cid, lo + (hi - lo) * score)
        survey_rows.extend(rows)
        daily = math.fsum(annual) / len(annual) / DAYS_PER_YEAR

        clean = intensity_of_income(daily)
        noisy = min(max(clean + rng.uniform(-noise, noise), 0.0), 1.0) if noise > 0 else clean
        value = int(round(255 * noisy))
        row, col = 2 + _SPACING * (i // grid), 2 + _SPACING * (i % grid)
        raster[row - 1 : row + 2, col - 1 : col + 2] = value
        cluster_rows.append([cid, row, col])

        frac = structure_fraction_of_income(daily)
        for k in range(images_per_cluster):
            write_ppm(image_dir / f"{cid}_{k}.ppm", _render(rng, image_size, frac))
        truth.append({
            "cluster_id": cid,
            "level": level,
            "daily_income": daily,
            "intensity_clean": clean,
            "raster_value": value,
            "intensity": value / 255.0,
            "structure_fraction": frac,
        })

    survey_csv, clusters_csv = root / "survey.csv", root / "clusters.csv"
    raster_file, truth_csv = root / "nightlights.pgm", root / "truth.csv"
    with open(survey_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SURVEY_FIELDS)
        w.writerows(survey_rows)
    with open(clusters_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster_id", "raster_row", "raster_col"])
        w.writerows(cluster_rows)
    write_pgm(raster_file, Raster(raster))
    with open(truth_csv, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(truth[0]), lineterminator="\n")
        w.writeheader()
        for t in truth:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in t.items()})
    return SynthCorpus(root, survey_csv, clusters_csv, raster_file, image_dir, truth_csv, truth)

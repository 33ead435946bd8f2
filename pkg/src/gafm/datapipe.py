"""Survey, raster and image preparation.

Survey rows are aggregated to annual household income, averaged per cluster and
scaled to a daily figure. Nightlight intensity is the mean of a small window on
an 8-bit raster. Images are binary PPM files named ``<cluster_id>_<k>.ppm``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats

__all__ = [
    "DataError",
    "SurveyRow",
    "ClusterRecord",
    "Raster",
    "ManifestEntry",
    "Manifest",
    "LabelReport",
    "MONTHS_PER_YEAR",
    "DAYS_PER_YEAR",
    "METERS_PER_PIXEL",
    "SURVEY_FIELDS",
    "aggregate_household",
    "cluster_wealth",
    "sample_nightlight",
    "assign_labels",
    "read_survey",
    "read_clusters",
    "read_pgm",
    "write_pgm",
    "read_ppm",
    "write_ppm",
    "build_manifest",
    "read_manifest",
]

MONTHS_PER_YEAR = 12
DAYS_PER_YEAR = 365
METERS_PER_PIXEL = 500

SURVEY_FIELDS = (
    "household_id",
    "cluster_id",
    "monthly_primary_income",
    "annual_secondary_income",
    "annual_rent",
    "annual_pension",
    "annual_remittances",
)
CLUSTER_FIELDS = ("cluster_id", "raster_row", "raster_col")
MANIFEST_FIELDS = ("image_path", "cluster_id", "nightlight_target", "daily_income")


class DataError(ValueError):
    """Input data failed validation or could not be joined."""


@dataclass(frozen=True)
class SurveyRow:
    household_id: str
    cluster_id: str
    monthly_primary_income: Optional[float] = None
    annual_secondary_income: Optional[float] = None
    annual_rent: Optional[float] = None
    annual_pension: Optional[float] = None
    annual_remittances: Optional[float] = None

    def incomes(self) -> dict:
        return {f: getattr(self, f) for f in SURVEY_FIELDS[2:]}


@dataclass
class ClusterRecord:
    cluster_id: str
    household_count: int
    daily_income_per_house: float
    raster_row: int
    raster_col: int
    nightlight_intensity: float
    image_ids: list = field(default_factory=list)


@dataclass
class Raster:
    values: np.ndarray  # (height, width) uint8
    meters_per_pixel: int = METERS_PER_PIXEL

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise DataError(f"raster must be 2-D, got shape {self.values.shape}")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 255):
            raise DataError("raster values must lie in 0..255")
        self.values = self.values.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# survey


def aggregate_household(row: SurveyRow) -> float:
    """Annual household income: 12 x monthly primary plus the annual sources.

    Missing fields count as zero.
    """
    total = 0.0
    for name, value in row.incomes().items():
        if value is None:
            continue
        if value < 0 or not math.isfinite(value):
            raise DataError(f"household {row.household_id!r}: {name} = {value} is not a valid income")
        total += value * MONTHS_PER_YEAR if name == "monthly_primary_income" else value
    return total


def cluster_wealth(rows: Sequence[SurveyRow]) -> float:
    """Per-day, per-household income of one cluster."""
    if not rows:
        raise DataError("cluster has no households")
    annual = math.fsum(aggregate_household(r) for r in rows)
    return annual / len(rows) / DAYS_PER_YEAR


def _cell(value: str, field_name: str, line: int) -> Optional[float]:
    value = value.strip()
    if value == "":
        return None
    try:
        return float(value)
    except ValueError:
        raise DataError(f"line {line}: {field_name} = {value!r} is not a number") from None


def _read_csv(path, fields: Sequence[str]) -> list[dict]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or tuple(h.strip() for h in reader.fieldnames) != tuple(fields):
                raise DataError(f"{path}: header must be {','.join(fields)}, got {reader.fieldnames}")
            return list(reader)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def read_survey(path) -> list[SurveyRow]:
    rows = []
    for i, raw in enumerate(_read_csv(path, SURVEY_FIELDS), start=2):
        hid, cid = raw["household_id"].strip(), raw["cluster_id"].strip()
        if not hid or not cid:
            raise DataError(f"{path} line {i}: household_id and cluster_id must be non-empty")
        row = SurveyRow(hid, cid, *(_cell(raw[f], f, i) for f in SURVEY_FIELDS[2:]))
        aggregate_household(row)  # validates signs
        rows.append(row)
    return rows


def read_clusters(path) -> dict[str, tuple[int, int]]:
    out = {}
    for i, raw in enumerate(_read_csv(path, CLUSTER_FIELDS), start=2):
        cid = raw["cluster_id"].strip()
        try:
            rc = int(raw["raster_row"]), int(raw["raster_col"])
        except ValueError:
            raise DataError(f"{path} line {i}: raster_row/raster_col must be integers") from None
        if cid in out:
            raise DataError(f"{path} line {i}: duplicate cluster_id {cid!r}")
        out[cid] = rc
    return out


# ---------------------------------------------------------------------------
# PNM images


def _read_pnm(path, magic: bytes) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PNM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace before raster
    if tokens[0] != magic:
        raise DataError(f"{path}: expected {magic.decode()} file, found {tokens[0][:8]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DataError(f"{path}: malformed PNM header") from None
    if maxval != 255:
        raise DataError(f"{path}: maxval must be 255, got {maxval}")
    depth = 3 if magic == b"P6" else 1
    n = width * height * depth
    if len(data) - pos < n:
        raise DataError(f"{path}: pixel data truncated")
    arr = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos)
    return arr.reshape((height, width, 3) if depth == 3 else (height, width))


def _write_pnm(path, arr: np.ndarray, magic: bytes) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    h, w = arr.shape[:2]
    Path(path).write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + arr.tobytes())


def read_pgm(path) -> Raster:
    return Raster(_read_pnm(path, b"P5"))


def write_pgm(path, raster: Raster) -> None:
    _write_pnm(path, raster.values, b"P5")


def read_ppm(path) -> np.ndarray:
    """H x W x 3 uint8 array."""
    return _read_pnm(path, b"P6")


def write_ppm(path, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"PPM image must be H x W x 3, got {image.shape}")
    _write_pnm(path, image, b"P6")


# ---------------------------------------------------------------------------
# nightlights


def sample_nightlight(r: Raster, row: int, col: int, window: int = 3) -> float:
    """Mean raster value of a window centred on (row, col), clipped to the raster, over 255."""
    if window < 1 or window % 2 == 0:
        raise DataError(f"window must be a positive odd integer, got {window}")
    if not (0 <= row < r.height and 0 <= col < r.width):
        raise DataError(f"centre ({row}, {col}) outside {r.height} x {r.width} raster")
    half = window // 2
    patch = r.values[max(row - half, 0) : row + half + 1, max(col - half, 0) : col + half + 1]
    return float(patch.astype(np.float64).mean() / 255.0)


@dataclass
class LabelReport:
    spearman: float
    violations: list  # cluster ids whose income rank and intensity rank differ by > tolerance
    rank_tolerance: int
    clusters: list

    def summary(self) -> str:
        return (f"spearman(income, intensity) = {self.spearman:.4f}; "
                f"{len(self.violations)} cluster(s) beyond rank tolerance {self.rank_tolerance}")


def assign_labels(clusters: Sequence[ClusterRecord], rank_tolerance: Optional[int] = None) -> LabelReport:
    """Check that nightlight intensity orders clusters the way income does.

    Targets are left as the sampled intensities. The default tolerance is 10%
    of the cluster count (at least 1 rank).
    """
    clusters = list(clusters)
    n = len(clusters)
    tol = max(1, n // 10) if rank_tolerance is None else int(rank_tolerance)
    if n < 2:
        return LabelReport(float("nan"), [], tol, clusters)
    income = np.array([c.daily_income_per_house for c in clusters])
    light = np.array([c.nightlight_intensity for c in clusters])
    rho = float(stats.spearmanr(income, light).statistic)
    ri, rl = stats.rankdata(income), stats.rankdata(light)
    bad = [c.cluster_id for c, a, b in zip(clusters, ri, rl) if abs(a - b) > tol]
    return LabelReport(rho, bad, tol, clusters)


# ---------------------------------------------------------------------------
# manifest


@dataclass
class ManifestEntry:
    image_path: Path
    cluster_id: str
    nightlight_target: float
    daily_income: float


@dataclass
class Manifest:
    entries: list
    channel_mean: list
    channel_std: list
    seed: int
    clusters: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def cluster_ids(self) -> list:
        """Distinct cluster ids in first-appearance order."""
        return list(dict.fromkeys(e.cluster_id for e in self.entries))

    def group_index(self) -> np.ndarray:
        """Per-entry integer index into :attr:`cluster_ids`."""
        lookup = {c: i for i, c in enumerate(self.cluster_ids)}
        return np.array([lookup[e.cluster_id] for e in self.entries], dtype=np.int64)

    def targets(self) -> np.ndarray:
        return np.array([e.nightlight_target for e in self.entries], dtype=np.float64)

    def incomes(self) -> np.ndarray:
        return np.array([e.daily_income for e in self.entries], dtype=np.float64)

    def load_images(self, dtype=np.float32, indices: Optional[Iterable[int]] = None) -> np.ndarray:
        """N x 3 x H x W images scaled to [0, 1] then standardized per channel."""
        idx = range(len(self.entries)) if indices is None else indices
        raw = np.stack([read_ppm(self.entries[i].image_path) for i in idx])
        x = raw.astype(np.float64).transpose(0, 3, 1, 2) / 255.0
        mean = np.asarray(self.channel_mean)[None, :, None, None]
        std = np.asarray(self.channel_std)[None, :, None, None]
        return ((x - mean) / std).astype(dtype)

    def to_csv(self, base_dir) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for e in self.entries:
            rel = Path(os.path.relpath(e.image_path, base_dir)).as_posix()
            w.writerow([rel, e.cluster_id, repr(float(e.nightlight_target)), repr(float(e.daily_income))])
        return buf.getvalue()

    def stats_json(self) -> str:
        return json.dumps(
            {
                "channel_mean": [float(v) for v in self.channel_mean],
                "channel_std": [float(v) for v in self.channel_std],
                "n_clusters": len(self.cluster_ids),
                "n_images": len(self.entries),
                "seed": int(self.seed),
            },
            indent=2,
            sort_keys=True,
        ) + "\n"

    def write(self, path) -> Path:
        """Write the manifest CSV and its ``.stats.json`` sidecar; returns the sidecar path."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(path.parent))
        side = stats_path(path)
        side.write_text(self.stats_json())
        return side


def stats_path(manifest_path) -> Path:
    p = Path(manifest_path)
    return p.with_name(p.stem + ".stats.json")


def _channel_stats(paths: Sequence[Path]) -> tuple[list, list]:
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for p in paths:
        img = read_ppm(p).astype(np.float64) / 255.0
        total += img.sum(axis=(0, 1))
        total_sq += (img * img).sum(axis=(0, 1))
        count += img.shape[0] * img.shape[1]
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    std = np.sqrt(var)
    std[std == 0] = 1.0
    return mean.tolist(), std.tolist()


def build_manifest(survey_csv, clusters_csv, raster_file, image_dir, seed: int = 0,
                   window: int = 3) -> Manifest:
    """Join survey incomes, raster intensities and image files into a manifest."""
    rows = read_survey(survey_csv)
    coords = read_clusters(clusters_csv)
    raster = read_pgm(raster_file)

    by_cluster: dict[str, list] = defaultdict(list)
    for r in rows:
        by_cluster[r.cluster_id].append(r)

    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise DataError(f"image directory {image_dir} does not exist")
    images: dict[str, list] = defaultdict(list)
    for p in sorted(image_dir.glob("*.ppm")):
        cid, sep, _ = p.stem.rpartition("_")
        if not sep:
            raise DataError(f"image {p} is not named <cluster_id>_<k>.ppm")
        images[cid].append(p)

    problems = []
    for label, ids in (
        ("survey cluster_id(s) missing from clusters file", set(by_cluster) - set(coords)),
        ("image cluster_id(s) missing from clusters file", set(images) - set(coords)),
        ("cluster(s) without survey households", set(coords) - set(by_cluster)),
        ("cluster(s) without images", set(coords) - set(images)),
    ):
        if ids:
            problems.append(f"{label}: {', '.join(sorted(ids))}")
    if problems:
        raise DataError("join failed: " + "; ".join(problems))

    clusters, entries = [], []
    for cid in sorted(coords):
        row, col = coords[cid]
        rec = ClusterRecord(
            cluster_id=cid,
            household_count=len(by_cluster[cid]),
            daily_income_per_house=cluster_wealth(by_cluster[cid]),
            raster_row=row,
            raster_col=col,
            nightlight_intensity=sample_nightlight(raster, row, col, window),
            image_ids=[p.stem for p in images[cid]],
        )
        clusters.append(rec)
        for p in images[cid]:
            entries.append(ManifestEntry(p.resolve(), cid, rec.nightlight_intensity, rec.daily_income_per_house))

    mean, std = _channel_stats([e.image_path for e in entries])
    return Manifest(entries, mean, std, int(seed), clusters)


def read_manifest(path) -> Manifest:
    path = Path(path)
    side = stats_path(path)
    try:
        meta = json.loads(side.read_text())
    except OSError:
        raise DataError(f"manifest stats sidecar {side} is missing") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{side}: {exc}") from None
    entries = []
    for i, raw in enumerate(_read_csv(path, MANIFEST_FIELDS), start=2):
        img = (path.parent / raw["image_path"]).resolve()
        if not img.is_file():
            raise DataError(f"{path} line {i}: image file {img} does not exist")
        try:
            entries.append(ManifestEntry(img, raw["cluster_id"], float(raw["nightlight_target"]),
                                         float(raw["daily_income"])))
        except ValueError:
            raise DataError(f"{path} line {i}: non-numeric target") from None
    if not entries:
        raise DataError(f"{path}: manifest has no entries")
    return Manifest(entries, meta["channel_mean"], meta["channel_std"], int(meta["seed"]))

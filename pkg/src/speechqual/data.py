"""Manifest ingestion, label scales, dataset combination, splits and synthesis.

Manifests are CSV files with the header
``id,feature_path,mos,noi,col,dis,loud,scale,dataset,subset``; empty label
cells mean "absent".  Relative feature paths are resolved against the
manifest's directory so a manifest plus its feature files is relocatable.

Labels arrive on a declared scale and are normalized to [0.2, 1]: MOS 1-5
maps to v/5; the 0-10 MUSHRA-derived scale is first mapped linearly onto 1-5
via 1 + 0.4 v.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .features import FeatureStack, save_feature_stack

HEAD_COLUMNS = {"MOS": "mos", "NOI": "noi", "COL": "col", "DIS": "dis", "LOUD": "loud"}
MANIFEST_COLUMNS = (
    "id",
    "feature_path",
    "mos",
    "noi",
    "col",
    "dis",
    "loud",
    "scale",
    "dataset",
    "subset",
)
SCALE_BOUNDS = {
    "mos_1_5": (1.0, 5.0),
    "mushra_0_10": (0.0, 10.0),
    "normalized": (0.2, 1.0),
}
SUBSETS = ("train", "val", "test")


class ManifestError(ValueError):
    """Raised with file/row context when a manifest cannot be parsed."""


def normalize_label(v: float, scale: str) -> float:
    """Map a raw label on its declared scale into [0.2, 1]."""
    if scale not in SCALE_BOUNDS:
        raise ValueError(f"unknown scale {scale!r}; known: {sorted(SCALE_BOUNDS)}")
    lo, hi = SCALE_BOUNDS[scale]
    if not lo <= v <= hi:
        raise ValueError(f"label {v} outside {scale} bounds [{lo}, {hi}]")
    if scale == "mos_1_5":
        return v / 5.0
    if scale == "mushra_0_10":
        return (1.0 + 0.4 * v) / 5.0
    return v


def denormalize(q: float) -> float:
    """Inverse of mos_1_5 normalization: [0.2, 1] back onto the 1-5 scale."""
    if not 0.2 <= q <= 1.0:
        raise ValueError(f"normalized score {q} outside [0.2, 1]")
    return 5.0 * q


@dataclass(frozen=True)
class DatasetRecord:
    """One labeled utterance pointing at its WSQF feature file."""

    id: str
    feature_path: str
    labels: dict[str, float]  # head name -> raw label on `scale`
    scale: str
    dataset_tag: str
    subset: str

    def normalized(self) -> dict[str, float]:
        return {h: normalize_label(v, self.scale) for h, v in self.labels.items()}


@dataclass(frozen=True)
class CombinedDataset:
    """Training records of the selected tags plus their train-set sizes."""

    records: tuple[DatasetRecord, ...]
    counts: dict[str, int]
    selection: tuple[str, ...]

    @property
    def total(self) -> int:
        return sum(self.counts.values())


def parse_manifest(path: str | Path) -> list[DatasetRecord]:
    """Read a manifest CSV; errors carry the offending row and column."""
    path = Path(path)
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"{path}: missing required column(s) {missing}")
        for line, row in enumerate(reader, start=2):
            scale = row["scale"].strip()
            if scale not in SCALE_BOUNDS:
                raise ManifestError(f"{path}:{line}: unknown scale {scale!r}")
            subset = row["subset"].strip()
            if subset not in SUBSETS:
                raise ManifestError(f"{path}:{line}: unknown subset {subset!r}")
            if not row["dataset"].strip():
                raise ManifestError(f"{path}:{line}: empty dataset tag")
            labels = {}
            for head, col in HEAD_COLUMNS.items():
                cell = (row[col] or "").strip()
                if not cell:
                    continue
                try:
                    value = float(cell)
                except ValueError:
                    raise ManifestError(
                        f"{path}:{line}: column {col}: not a number: {cell!r}"
                    ) from None
                lo, hi = SCALE_BOUNDS[scale]
                if not lo <= value <= hi:
                    raise ManifestError(
                        f"{path}:{line}: column {col}: label {value} outside "
                        f"{scale} bounds [{lo}, {hi}]"
                    )
                labels[head] = value
            if "MOS" not in labels:
                raise ManifestError(f"{path}:{line}: missing required mos label")
            feature_path = row["feature_path"].strip()
            if feature_path and not Path(feature_path).is_absolute():
                feature_path = str((path.parent / feature_path).resolve())
            records.append(
                DatasetRecord(
                    id=row["id"].strip(),
                    feature_path=feature_path,
                    labels=labels,
                    scale=scale,
                    dataset_tag=row["dataset"].strip(),
                    subset=subset,
                )
            )
    return records


def write_manifest(records: list[DatasetRecord], path: str | Path) -> None:
    """Write records as a manifest CSV with feature paths relative to it."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for rec in records:
            feature_path = rec.feature_path
            try:
                feature_path = str(Path(feature_path).relative_to(path.parent.resolve()))
            except ValueError:
                pass
            cells = [rec.id, feature_path]
            for head in HEAD_COLUMNS:
                cells.append(repr(rec.labels[head]) if head in rec.labels else "")
            cells += [rec.scale, rec.dataset_tag, rec.subset]
            writer.writerow(cells)


def combine_datasets(records, selection) -> CombinedDataset:
    """Concatenate the train and val subsets of the selected dataset tags.

    counts holds the train-subset size per tag (the "train points" of a
    selection); validation records ride along so tags with predefined
    validation sets keep them through split_validation.
    """
    selection = tuple(selection)
    if not selection:
        raise ValueError("selection must contain at least one dataset tag")
    available = {r.dataset_tag for r in records}
    unknown = [tag for tag in selection if tag not in available]
    if unknown:
        raise ValueError(f"unknown dataset tag(s) {unknown}; available: {sorted(available)}")
    chosen = tuple(
        r for r in records if r.dataset_tag in selection and r.subset in ("train", "val")
    )
    counts = {tag: sum(1 for r in chosen if r.dataset_tag == tag and r.subset == "train")
              for tag in selection}
    return CombinedDataset(records=chosen, counts=counts, selection=selection)


def split_validation(ds: CombinedDataset, fraction: float = 0.10, seed: int = 0):
    """Deterministic stratified train/val split.

    Tags that ship a predefined val subset are passed through untouched; for
    the rest, round(fraction * n) of their train records are moved to
    validation, chosen per tag from a seeded generator.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    train: list[DatasetRecord] = []
    val: list[DatasetRecord] = []
    for tag in ds.selection:
        tag_records = [r for r in ds.records if r.dataset_tag == tag]
        predefined = [r for r in tag_records if r.subset == "val"]
        tag_train = [r for r in tag_records if r.subset == "train"]
        if predefined:
            train.extend(tag_train)
            val.extend(predefined)
            continue
        n = len(tag_train)
        if n < 10:
            raise ValueError(
                f"dataset {tag}: {n} train records is too few to carve a "
                f"{fraction:.0%} validation split (need >= 10)"
            )
        k = int(round(fraction * n))
        rng = np.random.default_rng([seed, zlib.crc32(tag.encode())])
        chosen = set(rng.choice(n, size=k, replace=False).tolist())
        train.extend(r for i, r in enumerate(tag_train) if i not in chosen)
        val.extend(r for i, r in enumerate(tag_train) if i in chosen)
    return train, val


def make_batches(records, batch_size: int = 128, seed: int = 0, epoch: int = 0):
    """Epoch-dependent deterministic shuffle, sliced into batches of batch_size."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    records = list(records)
    if not records:
        raise ValueError("empty dataset")
    perm = np.random.default_rng([seed, 0xB47C, epoch]).permutation(len(records))
    shuffled = [records[i] for i in perm]
    return [shuffled[i : i + batch_size] for i in range(0, len(shuffled), batch_size)]


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic dataset with known ground-truth quality."""

    n: int
    dims: tuple[int, int, int] = (3, 12, 8)
    noise_sd: float = 0.0
    seed: int = 0
    tag: str = "SYNTH"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if any(d <= 0 for d in self.dims):
            raise ValueError(f"dims must all be positive, got {self.dims}")


@dataclass(frozen=True)
class SynthResult:
    records: tuple[DatasetRecord, ...]
    planted: np.ndarray  # the scalar signal level behind each sample's labels


# Secondary quality dimensions are monotone warps of the same planted scalar,
# so multi-head labels are mutually correlated but not identical.
_HEAD_WARPS = {"MOS": (1.0, 0.0), "NOI": (0.8, 0.3), "COL": (1.2, -0.3),
               "DIS": (1.0, 0.5), "LOUD": (0.9, -0.5)}
_FEATURE_NOISE_SD = 0.25
_PLANTED_RANGE = 3.0


def planted_quality(level: np.ndarray, head: str = "MOS") -> np.ndarray:
    """Ground-truth normalized score as a function of the planted level."""
    gain, shift = _HEAD_WARPS[head]
    return 0.2 + 0.8 / (1.0 + np.exp(-(gain * np.asarray(level) + shift)))


def synth_dataset(spec: SynthSpec, out_dir: str | Path) -> SynthResult:
    """Generate labeled WSQF stacks whose quality follows a planted scalar.

    Layer l of each stack carries the planted level along a fixed random
    direction with a layer-specific gain, plus feature noise, so the level is
    linearly recoverable and fusion weights are identifiable.  Labels get
    i.i.d. gaussian noise of sd noise_sd, then clip to [0.2, 1].
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    layers, frames, feats = spec.dims
    world = np.random.default_rng([spec.seed, 0x5EED])
    patterns = world.normal(size=(layers, feats))
    patterns /= np.linalg.norm(patterns, axis=1, keepdims=True)
    gains = np.linspace(0.4, 1.0, layers)

    rng = np.random.default_rng([spec.seed, 0xDA7A])
    levels = rng.uniform(-_PLANTED_RANGE, _PLANTED_RANGE, size=spec.n)
    records = []
    for i in range(spec.n):
        signal = levels[i] * gains[:, None, None] * patterns[:, None, :]
        noise = _FEATURE_NOISE_SD * rng.normal(size=(layers, frames, feats))
        stack = FeatureStack(
            (signal + noise).astype(np.float32), valid_frames=frames
        )
        name = f"{spec.tag.lower()}_{i:05d}.wsqf"
        save_feature_stack(stack, out_dir / name)
        labels = {}
        for head in _HEAD_WARPS:
            q = float(planted_quality(levels[i], head))
            if spec.noise_sd > 0:
                q += spec.noise_sd * rng.normal()
            labels[head] = float(np.clip(q, 0.2, 1.0))
        records.append(
            DatasetRecord(
                id=f"{spec.tag.lower()}_{i:05d}",
                feature_path=str((out_dir / name).resolve()),
                labels=labels,
                scale="normalized",
                dataset_tag=spec.tag,
                subset="train",
            )
        )
    return SynthResult(records=tuple(records), planted=levels)


def with_subset(records, subset: str):
    """Copies of records with their subset field replaced."""
    if subset not in SUBSETS:
        raise ValueError(f"unknown subset {subset!r}")
    return [replace(r, subset=subset) for r in records]


@dataclass(frozen=True)
class SummaryRow:
    tag: str
    count: int
    q_min: float
    q_mean: float
    q_max: float
    histogram: tuple[int, ...]


@dataclass(frozen=True)
class DistributionSummary:
    """Per-tag stats of normalized MOS plus a COMBINED row, 20 bins on [0.2, 1]."""

    rows: tuple[SummaryRow, ...]

    def to_csv(self) -> str:
        bins = len(self.rows[0].histogram) if self.rows else 20
        header = "dataset,count,min,mean,max," + ",".join(
            f"bin_{i:02d}" for i in range(bins)
        )
        lines = [header]
        for row in self.rows:
            lines.append(
                f"{row.tag},{row.count},{row.q_min!r},{row.q_mean!r},{row.q_max!r},"
                + ",".join(str(c) for c in row.histogram)
            )
        return "\n".join(lines) + "\n"


def _summary_row(tag: str, values: np.ndarray, bins: int) -> SummaryRow:
    hist, _ = np.histogram(values, bins=bins, range=(0.2, 1.0))
    return SummaryRow(
        tag=tag,
        count=values.size,
        q_min=float(values.min()),
        q_mean=float(values.mean()),
        q_max=float(values.max()),
        histogram=tuple(int(c) for c in hist),
    )


def distribution_summary(records, bins: int = 20) -> DistributionSummary:
    """Min/mean/max and histogram of normalized MOS per dataset tag."""
    records = list(records)
    if not records:
        raise ValueError("empty dataset")
    by_tag: dict[str, list[float]] = {}
    for rec in records:
        by_tag.setdefault(rec.dataset_tag, []).append(rec.normalized()["MOS"])
    rows = [
        _summary_row(tag, np.asarray(values), bins)
        for tag, values in sorted(by_tag.items())
    ]
    combined = np.asarray([q for values in by_tag.values() for q in values])
    rows.append(_summary_row("COMBINED", combined, bins))
    return DistributionSummary(rows=tuple(rows))

"""Late fusion of per-modality class probabilities.

Scores file grammar (UTF-8, one sample per line, fields separated by
whitespace)::

    line     := sample_id SP modality SP probs [SP label]
    probs    := decimal ("," decimal)*
    modality := color | depth | ir | normals | optical_flow | synthetic

``label`` is the optional ground-truth class index.  Lines that are empty or
start with ``#`` are skipped.  Each row must be a probability vector: entries
in [0, 1] summing to 1 within 1e-6.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .data import MODALITIES
from .errors import DimensionError, FormatError, UsageError, ValidationError

RULES = ("sum", "max")
FILE_TOLERANCE = 1e-6


@dataclass
class ProbabilityDistribution:
    probs: np.ndarray
    modality: str = "synthetic"
    tol: float = field(default=1e-9, repr=False)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64).reshape(-1)
        if self.modality not in MODALITIES:
            raise ValidationError(f"unknown modality {self.modality!r}")
        p = self.probs
        if p.size == 0 or not np.isfinite(p).all():
            raise ValidationError("probabilities must be a non-empty finite vector")
        if (p < 0).any():
            raise ValidationError(f"negative probability in {p}")
        if abs(math.fsum(p) - 1.0) > self.tol:
            raise ValidationError(f"probabilities sum to {math.fsum(p)!r}, not 1")

    @property
    def n(self) -> int:
        return self.probs.size


@dataclass
class FusionResult:
    predicted: int
    aggregate_scores: np.ndarray
    contributing_modalities: list


def late_fuse(inputs: Sequence[ProbabilityDistribution], rule: str = "sum") -> FusionResult:
    """Combine per-modality scores and take the arg max.

    ``sum`` adds the probability vectors; ``max`` takes the coordinate-wise
    maximum.  Sums are exactly rounded, so the result does not depend on
    input order.  Ties go to the lowest class index.
    """
    if rule not in RULES:
        raise UsageError(f"rule must be one of {RULES}, got {rule!r}")
    if not inputs:
        raise UsageError("late_fuse needs at least one input")
    n = inputs[0].n
    for d in inputs:
        if not isinstance(d, ProbabilityDistribution):
            raise ValidationError(f"expected ProbabilityDistribution, got {type(d).__name__}")
        if d.n != n:
            raise DimensionError(f"class count mismatch: {d.n} != {n}")
    stacked = np.stack([d.probs for d in inputs])
    if rule == "sum":
        agg = np.array([math.fsum(stacked[:, j]) for j in range(n)])
    else:
        agg = stacked.max(axis=0)
    return FusionResult(int(np.argmax(agg)), agg, sorted(d.modality for d in inputs))


def fuse_accuracy(per_sample: Iterable[tuple[Sequence[ProbabilityDistribution], int]], rule: str = "sum") -> float:
    per_sample = list(per_sample)
    if not per_sample:
        raise UsageError("fuse_accuracy needs at least one sample")
    hits = sum(late_fuse(dists, rule).predicted == int(label) for dists, label in per_sample)
    return hits / len(per_sample)


# --- scores files -----------------------------------------------------------------

@dataclass
class ScoreRow:
    sample_id: str
    dist: ProbabilityDistribution
    label: Optional[int] = None


def format_score_row(sample_id: str, probs: Sequence[float], modality: str, label: Optional[int] = None) -> str:
    body = ",".join(repr(float(p)) for p in probs)
    line = f"{sample_id} {modality} {body}"
    return line if label is None else f"{line} {int(label)}"


def write_scores(path: Union[str, os.PathLike], rows: Iterable[ScoreRow]) -> None:
    lines = [format_score_row(r.sample_id, r.dist.probs, r.dist.modality, r.label) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_scores(text: str) -> list[ScoreRow]:
    rows = []
    n = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise FormatError(f"expected 'id modality probs [label]', got {line!r}", offset=lineno)
        sid, modality, body = parts[:3]
        try:
            probs = [float(tok) for tok in body.split(",")]
        except ValueError:
            raise FormatError(f"non-numeric probability in {body!r}", offset=lineno) from None
        if n is None:
            n = len(probs)
        elif len(probs) != n:
            raise FormatError(f"row has {len(probs)} classes, earlier rows have {n}", offset=lineno)
        label = None
        if len(parts) == 4:
            try:
                label = int(parts[3])
            except ValueError:
                raise FormatError(f"bad label {parts[3]!r}", offset=lineno) from None
            if not 0 <= label < len(probs):
                raise FormatError(f"label {label} outside [0, {len(probs)})", offset=lineno)
        try:
            dist = ProbabilityDistribution(probs, modality, tol=FILE_TOLERANCE)
        except ValidationError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from None
        rows.append(ScoreRow(sid, dist, label))
    return rows


def read_scores(path: Union[str, os.PathLike]) -> list[ScoreRow]:
    return parse_scores(Path(path).read_text(encoding="utf-8"))


def align_scores(
    tables: Sequence[Sequence[ScoreRow]], labels: Optional[dict] = None
) -> list[tuple[list[ProbabilityDistribution], int]]:
    """Join score tables on sample id, in the first table's order.

    Labels come from ``labels`` when given, otherwise from the rows; every
    table that carries a label for a sample must agree.
    """
    if not tables:
        raise UsageError("no score tables given")
    indexed = []
    for table in tables:
        by_id = {}
        for r in table:
            if r.sample_id in by_id:
                raise ValidationError(f"duplicate sample id {r.sample_id!r}")
            by_id[r.sample_id] = r
        indexed.append(by_id)
    ids = [r.sample_id for r in tables[0]]
    for k, by_id in enumerate(indexed[1:], start=2):
        if set(by_id) != set(ids):
            raise ValidationError(f"score table {k} covers different samples than table 1")
    out = []
    for sid in ids:
        rows = [by_id[sid] for by_id in indexed]
        if labels is not None:
            if sid not in labels:
                raise ValidationError(f"no label for sample {sid!r}")
            label = int(labels[sid])
        else:
            seen = {r.label for r in rows if r.label is not None}
            if not seen:
                raise ValidationError(f"no label for sample {sid!r}")
            if len(seen) > 1:
                raise ValidationError(f"conflicting labels {sorted(seen)} for sample {sid!r}")
            label = seen.pop()
        out.append(([r.dist for r in rows], label))
    return out

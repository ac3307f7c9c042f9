"""Longitudinal subjects, converter/stable labelling, splits and a seeded
synthetic cohort whose statistics follow the ADNI rs-fMRI cohort
(303 subjects, 53 converters, irregular gaps averaging 14.78 months)."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .connectome import (BoldMatrix, BrainGraph, FCMatrix, extract_roi_timeseries, pearson_fc,
                         read_edges_csv, read_fc_csv, read_labels_csv, read_timeseries_csv,
                         write_edges_csv, write_fc_csv, write_labels_csv, write_timeseries_csv)

__all__ = [
    "Diagnosis", "Visit", "Subject", "CohortConfig", "ConfigError", "SplitError",
    "STABLE", "CONVERTER", "REVERTER", "label_subject", "filter_cohort", "pretrain_split",
    "kfold_split", "generate_synthetic_cohort", "compute_fc", "write_manifest", "read_manifest",
    "iter_manifest",
    "DEFAULT_VISIT_COUNTS",
]

STABLE, CONVERTER, REVERTER = "stable", "converter", "reverter"


class ConfigError(ValueError):
    pass


class SplitError(ValueError):
    pass


class Diagnosis(IntEnum):
    CN = 0
    MCI = 1
    AD = 2

    @classmethod
    def parse(cls, value) -> "Diagnosis":
        if isinstance(value, Diagnosis):
            return value
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(int(value))


@dataclass
class Visit:
    diagnosis: Diagnosis
    month_offset: float
    bold: BoldMatrix | None = None
    fc: FCMatrix | None = None
    graph: BrainGraph | None = None
    labels: np.ndarray | None = None  # voxel -> ROI ids when bold is voxel-level


@dataclass
class Subject:
    id: str
    visits: list[Visit]

    @property
    def diagnoses(self) -> list[Diagnosis]:
        return [v.diagnosis for v in self.visits]

    @property
    def label(self) -> str:
        return label_subject(self.diagnoses)

    @property
    def transition(self) -> tuple[Diagnosis, Diagnosis]:
        return self.visits[-2].diagnosis, self.visits[-1].diagnosis

    def check(self) -> None:
        offsets = [v.month_offset for v in self.visits]
        if offsets and offsets[0] != 0:
            raise ValueError(f"{self.id}: first visit offset must be 0, got {offsets[0]}")
        if any(b <= a for a, b in zip(offsets, offsets[1:])):
            raise ValueError(f"{self.id}: visit offsets must be strictly increasing")


def label_subject(diagnoses: Sequence) -> str:
    """Compare the last two diagnoses under CN < MCI < AD."""
    if len(diagnoses) < 2:
        raise ValueError("at least two visits are required to label a subject")
    prev, last = Diagnosis.parse(diagnoses[-2]), Diagnosis.parse(diagnoses[-1])
    if last > prev:
        return CONVERTER
    if last < prev:
        return REVERTER
    return STABLE


def filter_cohort(subjects: Iterable[Subject]) -> list[Subject]:
    """Drop subjects with fewer than two visits and reverters."""
    return [s for s in subjects if len(s.visits) >= 2 and s.label != REVERTER]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def pretrain_split(subjects: Sequence[Subject], fraction: float = 0.2,
                   seed: int = 0) -> tuple[list[Subject], list[Subject]]:
    """Subject-level random split into (pretrain, main)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    n = len(subjects)
    if n < 2:
        raise ValueError("need at least two subjects to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_pre = _round_half_up(fraction * n)
    pre = sorted(perm[:n_pre].tolist())
    main = sorted(perm[n_pre:].tolist())
    return [subjects[i] for i in pre], [subjects[i] for i in main]


def kfold_split(subjects: Sequence[Subject], k: int = 5, seed: int = 0) -> list[list[str]]:
    """Stratified (stable/converter) k-fold split of subject ids.

    Converters are dealt round-robin first and stable subjects continue from
    the next fold, so both fold sizes and per-fold converter counts differ by
    at most one.  With fewer than ``k`` converters some folds get none; the
    split still runs but warns.
    """
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    n = len(subjects)
    if n < k:
        raise SplitError(f"cannot make {k} folds from {n} subjects")
    rng = np.random.default_rng(seed)
    ids = [s.id for s in subjects]
    conv = [i for i, s in enumerate(subjects) if s.label == CONVERTER]
    stable = [i for i, s in enumerate(subjects) if s.label != CONVERTER]
    if len(conv) < k:
        warnings.warn(f"only {len(conv)} converters for {k} folds; some folds are unstratified",
                      stacklevel=2)
    order = [conv[i] for i in rng.permutation(len(conv))]
    order += [stable[i] for i in rng.permutation(len(stable))]
    folds: list[list[str]] = [[] for _ in range(k)]
    for pos, i in enumerate(order):
        folds[pos % k].append(ids[i])
    return folds


# ---------------------------------------------------------------------------
# synthetic cohort

# Approximates the visit-count histogram of the ADNI rs-fMRI cohort: most
# subjects have 2-4 scans, histories beyond 7 are rare (mean ~3.6 scans).
DEFAULT_VISIT_COUNTS = {2: 0.30, 3: 0.27, 4: 0.19, 5: 0.10, 6: 0.07, 7: 0.04,
                        8: 0.015, 9: 0.01, 10: 0.005}


@dataclass
class CohortConfig:
    n_subjects: int = 303
    converter_fraction: float = 53 / 303
    cn_to_mci_fraction: float = 16 / 53  # remaining converters are MCI -> AD
    stable_diagnosis_probs: tuple[float, float, float] = (0.40, 0.40, 0.20)
    visit_count_distribution: dict[int, float] = field(default_factory=lambda: dict(DEFAULT_VISIT_COUNTS))
    mean_gap_months: float = 14.78
    gap_jitter: float = 1 / math.sqrt(2)  # coefficient of variation of the Gamma gap law
    roi_count: int = 100
    timepoints: int = 600
    n_networks: int = 10
    effect_size: float = 1.0
    drift_fraction: float = 0.5
    subject_noise: float = 0.02
    visit_noise: float = 0.01
    voxels_per_roi: int = 1
    seed: int = 0

    def validate(self) -> None:
        probs = np.array(list(self.visit_count_distribution.values()), dtype=float)
        if np.any(probs < 0) or not np.isclose(probs.sum(), 1.0):
            raise ConfigError("visit_count_distribution must be a probability histogram")
        if min(self.visit_count_distribution) < 2:
            raise ConfigError("visit counts must be at least 2")
        sd = np.asarray(self.stable_diagnosis_probs, dtype=float)
        if sd.shape != (3,) or np.any(sd < 0) or not np.isclose(sd.sum(), 1.0):
            raise ConfigError("stable_diagnosis_probs must be 3 probabilities summing to 1")
        if self.mean_gap_months <= 0 or self.gap_jitter <= 0:
            raise ConfigError("gap mean and jitter must be positive")
        if self.effect_size < 0:
            raise ConfigError("effect_size must be non-negative")
        if not 0 <= self.converter_fraction <= 1 or not 0 <= self.cn_to_mci_fraction <= 1:
            raise ConfigError("fractions must lie in [0, 1]")
        if self.n_subjects < 1 or self.roi_count < 2 or self.timepoints < 3:
            raise ConfigError("need n_subjects >= 1, roi_count >= 2, timepoints >= 3")
        if not 1 <= self.n_networks <= self.roi_count:
            raise ConfigError("n_networks must lie in [1, roi_count]")
        if self.voxels_per_roi < 1:
            raise ConfigError("voxels_per_roi must be >= 1")

    @property
    def n_converters(self) -> int:
        return _round_half_up(self.converter_fraction * self.n_subjects)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stable_diagnosis_probs"] = list(self.stable_diagnosis_probs)
        d["visit_count_distribution"] = {str(k): v for k, v in self.visit_count_distribution.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CohortConfig":
        d = dict(d)
        if "visit_count_distribution" in d:
            d["visit_count_distribution"] = {int(k): float(v) for k, v in d["visit_count_distribution"].items()}
        if "stable_diagnosis_probs" in d:
            d["stable_diagnosis_probs"] = tuple(d["stable_diagnosis_probs"])
        return cls(**d)


class _Templates:
    """Latent-network loading templates indexed by a continuous severity.

    Severity 0, 1, 2 correspond to CN, MCI, AD.  Increasing severity weakens
    within-network coupling in a subset of networks and strengthens coupling
    between another pair, scaled by ``effect_size``.
    """

    def __init__(self, cfg: CohortConfig, rng: np.random.Generator):
        r, q = cfg.roi_count, cfg.n_networks
        self.network = np.arange(r) * q // r
        base = np.zeros((r, q))
        base[np.arange(r), self.network] = 0.75 + 0.15 * rng.random(r)
        base += 0.05 * rng.standard_normal((r, q))
        shift = np.zeros((r, q))
        affected = self.network < max(1, q // 2)
        shift[affected, self.network[affected]] = -0.3
        a, b = min(q - 1, max(1, q // 2)), min(q - 1, max(1, q // 2) + 1)
        shift[self.network == a, b] += 0.25
        shift[self.network == b, a] += 0.25
        self.base, self.shift = base, shift * cfg.effect_size

    def loadings(self, severity: float) -> np.ndarray:
        return self.base + severity * self.shift


def _gap_sampler(cfg: CohortConfig, rng: np.random.Generator, size) -> np.ndarray:
    shape = 1.0 / cfg.gap_jitter ** 2
    return rng.gamma(shape, cfg.mean_gap_months / shape, size=size)


def generate_synthetic_cohort(config: CohortConfig | None = None) -> list[Subject]:
    """Seeded synthetic cohort with raw BOLD matrices per visit.

    Stable subjects keep their diagnosis for every visit.  Converters hold
    stage ``d`` until their last observed visit, whose connectivity sits
    ``drift_fraction`` of the way toward stage ``d + 1``; the target visit is
    at ``d + 1``.  With ``effect_size=0`` all stages share one template.
    """
    cfg = config or CohortConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    templates = _Templates(cfg, rng)

    n = cfg.n_subjects
    n_conv = cfg.n_converters
    if n_conv > n:
        raise ConfigError("more converters than subjects")
    n_cn_mci = _round_half_up(cfg.cn_to_mci_fraction * n_conv)
    is_conv = np.zeros(n, dtype=bool)
    is_conv[rng.permutation(n)[:n_conv]] = True
    conv_from = [Diagnosis.CN] * n_cn_mci + [Diagnosis.MCI] * (n_conv - n_cn_mci)
    conv_from = [conv_from[i] for i in rng.permutation(n_conv)]

    counts_support = np.array(sorted(cfg.visit_count_distribution))
    counts_p = np.array([cfg.visit_count_distribution[c] for c in counts_support])
    counts_p = counts_p / counts_p.sum()

    r, t, q = cfg.roi_count, cfg.timepoints, cfg.n_networks
    labels = np.repeat(np.arange(r), cfg.voxels_per_roi) if cfg.voxels_per_roi > 1 else None
    subjects: list[Subject] = []
    conv_iter = iter(conv_from)
    for s in range(n):
        n_visits = int(rng.choice(counts_support, p=counts_p))
        gaps = _gap_sampler(cfg, rng, n_visits - 1)
        offsets = np.concatenate([[0.0], np.cumsum(gaps)])
        if is_conv[s]:
            d0 = next(conv_iter)
            diags = [d0] * (n_visits - 1) + [Diagnosis(d0 + 1)]
            severity = [float(d0)] * (n_visits - 1) + [float(d0 + 1)]
            severity[-2] = d0 + cfg.drift_fraction
        else:
            d0 = Diagnosis(int(rng.choice(3, p=cfg.stable_diagnosis_probs)))
            diags = [d0] * n_visits
            severity = [float(d0)] * n_visits
        subject_dev = cfg.subject_noise * rng.standard_normal((r, q))
        visits = []
        for v in range(n_visits):
            load = templates.loadings(severity[v]) + subject_dev
            load = load + cfg.visit_noise * rng.standard_normal((r, q))
            factors = rng.standard_normal((t, q))
            signal = factors @ load.T + rng.standard_normal((t, r))
            if labels is not None:
                signal = np.repeat(signal, cfg.voxels_per_roi, axis=1)
                signal = signal + 0.5 * rng.standard_normal(signal.shape)
                bold = BoldMatrix(signal, channel_kind="voxel")
            else:
                bold = BoldMatrix(signal, channel_kind="roi")
            visits.append(Visit(diags[v], float(offsets[v]), bold=bold,
                                labels=None if labels is None else labels))
        subjects.append(Subject(f"sub-{s:04d}", visits))
    return subjects


def compute_fc(subjects: Iterable[Subject], drop_bold: bool = False) -> None:
    """Fill ``visit.fc`` from ``visit.bold`` in place."""
    for subj in subjects:
        for v in subj.visits:
            if v.bold is None:
                raise ValueError(f"{subj.id}: visit at month {v.month_offset:g} has no BOLD data")
            ts = v.bold
            if ts.channel_kind == "voxel":
                if v.labels is None:
                    raise ValueError(f"{subj.id}: voxel-level BOLD needs parcel labels")
                ts = extract_roi_timeseries(ts, v.labels)
            v.fc = pearson_fc(ts)
            if drop_bold:
                v.bold = None


# ---------------------------------------------------------------------------
# manifest


def write_manifest(subjects: Sequence[Subject], out_dir, kind: str = "bold",
                   bold_fmt: str = "%.10g") -> Path:
    """Write ``manifest.json`` plus one CSV per visit under ``out_dir``.

    ``kind`` selects what is written per visit: ``"bold"`` time series,
    ``"fc"`` matrices, or ``"graph"`` (FC matrix plus edge list).  Paths in
    the manifest are relative to ``out_dir``.
    """
    out = Path(out_dir)
    (out / kind).mkdir(parents=True, exist_ok=True)
    entries = []
    for subj in subjects:
        visits = []
        for i, v in enumerate(subj.visits):
            rel = f"{kind}/{subj.id}_v{i:02d}.csv"
            item = {"month_offset": v.month_offset, "diagnosis": v.diagnosis.name}
            if kind == "bold":
                write_timeseries_csv(out / rel, v.bold, fmt=bold_fmt)
                item["bold_path"] = rel
                if v.bold.channel_kind == "voxel":
                    lrel = f"{kind}/{subj.id}_v{i:02d}_labels.csv"
                    write_labels_csv(out / lrel, v.labels)
                    item["labels_path"] = lrel
            elif kind in ("fc", "graph"):
                write_fc_csv(out / rel, v.fc)
                item["fc_path"] = rel
                if kind == "graph":
                    erel = f"{kind}/{subj.id}_v{i:02d}_edges.csv"
                    write_edges_csv(out / erel, v.graph)
                    item["edges_path"] = erel
            else:
                raise ValueError(f"unknown manifest kind {kind!r}")
            visits.append(item)
        entries.append({"id": subj.id, "label": subj.label, "visits": visits})
    path = out / "manifest.json"
    path.write_text(json.dumps(entries, indent=1) + "\n")
    return path


def iter_manifest(in_dir, load: bool = True) -> Iterator[Subject]:
    """Yield subjects from ``manifest.json`` one at a time, reading each
    visit's payload files when ``load``."""
    root = Path(in_dir)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(2, "no such file", str(path))
    entries = json.loads(path.read_text())
    for e in entries:
        visits = []
        for item in e["visits"]:
            v = Visit(Diagnosis.parse(item["diagnosis"]), float(item["month_offset"]))
            if load:
                if "fc_path" in item:
                    v.fc = read_fc_csv(root / item["fc_path"])
                if "bold_path" in item:
                    kind = "voxel" if "labels_path" in item else "roi"
                    v.bold = read_timeseries_csv(root / item["bold_path"], channel_kind=kind)
                if "labels_path" in item:
                    v.labels = read_labels_csv(root / item["labels_path"])
                if "edges_path" in item:
                    if v.fc is None:
                        raise ValueError(f"{path}: edges_path without fc_path for {e['id']}")
                    v.graph = read_edges_csv(root / item["edges_path"], v.fc)
            visits.append(v)
        yield Subject(str(e["id"]), visits)


def read_manifest(in_dir, load: bool = True) -> list[Subject]:
    """Load every subject listed in ``manifest.json``."""
    return list(iter_manifest(in_dir, load))



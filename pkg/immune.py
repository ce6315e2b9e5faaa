"""
Immune-inspired intrusion detection agent.

A node watches per-process CPU, memory and network usage, reduces each
trace to summary statistics and flags processes far from every known-normal
prototype. A trained model travels to a neighbouring node as an XML
immunisation document.
"""

import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.signal import lfilter
from scipy.spatial.distance import cdist

logger = logging.getLogger(__name__)

# --- Constants for Configuration ---
CHANNELS = ("cpu", "mem", "net")
STATISTICS = ("mean", "std", "min", "max")
DIM_NAMES = tuple(f"{c}_{s}" for c in CHANNELS for s in STATISTICS)
N_DIMS = len(DIM_NAMES)
DEFAULT_QUANTILE = 0.95
SCHEMA_VERSION = "1"
NUMBER_FORMAT = ".17g"
TRACE_COLUMNS = ["t", "cpu", "mem", "net"]
MANIFEST_COLUMNS = ["path", "label"]


class TraceError(ValueError):
    """A process trace or trace file that cannot be used."""


class SingleClassError(ValueError):
    """A labelled set that lacks either normal or abnormal traces."""


class ImmunisationError(ValueError):
    """An immunisation document that cannot be imported."""


class SchemaError(ImmunisationError):
    pass


class VersionMismatchError(ImmunisationError):
    pass


class Label(str, Enum):
    """Ground truth of a trace and the verdict the classifier gives it."""

    NORMAL = "normal"
    ABNORMAL = "abnormal"


@dataclass(frozen=True, eq=False)
class ProcessTrace:
    process_id: str
    samples: np.ndarray
    label: Label | None = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=float)
        if samples.ndim != 2 or samples.shape[1] != len(CHANNELS):
            raise TraceError(f"trace {self.process_id}: samples must have shape (T, 3)")
        if samples.shape[0] < 2:
            raise TraceError(f"trace {self.process_id}: need at least 2 samples, got {samples.shape[0]}")
        if not np.all((samples >= 0.0) & (samples <= 1.0)):
            raise TraceError(f"trace {self.process_id}: channel values must lie in [0, 1]")
        object.__setattr__(self, "samples", samples)
        if self.label is not None:
            object.__setattr__(self, "label", Label(self.label))


@dataclass(frozen=True)
class FeatureVector:
    """(cpu, mem, net) x (mean, std, min, max)."""

    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) != N_DIMS:
            raise ValueError(f"feature vector needs {N_DIMS} values, got {len(self.values)}")
        for c in range(len(CHANNELS)):
            mean, std, lo, hi = self.values[4 * c: 4 * c + 4]
            if std < 0 or not lo <= mean <= hi:
                raise ValueError(f"inconsistent statistics for channel {CHANNELS[c]}")

    def as_array(self) -> np.ndarray:
        return np.array(self.values, dtype=float)


@dataclass(frozen=True, eq=False)
class ImmuneModel:
    prototypes: np.ndarray
    threshold: float
    center: np.ndarray
    scale: np.ndarray
    beta: float

    def __post_init__(self):
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] < 1 or self.prototypes.shape[1] != N_DIMS:
            raise ValueError("model needs at least one 12-dimensional prototype")
        if np.any(self.scale <= 0):
            raise ValueError("normalisation scales must be positive")
        if self.threshold < 0 or self.beta < 0:
            raise ValueError("threshold and beta must be non-negative")

    def normalise(self, raw: np.ndarray) -> np.ndarray:
        return (raw - self.center) / self.scale

    def distances(self, raw: np.ndarray) -> np.ndarray:
        """Nearest-prototype distance for each row of raw features."""
        z = self.normalise(np.atleast_2d(raw))
        return cdist(z, self.prototypes).min(axis=1)


@dataclass(frozen=True)
class Classification:
    verdict: Label
    distance: float


@dataclass(frozen=True)
class ErrorRow:
    threshold: float
    false_positives: int
    false_negatives: int
    error_rate: float


@dataclass(frozen=True)
class TraceProfile:
    mean: float = 0.25
    jitter: float = 0.05
    phi: float = 0.8
    spread: float = 0.05
    burst_prob: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.mean <= 1.0:
            raise ValueError(f"profile mean must be in [0, 1], got {self.mean}")
        if self.jitter < 0 or self.spread < 0:
            raise ValueError("jitter and spread must be non-negative")
        if not -1.0 < self.phi < 1.0:
            raise ValueError(f"phi must be in (-1, 1) for a stationary path, got {self.phi}")
        if not 0.0 <= self.burst_prob <= 1.0:
            raise ValueError(f"burst_prob must be in [0, 1], got {self.burst_prob}")


NORMAL_PROFILE = TraceProfile()
ABNORMAL_PROFILE = TraceProfile(mean=0.7, jitter=0.2, phi=0.8, spread=0.1, burst_prob=0.05)


@dataclass(frozen=True)
class SyntheticSpec:
    n_normal: int = 50
    n_abnormal: int = 50
    length: int = 256
    seed: int = 0
    normal: TraceProfile = field(default_factory=lambda: NORMAL_PROFILE)
    abnormal: TraceProfile = field(default_factory=lambda: ABNORMAL_PROFILE)

    def __post_init__(self):
        if self.n_normal < 0 or self.n_abnormal < 0:
            raise ValueError("trace counts must be non-negative")
        if self.length < 2:
            raise ValueError(f"trace length must be at least 2, got {self.length}")


def extract_features(t: ProcessTrace) -> FeatureVector:
    if t.samples.shape[0] < 2:
        raise TraceError(f"trace {t.process_id}: need at least 2 samples")
    # sorted columns make every statistic independent of sample order
    s = np.sort(t.samples, axis=0)
    lo, hi = s[0], s[-1]
    mean = np.clip(s.mean(axis=0), lo, hi)
    std = s.std(axis=0)
    values = np.stack([mean, std, lo, hi], axis=1).ravel()
    return FeatureVector(tuple(float(v) for v in values))


def feature_matrix(traces: Sequence[ProcessTrace]) -> np.ndarray:
    return np.array([extract_features(t).values for t in traces], dtype=float).reshape(-1, N_DIMS)


def train(normals: Sequence[ProcessTrace], threshold_quantile: float = DEFAULT_QUANTILE) -> ImmuneModel:
    """
    Z-normalise the normal features, keep them as prototypes and set the
    threshold at a quantile of leave-one-out nearest-neighbour distances.
    """
    if len(normals) < 2:
        raise TraceError(f"training needs at least 2 normal traces, got {len(normals)}")
    if not 0.0 < threshold_quantile <= 1.0:
        raise ValueError(f"threshold quantile must be in (0, 1], got {threshold_quantile}")
    raw = feature_matrix(normals)
    center = raw.mean(axis=0)
    scale = raw.std(axis=0)
    scale[scale == 0] = 1.0
    prototypes = (raw - center) / scale

    pairwise = cdist(prototypes, prototypes)
    np.fill_diagonal(pairwise, np.inf)
    loo = pairwise.min(axis=1)
    model = ImmuneModel(
        prototypes=prototypes,
        threshold=float(np.quantile(loo, threshold_quantile)),
        center=center,
        scale=scale,
        beta=float(np.std(loo)),
    )
    logger.info("trained on %d normal traces: threshold %.4f, beta %.4f",
                len(normals), model.threshold, model.beta)
    return model


def _check_prior(prior: float):
    if not 0.0 < prior < 1.0:
        raise ValueError(f"prior must be in (0, 1), got {prior}")


def prior_shift(model: ImmuneModel, prior: float) -> float:
    _check_prior(prior)
    return model.beta * math.log(prior / (1.0 - prior))


def classify(m: ImmuneModel, f: FeatureVector, prior: float = 0.5) -> Classification:
    d = float(m.distances(f.as_array())[0])
    normal = d - prior_shift(m, prior) <= m.threshold
    return Classification(Label.NORMAL if normal else Label.ABNORMAL, d)


def classify_trace(m: ImmuneModel, t: ProcessTrace, prior: float = 0.5) -> Classification:
    return classify(m, extract_features(t), prior)


def tuned_prior(labelled: Sequence[ProcessTrace]) -> float:
    """Fraction of normal traces in a labelled set."""
    _require_both_classes(labelled)
    normals = sum(t.label is Label.NORMAL for t in labelled)
    return normals / len(labelled)


def _require_both_classes(labelled: Sequence[ProcessTrace]):
    labels = {t.label for t in labelled}
    if None in labels:
        raise TraceError("every evaluation trace needs a label")
    if labels != {Label.NORMAL, Label.ABNORMAL}:
        raise SingleClassError("the labelled set must contain both normal and abnormal traces")


def evaluate(m: ImmuneModel, labelled: Sequence[ProcessTrace], thresholds: Sequence[float],
             prior: float = 0.5) -> list[ErrorRow]:
    """
    Error table over thresholds. Positive means abnormal: a false positive is
    a normal trace flagged abnormal, a false negative an abnormal one passed.
    """
    _require_both_classes(labelled)
    d = m.distances(feature_matrix(labelled))
    is_normal = np.array([t.label is Label.NORMAL for t in labelled])
    shift = prior_shift(m, prior)
    rows = []
    for tau in thresholds:
        predicted_normal = d - shift <= tau
        fp = int(np.sum(is_normal & ~predicted_normal))
        fn = int(np.sum(~is_normal & predicted_normal))
        rows.append(ErrorRow(float(tau), fp, fn, 100.0 * (fp + fn) / len(labelled)))
    return rows


def threshold_grid(m: ImmuneModel, labelled: Sequence[ProcessTrace], priors: Sequence[float],
                   points: int = 50) -> list[float]:
    """
    Evenly spaced thresholds from 0 past the largest distance, plus every
    threshold at which some verdict flips under one of the priors.
    """
    d = m.distances(feature_matrix(labelled))
    top = float(d.max()) * 1.25 + 1.0
    grid = set(float(x) for x in np.linspace(0.0, top, points))
    for p in priors:
        shift = prior_shift(m, p)
        grid.update(float(x) for x in d - shift if x >= 0.0)
    return sorted(grid)


def generate_synthetic_traces(spec: SyntheticSpec) -> list[ProcessTrace]:
    """
    Each channel is a stationary AR(1) path around a per-trace level, clipped
    to [0, 1]. Abnormal profiles sit higher, jitter more and burst to 1.0.
    """
    rng = np.random.default_rng(spec.seed)
    traces = []
    for label, profile, count in ((Label.NORMAL, spec.normal, spec.n_normal),
                                  (Label.ABNORMAL, spec.abnormal, spec.n_abnormal)):
        for i in range(count):
            level = profile.mean + rng.uniform(-profile.spread, profile.spread, size=len(CHANNELS))
            noise = rng.normal(0.0, profile.jitter, size=(spec.length, len(CHANNELS)))
            noise[0] /= math.sqrt(1.0 - profile.phi ** 2)
            path = level + lfilter([1.0], [1.0, -profile.phi], noise, axis=0)
            if profile.burst_prob > 0:
                path[rng.random(path.shape) < profile.burst_prob] = 1.0
            traces.append(ProcessTrace(f"{label.value}-{i}", np.clip(path, 0.0, 1.0), label))
    return traces


# --- Immunisation XML ---

def _num(x: float) -> str:
    return format(float(x), NUMBER_FORMAT)


def export_immunisation(m: ImmuneModel, prior: float) -> str:
    _check_prior(prior)
    root = ET.Element("immunisation", version=SCHEMA_VERSION)
    norm = ET.SubElement(root, "normalisation")
    for name, c, s in zip(DIM_NAMES, m.center, m.scale):
        ET.SubElement(norm, "dim", name=name, center=_num(c), scale=_num(s))
    for i, proto in enumerate(m.prototypes):
        el = ET.SubElement(root, "prototype", id=str(i))
        for name, v in zip(DIM_NAMES, proto):
            ET.SubElement(el, "f", name=name).text = _num(v)
    ET.SubElement(root, "threshold", value=_num(m.threshold))
    ET.SubElement(root, "beta", value=_num(m.beta))
    ET.SubElement(root, "prior", normal=_num(prior))
    ET.indent(root)
    return '<?xml version="1.0" encoding="utf-8"?>\n' + ET.tostring(root, encoding="unicode") + "\n"


def _float(text, what: str) -> float:
    if text is None:
        raise SchemaError(f"missing value for {what}")
    try:
        value = float(text)
    except ValueError as exc:
        raise SchemaError(f"{what}: {text!r} is not a number") from exc
    if not math.isfinite(value):
        raise ImmunisationError(f"{what} must be finite")
    return value


def _single(root, tag: str):
    found = root.findall(tag)
    if len(found) != 1:
        raise SchemaError(f"expected exactly one <{tag}>, found {len(found)}")
    return found[0]


def _dim_children(parent, tag: str, where: str) -> list:
    children = parent.findall(tag)
    if [c.get("name") for c in children] != list(DIM_NAMES):
        raise SchemaError(f"{where} must list the {N_DIMS} dimensions in order")
    return children


def import_immunisation(xml: str) -> tuple[ImmuneModel, float]:
    try:
        root = ET.fromstring(xml)
    except ET.ParseError as exc:
        raise SchemaError(f"malformed immunisation document: {exc}") from exc
    if root.tag != "immunisation":
        raise SchemaError(f"root element must be <immunisation>, got <{root.tag}>")
    version = root.get("version")
    if version is None:
        raise SchemaError("missing version attribute")
    if version != SCHEMA_VERSION:
        raise VersionMismatchError(f"unsupported immunisation version {version!r}")

    dims = _dim_children(_single(root, "normalisation"), "dim", "normalisation")
    center = np.array([_float(d.get("center"), f"center of {d.get('name')}") for d in dims])
    scale = np.array([_float(d.get("scale"), f"scale of {d.get('name')}") for d in dims])
    if np.any(scale <= 0):
        raise ImmunisationError("normalisation scales must be positive")

    protos = root.findall("prototype")
    if not protos:
        raise SchemaError("at least one <prototype> is required")
    prototypes = np.array([
        [_float(f.text, f"prototype {p.get('id')}/{f.get('name')}")
         for f in _dim_children(p, "f", f"prototype {p.get('id')}")]
        for p in protos
    ])

    threshold = _float(_single(root, "threshold").get("value"), "threshold")
    beta = _float(_single(root, "beta").get("value"), "beta")
    prior = _float(_single(root, "prior").get("normal"), "prior")
    if threshold < 0 or beta < 0:
        raise ImmunisationError("threshold and beta must be non-negative")
    if not 0.0 < prior < 1.0:
        raise ImmunisationError(f"prior must be in (0, 1), got {prior}")
    model = ImmuneModel(prototypes=prototypes, threshold=threshold, center=center, scale=scale, beta=beta)
    return model, prior


# --- Trace files ---

def read_trace_csv(path, label: Label | None = None) -> ProcessTrace:
    path = Path(path)
    frame = pd.read_csv(path)
    if list(frame.columns) != TRACE_COLUMNS:
        raise TraceError(f"{path}: expected columns {','.join(TRACE_COLUMNS)}")
    if not frame["t"].is_monotonic_increasing or frame["t"].duplicated().any():
        raise TraceError(f"{path}: samples must be strictly time-ordered")
    return ProcessTrace(path.stem, frame[list(CHANNELS)].to_numpy(dtype=float), label)


def read_manifest(path) -> list[ProcessTrace]:
    """Manifest CSV of path,label; paths are relative to the manifest."""
    path = Path(path)
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(frame.columns) != MANIFEST_COLUMNS:
        raise TraceError(f"{path}: expected columns {','.join(MANIFEST_COLUMNS)}")
    traces = []
    for entry, label in zip(frame["path"], frame["label"]):
        try:
            parsed = Label(label) if label else None
        except ValueError as exc:
            raise TraceError(f"{path}: unknown label {label!r}") from exc
        traces.append(read_trace_csv(path.parent / entry, parsed))
    return traces


def trace_csv_text(trace: ProcessTrace) -> str:
    frame = pd.DataFrame(trace.samples, columns=list(CHANNELS))
    frame.insert(0, "t", range(len(frame)))
    return frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")


def trace_files(traces: Sequence[ProcessTrace], prefix: str = "") -> dict[str, str]:
    """One CSV per trace plus manifest.csv, keyed by path relative to the output directory."""
    prefix = f"{prefix}/" if prefix else ""
    files = {f"{prefix}{t.process_id}.csv": trace_csv_text(t) for t in traces}
    manifest = pd.DataFrame({
        "path": [f"{t.process_id}.csv" for t in traces],
        "label": [t.label.value if t.label else "" for t in traces],
    })
    files[f"{prefix}manifest.csv"] = manifest.to_csv(index=False, lineterminator="\n")
    return files


def write_traces(traces: Sequence[ProcessTrace], directory) -> Path:
    """Write one CSV per trace plus manifest.csv; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, text in trace_files(traces).items():
        (directory / name).write_text(text, encoding="utf-8")
    return directory / "manifest.csv"


def error_table(rows_by_prior: dict[float, list[ErrorRow]]) -> pd.DataFrame:
    records = [
        {"prior": p, "threshold": r.threshold, "fp": r.false_positives,
         "fn": r.false_negatives, "error_rate_pct": r.error_rate}
        for p, rows in rows_by_prior.items() for r in rows
    ]
    return pd.DataFrame(records, columns=["prior", "threshold", "fp", "fn", "error_rate_pct"])

"""Dataset ingestion, per-ROI standardization, windowing and a synthetic
Markov-switching linear dynamical system used as ground truth."""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import WindowSpec

log = logging.getLogger(__name__)

MANIFEST_FIELDS = ("subject_id", "path", "label", "site")


class DataError(ValueError):
    pass


class LoadError(DataError):
    pass


class ParseError(DataError):
    pass


class ValidationError(DataError):
    pass


@dataclass
class TimeSeriesRecord:
    subject_id: str
    X: np.ndarray
    label: int
    site: str | None = None
    true_states: np.ndarray | None = None
    roi_names: list[str] | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape[0] < 1 or self.X.shape[1] < 1:
            raise ValidationError(f"{self.subject_id}: X must be a non-empty T x M matrix, got {self.X.shape}")
        if not np.all(np.isfinite(self.X)):
            raise ValidationError(f"{self.subject_id}: X contains NaN or Inf")
        if self.true_states is not None:
            self.true_states = np.asarray(self.true_states, dtype=np.int64)
            if self.true_states.shape != (self.X.shape[0],):
                raise ValidationError(f"{self.subject_id}: true_states length {len(self.true_states)} != T={self.X.shape[0]}")

    @property
    def T(self) -> int:
        return self.X.shape[0]

    @property
    def M(self) -> int:
        return self.X.shape[1]


# ---------------------------------------------------------------- files

def read_matrix_csv(path: str | Path) -> tuple[np.ndarray, list[str]]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty matrix file") from None
        rows = []
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: row {r} has {len(row)} columns, header has {len(header)}")
            vals = []
            for c, cell in enumerate(row, start=1):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(f"{path}: non-numeric cell {cell!r} at row {r}, column {c}") from None
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float64), header


def write_matrix_csv(path: str | Path, X: np.ndarray, roi_names: list[str] | None = None) -> None:
    X = np.asarray(X)
    names = roi_names or [f"roi_{j}" for j in range(X.shape[1])]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in X:
            w.writerow([repr(float(v)) for v in row])


def load_dataset(manifest_path: str | Path, min_length: int | None = None) -> list[TimeSeriesRecord]:
    """Load every subject listed in a manifest CSV.

    Matrix paths are resolved relative to the manifest's directory. When
    ``min_length`` is given, subjects with fewer time points are excluded and
    reported through a warning naming each of them.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise LoadError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    records, short = [], []
    with manifest_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"subject_id", "path", "label"} - set(reader.fieldnames or ())
        if missing:
            raise ParseError(f"{manifest_path}: manifest missing columns {sorted(missing)}")
        for line, entry in enumerate(reader, start=2):
            sid = entry["subject_id"]
            mpath = root / entry["path"]
            if not mpath.exists():
                raise LoadError(f"subject {sid!r}: matrix file not found: {mpath}")
            try:
                label = int(entry["label"])
            except ValueError:
                raise ParseError(f"{manifest_path}: bad label {entry['label']!r} at row {line}") from None
            X, names = read_matrix_csv(mpath)
            if not np.all(np.isfinite(X)):
                raise ValidationError(f"subject {sid!r}: matrix contains NaN or Inf")
            rec = TimeSeriesRecord(sid, X, label, entry.get("site") or None, roi_names=names)
            if min_length is not None and rec.T < min_length:
                short.append((sid, rec.T))
                continue
            records.append(rec)
    if short:
        msg = ", ".join(f"{sid} (T={t})" for sid, t in short)
        warnings.warn(f"excluded {len(short)} subject(s) shorter than {min_length} time points: {msg}")
        log.warning("excluded short subjects: %s", msg)
    return records


def write_dataset(records: list[TimeSeriesRecord], out_dir: str | Path, manifest_name: str = "manifest.csv") -> Path:
    out_dir = Path(out_dir)
    (out_dir / "subjects").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / manifest_name
    with manifest.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for rec in records:
            rel = f"subjects/{rec.subject_id}.csv"
            write_matrix_csv(out_dir / rel, rec.X, rec.roi_names)
            w.writerow([rec.subject_id, rel, rec.label, rec.site or ""])
            if rec.true_states is not None:
                np.savetxt(out_dir / f"subjects/{rec.subject_id}.states.txt", rec.true_states, fmt="%d")
    return manifest


def attach_true_states(records: list[TimeSeriesRecord], manifest_path: str | Path) -> None:
    """Fill ``true_states`` from the ``<subject>.states.txt`` sidecars written by ``write_dataset``."""
    root = Path(manifest_path).parent / "subjects"
    for rec in records:
        p = root / f"{rec.subject_id}.states.txt"
        if p.exists():
            rec.true_states = np.atleast_1d(np.loadtxt(p, dtype=np.int64))
            rec.__post_init__()


# ---------------------------------------------------------------- transforms

def zscore_normalize(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataError(f"z-scoring needs at least 2 time points, got shape {X.shape}")
    mu = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    flat = sd <= 1e-12 * np.maximum(1.0, np.abs(mu))
    if np.any(flat):
        warnings.warn(f"zero-variance column(s) {np.flatnonzero(flat).tolist()} mapped to zeros")
    out = np.zeros_like(X)
    ok = ~flat
    out[:, ok] = (X[:, ok] - mu[ok]) / sd[ok]
    return out


def window_offsets(T: int, spec: WindowSpec) -> list[int]:
    if spec.W > T:
        return []
    return list(range(0, T - spec.W + 1, spec.stride))


def window(X: np.ndarray, spec: WindowSpec) -> list[np.ndarray]:
    X = np.asarray(X)
    offsets = window_offsets(X.shape[0], spec)
    if not offsets:
        warnings.warn(f"window length {spec.W} exceeds series length {X.shape[0]}; no windows")
    return [X[o:o + spec.W] for o in offsets]


@dataclass
class WindowSet:
    """Stacked windows with per-window provenance."""

    windows: np.ndarray               # (N, W, M) float32
    subject_ids: list[str]
    labels: np.ndarray                # (N,)
    offsets: np.ndarray               # (N,)
    true_states: np.ndarray | None = None   # (N, W) when every record carries ground truth

    def __len__(self) -> int:
        return self.windows.shape[0]

    def subset(self, subjects) -> "WindowSet":
        keep = set(subjects)
        idx = np.array([i for i, s in enumerate(self.subject_ids) if s in keep], dtype=np.int64)
        return WindowSet(
            self.windows[idx],
            [self.subject_ids[i] for i in idx],
            self.labels[idx],
            self.offsets[idx],
            None if self.true_states is None else self.true_states[idx],
        )


def make_windows(records: list[TimeSeriesRecord], spec: WindowSpec, normalize: bool = True) -> WindowSet:
    wins, sids, labels, offs, states = [], [], [], [], []
    have_states = all(r.true_states is not None for r in records)
    for rec in records:
        X = zscore_normalize(rec.X) if normalize else rec.X
        for o in window_offsets(rec.T, spec):
            wins.append(X[o:o + spec.W])
            sids.append(rec.subject_id)
            labels.append(rec.label)
            offs.append(o)
            if have_states:
                states.append(rec.true_states[o:o + spec.W])
        if rec.T < spec.W:
            warnings.warn(f"{rec.subject_id}: T={rec.T} shorter than window {spec.W}; skipped")
    if not wins:
        raise DataError("no windows produced; every record is shorter than the window length")
    return WindowSet(
        np.stack(wins).astype(np.float32),
        sids,
        np.asarray(labels, dtype=np.int64),
        np.asarray(offs, dtype=np.int64),
        np.stack(states) if have_states and states else None,
    )


# ---------------------------------------------------------------- synthetic data

@dataclass
class SwitchingSystemSpec:
    n_states: int
    M: int
    dwell_mean: float
    dynamics: np.ndarray          # (n_states, M, M)
    means: np.ndarray             # (n_states, M)
    transition_matrix: np.ndarray  # (n_states, n_states), row-stochastic
    noise_std: float = 0.0
    initial: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.dynamics = np.asarray(self.dynamics, dtype=np.float64).reshape(self.n_states, self.M, self.M)
        self.means = np.asarray(self.means, dtype=np.float64).reshape(self.n_states, self.M)
        self.transition_matrix = np.asarray(self.transition_matrix, dtype=np.float64)
        if self.n_states < 1 or self.M < 1 or self.dwell_mean <= 0:
            raise ValidationError("n_states, M and dwell_mean must be positive")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be non-negative")
        P = self.transition_matrix
        if P.shape != (self.n_states, self.n_states) or np.any(P < 0):
            raise ValidationError("transition_matrix must be a non-negative n_states x n_states matrix")
        if np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-9):
            raise ValidationError(f"transition rows must sum to 1, got {P.sum(axis=1)}")
        for k, A in enumerate(self.dynamics):
            rho = np.max(np.abs(np.linalg.eigvals(A)))
            if rho >= 1.0:
                raise ValidationError(f"dynamics matrix {k} is unstable (spectral radius {rho:.4f} >= 1)")
        if self.initial is None:
            self.initial = np.full(self.n_states, 1.0 / self.n_states)
        self.initial = np.asarray(self.initial, dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states, "M": self.M, "dwell_mean": self.dwell_mean,
            "dynamics": self.dynamics.tolist(), "means": self.means.tolist(),
            "transition_matrix": self.transition_matrix.tolist(),
            "noise_std": self.noise_std, "initial": self.initial.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SwitchingSystemSpec":
        return cls(**d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SwitchingSystemSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def sticky_transition_matrix(n_states: int, dwell_mean: float, jump: np.ndarray | None = None) -> np.ndarray:
    """Chain whose self-transition probability gives geometric dwell with the requested mean.

    ``jump`` (rows need not be normalized, diagonal ignored) distributes the
    leaving probability; uniform over the other states by default.
    """
    stay = 1.0 - 1.0 / dwell_mean if dwell_mean > 1 else 0.0
    if jump is None:
        jump = np.ones((n_states, n_states))
    jump = np.array(jump, dtype=np.float64)
    np.fill_diagonal(jump, 0.0)
    if n_states == 1:
        return np.ones((1, 1))
    jump = jump / jump.sum(axis=1, keepdims=True)
    return stay * np.eye(n_states) + (1.0 - stay) * jump


def random_switching_spec(
    n_states: int,
    M: int,
    dwell_mean: float = 20.0,
    noise_std: float = 0.0,
    seed: int = 0,
    spectral_radius: float = 0.5,
    mean_scale: float = 1.0,
    jump: np.ndarray | None = None,
) -> SwitchingSystemSpec:
    rng = np.random.default_rng(seed)
    dyn = []
    for _ in range(n_states):
        A = rng.standard_normal((M, M))
        A *= spectral_radius / np.max(np.abs(np.linalg.eigvals(A)))
        dyn.append(A)
    means = mean_scale * rng.standard_normal((n_states, M))
    return SwitchingSystemSpec(
        n_states, M, dwell_mean, np.stack(dyn), means,
        sticky_transition_matrix(n_states, dwell_mean, jump), noise_std,
    )


def transition_variant(spec: SwitchingSystemSpec, dwell_ratio: float = 0.4, seed: int = 0) -> SwitchingSystemSpec:
    """Same dynamics, means and noise as ``spec``; only the Markov chain differs.

    The variant's mean dwell is ``dwell_ratio * spec.dwell_mean`` and its
    leaving probabilities are skewed by a random jump pattern.
    """
    rng = np.random.default_rng(seed)
    jump = rng.random((spec.n_states, spec.n_states)) ** 3
    dwell = spec.dwell_mean * dwell_ratio
    return SwitchingSystemSpec(
        spec.n_states, spec.M, dwell, spec.dynamics.copy(), spec.means.copy(),
        sticky_transition_matrix(spec.n_states, dwell, jump), spec.noise_std, spec.initial.copy(),
    )


def sample_state_path(spec: SwitchingSystemSpec, T: int, rng: np.random.Generator) -> np.ndarray:
    states = np.empty(T, dtype=np.int64)
    cum = np.cumsum(spec.transition_matrix, axis=1)
    s = int(rng.choice(spec.n_states, p=spec.initial))
    u = rng.random(T)
    for t in range(T):
        states[t] = s
        s = min(int(np.searchsorted(cum[s], u[t], side="right")), spec.n_states - 1)
    return states


def synth_switching_lds(
    spec: SwitchingSystemSpec,
    T: int,
    seed: int,
    subject_id: str = "synth",
    label: int = 0,
    noise_std: float | None = None,
) -> TimeSeriesRecord:
    """Sample x_t = A[s_t] x_{t-1} + mu[s_t] + eps_t with x_0 = 0 and a Markov state path."""
    if T < 1:
        raise ValidationError("T must be positive")
    rng = np.random.default_rng(seed)
    states = sample_state_path(spec, T, rng)
    sigma = spec.noise_std if noise_std is None else noise_std
    eps = rng.standard_normal((T, spec.M))
    X = _simulate(spec, states, sigma * eps)
    return TimeSeriesRecord(subject_id, X, label, "synthetic", true_states=states)


def _simulate(spec: SwitchingSystemSpec, states: np.ndarray, noise: np.ndarray) -> np.ndarray:
    X = np.empty((len(states), spec.M))
    x = np.zeros(spec.M)
    for t, s in enumerate(states):
        x = spec.dynamics[s] @ x + spec.means[s] + noise[t]
        X[t] = x
    return X


def noise_std_for_snr(spec: SwitchingSystemSpec, T: int, snr_db: float, seed: int = 0) -> float:
    """Process-noise level giving the requested signal-to-noise ratio.

    Signal power is the variance of the noiseless trajectory; noise power is
    the variance of the response to unit process noise along the same state
    path (the response is linear in the noise level).
    """
    rng = np.random.default_rng(seed)
    states = sample_state_path(spec, T, rng)
    clean = _simulate(spec, states, np.zeros((T, spec.M)))
    zero_means = SwitchingSystemSpec(spec.n_states, spec.M, spec.dwell_mean, spec.dynamics,
                                     np.zeros_like(spec.means), spec.transition_matrix)
    unit = _simulate(zero_means, states, rng.standard_normal((T, spec.M)))
    p_signal = clean.var(axis=0).mean()
    p_unit = np.mean(unit ** 2)
    return float(np.sqrt(p_signal / (p_unit * 10 ** (snr_db / 10.0))))


def dwell_times(states: np.ndarray) -> np.ndarray:
    states = np.asarray(states)
    change = np.flatnonzero(np.diff(states) != 0)
    edges = np.concatenate([[0], change + 1, [len(states)]])
    return np.diff(edges)

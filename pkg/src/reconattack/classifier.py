"""Black-box scorers for reconstructed images.

The attack only ever calls ``model.predict(image)`` and reads back the
probability of the "fatty" class. Anything with that method works; this
module ships a five-feature logistic model trained from scratch, a couple
of hand-built stubs and an adapter that shells out to an external command.
"""

from __future__ import annotations

import json
import os
import shlex
import subprocess
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Protocol, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .errors import ExternalModelError, InvalidInputError
from .formats import atomic_write_text, pgm_bytes
from .rfcore import BModeImage, reconstruct

FORMAT_VERSION = 1
PROB_CLAMP = 1e-7
FEATURE_NAMES = ("mean_near", "mean_far", "depth_slope", "contrast", "ratio")
NEAR_ROI = (0.1, 0.4)
FAR_ROI = (0.6, 0.9)
MAX_EXTERNAL_PROCS = 4

_external_slots = threading.BoundedSemaphore(MAX_EXTERNAL_PROCS)


class BlackBoxModel(Protocol):
    def predict(self, img: BModeImage) -> float: ...


class FeatureVector(NamedTuple):
    mean_near: float
    mean_far: float
    depth_slope: float
    contrast: float
    ratio: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)


def _roi_rows(height, frac):
    return int(np.floor(frac[0] * height)), int(np.floor(frac[1] * height))


def extract_features(img: BModeImage) -> FeatureVector:
    """Brightness and depth-trend features over in-sector pixels only."""
    px = img.pixels.astype(np.float64)
    mask = img.sector_mask()
    h = img.height

    def roi_mean(frac):
        lo, hi = _roi_rows(h, frac)
        m = mask[lo:hi]
        if not m.any():
            raise InvalidInputError(f"no in-sector pixels in rows [{lo}, {hi})")
        return float(px[lo:hi][m].mean())

    near = roi_mean(NEAR_ROI)
    far = roi_mean(FAR_ROI)

    counts = mask.sum(axis=1)
    rows = np.nonzero(counts)[0]
    row_means = (px * mask).sum(axis=1)[rows] / counts[rows]
    if rows.size >= 2:
        r = rows - rows.mean()
        slope = float(np.dot(r, row_means - row_means.mean()) / np.dot(r, r))
    else:
        slope = 0.0
    contrast = float(px[mask].std())
    return FeatureVector(near, far, slope, contrast, (near + 1.0) / (far + 1.0))


def bce_loss(p, y) -> float:
    """Binary cross-entropy with the probability clamped to [1e-7, 1 - 1e-7]."""
    p = min(max(float(p), PROB_CLAMP), 1.0 - PROB_CLAMP)
    return float(-(y * np.log(p) + (1 - y) * np.log(1.0 - p)))


def balanced_class_weights(y) -> tuple:
    """``n_total / (2 * n_c)`` for each class c."""
    y = np.asarray(y)
    n = y.size
    n1 = int(np.sum(y == 1))
    n0 = n - n1
    if n0 == 0 or n1 == 0:
        raise InvalidInputError("both classes must be present")
    return (n / (2.0 * n0), n / (2.0 * n1))


def weighted_logistic_loss(w, b, X, y, sample_weights):
    """Mean class-weighted BCE of a logistic model and its exact gradient.

    Returns ``(loss, grad_w, grad_b)``.
    """
    z = X @ w + b
    # log(1 + e^z) - y*z is the BCE written in terms of the logit
    per_sample = np.logaddexp(0.0, z) - y * z
    n = X.shape[0]
    loss = float(np.sum(sample_weights * per_sample) / n)
    g = sample_weights * (expit(z) - y)
    return loss, X.T @ g / n, float(np.sum(g) / n)


@dataclass(frozen=True)
class LogisticModel:
    weights: np.ndarray
    bias: float
    feature_means: np.ndarray
    feature_stds: np.ndarray
    feature_names: tuple = FEATURE_NAMES

    def __post_init__(self):
        if np.any(np.asarray(self.feature_stds) <= 0):
            raise InvalidInputError("feature_stds must all be positive")

    def standardize(self, X):
        return (np.asarray(X, dtype=np.float64) - self.feature_means) / self.feature_stds

    def predict_features(self, X) -> np.ndarray:
        return expit(self.standardize(X) @ self.weights + self.bias)

    def predict(self, img: BModeImage) -> float:
        return float(self.predict_features(extract_features(img).as_array()[None, :])[0])

    def raw_coefficients(self):
        """Equivalent weights and bias acting on unstandardized features."""
        w = self.weights / self.feature_stds
        return w, float(self.bias - np.dot(w, self.feature_means))

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "logistic",
            "feature_order": list(self.feature_names),
            "weights": [float(v) for v in self.weights],
            "bias": float(self.bias),
            "feature_means": [float(v) for v in self.feature_means],
            "feature_stds": [float(v) for v in self.feature_stds],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticModel":
        names = tuple(d.get("feature_order", FEATURE_NAMES))
        arrays = [np.asarray(d[k], dtype=np.float64) for k in ("weights", "feature_means", "feature_stds")]
        if any(a.shape != (len(names),) for a in arrays):
            raise InvalidInputError("model vectors must match feature_order length")
        return cls(arrays[0], float(d["bias"]), arrays[1], arrays[2], names)


def fit_logistic(X, y, epochs=2000, lr=0.1, class_weights=None,
                 feature_names=FEATURE_NAMES) -> LogisticModel:
    """Full-batch gradient descent on class-weighted BCE.

    Features are standardized with the training mean and (population) std;
    weights start at zero. ``class_weights=None`` means balanced weights.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise InvalidInputError("X must be (n, d) with one label per row")
    if class_weights is None:
        class_weights = balanced_class_weights(y)
    else:
        balanced_class_weights(y)  # validates both classes are present
    if np.sum(y == 0) < 2 or np.sum(y == 1) < 2:
        raise InvalidInputError("need at least 2 examples per class")

    means = X.mean(axis=0)
    stds = X.std(axis=0)
    stds = np.where(stds > 0, stds, 1.0)
    Xs = (X - means) / stds
    sw = np.where(y == 1, class_weights[1], class_weights[0])

    w = np.zeros(X.shape[1])
    b = 0.0
    for _ in range(int(epochs)):
        _, gw, gb = weighted_logistic_loss(w, b, Xs, y, sw)
        w = w - lr * gw
        b = b - lr * gb
    names = tuple(feature_names) if len(feature_names) == X.shape[1] else tuple(
        f"x{i}" for i in range(X.shape[1]))
    return LogisticModel(w, float(b), means, stds, names)


def roc_auc(y, scores) -> float:
    """Area under the ROC curve via the Mann-Whitney statistic (ties count 1/2)."""
    y = np.asarray(y)
    s = np.asarray(scores, dtype=np.float64)
    pos, neg = s[y == 1], s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise InvalidInputError("AUC needs both classes")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


class ConstantModel:
    """Ignores the image and always returns ``p``."""

    def __init__(self, p: float):
        if not 0.0 <= p <= 1.0:
            raise InvalidInputError(f"p must lie in [0, 1], got {p}")
        self.p = float(p)

    def predict(self, img):
        return self.p

    def to_dict(self):
        return {"format_version": FORMAT_VERSION, "kind": "constant", "p": self.p}


class MeanIntensityModel:
    """``p = sigmoid(k * (mean in-sector pixel - threshold))``.

    Brighter images score as more "fatty". Handy as an attack target whose
    decision is directly driven by the reconstruction gain.
    """

    def __init__(self, threshold: float, k: float = 1.0):
        self.threshold = float(threshold)
        self.k = float(k)

    @staticmethod
    def mean_intensity(img: BModeImage) -> float:
        return float(img.pixels[img.sector_mask()].astype(np.float64).mean())

    def predict(self, img):
        return float(expit(self.k * (self.mean_intensity(img) - self.threshold)))

    def to_dict(self):
        return {"format_version": FORMAT_VERSION, "kind": "mean_threshold",
                "threshold": self.threshold, "k": self.k}


def parse_probability(raw: str) -> float:
    tokens = raw.split()
    if len(tokens) != 1:
        raise ExternalModelError("expected a single number on stdout", raw)
    try:
        p = float(tokens[0])
    except ValueError:
        raise ExternalModelError("output is not a decimal number", raw) from None
    if not 0.0 <= p <= 1.0:
        raise ExternalModelError(f"probability {p} outside [0, 1]", raw)
    return p


def predict_external(command: str, img: BModeImage, timeout: float = 120.0) -> float:
    """Score ``img`` by running ``command <pgm-path>`` and reading stdout.

    At most ``MAX_EXTERNAL_PROCS`` commands run at once process-wide.
    """
    argv = shlex.split(command)
    if not argv:
        raise InvalidInputError("empty external command")
    fd, path = tempfile.mkstemp(suffix=".pgm")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(pgm_bytes(img.pixels))
        with _external_slots:
            try:
                proc = subprocess.run(argv + [path], capture_output=True, text=True,
                                      timeout=timeout)
            except (OSError, subprocess.TimeoutExpired) as e:
                raise ExternalModelError(f"could not run {command!r}: {e}") from None
    finally:
        os.unlink(path)
    if proc.returncode != 0:
        raise ExternalModelError(f"command exited with status {proc.returncode}",
                                 proc.stdout + proc.stderr)
    return parse_probability(proc.stdout)


class ExternalModel:
    def __init__(self, command: str, timeout: float = 120.0):
        self.command = command
        self.timeout = timeout

    def predict(self, img):
        return predict_external(self.command, img, self.timeout)


def model_from_dict(d: dict):
    kind = d.get("kind", "logistic")
    if kind == "logistic":
        return LogisticModel.from_dict(d)
    if kind == "constant":
        return ConstantModel(float(d["p"]))
    if kind == "mean_threshold":
        return MeanIntensityModel(float(d["threshold"]), float(d.get("k", 1.0)))
    raise InvalidInputError(f"unknown model kind {kind!r}")


def load_model(path):
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise InvalidInputError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(d, dict):
        raise InvalidInputError(f"{path}: model file must hold a JSON object")
    try:
        return model_from_dict(d)
    except KeyError as e:
        raise InvalidInputError(f"{path}: missing field {e}") from None


def save_model(path, model):
    atomic_write_text(path, json.dumps(model.to_dict(), indent=2, sort_keys=True) + "\n")


def train_logistic(frames: Sequence, params, epochs=2000, lr=0.1, class_weights=None,
                   out_size=(299, 299)):
    """Reconstruct every frame at ``params`` and fit the logistic model.

    ``frames`` is a sequence of labelled ``RfFrame``. Returns
    ``(model, X, y)`` with the feature matrix used for fitting.
    """
    labels = [f.label for f in frames]
    if any(lab not in (0, 1) for lab in labels):
        raise InvalidInputError("every training frame needs a 0/1 label")
    X = np.array([extract_features(reconstruct(f, params, out_size)).as_array() for f in frames])
    y = np.array(labels, dtype=np.float64)
    return fit_logistic(X, y, epochs, lr, class_weights), X, y

"""Zeroth-order attack on the reconstruction parameters.

The loss J(beta, alpha_l, alpha_u) is the BCE of the model's output on the
image reconstructed with those parameters. Its partial derivatives are
estimated with central differences and every parameter moves by its own
learning rate in the direction of the estimated gradient sign, clipped to
a box. The loop stops once the predicted label flips, when an iteration
moves nothing, or at the iteration cap.
"""

from __future__ import annotations

import csv
import io
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .classifier import bce_loss
from .errors import DegenerateProbeError, InitiallyMisclassifiedError, InvalidInputError
from .rfcore import ReconParams, Reconstructor, RfFrame

PARAM_NAMES = ("beta", "alpha_l", "alpha_u")
TRAJECTORY_HEADER = ("iter", "beta", "alpha_l", "alpha_u", "loss", "prob",
                     "g_beta", "g_alpha_l", "g_alpha_u")
REASONS = ("misclassified", "saturated", "max_iters")


@dataclass(frozen=True)
class AttackConfig:
    deltas: Tuple[float, float, float] = (0.05, 0.1, 0.1)
    lrs: Tuple[float, float, float] = (0.05, 0.5, 0.5)
    bounds: Tuple[Tuple[float, float], ...] = ((0.5, 1.3), (5.0, 15.0), (50.0, 60.0))
    cutoff: float = 0.5
    max_iters: int = 100

    def __post_init__(self):
        if len(self.deltas) != 3 or len(self.lrs) != 3 or len(self.bounds) != 3:
            raise InvalidInputError("deltas, lrs and bounds need one entry per parameter")
        if any(not d > 0 for d in self.deltas):
            raise InvalidInputError(f"deltas must be positive, got {self.deltas}")
        if any(not e > 0 for e in self.lrs):
            raise InvalidInputError(f"learning rates must be positive, got {self.lrs}")
        for name, (lo, hi) in zip(PARAM_NAMES, self.bounds):
            if not lo < hi:
                raise InvalidInputError(f"bounds for {name} need min < max, got ({lo}, {hi})")
        if not 0 < self.cutoff < 1:
            raise InvalidInputError(f"cutoff must lie in (0, 1), got {self.cutoff}")
        if int(self.max_iters) < 1:
            raise InvalidInputError(f"max_iters must be >= 1, got {self.max_iters}")

    @property
    def lower(self) -> np.ndarray:
        return np.array([b[0] for b in self.bounds], dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return np.array([b[1] for b in self.bounds], dtype=np.float64)

    def in_bounds(self, params: ReconParams) -> bool:
        q = np.array(params.as_tuple())
        return bool(np.all(q >= self.lower) and np.all(q <= self.upper))


@dataclass(frozen=True)
class AttackState:
    iter: int
    params: ReconParams
    loss: float
    prob: float
    # gradient estimate that produced this state; None for the starting point
    grad_est: Optional[Tuple[float, float, float]] = None


@dataclass
class AttackResult:
    success: bool
    reason: str
    initial_params: ReconParams
    final_params: ReconParams
    trajectory: List[AttackState]
    model_queries: int
    verified: bool
    label: int = 0

    @property
    def iters(self) -> int:
        return len(self.trajectory) - 1

    def summary(self) -> dict:
        return {
            "success": self.success,
            "reason": self.reason,
            "initial_params": _params_dict(self.initial_params),
            "final_params": _params_dict(self.final_params),
            "iters": self.iters,
            "model_queries": self.model_queries,
            "verified": self.verified,
        }

    def trajectory_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for s in self.trajectory:
            g = s.grad_est if s.grad_est is not None else ("", "", "")
            w.writerow([s.iter, *(repr(v) for v in s.params.as_tuple()),
                        repr(s.loss), repr(s.prob), *(repr(v) if v != "" else "" for v in g)])
        return buf.getvalue()


def _params_dict(p: ReconParams) -> dict:
    return dict(zip(PARAM_NAMES, p.as_tuple()))


def predicted_label(p: float, cutoff: float = 0.5) -> int:
    return int(p >= cutoff)


class LossOracle:
    """Black-box loss J(params) for one frame, label and model.

    Counts every call to ``model.predict``.
    """

    def __init__(self, frame: RfFrame, label: int, model, reconstructor: Optional[Reconstructor] = None):
        if label not in (0, 1):
            raise InvalidInputError(f"label must be 0 or 1, got {label}")
        self.frame = frame
        self.label = int(label)
        self.model = model
        self.reconstructor = reconstructor or Reconstructor(frame)
        self.queries = 0
        self._lock = threading.Lock()

    def score(self, params: ReconParams) -> Tuple[float, float]:
        """Return ``(loss, prob)`` at ``params``."""
        img = self.reconstructor(params)
        p = float(self.model.predict(img))
        with self._lock:
            self.queries += 1
        return bce_loss(p, self.label), p

    def __call__(self, params: ReconParams) -> float:
        return self.score(params)[0]


def central_difference(loss_fn: Callable[[ReconParams], float], params: ReconParams,
                       deltas: Sequence[float]) -> np.ndarray:
    """``[J(q + d) - J(q - d)] / (2 d)`` per coordinate, others held fixed.

    Probes may leave any box; only the ``alpha_u > alpha_l`` ordering is
    enforced. Makes exactly six calls to ``loss_fn``.
    """
    q = params.as_tuple()
    probes = []
    for k, d in enumerate(deltas):
        if not d > 0:
            raise InvalidInputError(f"finite-difference steps must be positive, got {deltas}")
        plus, minus = list(q), list(q)
        plus[k] += d
        minus[k] -= d
        for probe in (plus, minus):
            if not probe[2] > probe[1]:
                raise DegenerateProbeError(
                    f"probe {tuple(probe)} makes alpha_u <= alpha_l")
        probes.append((plus, minus))
    grad = np.empty(3)
    for k, (plus, minus) in enumerate(probes):
        grad[k] = (loss_fn(ReconParams.from_sequence(plus))
                   - loss_fn(ReconParams.from_sequence(minus))) / (2.0 * deltas[k])
    return grad


def approx_gradient(frame: RfFrame, label: int, params: ReconParams, model,
                    deltas=AttackConfig.deltas, oracle: Optional[LossOracle] = None) -> np.ndarray:
    """Finite-difference estimate of dJ/d(beta, alpha_l, alpha_u)."""
    oracle = oracle or LossOracle(frame, label, model)
    return central_difference(oracle, params, deltas)


def sign_update(params: ReconParams, grad, config: AttackConfig) -> ReconParams:
    """One projected sign-ascent step: ``clip(q + lr * sign(g), bounds)``."""
    q = np.array(params.as_tuple())
    q = q + np.asarray(config.lrs) * np.sign(grad)
    q = np.clip(q, config.lower, config.upper)
    return ReconParams.from_sequence(q)


def zoo_step(state: AttackState, config: AttackConfig, frame: RfFrame, label: int, model,
             oracle: Optional[LossOracle] = None) -> AttackState:
    oracle = oracle or LossOracle(frame, label, model)
    grad = central_difference(oracle, state.params, config.deltas)
    new_params = sign_update(state.params, grad, config)
    loss, prob = oracle.score(new_params)
    return AttackState(state.iter + 1, new_params, loss, prob, tuple(float(g) for g in grad))


def verify_params(frame: RfFrame, label: int, params: ReconParams, model,
                  cutoff: float = 0.5, out_size=None) -> Tuple[bool, float]:
    """Reconstruct from scratch and rescore; True when the label is flipped."""
    size = out_size if out_size is not None else (299, 299)
    img = Reconstructor(frame, size)(params)
    p = float(model.predict(img))
    return predicted_label(p, cutoff) != label, p


def zoo_attack(frame: RfFrame, label: int, init: ReconParams = ReconParams(),
               config: AttackConfig = AttackConfig(), model=None,
               allow_misclassified: bool = False, out_size=(299, 299)) -> AttackResult:
    """Run the attack on one frame.

    Query schedule: one score at ``init``, then per iteration six probes
    and one score of the updated parameters, so ``model_queries`` is always
    ``1 + 7 * iters``. A success is re-verified with an independent
    reconstruction that is not counted in ``model_queries``.
    """
    if model is None:
        raise InvalidInputError("a model is required")
    if not config.in_bounds(init):
        raise InvalidInputError(f"initial parameters {init} lie outside the attack bounds")
    oracle = LossOracle(frame, label, model, Reconstructor(frame, out_size))
    loss, prob = oracle.score(init)
    if predicted_label(prob, config.cutoff) != label and not allow_misclassified:
        raise InitiallyMisclassifiedError(
            f"frame is misclassified at the initial parameters (p={prob:.6g}, label={label})")

    state = AttackState(0, init, loss, prob)
    trajectory = [state]
    reason = "max_iters"
    for _ in range(int(config.max_iters)):
        new = zoo_step(state, config, frame, label, model, oracle)
        trajectory.append(new)
        moved = new.params != state.params
        state = new
        if predicted_label(new.prob, config.cutoff) != label:
            reason = "misclassified"
            break
        if not moved:
            reason = "saturated"
            break

    verified = False
    if reason == "misclassified":
        verified, _ = verify_params(frame, label, state.params, model, config.cutoff, out_size)
    return AttackResult(
        success=reason == "misclassified" and verified,
        reason=reason,
        initial_params=init,
        final_params=state.params,
        trajectory=trajectory,
        model_queries=oracle.queries,
        verified=verified,
        label=int(label),
    )


@dataclass(frozen=True)
class GridPoint:
    params: ReconParams
    loss: float
    prob: float
    misclassified: bool


@dataclass
class GridResult:
    points: List[GridPoint] = field(default_factory=list)

    @property
    def misclassifying(self) -> List[GridPoint]:
        return [pt for pt in self.points if pt.misclassified]

    def as_dict(self) -> dict:
        return {pt.params.as_tuple(): (pt.loss, pt.prob, pt.misclassified) for pt in self.points}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["beta", "alpha_l", "alpha_u", "loss", "prob", "misclassified"])
        for pt in self.points:
            w.writerow([*(repr(v) for v in pt.params.as_tuple()), repr(pt.loss),
                        repr(pt.prob), int(pt.misclassified)])
        return buf.getvalue()


def grid_oracle(frame: RfFrame, label: int, bounds=AttackConfig.bounds, resolution=11,
                model=None, cutoff: float = 0.5, out_size=(299, 299)) -> GridResult:
    """Exhaustively score a uniform grid over the parameter box.

    ``resolution`` is a single count or one count per axis, each >= 2.
    """
    if model is None:
        raise InvalidInputError("a model is required")
    res = (resolution,) * 3 if np.isscalar(resolution) else tuple(resolution)
    if len(res) != 3 or any(int(r) < 2 for r in res):
        raise InvalidInputError(f"resolution must be >= 2 per axis, got {resolution}")
    axes = [np.linspace(lo, hi, int(r)) for (lo, hi), r in zip(bounds, res)]
    oracle = LossOracle(frame, label, model, Reconstructor(frame, out_size))
    result = GridResult()
    for b, lo, hi in itertools.product(*axes):
        params = ReconParams(float(b), float(lo), float(hi))
        loss, p = oracle.score(params)
        result.points.append(GridPoint(params, loss, p, predicted_label(p, cutoff) != label))
    return result

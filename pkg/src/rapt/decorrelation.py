"""Random-Fourier-feature decorrelation of pooled RoI features and proposal weight learning.

Within each cluster k, for every channel pair p < q, the weighted partial
cross-covariance between RFF embeddings of channel p (bank r) and channel q
(bank s) is

    S_pq = 1/(n_k - 1) * sum_i (w_i r(z_ip) - r_bar)(w_i s(z_iq) - s_bar)^T,
    r_bar = 1/n_k * sum_i w_i r(z_ip),  s_bar likewise,

and the loss is the sum of squared Frobenius norms over clusters and pairs.
Weights live on {w > 0 : per-cluster sum of w equals the cluster size}.

``form="conventional"`` switches to sum_i w_i (r_i - r_bar)(s_i - s_bar)^T,
which weights centered features instead of weighting before centering.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional, Union

import numpy as np

from .clustering import ClusterAssignment

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)


class NonFiniteError(FloatingPointError):
    """Loss or gradient became NaN/inf during optimization."""


@dataclass(frozen=True)
class RFFBank:
    omegas: np.ndarray
    phis: np.ndarray
    seed: int

    def __post_init__(self):
        if self.omegas.shape != self.phis.shape:
            raise ValueError("omegas and phis must have equal length")

    def __len__(self):
        return len(self.omegas)


def sample_rff(n: int, seed: int) -> tuple[RFFBank, RFFBank]:
    """Two independent banks: omega ~ N(0, 1), phi ~ Uniform[0, 2 pi)."""
    if n < 1:
        raise ValueError("need at least one random feature")
    banks = []
    for child in np.random.SeedSequence(seed).spawn(2):
        rng = np.random.default_rng(child)
        omegas = rng.standard_normal(n)
        phis = rng.uniform(0.0, 2.0 * np.pi, n)
        banks.append(RFFBank(omegas=omegas, phis=phis, seed=seed))
    return banks[0], banks[1]


def apply_rff(bank: RFFBank, x) -> np.ndarray:
    """sqrt(2) cos(omega x + phi); appends a trailing axis of length len(bank)."""
    x = np.asarray(x, dtype=np.float64)
    return SQRT2 * np.cos(x[..., None] * bank.omegas + bank.phis)


@dataclass
class DecorrConfig:
    n_rff: int = 5
    pair_budget: Union[int, Literal["all"]] = "all"
    steps: int = 20
    learning_rate: float = 1.0
    seed: int = 0
    form: Literal["literal", "conventional"] = "literal"
    line_search: bool = True
    step_growth: float = 1.0
    max_backtracks: int = 30
    resample_rff_per_batch: bool = False
    foreground_only: bool = False

    def __post_init__(self):
        if self.n_rff < 1:
            raise ValueError("n_rff must be >= 1")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.pair_budget != "all" and (isinstance(self.pair_budget, bool)
                                          or not isinstance(self.pair_budget, int) or self.pair_budget < 1):
            raise ValueError('pair_budget must be a positive count or "all"')
        if not self.step_growth >= 1.0:
            raise ValueError("step_growth must be >= 1")
        if self.form not in ("literal", "conventional"):
            raise ValueError(f"unknown covariance form {self.form!r}")


@dataclass
class SampleWeights:
    values: np.ndarray
    assignment: ClusterAssignment

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.assignment.labels.shape:
            raise ValueError("one weight per proposal is required")
        if not np.all(self.values > 0):
            raise ValueError("weights must be strictly positive")
        err = constraint_error(self.values, self.assignment)
        if err > 1e-6:
            raise ValueError(f"per-cluster weight sums off by {err:.3g} (relative)")

    @classmethod
    def uniform(cls, assignment: ClusterAssignment) -> "SampleWeights":
        return cls(np.ones(len(assignment.labels)), assignment)


def constraint_error(values: np.ndarray, assignment: ClusterAssignment) -> float:
    """Largest relative deviation of a cluster's weight sum from its size."""
    sums = np.bincount(assignment.labels, weights=values, minlength=assignment.k)
    nonempty = assignment.counts > 0
    if not nonempty.any():
        return 0.0
    return float(np.max(np.abs(sums[nonempty] - assignment.counts[nonempty]) / assignment.counts[nonempty]))


def project_to_W(raw, assignment: ClusterAssignment) -> SampleWeights:
    """Rescale positive weights so each cluster's weights sum to its size."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(raw > 0):
        raise ValueError("raw weights must be strictly positive")
    sums = np.bincount(assignment.labels, weights=raw, minlength=assignment.k)
    scale = np.divide(assignment.counts, sums, out=np.ones_like(sums), where=sums > 0)
    return SampleWeights(raw * scale[assignment.labels], assignment)


def select_pairs(n_channels: int, pair_budget: Union[int, str], seed: int) -> np.ndarray:
    """Boolean (C, C) matrix marking the channel pairs p < q entering the loss."""
    p, q = np.triu_indices(n_channels, k=1)
    chosen = np.zeros((n_channels, n_channels), dtype=bool)
    if pair_budget == "all" or pair_budget >= len(p):
        chosen[p, q] = True
        return chosen
    rng = np.random.default_rng(np.random.SeedSequence([seed, n_channels, pair_budget]))
    pick = np.sort(rng.choice(len(p), size=pair_budget, replace=False))
    chosen[p[pick], q[pick]] = True
    return chosen


def weighted_cross_cov(zp, zq, w, assignment: ClusterAssignment, k: int,
                       banks: tuple[RFFBank, RFFBank], form: str = "literal") -> np.ndarray:
    """N_RFF x N_RFF partial cross-covariance of channels p and q inside cluster k."""
    idx = assignment.members(k)
    n = len(idx)
    if n < 2:
        raise ValueError(f"cluster {k} has {n} member(s); need at least 2")
    values = w.values if isinstance(w, SampleWeights) else np.asarray(w, dtype=np.float64)
    wk = values[idx]
    r = apply_rff(banks[0], np.asarray(zp)[idx])
    s = apply_rff(banks[1], np.asarray(zq)[idx])
    r_bar = (wk[:, None] * r).sum(axis=0) / n
    s_bar = (wk[:, None] * s).sum(axis=0) / n
    if form == "literal":
        return (wk[:, None] * r - r_bar).T @ (wk[:, None] * s - s_bar) / (n - 1)
    return (wk[:, None] * (r - r_bar)).T @ (s - s_bar) / (n - 1)


class DecorrObjective:
    """Loss and analytic gradient for one batch; RFF embeddings are computed once."""

    def __init__(self, pooled, assignment: ClusterAssignment, cfg: DecorrConfig,
                 banks: Optional[tuple[RFFBank, RFFBank]] = None):
        pooled = np.asarray(pooled, dtype=np.float64)
        if pooled.ndim != 2 or len(pooled) != len(assignment.labels):
            raise ValueError("pooled features must be (N, C) aligned with the assignment")
        self.n, self.n_channels = pooled.shape
        self.assignment = assignment
        self.cfg = cfg
        self.banks = banks if banks is not None else sample_rff(cfg.n_rff, cfg.seed)
        n_rff = len(self.banks[0])
        pairs = select_pairs(self.n_channels, cfg.pair_budget, cfg.seed)
        self.pair_mask = np.kron(pairs, np.ones((n_rff, n_rff), dtype=bool))
        r = apply_rff(self.banks[0], pooled).reshape(self.n, -1)
        s = apply_rff(self.banks[1], pooled).reshape(self.n, -1)
        self.groups = []
        for k in range(assignment.k):
            idx = assignment.members(k)
            if len(idx) < 2:
                if len(idx):
                    log.debug("cluster %d has a single member; contributes no covariance", k)
                continue
            self.groups.append((idx, r[idx], s[idx]))

    def _cov(self, r, s, wk):
        n = len(wk)
        if self.cfg.form == "literal":
            a = wk[:, None] * r
            b = wk[:, None] * s
            ac = a - a.mean(axis=0)
            bc = b - b.mean(axis=0)
            m = np.where(self.pair_mask, ac.T @ bc, 0.0) / (n - 1)
            return m, ac, bc
        r_bar = (wk[:, None] * r).sum(axis=0) / n
        s_bar = (wk[:, None] * s).sum(axis=0) / n
        m = np.where(self.pair_mask, (wk[:, None] * (r - r_bar)).T @ (s - s_bar), 0.0) / (n - 1)
        return m, r_bar, s_bar

    def loss(self, w) -> float:
        w = np.asarray(w, dtype=np.float64)
        total = 0.0
        for idx, r, s in self.groups:
            m, _, _ = self._cov(r, s, w[idx])
            total += float(np.sum(m * m))
        return total

    def loss_and_grad(self, w) -> tuple[float, np.ndarray]:
        w = np.asarray(w, dtype=np.float64)
        total = 0.0
        grad = np.zeros(self.n)
        for idx, r, s in self.groups:
            wk = w[idx]
            n = len(idx)
            m, x1, x2 = self._cov(r, s, wk)
            total += float(np.sum(m * m))
            if self.cfg.form == "literal":
                ac, bc = x1, x2
                g = (r * (bc @ m.T)).sum(axis=1) + (s * (ac @ m)).sum(axis=1)
            else:
                r_bar, s_bar = x1, x2
                shift = (wk.sum() - 2 * n) / n
                g = ((r * (s @ m.T)).sum(axis=1)
                     + shift * (r @ (m @ s_bar) + s @ (m.T @ r_bar))
                     + r_bar @ m @ s_bar)
            grad[idx] = 2.0 / (n - 1) * g
        return total, grad


def decorr_loss(pooled, w, assignment: ClusterAssignment, cfg: DecorrConfig,
                banks: Optional[tuple[RFFBank, RFFBank]] = None) -> float:
    values = w.values if isinstance(w, SampleWeights) else w
    return DecorrObjective(pooled, assignment, cfg, banks).loss(values)


def decorr_grad(pooled, w, assignment: ClusterAssignment, cfg: DecorrConfig,
                banks: Optional[tuple[RFFBank, RFFBank]] = None) -> np.ndarray:
    """Partial derivatives of the loss w.r.t. each raw weight (cluster sizes held fixed)."""
    values = w.values if isinstance(w, SampleWeights) else w
    return DecorrObjective(pooled, assignment, cfg, banks).loss_and_grad(values)[1]


@dataclass
class WeightTrace:
    """Per-batch record of the weight optimization."""

    loss_before: float = 0.0
    loss_after: float = 0.0
    accepted_steps: int = 0
    projections: int = 0
    max_constraint_error: float = 0.0
    min_weight: float = math.inf
    losses: list = field(default_factory=list)


def optimize_weights(pooled, assignment: ClusterAssignment, cfg: DecorrConfig,
                     banks: Optional[tuple[RFFBank, RFFBank]] = None,
                     callback: Optional[Callable[[int, np.ndarray], None]] = None,
                     trace: Optional[WeightTrace] = None) -> SampleWeights:
    """Projected gradient descent on log-weights, starting from all-ones.

    Each step moves u = log w against the chain-ruled gradient, maps back with
    exp and projects onto the per-cluster sum constraint. With line search on,
    a step that would raise the loss is halved until it does not (or dropped),
    so the final loss never exceeds the uniform-weight loss; after an accepted
    step the step size grows by `step_growth`, starting from `learning_rate`.
    """
    obj = DecorrObjective(pooled, assignment, cfg, banks)
    trace = trace if trace is not None else WeightTrace()
    w = np.ones(obj.n)
    u = np.zeros(obj.n)
    loss, grad = obj.loss_and_grad(w)
    if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
        raise NonFiniteError("non-finite decorrelation loss at uniform weights")
    trace.loss_before = loss
    trace.losses.append(loss)

    def project(u_new):
        raw = np.exp(u_new - u_new.max())
        if not (np.all(np.isfinite(raw)) and np.all(raw > 0)):
            return None  # the step overflowed or drove a weight to exactly zero
        w_new = project_to_W(raw, assignment).values
        trace.projections += 1
        trace.max_constraint_error = max(trace.max_constraint_error, constraint_error(w_new, assignment))
        trace.min_weight = min(trace.min_weight, float(w_new.min()))
        return w_new

    lr = cfg.learning_rate
    for step in range(cfg.steps):
        direction = grad * w  # d loss / d u
        accepted = False
        for _ in range(cfg.max_backtracks + 1 if cfg.line_search else 1):
            w_try = project(u - lr * direction)
            loss_try = obj.loss(w_try) if w_try is not None else math.nan
            if not cfg.line_search:
                if not math.isfinite(loss_try):
                    raise NonFiniteError(f"decorrelation loss diverged at step {step}")
                accepted = True
                break
            if math.isfinite(loss_try) and loss_try <= loss:
                accepted = True
                break
            lr *= 0.5
        if not accepted:
            log.debug("no descent step found at step %d; keeping weights", step)
            break
        w = w_try
        u = np.log(w)
        if cfg.line_search:
            lr *= cfg.step_growth
        loss, grad = obj.loss_and_grad(w)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            raise NonFiniteError(f"non-finite gradient at step {step}")
        trace.accepted_steps += 1
        trace.losses.append(loss)
        if callback is not None:
            callback(step, w)
    trace.loss_after = loss
    return SampleWeights(w, assignment)

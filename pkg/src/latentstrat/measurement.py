"""Item response models: Rasch, 2PL, generalized partial credit, graded response.

Category codes are 0-based: an item with K categories is scored in
{0, ..., K-1} and carries K-1 intercepts. Binary items are the K=2 case with a
single intercept. Responses are conditionally independent given the trait
(local independence), so matrix log-likelihoods are sums over observed cells.

Two evaluation paths coexist on purpose: scalar per-response functions
(`category_probs`, `response_log_lik`, `response_grad`) written in the most
direct form, and batched matrix kernels (`matrix_terms`) used by the posterior
hot path. The test suite cross-checks them against each other and against
finite differences.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

MISSING = -1

# Logistic pieces are evaluated through exp(-|x|), which never overflows; the
# resulting probabilities and softplus values are accurate for |x| up to ~700.


def _sigmoid(x):
    x = np.asarray(x, dtype=float)
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def _softplus(x):
    """log(1 + e^x), branch-stable."""
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _log_sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


class ItemKind(enum.Enum):
    RASCH = "rasch"
    TWO_PL = "2pl"
    GPCM = "gpcm"
    GRM = "grm"

    @property
    def has_slope(self) -> bool:
        return self is not ItemKind.RASCH

    @property
    def is_binary(self) -> bool:
        return self in (ItemKind.RASCH, ItemKind.TWO_PL)


@dataclass(frozen=True)
class ItemParams:
    """Parameters of one item.

    slope is None exactly for Rasch (fixed at 1); intercepts has length K-1
    and must be strictly decreasing for the graded response model.
    """

    kind: ItemKind
    intercepts: tuple[float, ...]
    slope: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "intercepts", tuple(float(d) for d in self.intercepts))
        if self.kind is ItemKind.RASCH:
            if self.slope is not None:
                raise ValidationError("Rasch items have no slope parameter")
        else:
            if self.slope is None:
                raise ValidationError(f"{self.kind.value} items require a slope")
            object.__setattr__(self, "slope", float(self.slope))
            if not np.isfinite(self.slope) or self.slope <= 0:
                raise ValidationError(f"slope must be a positive finite real, got {self.slope}")
        if len(self.intercepts) < 1:
            raise ValidationError("items require at least one intercept")
        if not all(np.isfinite(d) for d in self.intercepts):
            raise ValidationError("intercepts must be finite")
        if self.kind.is_binary and len(self.intercepts) != 1:
            raise ValidationError(
                f"binary items have exactly one intercept, got {len(self.intercepts)}"
            )
        if self.kind is ItemKind.GRM:
            diffs = np.diff(self.intercepts)
            if len(diffs) and not np.all(diffs < 0):
                raise ValidationError(
                    "graded response intercepts must be strictly decreasing "
                    f"(got {self.intercepts})"
                )

    @property
    def n_categories(self) -> int:
        return len(self.intercepts) + 1


@dataclass(frozen=True, eq=False)
class ResponseMatrix:
    """Integer response matrix over treated subjects; MISSING marks unobserved cells."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ValidationError(f"response matrix must be 2-d, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValidationError("response matrix entries must be integers")
        arr = arr.astype(np.int64)
        if arr.size and arr.min() < MISSING:
            raise ValidationError("response categories must be >= 0 (or MISSING)")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def n_subjects(self) -> int:
        return self.data.shape[0]

    @property
    def n_items(self) -> int:
        return self.data.shape[1]

    @property
    def observed(self) -> np.ndarray:
        return self.data != MISSING

    def __eq__(self, other):
        if not isinstance(other, ResponseMatrix):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.all(self.data == other.data))


def _slope_value(item: ItemParams) -> float:
    return 1.0 if item.slope is None else item.slope


def category_probs(eta: float, item: ItemParams) -> np.ndarray:
    """Probability of each of the K categories at trait value eta."""
    if not np.isfinite(eta):
        raise ValidationError(f"eta must be finite, got {eta}")
    a = _slope_value(item)
    d = np.asarray(item.intercepts, dtype=float)
    if item.kind.is_binary:
        phi = float(_sigmoid(a * eta + d[0]))
        return np.array([1.0 - phi, phi])
    if item.kind is ItemKind.GPCM:
        # cumulative kernels S_k = sum_{l<=k} (a*eta + d_l), with the l=0 term == 0
        s = np.concatenate([[0.0], np.cumsum(a * eta + d)])
        s -= s.max()
        p = np.exp(s)
        return p / p.sum()
    # graded response: P(M >= k) = sigmoid(a*eta + d_k), boundaries 1 and 0
    pstar = np.concatenate([[1.0], _sigmoid(a * eta + d), [0.0]])
    return -np.diff(pstar)


def response_log_lik(m: int, eta: float, item: ItemParams) -> float:
    """Log-probability of observing category m at trait value eta."""
    m = _check_category(m, item)
    a = _slope_value(item)
    d = np.asarray(item.intercepts, dtype=float)
    if item.kind.is_binary:
        x = a * eta + d[0]
        return float(m * x - _softplus(x))
    if item.kind is ItemKind.GPCM:
        s = np.concatenate([[0.0], np.cumsum(a * eta + d)])
        mx = s.max()
        return float(s[m] - mx - np.log(np.exp(s - mx).sum()))
    return float(_grm_log_prob(m, a * eta + d))


def _grm_log_prob(m: int, x: np.ndarray) -> float:
    """log(sigmoid(x_m) - sigmoid(x_{m+1})) with x_0 := +inf, x_K := -inf."""
    K = len(x) + 1
    if m == 0:
        return float(_log_sigmoid(-x[0]))
    if m == K - 1:
        return float(_log_sigmoid(x[-1]))
    # sigmoid(a) - sigmoid(b) = sigmoid(a) * sigmoid(-b) * (1 - e^(b-a)) for a > b
    return float(_log_sigmoid(x[m - 1]) + _log_sigmoid(-x[m]) + np.log(-np.expm1(x[m] - x[m - 1])))


@dataclass(frozen=True)
class ResponseGrad:
    """Gradient of response_log_lik wrt (eta, slope, each intercept)."""

    eta: float
    slope: float | None
    intercepts: np.ndarray


def response_grad(m: int, eta: float, item: ItemParams) -> ResponseGrad:
    m = _check_category(m, item)
    a = _slope_value(item)
    d = np.asarray(item.intercepts, dtype=float)
    if item.kind.is_binary:
        resid = m - float(_sigmoid(a * eta + d[0]))
        g_a = eta * resid if item.kind.has_slope else None
        return ResponseGrad(eta=a * resid, slope=g_a, intercepts=np.array([resid]))
    if item.kind is ItemKind.GPCM:
        p = category_probs(eta, item)
        k = np.arange(len(p))
        resid = m - float((k * p).sum())
        # d/d d_l = 1{m >= l} - P(category >= l), l = 1..K-1
        tail = p[::-1].cumsum()[::-1]
        g_d = (m >= k[1:]).astype(float) - tail[1:]
        return ResponseGrad(eta=a * resid, slope=eta * resid, intercepts=g_d)
    # graded response
    x = a * eta + d
    pstar = np.concatenate([[1.0], _sigmoid(x), [0.0]])
    dens = pstar * (1.0 - pstar)  # zero at both boundary slots
    p = pstar[m] - pstar[m + 1]
    g_x = np.zeros(len(d))
    if m >= 1:
        g_x[m - 1] += dens[m] / p
    if m + 1 <= len(d):
        g_x[m] -= dens[m + 1] / p
    g_eta = a * (dens[m] - dens[m + 1]) / p
    g_a = eta * (dens[m] - dens[m + 1]) / p
    return ResponseGrad(eta=float(g_eta), slope=float(g_a), intercepts=g_x)


def _check_category(m: int, item: ItemParams) -> int:
    m = int(m)
    if not 0 <= m < item.n_categories:
        raise ValidationError(
            f"category {m} out of range for a {item.n_categories}-category item"
        )
    return m


@dataclass(frozen=True, eq=False)
class PackedItems:
    """Column-wise item parameter arrays for batched likelihood evaluation.

    slopes: (J,), all ones for Rasch. intercepts: (J, max K-1), padded with 0.
    cats: (J,) category counts.
    """

    kind: ItemKind
    slopes: np.ndarray
    intercepts: np.ndarray
    cats: np.ndarray


def pack_items(items: list[ItemParams]) -> PackedItems:
    if not items:
        raise ValidationError("at least one item is required")
    kinds = {item.kind for item in items}
    if len(kinds) != 1:
        raise ValidationError("all items in one instrument must share a kind")
    kind = items[0].kind
    J = len(items)
    cats = np.array([item.n_categories for item in items], dtype=np.int64)
    kc = int(cats.max()) - 1
    slopes = np.array([_slope_value(item) for item in items])
    intercepts = np.zeros((J, kc))
    for j, item in enumerate(items):
        intercepts[j, : cats[j] - 1] = item.intercepts
    return PackedItems(kind=kind, slopes=slopes, intercepts=intercepts, cats=cats)


@dataclass(frozen=True, eq=False)
class PreparedResponses:
    """Data-dependent constants of a response matrix, reusable across evaluations."""

    kind: ItemKind
    m_safe: np.ndarray       # responses with MISSING replaced by 0
    obs_f: np.ndarray        # observed indicator as float
    mf: np.ndarray | None    # binary kinds: observed successes as float
    # graded response gather/scatter indices over observed cells
    subj: np.ndarray | None = None
    item: np.ndarray | None = None
    m_obs: np.ndarray | None = None
    has_lower: np.ndarray | None = None
    has_upper: np.ndarray | None = None


def prepare_responses(kind: ItemKind, M: np.ndarray, cats: np.ndarray) -> PreparedResponses:
    M = np.asarray(M)
    obs = M != MISSING
    obs_f = obs.astype(float)
    m_safe = np.where(obs, M, 0).astype(np.int64)
    if kind.is_binary:
        return PreparedResponses(kind, m_safe, obs_f, mf=(m_safe * obs_f))
    if kind is ItemKind.GPCM:
        return PreparedResponses(kind, m_safe, obs_f, mf=None)
    subj, item = np.nonzero(obs)
    m_obs = m_safe[subj, item]
    return PreparedResponses(
        kind, m_safe, obs_f, mf=None,
        subj=subj, item=item, m_obs=m_obs,
        has_lower=m_obs >= 1,
        has_upper=(m_obs + 1) <= (np.asarray(cats)[item] - 1),
    )


def matrix_log_lik(matrix: ResponseMatrix, etas: np.ndarray, items: list[ItemParams]) -> float:
    """Sum of response log-likelihoods over all observed cells."""
    etas = np.asarray(etas, dtype=float)
    if matrix.n_subjects != len(etas):
        raise ValidationError(
            f"{matrix.n_subjects} response rows but {len(etas)} trait values"
        )
    if matrix.n_items != len(items):
        raise ValidationError(f"{matrix.n_items} response columns but {len(items)} items")
    packed = pack_items(items)
    for j, item in enumerate(items):
        col = matrix.data[:, j]
        if col.size and col.max() >= item.n_categories:
            raise ValidationError(
                f"item {j + 1} has response {col.max()} but only "
                f"{item.n_categories} categories"
            )
    prep = prepare_responses(packed.kind, matrix.data, packed.cats)
    ll, _, _, _ = matrix_terms(packed, prep, etas)
    return float(ll)


def matrix_terms(packed: PackedItems, prep: PreparedResponses, etas: np.ndarray):
    """Batched log-likelihood and gradients over an (n, J) response matrix.

    Missing cells contribute nothing. Returns
    (log_lik, d_eta (n,), d_slope (J,) or None, d_intercepts (J, max K-1)).
    """
    if packed.kind is not prep.kind:
        raise ValidationError("prepared responses were built for a different model kind")
    if packed.kind.is_binary:
        return _binary_terms(packed, prep, etas)
    if packed.kind is ItemKind.GPCM:
        return _gpcm_terms(packed, prep, etas)
    return _grm_terms(packed, prep, etas)


def _binary_terms(packed, prep, etas):
    rasch = packed.kind is ItemKind.RASCH
    d = packed.intercepts[:, 0]
    if rasch:
        x = etas[:, None] + d[None, :]
    else:
        x = etas[:, None] * packed.slopes[None, :] + d[None, :]
    obs_f, mf = prep.obs_f, prep.mf
    t = np.exp(-np.abs(x))
    phi = np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
    softplus = np.maximum(x, 0.0) + np.log1p(t)
    ll = (mf * x).sum() - (obs_f * softplus).sum()
    resid = mf - obs_f * phi
    if rasch:
        d_eta = resid.sum(axis=1)
        d_slope = None
    else:
        d_eta = resid @ packed.slopes
        d_slope = etas @ resid
    d_int = np.zeros_like(packed.intercepts)
    d_int[:, 0] = resid.sum(axis=0)
    return ll, d_eta, d_slope, d_int


def _gpcm_terms(packed, prep, etas):
    J, kc = packed.intercepts.shape
    kmax = kc + 1
    ks = np.arange(kmax)
    obs_f, m_safe = prep.obs_f, prep.m_safe
    cum_d = np.concatenate([np.zeros((J, 1)), np.cumsum(packed.intercepts, axis=1)], axis=1)
    ae = etas[:, None] * packed.slopes[None, :]
    s = ae[:, :, None] * ks[None, None, :] + cum_d[None, :, :]
    valid = ks[None, :] < packed.cats[:, None]
    s = np.where(valid[None, :, :], s, -np.inf)
    smax = s.max(axis=2)
    p = np.exp(s - smax[:, :, None])
    psum = p.sum(axis=2)
    p /= psum[:, :, None]
    s_at_m = np.take_along_axis(s, m_safe[:, :, None], axis=2)[:, :, 0]
    ll = (obs_f * (s_at_m - smax - np.log(psum))).sum()
    ek = (p * ks[None, None, :]).sum(axis=2)
    resid = obs_f * (m_safe - ek)
    d_eta = resid @ packed.slopes
    d_slope = etas @ resid
    # d/d d_l = 1{m >= l} - P(category >= l) for l = 1..K-1
    tail = np.cumsum(p[:, :, ::-1], axis=2)[:, :, ::-1]
    ge = (m_safe[:, :, None] >= ks[None, None, 1:]) - tail[:, :, 1:]
    d_int = np.einsum("ij,ijl->jl", obs_f, ge)
    return ll, d_eta, d_slope, d_int


def _grm_terms(packed, prep, etas):
    n = len(etas)
    J, kc = packed.intercepts.shape
    obs_f, m_safe = prep.obs_f, prep.m_safe
    x = etas[:, None, None] * packed.slopes[None, :, None] + packed.intercepts[None, :, :]
    # extend with x_0 = +inf and x_K = -inf so every category uses one formula;
    # threshold slots at or beyond an item's K are -inf as well
    thresh_valid = np.arange(1, kc + 1)[None, :] < packed.cats[:, None]
    x = np.where(thresh_valid[None, :, :], x, -np.inf)
    xext = np.concatenate(
        [np.full((n, J, 1), np.inf), x, np.full((n, J, 1), -np.inf)], axis=2
    )
    x_lo = np.take_along_axis(xext, m_safe[:, :, None], axis=2)[:, :, 0]
    x_hi = np.take_along_axis(xext, m_safe[:, :, None] + 1, axis=2)[:, :, 0]
    with np.errstate(invalid="ignore"):
        logp = _log_sigmoid(x_lo) + _log_sigmoid(-x_hi) + np.log(-np.expm1(x_hi - x_lo))
    logp = np.where(obs_f > 0, logp, 0.0)
    ll = (obs_f * logp).sum()
    pstar_lo = _sigmoid(x_lo)
    pstar_hi = _sigmoid(x_hi)
    dens_lo = np.where(np.isfinite(x_lo), pstar_lo * (1.0 - pstar_lo), 0.0)
    dens_hi = np.where(np.isfinite(x_hi), pstar_hi * (1.0 - pstar_hi), 0.0)
    with np.errstate(over="ignore"):
        pinv = obs_f * np.exp(-logp)
    diff = (dens_lo - dens_hi) * pinv
    d_eta = diff @ packed.slopes
    d_slope = etas @ diff
    d_int = np.zeros((J, kc))
    subj, item, m_obs = prep.subj, prep.item, prep.m_obs
    lo, hi = prep.has_lower, prep.has_upper
    np.add.at(d_int, (item[lo], m_obs[lo] - 1), (dens_lo * pinv)[subj[lo], item[lo]])
    np.add.at(d_int, (item[hi], m_obs[hi]), -(dens_hi * pinv)[subj[hi], item[hi]])
    return ll, d_eta, d_slope, d_int

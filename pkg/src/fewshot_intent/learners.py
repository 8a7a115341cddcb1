"""Differentiable per-episode base learners.

Each learner fits on support embeddings and returns query logits together with
the state its backward pass needs.  Gradients flow to both support and query
embeddings and to the logit temperature.

* ``proto``: negative squared distance to class centroids.
* ``ridge``: closed-form ridge regression onto one-hot targets, solved in the
  dual (Woodbury) form so the linear system is (n*m) x (n*m).
* ``svm``: Crammer-Singer multi-class SVM dual, solved by a fixed number of
  projected-gradient ascent steps; backward unrolls those steps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from .errors import ConditioningError, InputError, NumericalError

KINDS = ("proto", "ridge", "svm")
RCOND_MIN = 1e-12


@dataclass
class LearnerConfig:
    kind: str = "proto"
    temperature: float = 1.0
    ridge_lambda: float = 50.0
    svm_C: float = 0.1
    svm_max_iter: int = 15

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown learner {self.kind!r}, expected one of {KINDS}")
        if not (np.isfinite(self.temperature) and self.temperature > 0):
            raise InputError(f"temperature must be finite and positive, got {self.temperature}")
        if self.ridge_lambda < 0:
            raise InputError("ridge_lambda must be nonnegative")
        if self.svm_C <= 0:
            raise InputError("svm_C must be positive")
        if self.svm_max_iter < 1:
            raise InputError("svm_max_iter must be positive")


@dataclass
class LearnerOutput:
    logits: np.ndarray
    state: object


def onehot(labels, n_way: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_way))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _check_logits(logits, kind):
    if not np.all(np.isfinite(logits)):
        raise NumericalError(f"{kind} learner produced non-finite logits")
    return logits


# -- prototypes ---------------------------------------------------------------


@dataclass
class ProtoState:
    query: np.ndarray
    prototypes: np.ndarray
    labels: np.ndarray
    counts: np.ndarray
    sqdist: np.ndarray
    temperature: float


def proto_forward(support_emb, support_labels, query_emb, cfg: LearnerConfig, n_way: int | None = None) -> LearnerOutput:
    X = np.asarray(support_emb, dtype=np.float64)
    Q = np.asarray(query_emb, dtype=np.float64)
    labels = np.asarray(support_labels, dtype=np.int64)
    n_way = int(labels.max()) + 1 if n_way is None else n_way
    counts = np.bincount(labels, minlength=n_way).astype(np.float64)
    if np.any(counts == 0):
        raise InputError(f"class {int(np.argmin(counts))} has no support examples")
    protos = onehot(labels, n_way).T @ X / counts[:, None]
    diff = Q[:, None, :] - protos[None, :, :]
    sqdist = np.einsum("qkd,qkd->qk", diff, diff)
    logits = -cfg.temperature * sqdist
    return LearnerOutput(_check_logits(logits, "proto"), ProtoState(Q, protos, labels, counts, sqdist, cfg.temperature))


def _proto_backward(st: ProtoState, G):
    d_temp = -np.sum(G * st.sqdist)
    d_sq = -st.temperature * G
    diff = st.query[:, None, :] - st.prototypes[None, :, :]
    weighted = d_sq[:, :, None] * diff
    dQ = 2.0 * weighted.sum(axis=1)
    dP = -2.0 * weighted.sum(axis=0)
    dX = dP[st.labels] / st.counts[st.labels, None]
    return dX, dQ, d_temp


# -- ridge regression -----------------------------------------------------------


def factorize(A):
    """LU factorization with a reciprocal-condition guard."""
    lu, piv = scipy.linalg.lu_factor(A, check_finite=True)
    anorm = np.linalg.norm(A, 1)
    rcond, info = lapack.dgecon(lu, anorm, norm="1")
    if info != 0 or not rcond >= RCOND_MIN:
        raise ConditioningError(f"linear system is ill-conditioned (rcond={rcond:.3g})")
    return lu, piv


@dataclass
class RidgeState:
    support: np.ndarray
    query: np.ndarray
    factor: tuple
    dual: np.ndarray
    weights: np.ndarray
    raw: np.ndarray
    temperature: float


def ridge_forward(support_emb, support_onehot, query_emb, cfg: LearnerConfig) -> LearnerOutput:
    X = np.asarray(support_emb, dtype=np.float64)
    Y = np.asarray(support_onehot, dtype=np.float64)
    Q = np.asarray(query_emb, dtype=np.float64)
    if X.shape[0] < 1 or Y.shape[0] != X.shape[0]:
        raise InputError("ridge needs at least one support row and matching targets")
    A = X @ X.T + cfg.ridge_lambda * np.eye(X.shape[0])
    factor = factorize(A)
    dual = scipy.linalg.lu_solve(factor, Y)
    W = X.T @ dual
    raw = Q @ W
    logits = cfg.temperature * raw
    state = RidgeState(X, Q, factor, dual, W, raw, cfg.temperature)
    return LearnerOutput(_check_logits(logits, "ridge"), state)


def ridge_primal(support_emb, support_onehot, lam) -> np.ndarray:
    """Primal normal-equations weights (X^T X + lam I)^-1 X^T Y, used as an oracle."""
    X = np.asarray(support_emb, dtype=np.float64)
    A = X.T @ X + lam * np.eye(X.shape[1])
    return np.linalg.solve(A, X.T @ np.asarray(support_onehot, dtype=np.float64))


def _ridge_backward(st: RidgeState, G):
    d_temp = np.sum(G * st.raw)
    Gs = st.temperature * G
    dQ = Gs @ st.weights.T
    dW = st.query.T @ Gs
    # W = X^T D with D = A^-1 Y, A = X X^T + lam I
    dX = st.dual @ dW.T
    dD = st.support @ dW
    Z = scipy.linalg.lu_solve(st.factor, dD, trans=1)
    dA = -Z @ st.dual.T
    dX += (dA + dA.T) @ st.support
    return dX, dQ, d_temp


# -- Crammer-Singer SVM ---------------------------------------------------------


def project_simplex(U, radius: float):
    """Row-wise Euclidean projection onto ``{b >= 0, sum(b) = radius}``.

    Returns the projection and the boolean support mask.  Sorting is stable on
    the negated values, so among equal entries the lower index ranks first.
    """
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    n = U.shape[1]
    order = np.argsort(-U, axis=1, kind="stable")
    srt = np.take_along_axis(U, order, axis=1)
    css = np.cumsum(srt, axis=1) - radius
    ks = np.arange(1, n + 1)
    cond = srt - css / ks > 0
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(U.shape[0]), rho] / (rho + 1)
    B = U - theta[:, None]
    mask = B > 0
    return np.where(mask, B, 0.0), mask


def svm_project(V, Y, C):
    """Project dual rows onto ``{a <= C*y, sum(a) = 0}`` via ``b = C*y - a`` on the C-simplex."""
    B, mask = project_simplex(C * Y - V, C)
    return C * Y - B, mask


def svm_dual_objective(alpha, K, Y) -> float:
    return float(-0.5 * np.sum(alpha * (K @ alpha)) + np.sum(alpha * Y))


def svm_solve(K, Y, C, n_iter, trace_reg=1e-12):
    """Projected-gradient ascent from zero; returns iterates, masks and step size."""
    if not np.all(np.isfinite(K)):
        raise NumericalError("svm solver received a non-finite Gram matrix at iteration 0")
    L = np.trace(K) + trace_reg
    eta = 1.0 / L
    alphas = [np.zeros_like(Y)]
    masks = []
    for t in range(n_iter):
        a = alphas[-1]
        nxt, mask = svm_project(a + eta * (Y - K @ a), Y, C)
        if not np.all(np.isfinite(nxt)):
            raise NumericalError(f"svm solver produced non-finite duals at iteration {t}")
        alphas.append(nxt)
        masks.append(mask)
    return alphas, masks, eta, L


@dataclass
class SvmState:
    support: np.ndarray
    query: np.ndarray
    onehot: np.ndarray
    gram: np.ndarray
    alphas: list
    masks: list
    eta: float
    lipschitz: float
    weights: np.ndarray
    raw: np.ndarray
    temperature: float


def svm_forward(support_emb, support_labels, query_emb, cfg: LearnerConfig, n_way: int | None = None) -> LearnerOutput:
    X = np.asarray(support_emb, dtype=np.float64)
    Q = np.asarray(query_emb, dtype=np.float64)
    labels = np.asarray(support_labels, dtype=np.int64)
    n_way = int(labels.max()) + 1 if n_way is None else n_way
    if n_way < 2:
        raise InputError("svm needs at least two classes")
    if np.any(np.bincount(labels, minlength=n_way) == 0):
        raise InputError("svm: every class needs a support example")
    Y = onehot(labels, n_way)
    K = X @ X.T
    alphas, masks, eta, L = svm_solve(K, Y, cfg.svm_C, cfg.svm_max_iter)
    W = alphas[-1].T @ X
    raw = Q @ W.T
    logits = cfg.temperature * raw
    state = SvmState(X, Q, Y, K, alphas, masks, eta, L, W, raw, cfg.temperature)
    return LearnerOutput(_check_logits(logits, "svm"), state)


def _svm_backward(st: SvmState, G):
    d_temp = np.sum(G * st.raw)
    Gs = st.temperature * G
    dQ = Gs @ st.weights
    dW = Gs.T @ st.query
    g_alpha = st.support @ dW.T
    dX = st.alphas[-1] @ dW
    g_K = np.zeros_like(st.gram)
    g_eta = 0.0
    for t in range(len(st.masks) - 1, -1, -1):
        m = st.masks[t]
        # Jacobian of the simplex projection: centre the gradient on the support set
        gm = g_alpha * m
        g_v = (gm - m * (gm.sum(axis=1, keepdims=True) / m.sum(axis=1, keepdims=True)))
        a = st.alphas[t]
        g_eta += np.sum(g_v * (st.onehot - st.gram @ a))
        g_K -= st.eta * (g_v @ a.T)
        g_alpha = g_v - st.eta * (st.gram @ g_v)
    dX += (g_K + g_K.T) @ st.support
    # eta = 1 / (||X||_F^2 + reg)
    dX += (-g_eta / st.lipschitz**2) * 2.0 * st.support
    return dX, dQ, d_temp


# -- dispatch -------------------------------------------------------------------


def learner_forward(cfg: LearnerConfig, support_emb, support_labels, query_emb, n_way: int) -> LearnerOutput:
    if cfg.kind == "proto":
        return proto_forward(support_emb, support_labels, query_emb, cfg, n_way)
    if cfg.kind == "ridge":
        return ridge_forward(support_emb, onehot(support_labels, n_way), query_emb, cfg)
    return svm_forward(support_emb, support_labels, query_emb, cfg, n_way)


_BACKWARD = {"proto": (ProtoState, _proto_backward), "ridge": (RidgeState, _ridge_backward), "svm": (SvmState, _svm_backward)}


def learner_backward(kind: str, state, grad_logits):
    """Return ``(grad_support, grad_query, grad_temperature)``."""
    if kind not in _BACKWARD:
        raise InputError(f"unknown learner {kind!r}")
    cls, fn = _BACKWARD[kind]
    if not isinstance(state, cls):
        raise InputError(f"state of type {type(state).__name__} does not belong to learner {kind!r}")
    G = np.asarray(grad_logits, dtype=np.float64)
    dX, dQ, d_temp = fn(state, G)
    return dX, dQ, float(d_temp)

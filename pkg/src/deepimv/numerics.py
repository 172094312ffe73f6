"""Dense float64 kernels: MLP forward/backward, init, Adam, dropout, softmax, Jacobi eigensolver."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

TRAIN = "train"
EVAL = "eval"


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; same seed gives the same stream on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def check_finite(a: np.ndarray, what: str = "array") -> None:
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(np.asarray(a)))[0]
        raise NumericError(f"non-finite value in {what} at index {tuple(int(i) for i in bad)}")


@dataclass
class MlpParams:
    """Weights are (fan_out, fan_in); layer k output feeds layer k+1."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight and at least one layer")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(
                    f"layer {k} fan_in {w.shape[1]} != layer {k - 1} fan_out {self.weights[k - 1].shape[0]}"
                )

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class MlpCache:
    """Everything mlp_backprop needs to replay a forward pass."""

    params: MlpParams
    inputs: list[np.ndarray]  # input to each layer
    preacts: list[np.ndarray]  # affine output of each hidden layer
    masks: list[Optional[np.ndarray]]  # dropout mask per hidden layer (None in eval)
    out_shape: tuple[int, int]


def xavier_init(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform (fan_out, fan_in) weight matrix."""
    if fan_in < 1 or fan_out < 1:
        raise ContractError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def init_mlp(sizes: Sequence[int], rng: np.random.Generator) -> MlpParams:
    """Xavier weights and zero biases for layer widths ``sizes`` (input first)."""
    if len(sizes) < 2:
        raise ContractError("an MLP needs an input and an output size")
    ws = [xavier_init(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
    bs = [np.zeros(b) for b in sizes[1:]]
    return MlpParams(ws, bs)


def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``rate``, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def mlp_apply(
    params: MlpParams,
    x: np.ndarray,
    mode: str = EVAL,
    dropout_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    masks: Optional[Sequence[Optional[np.ndarray]]] = None,
) -> tuple[np.ndarray, MlpCache]:
    """Affine -> ReLU -> dropout on hidden layers, affine only on the last one.

    Passing ``masks`` replays previously drawn dropout masks instead of sampling
    (used for frozen-noise gradient checks).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[1]:
        raise ShapeError(f"input shape {x.shape} does not match fan_in {params.weights[0].shape[1]}")
    check_finite(x, "MLP input")
    if mode not in (TRAIN, EVAL):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {dropout_rate}")

    inputs, preacts, used_masks = [], [], []
    h = x
    last = params.n_layers - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        a = h @ w.T + b
        if k == last:
            h = a
            break
        preacts.append(a)
        h = np.maximum(a, 0.0)
        mask = None
        if mode == TRAIN:
            if masks is not None:
                mask = masks[k]
            elif dropout_rate > 0.0:
                if rng is None:
                    raise ContractError("train mode with dropout needs an rng")
                mask = dropout_mask(h.shape, dropout_rate, rng)
            if mask is not None:
                h = h * mask
        used_masks.append(mask)
    return h, MlpCache(params, inputs, preacts, used_masks, h.shape)


def mlp_backprop(cache: MlpCache, grad_output: np.ndarray) -> tuple[MlpParams, np.ndarray]:
    """Reverse-mode gradients of the cached forward pass."""
    if grad_output.shape != cache.out_shape:
        raise ContractError(f"grad_output shape {grad_output.shape} != cached output {cache.out_shape}")
    params = cache.params
    gw = [None] * params.n_layers
    gb = [None] * params.n_layers
    g = grad_output
    for k in range(params.n_layers - 1, -1, -1):
        gw[k] = g.T @ cache.inputs[k]
        gb[k] = g.sum(axis=0)
        g = g @ params.weights[k]
        if k > 0:
            if cache.masks[k - 1] is not None:
                g = g * cache.masks[k - 1]
            g = g * (cache.preacts[k - 1] > 0.0)
    return MlpParams(gw, gb), g


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max shift; works on vectors and matrices."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Adam:
    """Bias-corrected Adam over one flat parameter vector, with optional L1 subgradient."""

    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray, lr: float, l1: float = 0.0) -> np.ndarray:
        """Update ``params`` in place and return it."""
        if params.shape != self.m.shape or grads.shape != params.shape:
            raise ShapeError(f"params {params.shape}, grads {grads.shape}, state {self.m.shape}")
        if lr < 0 or l1 < 0:
            raise ContractError("lr and l1 must be non-negative")
        if not np.all(np.isfinite(grads)):
            idx = int(np.flatnonzero(~np.isfinite(grads))[0])
            raise NumericError(f"non-finite gradient at parameter index {idx}")
        g = grads + l1 * np.sign(params) if l1 > 0 else grads
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (g * g)
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        if lr > 0:
            params -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


def adam_step(state: Adam, params: np.ndarray, grads: np.ndarray, lr: float, l1: float = 0.0) -> np.ndarray:
    return state.step(params, grads, lr, l1)


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint index pairs covering every (p, q) once per sweep (circle method)."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a >= 0 and b >= 0:
                ps.append(min(a, b))
                qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=int), np.array(qs, dtype=int)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(
    S: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100
) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations on disjoint index pairs are applied together (round-robin
    ordering), so each sweep is n-1 vectorized steps. Stops once the
    off-diagonal Frobenius norm falls below ``tol`` times ``max(1, ||S||_F)``.

    Returns eigenvalues in descending order and the matching orthonormal
    eigenvectors as columns.
    """
    A = np.array(S, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"expected a square matrix, got {A.shape}")
    check_finite(A, "eigensolver input")
    scale = max(1.0, float(np.linalg.norm(A)))
    if np.max(np.abs(A - A.T), initial=0.0) > 1e-9 * scale:
        raise ContractError("matrix is not symmetric within 1e-9")
    A = 0.5 * (A + A.T)
    n = A.shape[0]
    V = np.eye(n)
    if n > 1:
        rounds = _round_robin(n)
        target = tol * scale
        for _ in range(max_sweeps):
            off = np.linalg.norm(A - np.diag(np.diag(A)))
            if off < target:
                break
            for P, Q in rounds:
                apq = A[P, Q]
                active = np.abs(apq) > 1e-300
                if not active.any():
                    continue
                P, Q, apq = P[active], Q[active], apq[active]
                theta = (A[Q, Q] - A[P, P]) / (2.0 * apq)
                big = np.abs(theta) > 1e150
                th = np.where(big, 1.0, theta)
                t = np.where(
                    big,
                    0.5 / np.where(big, theta, 1.0),
                    np.sign(th) / (np.abs(th) + np.sqrt(th * th + 1.0)),
                )
                t[theta == 0.0] = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # A <- A J (columns), then J^T A (rows), V <- V J
                cp, cq = A[:, P].copy(), A[:, Q].copy()
                A[:, P] = c * cp - s * cq
                A[:, Q] = s * cp + c * cq
                rp, rq = A[P, :].copy(), A[Q, :].copy()
                A[P, :] = c[:, None] * rp - s[:, None] * rq
                A[Q, :] = s[:, None] * rp + c[:, None] * rq
                A[P, Q] = 0.0
                A[Q, P] = 0.0
                vp, vq = V[:, P].copy(), V[:, Q].copy()
                V[:, P] = c * vp - s * vq
                V[:, Q] = s * vp + c * vq
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    w, V = w[order], V[:, order]
    # sign convention: largest-magnitude entry of each eigenvector positive
    pivots = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[pivots, np.arange(n)])
    signs[signs == 0] = 1.0
    return w, V * signs

"""Low-rank FastGRNN with learnable rank through STR on the factor masks.

The input and hidden projections are ``W = (W1 * m_W) @ W2`` and
``U = (U1 * m_U) @ U2`` where the mask vectors scale the columns of the left
factor (the inner dimension of the product).  Soft-thresholding a mask entry
to zero removes one rank-one term, so ``nnz(mask)`` is the effective rank.

Cell update (per time step, row-vector convention ``pre = x W + h U``)::

    z  = sigmoid(pre + b_z)
    hc = tanh(pre + b_h)
    h  = (zeta * (1 - z) + nu) * hc + z * h_prev

with ``zeta = sigmoid(zeta_raw)`` and ``nu = sigmoid(nu_raw)``.
"""

from __future__ import annotations

import numpy as np

from . import kernel as K
from .kernel import StrParam, ThresholdFn
from .params import Parameter
from .tensor import DimensionError, sigmoid


class LowRankFastGRNN:
    def __init__(self, input_dim: int, hidden_dim: int, n_classes: int = 2, s_init: float = -10.0,
                 fn: ThresholdFn = K.EXPONENTIAL, seed: int = 0, init_std: float = 0.1,
                 use_str: bool = True, zeta_init: float = 1.0, nu_init: float = -4.0,
                 factor_decay: bool = True):
        rng = np.random.default_rng(seed)
        D, H = input_dim, hidden_dim
        self.input_dim, self.hidden_dim, self.n_classes = D, H, n_classes
        self.W1 = Parameter(rng.normal(0, init_std, (D, D)), "W1", decay=factor_decay)
        self.W2 = Parameter(rng.normal(0, init_std, (D, H)), "W2", decay=factor_decay)
        self.U1 = Parameter(rng.normal(0, init_std, (H, H)), "U1", decay=factor_decay)
        self.U2 = Parameter(rng.normal(0, init_std, (H, H)), "U2", decay=factor_decay)
        # factor decay stops W1/W2 from growing to offset a shrinking mask
        self.m_W = Parameter(np.ones(D), "m_W", decay=True)
        self.m_U = Parameter(np.ones(H), "m_U", decay=True)
        self.s_W = StrParam.init("per-weight", (D,), s_init, fn, name="s_W", trainable=use_str)
        self.s_U = StrParam.init("per-weight", (H,), s_init, fn, name="s_U", trainable=use_str)
        self.use_str = use_str
        self.b_z = Parameter(np.ones(H), "b_z", decay=False)
        self.b_h = Parameter(np.zeros(H), "b_h", decay=False)
        self.zeta = Parameter(np.array([zeta_init]), "zeta", decay=False)
        self.nu = Parameter(np.array([nu_init]), "nu", decay=False)
        # dense classifier on the last hidden state, untouched by STR
        self.V = Parameter(rng.normal(0, 1.0 / np.sqrt(H), (H, n_classes)), "V", decay=False)
        self.c = Parameter(np.zeros(n_classes), "c", decay=False)

    # -- structure --------------------------------------------------------------

    def masks(self):
        """Soft-thresholded mask vectors (identity when STR is disabled)."""
        if not self.use_str:
            return self.m_W.value, self.m_U.value
        return K.str_forward(self.m_W.value, self.s_W), K.str_forward(self.m_U.value, self.s_U)

    def effective_matrices(self):
        mW, mU = self.masks()
        return (self.W1.value * mW) @ self.W2.value, (self.U1.value * mU) @ self.U2.value

    def parameters(self):
        ps = [self.W1, self.W2, self.U1, self.U2, self.m_W, self.m_U, self.b_z, self.b_h,
              self.zeta, self.nu, self.V, self.c]
        if self.use_str:
            ps += [p.param for p in (self.s_W, self.s_U) if p.param.trainable]
        return ps

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()
        for p in (self.s_W, self.s_U):
            p.param.zero_grad()

    def str_params(self):
        return [("m_W", self.s_W), ("m_U", self.s_U)] if self.use_str else []

    def overall_sparsity(self) -> float:
        """Fraction of zeroed mask entries (rank removed) across both factorizations."""
        mW, mU = self.masks()
        return 1.0 - (K.nonzeros(mW) + K.nonzeros(mU)) / (mW.size + mU.size)

    # -- forward / backward ---------------------------------------------------------

    def step(self, x_t: np.ndarray, h_prev: np.ndarray, W=None, U=None) -> np.ndarray:
        """One recurrence step for a batch ``x_t`` [N, D], ``h_prev`` [N, H]."""
        if x_t.shape[-1] != self.input_dim or h_prev.shape[-1] != self.hidden_dim:
            raise DimensionError(
                f"fastgrnn_step: got x {x_t.shape}, h {h_prev.shape}; expected last dims "
                f"{self.input_dim}, {self.hidden_dim}"
            )
        if W is None:
            W, U = self.effective_matrices()
        pre = x_t @ W + h_prev @ U
        z = sigmoid(pre + self.b_z.value)
        hc = np.tanh(pre + self.b_h.value)
        zeta, nu = sigmoid(self.zeta.value[0]), sigmoid(self.nu.value[0])
        return (zeta * (1.0 - z) + nu) * hc + z * h_prev

    def run(self, X: np.ndarray) -> np.ndarray:
        """Final hidden state for a batch of sequences ``X`` [N, T, D]."""
        if X.ndim != 3 or X.shape[2] != self.input_dim:
            raise DimensionError(f"expected sequences [N, T, {self.input_dim}], got {X.shape}")
        W, U = self.effective_matrices()
        h = np.zeros((X.shape[0], self.hidden_dim))
        for t in range(X.shape[1]):
            h = self.step(X[:, t], h, W, U)
        return h

    def forward(self, X: np.ndarray) -> np.ndarray:
        N, T, D = X.shape
        mW, mU = self.masks()
        W = (self.W1.value * mW) @ self.W2.value
        U = (self.U1.value * mU) @ self.U2.value
        zeta, nu = sigmoid(self.zeta.value[0]), sigmoid(self.nu.value[0])
        hs = [np.zeros((N, self.hidden_dim))]
        zs, hcs = [], []
        for t in range(T):
            pre = X[:, t] @ W + hs[-1] @ U
            z = sigmoid(pre + self.b_z.value)
            hc = np.tanh(pre + self.b_h.value)
            zs.append(z)
            hcs.append(hc)
            hs.append((zeta * (1.0 - z) + nu) * hc + z * hs[-1])
        self._cache = (X, mW, mU, W, U, zeta, nu, hs, zs, hcs)
        return hs[-1] @ self.V.value + self.c.value

    __call__ = forward

    def backward(self, grad_logits: np.ndarray) -> None:
        X, mW, mU, W, U, zeta, nu, hs, zs, hcs = self._cache
        T = X.shape[1]
        hT = hs[-1]
        self.V.grad += hT.T @ grad_logits
        self.c.grad += grad_logits.sum(axis=0)
        dh = grad_logits @ self.V.value.T
        dW = np.zeros_like(W)
        dU = np.zeros_like(U)
        dzeta = dnu = 0.0
        for t in reversed(range(T)):
            z, hc, h_prev = zs[t], hcs[t], hs[t]
            dhc = dh * (zeta * (1.0 - z) + nu)
            dz = dh * (h_prev - zeta * hc)
            dzeta += float(np.sum(dh * (1.0 - z) * hc))
            dnu += float(np.sum(dh * hc))
            da = dz * z * (1.0 - z)
            dc = dhc * (1.0 - hc * hc)
            self.b_z.grad += da.sum(axis=0)
            self.b_h.grad += dc.sum(axis=0)
            dpre = da + dc
            dW += X[:, t].T @ dpre
            dU += h_prev.T @ dpre
            dh = dh * z + dpre @ U.T
        self.zeta.grad += dzeta * zeta * (1.0 - zeta)
        self.nu.grad += dnu * nu * (1.0 - nu)
        self._factor_grads(dW, self.W1, self.W2, self.m_W, self.s_W, mW)
        self._factor_grads(dU, self.U1, self.U2, self.m_U, self.s_U, mU)

    def _factor_grads(self, dM, A, B, m, sp, m_sparse):
        # M = (A * m_sparse) @ B
        left = A.value * m_sparse
        B.grad += left.T @ dM
        d_left = dM @ B.value.T
        A.grad += d_left * m_sparse
        d_msparse = np.sum(d_left * A.value, axis=0)
        if not self.use_str:
            m.grad += d_msparse
            return
        m.grad += K.grad_w(d_msparse, m_sparse)
        if sp.param.trainable:
            sp.param.grad += K.grad_s(d_msparse, m.value, sp)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.run(X) @ self.V.value + self.c.value, axis=1)


def effective_rank(cell: LowRankFastGRNN) -> tuple[int, int]:
    mW, mU = cell.masks()
    return K.nonzeros(mW), K.nonzeros(mU)


def fastgrnn_step(x_t, h_prev, cell: LowRankFastGRNN):
    return cell.step(np.atleast_2d(x_t), np.atleast_2d(h_prev)).reshape(np.shape(h_prev))

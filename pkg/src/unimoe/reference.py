"""Literal loop implementations used as oracles and for fixture generation.

Nothing here is vectorized or differentiable; each function transcribes its
procedure one scalar step at a time.
"""

from __future__ import annotations

import numpy as np

from .layer import ExpertBank

__all__ = ["moe_loop", "token_choice_loop", "expert_choice_loop"]


def moe_loop(X: np.ndarray, bank: ExpertBank, dispatch: np.ndarray, combine: np.ndarray) -> np.ndarray:
    """``Y[t] = sum_r sum_c combine[t,r,c] * MLP_r(sum_t' X[t'] * dispatch[t',r,c])``."""
    X = np.asarray(X, dtype=np.float64)
    T, D = X.shape
    _, E, C = dispatch.shape
    Y = np.zeros((T, D))
    for r in range(E):
        for c in range(C):
            slot = np.zeros(D)
            for s in range(T):
                for d in range(D):
                    slot[d] += X[s, d] * dispatch[s, r, c]
            out = bank.expert(r, slot)
            for t in range(T):
                Y[t] += combine[t, r, c] * out
    return Y


def _ranked(scores: np.ndarray) -> list[int]:
    # descending score, ascending index on ties
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def token_choice_loop(P_dispatch: np.ndarray, P_combine: np.ndarray, C: int, k: int):
    T, E = P_dispatch.shape
    D = np.zeros((T, E, C))
    Cmb = np.zeros((T, E, C))
    for i in range(k):
        for t in range(T):
            r = _ranked(P_dispatch[t])[i]
            c = int(np.count_nonzero(D[:, r, :]))
            if c < C:
                D[t, r, c] = 1.0
                Cmb[t, r, c] = P_combine[t, r]
    return D, Cmb


def expert_choice_loop(P_dispatch: np.ndarray, P_combine: np.ndarray, C: int):
    T, E = P_dispatch.shape
    D = np.zeros((T, E, C))
    Cmb = np.zeros((T, E, C))
    for r in range(E):
        order = _ranked(P_dispatch[:, r])
        for c in range(min(C, T)):
            t = order[c]
            D[t, r, c] = 1.0
            Cmb[t, r, c] = P_combine[t, r]
    return D, Cmb

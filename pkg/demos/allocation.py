"""Token choice drops overflow; expert choice fills every slot."""

import numpy as np

from unimoe.allocation import capacity, expert_choice_allocate, token_choice_allocate

P = np.array([
    [0.7, 0.2, 0.1],
    [0.6, 0.3, 0.1],
    [0.8, 0.1, 0.1],
    [0.1, 0.2, 0.7],
    [0.5, 0.4, 0.1],
    [0.3, 0.3, 0.4],
])
T, E = P.shape
C = capacity(1.0, T, E)
print("capacity per expert:", C)

tc = token_choice_allocate(P, C, k=1)
print("token choice: tokens kept per expert", tc.D.sum(axis=(0, 2)), "dropped tokens",
      np.flatnonzero(tc.D.sum(axis=(1, 2)) == 0))

ec = expert_choice_allocate(P, C)
for r in range(E):
    print(f"expert {r} picks tokens", np.flatnonzero(ec.D[:, r, :].sum(axis=1)))
print("tokens nobody picked:", np.flatnonzero(ec.D.sum(axis=(1, 2)) == 0))

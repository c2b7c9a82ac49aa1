"""Independent reference implementations used only by the tests.

Nothing here imports from ``loggrasp``; each function recomputes a quantity
from first principles along a different route than the package code.
"""

import math

import numpy as np


def rot_z(t):
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0, 0], [s, c, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1.0]])


def rot_x(t):
    c, s = math.cos(t), math.sin(t)
    return np.array([[1, 0, 0, 0], [0, c, -s, 0], [0, s, c, 0], [0, 0, 0, 1.0]])


def trans_z(d):
    H = np.eye(4)
    H[2, 3] = d
    return H


def trans_x(a):
    H = np.eye(4)
    H[0, 3] = a
    return H


def elementary(theta, d, a, alpha):
    return rot_z(theta) @ trans_z(d) @ trans_x(a) @ rot_x(alpha)


def crane_fk(q, offset=0.3):
    """Grapple center by multiplying 32 elementary matrices, table typed in by hand."""
    q1, q2, q3, q4, q5, q6, q7, _ = [float(v) for v in q]
    pi = math.pi
    rows = [
        (q1, 2.4, 0.18, pi / 2),
        (q2, 0.0, 3.5, 0.0),
        (q3, 0.0, -0.4, pi / 2),
        (0.0, q4 + 3.1, 0.0, 0.0),
        (0.0, q4, 0.0, -pi / 2),
        (q5, 0.0, -0.21, -pi / 2),
        (q6, 0.0, 0.0, -pi / 2),
        (q7, 0.58, 0.0, 0.0),
    ]
    H = np.eye(4)
    for r in rows:
        H = H @ elementary(*r)
    return H[:3, 3] + offset * H[:3, 2], H[:3, :3]


def gae_brute_force(rewards, values, dones, last_value, gamma, lam):
    """A_t = sum_k (gamma*lam)^k delta_{t+k}, truncated at the first terminal step."""
    n = len(rewards)
    next_values = list(values[1:]) + [last_value]
    deltas = [
        rewards[t] + gamma * next_values[t] * (1.0 - dones[t]) - values[t] for t in range(n)
    ]
    adv = []
    for t in range(n):
        total, weight = 0.0, 1.0
        for k in range(t, n):
            total += weight * deltas[k]
            if dones[k]:
                break
            weight *= gamma * lam
        adv.append(total)
    return np.array(adv)


def beta_pdf_direct(x, a, b):
    return math.gamma(a + b) / (math.gamma(a) * math.gamma(b)) * x ** (a - 1) * (1 - x) ** (b - 1)

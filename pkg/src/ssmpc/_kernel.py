"""Compiled plant integrator (same equations as ``plant.rhs``)."""
import numpy as np
from numba import njit

# params layout: n, L, m, g, r, I_a, I_b, K_a, K_b, K3_a, K3_b, D_a, D_b


@njit(cache=True)
def _rhs(y, u, p, out):
    n = int(p[0])
    L, m, g, r = p[1], p[2], p[3], p[4]
    na = 2 * n
    frames = np.empty((n + 1, 3, 3))
    q = np.zeros((n + 1, 3))
    frames[0] = np.eye(3)
    ry0 = np.empty((n, 3))  # first column of Ry(alpha_j)
    for j in range(n):
        a = y[2 * j]
        b = y[2 * j + 1]
        ca, sa, cb, sb = np.cos(a), np.sin(a), np.cos(b), np.sin(b)
        R = np.empty((3, 3))
        R[0, 0], R[0, 1], R[0, 2] = ca, sa * sb, sa * cb
        R[1, 0], R[1, 1], R[1, 2] = 0.0, cb, -sb
        R[2, 0], R[2, 1], R[2, 2] = -sa, ca * sb, ca * cb
        ry0[j, 0], ry0[j, 1], ry0[j, 2] = ca, 0.0, -sa
        for i in range(3):
            for k in range(3):
                acc = 0.0
                for l in range(3):
                    acc += frames[j, i, l] * R[l, k]
                frames[j + 1, i, k] = acc
        for i in range(3):
            q[j + 1, i] = q[j, i] + L * frames[j + 1, i, 2]
    tau_a_cable = r * (u[1] - u[3])
    tau_b_cable = r * (u[0] - u[2])
    fy = -m * g
    # suffix sums of centroid x F with F = (0, fy, 0): c x F = (-c_z fy, 0, c_x fy)
    sx = 0.0
    sz = 0.0
    cnt = 0
    for j in range(n - 1, -1, -1):
        cx = 0.5 * (q[j, 0] + q[j + 1, 0])
        cz = 0.5 * (q[j, 2] + q[j + 1, 2])
        sx += -cz * fy
        sz += cx * fy
        cnt += 1
        # moment about pivot j: suffix - q_j x (cnt F)
        mx = sx - (-q[j, 2] * cnt * fy)
        my = 0.0
        mz = sz - (q[j, 0] * cnt * fy)
        ax0, ax1, ax2 = frames[j, 0, 1], frames[j, 1, 1], frames[j, 2, 1]
        bx0 = frames[j, 0, 0] * ry0[j, 0] + frames[j, 0, 2] * ry0[j, 2]
        bx1 = frames[j, 1, 0] * ry0[j, 0] + frames[j, 1, 2] * ry0[j, 2]
        bx2 = frames[j, 2, 0] * ry0[j, 0] + frames[j, 2, 2] * ry0[j, 2]
        tg_a = ax0 * mx + ax1 * my + ax2 * mz
        tg_b = bx0 * mx + bx1 * my + bx2 * mz
        for axis in range(2):
            idx = 2 * j + axis
            th = y[idx]
            om = y[na + idx]
            tau = -p[7 + axis] * th - p[9 + axis] * th * th * th - p[11 + axis] * om
            if axis == 0:
                tau += tau_a_cable + tg_a
            else:
                tau += tau_b_cable + tg_b
            out[idx] = om
            out[na + idx] = tau / p[5 + axis]


@njit(cache=True)
def advance_batch(y, u, h, steps, p):
    nb, dim = y.shape
    out = np.empty_like(y)
    k1 = np.empty(dim)
    k2 = np.empty(dim)
    k3 = np.empty(dim)
    k4 = np.empty(dim)
    tmp = np.empty(dim)
    for b in range(nb):
        s = y[b].copy()
        for _ in range(steps):
            _rhs(s, u[b], p, k1)
            for i in range(dim):
                tmp[i] = s[i] + 0.5 * h * k1[i]
            _rhs(tmp, u[b], p, k2)
            for i in range(dim):
                tmp[i] = s[i] + 0.5 * h * k2[i]
            _rhs(tmp, u[b], p, k3)
            for i in range(dim):
                tmp[i] = s[i] + h * k3[i]
            _rhs(tmp, u[b], p, k4)
            for i in range(dim):
                s[i] = s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        out[b] = s
    return out

"""Compiled single-configuration recursions for the real-time loop.

:mod:`mpc_autotune.dynamics` keeps the vectorized numpy recursions for batched
analysis. The MPC loop works one configuration at a time, so the solver, the
controller and the physics step call these kernels instead.

Every public kernel takes the chain arrays of a model first, in the order of
:attr:`RobotModel.chain <mpc_autotune.dynamics.RobotModel.chain>`::

    axes, origin_rot, origin_pos, masses, coms, inertias, ee_rot, ee_pos, gravity

Kernels never raise. A mass matrix or ``Q_uu`` that fails to factorize comes
back as a flag and the Python caller raises the package error.
"""

import numpy as np
from numba import njit

# --------------------------------------------------------------------------
# small dense helpers
# --------------------------------------------------------------------------


@njit(cache=True)
def _cross(a0, a1, a2, b0, b1, b2):
    return a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0


@njit(cache=True)
def _rotate(R, x, out):
    for i in range(3):
        out[i] = R[i, 0] * x[0] + R[i, 1] * x[1] + R[i, 2] * x[2]


@njit(cache=True)
def _compose(A, B, out):
    for i in range(3):
        for j in range(3):
            out[i, j] = A[i, 0] * B[0, j] + A[i, 1] * B[1, j] + A[i, 2] * B[2, j]


@njit(cache=True)
def _axis_rotation(k, angle, out):
    # Rodrigues for a unit axis: c I + s [k]x + (1 - c) k k^T
    c = np.cos(angle)
    s = np.sin(angle)
    t = 1.0 - c
    x, y, z = k[0], k[1], k[2]
    out[0, 0] = c + t * x * x
    out[0, 1] = t * x * y - s * z
    out[0, 2] = t * x * z + s * y
    out[1, 0] = t * x * y + s * z
    out[1, 1] = c + t * y * y
    out[1, 2] = t * y * z - s * x
    out[2, 0] = t * x * z - s * y
    out[2, 1] = t * y * z + s * x
    out[2, 2] = c + t * z * z


@njit(cache=True)
def _cholesky(A, L):
    """Lower factor of ``A`` into ``L``; False when ``A`` is not positive-definite."""
    n = A.shape[0]
    for j in range(n):
        for i in range(j):
            L[i, j] = 0.0
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return False
        d = np.sqrt(s)
        L[j, j] = d
        for i in range(j + 1, n):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / d
    return True


@njit(cache=True)
def _cho_solve(L, rhs, out):
    n = L.shape[0]
    for i in range(n):
        s = rhs[i]
        for k in range(i):
            s -= L[i, k] * out[k]
        out[i] = s / L[i, i]
    for i in range(n - 1, -1, -1):
        s = out[i]
        for k in range(i + 1, n):
            s -= L[k, i] * out[k]
        out[i] = s / L[i, i]


@njit(cache=True)
def _all_finite(x):
    for i in range(x.shape[0]):
        if not np.isfinite(x[i]):
            return False
    return True


# --------------------------------------------------------------------------
# recursions on preallocated buffers
# --------------------------------------------------------------------------


@njit(cache=True)
def _frame_buffers(n):
    return (
        np.empty((n, 3, 3)),  # link rotations
        np.empty((n, 3)),  # joint origins
        np.empty((n, 3)),  # joint axes
        np.empty((n, 3)),  # link centers of mass
        np.empty((n, 3, 3)),  # world-frame link inertias
        np.empty(3),  # end-effector position
        np.empty((3, 3)),  # end-effector rotation
    )


@njit(cache=True)
def _dynamics_buffers(n):
    return (
        np.empty((n, 3)),  # link forces
        np.empty((n, 3)),  # link moments
        np.empty((6, 6)),  # composite spatial inertia
        np.empty((n, 6)),  # joint motion subspaces
        np.empty((n, n)),  # mass matrix
        np.empty((n, n)),  # its Cholesky factor
        np.empty(n),  # bias torques
        np.empty(n),  # right-hand side
        np.zeros(n),  # zero acceleration
    )


@njit(cache=True)
def _frames(axes, origin_rot, origin_pos, coms, inertias, ee_rot, ee_pos, q, rot, org, ax, com, iw, ee_p, ee_R):
    n = q.shape[0]
    R = np.eye(3)
    p = np.zeros(3)
    J = np.empty((3, 3))
    Rq = np.empty((3, 3))
    tmp = np.empty((3, 3))
    off = np.empty(3)
    for i in range(n):
        _compose(R, origin_rot[i], J)
        _rotate(R, origin_pos[i], off)
        for r in range(3):
            org[i, r] = p[r] + off[r]
        _rotate(J, axes[i], ax[i])
        _axis_rotation(axes[i], q[i], Rq)
        _compose(J, Rq, rot[i])
        _rotate(rot[i], coms[i], off)
        for r in range(3):
            com[i, r] = org[i, r] + off[r]
        _compose(rot[i], inertias[i], tmp)
        for r in range(3):
            for c in range(3):
                iw[i, r, c] = tmp[r, 0] * rot[i, c, 0] + tmp[r, 1] * rot[i, c, 1] + tmp[r, 2] * rot[i, c, 2]
        R = rot[i]
        p = org[i]
    _rotate(R, ee_pos, off)
    for r in range(3):
        ee_p[r] = p[r] + off[r]
    _compose(R, ee_rot, ee_R)


@njit(cache=True)
def _rnea(masses, gravity, org, ax, com, iw, v, a, F, Nm, tau):
    n = v.shape[0]
    w0 = w1 = w2 = 0.0
    e0 = e1 = e2 = 0.0
    c0, c1, c2 = -gravity[0], -gravity[1], -gravity[2]
    p0 = p1 = p2 = 0.0
    for i in range(n):
        r0, r1, r2 = org[i, 0] - p0, org[i, 1] - p1, org[i, 2] - p2
        t0, t1, t2 = _cross(e0, e1, e2, r0, r1, r2)
        s0, s1, s2 = _cross(w0, w1, w2, r0, r1, r2)
        u0, u1, u2 = _cross(w0, w1, w2, s0, s1, s2)
        c0 = c0 + t0 + u0
        c1 = c1 + t1 + u1
        c2 = c2 + t2 + u2
        z0, z1, z2 = ax[i, 0], ax[i, 1], ax[i, 2]
        sp0, sp1, sp2 = z0 * v[i], z1 * v[i], z2 * v[i]
        k0, k1, k2 = _cross(w0, w1, w2, sp0, sp1, sp2)
        e0 = e0 + z0 * a[i] + k0
        e1 = e1 + z1 * a[i] + k1
        e2 = e2 + z2 * a[i] + k2
        w0 += sp0
        w1 += sp1
        w2 += sp2
        f0, f1, f2 = com[i, 0] - org[i, 0], com[i, 1] - org[i, 1], com[i, 2] - org[i, 2]
        t0, t1, t2 = _cross(e0, e1, e2, f0, f1, f2)
        s0, s1, s2 = _cross(w0, w1, w2, f0, f1, f2)
        u0, u1, u2 = _cross(w0, w1, w2, s0, s1, s2)
        m = masses[i]
        F[i, 0] = m * (c0 + t0 + u0)
        F[i, 1] = m * (c1 + t1 + u1)
        F[i, 2] = m * (c2 + t2 + u2)
        g0 = iw[i, 0, 0] * e0 + iw[i, 0, 1] * e1 + iw[i, 0, 2] * e2
        g1 = iw[i, 1, 0] * e0 + iw[i, 1, 1] * e1 + iw[i, 1, 2] * e2
        g2 = iw[i, 2, 0] * e0 + iw[i, 2, 1] * e1 + iw[i, 2, 2] * e2
        h0 = iw[i, 0, 0] * w0 + iw[i, 0, 1] * w1 + iw[i, 0, 2] * w2
        h1 = iw[i, 1, 0] * w0 + iw[i, 1, 1] * w1 + iw[i, 1, 2] * w2
        h2 = iw[i, 2, 0] * w0 + iw[i, 2, 1] * w1 + iw[i, 2, 2] * w2
        k0, k1, k2 = _cross(w0, w1, w2, h0, h1, h2)
        Nm[i, 0] = g0 + k0
        Nm[i, 1] = g1 + k1
        Nm[i, 2] = g2 + k2
        p0, p1, p2 = org[i, 0], org[i, 1], org[i, 2]

    fn0 = fn1 = fn2 = 0.0
    nn0 = nn1 = nn2 = 0.0
    o0 = o1 = o2 = 0.0
    for i in range(n - 1, -1, -1):
        f0, f1, f2 = com[i, 0] - org[i, 0], com[i, 1] - org[i, 1], com[i, 2] - org[i, 2]
        x0, x1, x2 = _cross(f0, f1, f2, F[i, 0], F[i, 1], F[i, 2])
        m0 = Nm[i, 0] + x0 + nn0
        m1 = Nm[i, 1] + x1 + nn1
        m2 = Nm[i, 2] + x2 + nn2
        if i < n - 1:
            y0, y1, y2 = _cross(o0 - org[i, 0], o1 - org[i, 1], o2 - org[i, 2], fn0, fn1, fn2)
            m0 += y0
            m1 += y1
            m2 += y2
        fn0 = F[i, 0] + fn0
        fn1 = F[i, 1] + fn1
        fn2 = F[i, 2] + fn2
        nn0, nn1, nn2 = m0, m1, m2
        o0, o1, o2 = org[i, 0], org[i, 1], org[i, 2]
        tau[i] = ax[i, 0] * m0 + ax[i, 1] * m1 + ax[i, 2] * m2


@njit(cache=True)
def _crba(masses, org, ax, com, iw, C, S, M):
    """Composite-rigid-body mass matrix, spatial quantities about the world origin."""
    n = masses.shape[0]
    for j in range(n):
        s0, s1, s2 = _cross(org[j, 0], org[j, 1], org[j, 2], ax[j, 0], ax[j, 1], ax[j, 2])
        S[j, 0] = ax[j, 0]
        S[j, 1] = ax[j, 1]
        S[j, 2] = ax[j, 2]
        S[j, 3] = s0
        S[j, 4] = s1
        S[j, 5] = s2
    C[:, :] = 0.0
    ch = np.zeros((3, 3))
    f = np.empty(6)
    for j in range(n - 1, -1, -1):
        m = masses[j]
        ch[0, 1] = -com[j, 2]
        ch[0, 2] = com[j, 1]
        ch[1, 0] = com[j, 2]
        ch[1, 2] = -com[j, 0]
        ch[2, 0] = -com[j, 1]
        ch[2, 1] = com[j, 0]
        for r in range(3):
            for s in range(3):
                chch = ch[r, 0] * ch[0, s] + ch[r, 1] * ch[1, s] + ch[r, 2] * ch[2, s]
                C[r, s] += iw[j, r, s] - m * chch
                C[r, 3 + s] += m * ch[r, s]
                C[3 + r, s] -= m * ch[r, s]
            C[3 + r, 3 + r] += m
        for r in range(6):
            acc = 0.0
            for s in range(6):
                acc += C[r, s] * S[j, s]
            f[r] = acc
        for i in range(j + 1):
            val = 0.0
            for s in range(6):
                val += S[i, s] * f[s]
            M[i, j] = val
            M[j, i] = val


@njit(cache=True)
def _acceleration(masses, gravity, org, ax, com, iw, v, u, F, Nm, C, S, M, L, b, rhs, za, out):
    """a = M^-1 (u - b) on frames already in the buffers; False if M is not positive-definite."""
    n = v.shape[0]
    _rnea(masses, gravity, org, ax, com, iw, v, za, F, Nm, b)
    _crba(masses, org, ax, com, iw, C, S, M)
    if not _cholesky(M, L):
        return False
    for i in range(n):
        rhs[i] = u[i] - b[i]
    _cho_solve(L, rhs, out)
    return True


# --------------------------------------------------------------------------
# single configuration
# --------------------------------------------------------------------------


@njit(cache=True)
def ee_kinematics(axes, origin_rot, origin_pos, masses, coms, inertias, ee_rot, ee_pos, gravity, q):
    """End-effector position, rotation and the 6 x n world Jacobian (linear rows first)."""
    n = q.shape[0]
    rot, org, ax, com, iw, ee_p, ee_R = _frame_buffers(n)
    _frames(axes, origin_rot, origin_pos, coms, inertias, ee_rot, ee_pos, q, rot, org, ax, com, iw, ee_p, ee_R)
    J = np.empty((6, n))
    for i in range(n):
        l0, l1, l2 = _cross(
            ax[i, 0], ax[i, 1], ax[i, 2], ee_p[0] - org[i, 0], ee_p[1] - org[i, 1], ee_p[2] - org[i, 2]
        )
        J[0, i] = l0
        J[1, i] = l1
        J[2, i] = l2
        J[3, i] = ax[i, 0]
        J[4, i] = ax[i, 1]
        J[5, i] = ax[i, 2]
    return ee_p, ee_R, J


@njit(cache=True)
def mass_matrix(axes, origin_rot, origin_pos, masses, coms, inertias, ee_rot, ee_pos, gravity, q):
    n = q.shape[0]
    rot, org, ax, com, iw, ee_p, ee_R = _frame_buffers(n)
    _frames(axes, origin_rot, origin_pos, coms, inertias, ee_rot, ee_pos, q, rot, org, ax, com, iw, ee_p, ee_R)
    M = np.empty((n, n))
    _crba(masses, org, ax, com, iw, np.empty((6, 6)), np.empty((n, 6)), M)
    return M


@njit(cache=True)
def inverse_dynamics(axes, origin_rot, origin_pos, masses, coms, inertias, ee_rot, ee_pos, gravity, q, v, a):
    n = q.shape[0]
    rot, org, ax, com, iw, ee_p, ee_R = _frame_buffers(n)
    _frames(axes, origin_rot, origin_pos, coms, inertias, ee_rot, ee_pos, q, rot, org, ax, com, iw, ee_p, ee_R)
    tau = np.empty(n)
    _rnea(masses, gravity, org, ax, com, iw, v, a, np.empty((n, 3)), np.empty((n, 3)), tau)
    return tau


@njit(cache=True)
def forward_dynamics(axes, origin_rot, origin_pos, masses, coms, inertias, ee_rot, ee_pos, gravity, q, v, u):
    """(a, ok); ``a`` is NaN when the mass matrix does not factorize."""
    n = q.shape[0]
    rot, org, ax, com, iw, ee_p, ee_R = _frame_buffers(n)
    F, Nm, C, S, M, L, b, rhs, za = _dynamics_buffers(n)
    _frames(axes, origin_rot, origin_pos, coms, inertias, ee_rot, ee_pos, q, rot, org, ax, com, iw, ee_p, ee_R)
    a = np.empty(n)
    if not _acceleration(masses, gravity, org, ax, com, iw, v, u, F, Nm, C, S, M, L, b, rhs, za, a):
        a[:] = np.nan
        return a, False
    return a, True


@njit(cache=True)
def integrate(axes, origin_rot, origin_pos, masses, coms, inertias, ee_rot, ee_pos, gravity, q, v, u, dt, substeps):
    """``substeps`` semi-implicit Euler steps under a constant torque.

    Returns ``(q, v, ok)``; ``ok`` is False only for a mass matrix that does not
    factorize. A state that leaves the finite range is returned as is.
    """
    n = q.shape[0]
    rot, org, ax, com, iw, ee_p, ee_R = _frame_buffers(n)
    F, Nm, C, S, M, L, b, rhs, za = _dynamics_buffers(n)
    qn = q.copy()
    vn = v.copy()
    a = np.empty(n)
    for _ in range(substeps):
        _frames(axes, origin_rot, origin_pos, coms, inertias, ee_rot, ee_pos, qn, rot, org, ax, com, iw, ee_p, ee_R)
        if not _acceleration(masses, gravity, org, ax, com, iw, vn, u, F, Nm, C, S, M, L, b, rhs, za, a):
            return qn, vn, False
        for i in range(n):
            vn[i] += a[i] * dt
            qn[i] += vn[i] * dt
        if not (_all_finite(qn) and _all_finite(vn)):
            return qn, vn, True
    return qn, vn, True


# --------------------------------------------------------------------------
# horizon kernels
# --------------------------------------------------------------------------


@njit(cache=True)
def transition(axes, origin_rot, origin_pos, masses, coms, inertias, ee_rot, ee_pos, gravity, xs, us, dt):
    """Semi-implicit Euler transition for each row of ``xs``/``us``; rows that fail are NaN."""
    B, nx = xs.shape
    n = nx // 2
    rot, org, ax, com, iw, ee_p, ee_R = _frame_buffers(n)
    F, Nm, C, S, M, L, b, rhs, za = _dynamics_buffers(n)
    out = np.empty((B, nx))
    ok = np.ones(B, dtype=np.bool_)
    a = np.empty(n)
    for r in range(B):
        q = xs[r, :n]
        v = xs[r, n:]
        _frames(axes, origin_rot, origin_pos, coms, inertias, ee_rot, ee_pos, q, rot, org, ax, com, iw, ee_p, ee_R)
        if not _acceleration(masses, gravity, org, ax, com, iw, v, us[r], F, Nm, C, S, M, L, b, rhs, za, a):
            out[r, :] = np.nan
            ok[r] = False
            continue
        for i in range(n):
            v_next = v[i] + a[i] * dt
            out[r, n + i] = v_next
            out[r, i] = q[i] + v_next * dt
    return out, ok


@njit(cache=True)
def acceleration_jacobians_fd(axes, origin_rot, origin_pos, masses, coms, inertias, ee_rot, ee_pos, gravity, xs, us, h):
    """Central differences of forward dynamics per row: (da/dx, da/du, ok).

    Velocity and torque columns reuse the nominal frames and mass-matrix factor.
    """
    B, nx = xs.shape
    n = nx // 2
    rot, org, ax, com, iw, ee_p, ee_R = _frame_buffers(n)
    F, Nm, C, S, M, L, b, rhs, za = _dynamics_buffers(n)
    a_x = np.empty((B, n, nx))
    a_u = np.empty((B, n, n))
    ok = np.ones(B, dtype=np.bool_)
    ap = np.empty(n)
    am = np.empty(n)
    qp = np.empty(n)
    vp = np.empty(n)
    up = np.empty(n)
    for r in range(B):
        q = xs[r, :n]
        v = xs[r, n:]
        u = us[r]
        _frames(axes, origin_rot, origin_pos, coms, inertias, ee_rot, ee_pos, q, rot, org, ax, com, iw, ee_p, ee_R)
        good = _acceleration(masses, gravity, org, ax, com, iw, v, u, F, Nm, C, S, M, L, b, rhs, za, ap)
        if not good:
            ok[r] = False
            a_x[r] = np.nan
            a_u[r] = np.nan
            continue
        # torque columns: M is fixed, only the right-hand side moves
        for j in range(n):
            for i in range(n):
                up[i] = u[i] - b[i]
            up[j] += h
            _cho_solve(L, up, ap)
            up[j] -= 2.0 * h
            _cho_solve(L, up, am)
            for i in range(n):
                a_u[r, i, j] = (ap[i] - am[i]) / (2.0 * h)
        # velocity columns: frames and M fixed, bias torques move
        for j in range(n):
            for i in range(n):
                vp[i] = v[i]
            vp[j] = v[j] + h
            _rnea(masses, gravity, org, ax, com, iw, vp, za, F, Nm, b)
            for i in range(n):
                rhs[i] = u[i] - b[i]
            _cho_solve(L, rhs, ap)
            vp[j] = v[j] - h
            _rnea(masses, gravity, org, ax, com, iw, vp, za, F, Nm, b)
            for i in range(n):
                rhs[i] = u[i] - b[i]
            _cho_solve(L, rhs, am)
            for i in range(n):
                a_x[r, i, n + j] = (ap[i] - am[i]) / (2.0 * h)
        # position columns: everything moves
        for j in range(n):
            for i in range(n):
                qp[i] = q[i]
            qp[j] = q[j] + h
            _frames(axes, origin_rot, origin_pos, coms, inertias, ee_rot, ee_pos, qp, rot, org, ax, com, iw, ee_p, ee_R)
            good_p = _acceleration(masses, gravity, org, ax, com, iw, v, u, F, Nm, C, S, M, L, b, rhs, za, ap)
            qp[j] = q[j] - h
            _frames(axes, origin_rot, origin_pos, coms, inertias, ee_rot, ee_pos, qp, rot, org, ax, com, iw, ee_p, ee_R)
            good_m = _acceleration(masses, gravity, org, ax, com, iw, v, u, F, Nm, C, S, M, L, b, rhs, za, am)
            if not (good_p and good_m):
                ok[r] = False
            for i in range(n):
                a_x[r, i, j] = (ap[i] - am[i]) / (2.0 * h)
    return a_x, a_u, ok


@njit(cache=True)
def acceleration_jacobians_rnea(
    axes, origin_rot, origin_pos, masses, coms, inertias, ee_rot, ee_pos, gravity, xs, us, h
):
    """da/du = M^-1 exactly; da/dx = -M^-1 dID/dx at the realised acceleration."""
    B, nx = xs.shape
    n = nx // 2
    rot, org, ax, com, iw, ee_p, ee_R = _frame_buffers(n)
    F, Nm, C, S, M, L, b, rhs, za = _dynamics_buffers(n)
    a_x = np.empty((B, n, nx))
    a_u = np.empty((B, n, n))
    ok = np.ones(B, dtype=np.bool_)
    a = np.empty(n)
    col = np.empty(n)
    tp = np.empty(n)
    tm = np.empty(n)
    dtau = np.empty((n, nx))
    qp = np.empty(n)
    vp = np.empty(n)
    for r in range(B):
        q = xs[r, :n]
        v = xs[r, n:]
        _frames(axes, origin_rot, origin_pos, coms, inertias, ee_rot, ee_pos, q, rot, org, ax, com, iw, ee_p, ee_R)
        if not _acceleration(masses, gravity, org, ax, com, iw, v, us[r], F, Nm, C, S, M, L, b, rhs, za, a):
            ok[r] = False
            a_x[r] = np.nan
            a_u[r] = np.nan
            continue
        for j in range(n):
            for i in range(n):
                rhs[i] = 0.0
            rhs[j] = 1.0
            _cho_solve(L, rhs, col)
            for i in range(n):
                a_u[r, i, j] = col[i]
        for j in range(n):
            for i in range(n):
                vp[i] = v[i]
            vp[j] = v[j] + h
            _rnea(masses, gravity, org, ax, com, iw, vp, a, F, Nm, tp)
            vp[j] = v[j] - h
            _rnea(masses, gravity, org, ax, com, iw, vp, a, F, Nm, tm)
            for i in range(n):
                dtau[i, n + j] = (tp[i] - tm[i]) / (2.0 * h)
        for j in range(n):
            for i in range(n):
                qp[i] = q[i]
            qp[j] = q[j] + h
            _frames(axes, origin_rot, origin_pos, coms, inertias, ee_rot, ee_pos, qp, rot, org, ax, com, iw, ee_p, ee_R)
            _rnea(masses, gravity, org, ax, com, iw, v, a, F, Nm, tp)
            qp[j] = q[j] - h
            _frames(axes, origin_rot, origin_pos, coms, inertias, ee_rot, ee_pos, qp, rot, org, ax, com, iw, ee_p, ee_R)
            _rnea(masses, gravity, org, ax, com, iw, v, a, F, Nm, tm)
            for i in range(n):
                dtau[i, j] = (tp[i] - tm[i]) / (2.0 * h)
        for j in range(nx):
            for i in range(n):
                acc = 0.0
                for s in range(n):
                    acc += a_u[r, i, s] * dtau[s, j]
                a_x[r, i, j] = -acc
    return a_x, a_u, ok


@njit(cache=True)
def rollout(axes, origin_rot, origin_pos, masses, coms, inertias, ee_rot, ee_pos, gravity, xs, us, k, K, gaps, alpha, dt):
    """Nonlinear rollout of u = us + alpha k + K (x - xs), gaps contracted by (1 - alpha).

    Returns ``(xs_new, us_new, ok)``; ``ok`` is False as soon as the rollout
    leaves the finite range or a mass matrix fails to factorize.
    """
    N = us.shape[0]
    nx = xs.shape[1]
    nu = us.shape[1]
    n = nx // 2
    rot, org, ax, com, iw, ee_p, ee_R = _frame_buffers(n)
    F, Nm, C, S, M, L, b, rhs, za = _dynamics_buffers(n)
    x_new = np.empty((N + 1, nx))
    u_new = np.empty((N, nu))
    dx = np.empty(nx)
    a = np.empty(n)
    keep = 1.0 - alpha
    for i in range(nx):
        x_new[0, i] = xs[0, i] + alpha * gaps[0, i]
    for t in range(N):
        for i in range(nx):
            dx[i] = x_new[t, i] - xs[t, i]
        for i in range(nu):
            acc = us[t, i] + alpha * k[t, i]
            for j in range(nx):
                acc += K[t, i, j] * dx[j]
            u_new[t, i] = acc
        if not _all_finite(u_new[t]):
            return x_new, u_new, False
        q = x_new[t, :n]
        v = x_new[t, n:]
        _frames(axes, origin_rot, origin_pos, coms, inertias, ee_rot, ee_pos, q, rot, org, ax, com, iw, ee_p, ee_R)
        if not _acceleration(masses, gravity, org, ax, com, iw, v, u_new[t], F, Nm, C, S, M, L, b, rhs, za, a):
            return x_new, u_new, False
        for i in range(n):
            v_next = v[i] + a[i] * dt
            x_new[t + 1, n + i] = v_next - keep * gaps[t + 1, n + i]
            x_new[t + 1, i] = q[i] + v_next * dt - keep * gaps[t + 1, i]
        if not _all_finite(x_new[t + 1]):
            return x_new, u_new, False
    return x_new, u_new, True


@njit(cache=True)
def riccati(f_x, f_u, l_x, l_u, l_xx, l_uu, l_ux, Vx_N, Vxx_N, gaps, reg):
    """Backward recursion of the gapped Gauss-Newton model.

    Returns ``(k, K, Vx, Vxx, stop, failed_node)``; ``failed_node`` is -1 unless
    ``Q_uu + reg I`` failed to factorize there, in which case the recursion
    stopped at that node.
    """
    N, nx, nu = f_u.shape
    k = np.zeros((N, nu))
    K = np.zeros((N, nu, nx))
    Vx = np.zeros((N + 1, nx))
    Vxx = np.zeros((N + 1, nx, nx))
    Vx[N] = Vx_N
    Vxx[N] = Vxx_N
    A = np.empty((nu, nu))
    L = np.empty((nu, nu))
    rhs = np.empty(nu)
    col = np.empty(nu)
    stop = 0.0
    for t in range(N - 1, -1, -1):
        Vxx_next = Vxx[t + 1]
        Vx_next = Vx[t + 1] + Vxx_next @ gaps[t + 1]
        fx = f_x[t]
        fu = f_u[t]
        VA = Vxx_next @ fx
        VB = Vxx_next @ fu
        Qx = l_x[t] + fx.T @ Vx_next
        Qu = l_u[t] + fu.T @ Vx_next
        Qxx = l_xx[t] + fx.T @ VA
        Quu = l_uu[t] + fu.T @ VB
        Qux = l_ux[t] + fu.T @ VA
        for i in range(nu):
            for j in range(nu):
                A[i, j] = Quu[i, j]
            A[i, i] += reg
        if not _cholesky(A, L):
            return k, K, Vx, Vxx, stop, t
        _cho_solve(L, Qu, col)
        for i in range(nu):
            k[t, i] = -col[i]
        for j in range(nx):
            for i in range(nu):
                rhs[i] = Qux[i, j]
            _cho_solve(L, rhs, col)
            for i in range(nu):
                K[t, i, j] = -col[i]
        kt = k[t].copy()
        Kt = K[t].copy()
        Vx[t] = Qx + Kt.T @ (Quu @ kt) + Kt.T @ Qu + Qux.T @ kt
        V = Qxx + Kt.T @ (Quu @ Kt) + Kt.T @ Qux + Qux.T @ Kt
        Vxx[t] = 0.5 * (V + V.T)
        for i in range(nu):
            stop -= Qu[i] * kt[i]
    return k, K, Vx, Vxx, stop, -1


@njit(cache=True)
def expected_change(f_x, f_u, l_x, l_u, l_xx, l_uu, l_ux, lN_x, lN_xx, k, K, gaps):
    """(d1, d2) of the model cost change ``step * d1 + 0.5 * step**2 * d2``.

    The linearized rollout with feedforward and gaps scaled by ``step`` is
    ``step`` times the full-step rollout, so both terms come from one pass.
    """
    N = k.shape[0]
    z = gaps[0].copy()
    d1 = 0.0
    d2 = 0.0
    for t in range(N):
        w = k[t] + K[t] @ z
        d1 += l_x[t] @ z + l_u[t] @ w
        d2 += z @ (l_xx[t] @ z) + w @ (l_uu[t] @ w) + 2.0 * (w @ (l_ux[t] @ z))
        z = f_x[t] @ z + f_u[t] @ w + gaps[t + 1]
    d1 += lN_x @ z
    d2 += z @ (lN_xx @ z)
    return d1, d2

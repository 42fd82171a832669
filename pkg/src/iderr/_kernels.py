"""Compiled inner loops: episode rollout and minibatch Adam training.

Both mirror the reference Python implementations operation for operation;
the test suite checks them against each other.

Parameters of the stacked per-joint networks travel as one flat float64
vector laid out as ``[W_0 .. W_L, b_0 .. b_L, alpha_0 .. alpha_{L-1}]`` with
``W_l`` shaped ``(J, in, out)``, ``b_l`` shaped ``(J, 1, out)`` and
``alpha_l`` shaped ``(J, 1, 1)``.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def layer_offsets(widths, n_joints):
    """Offsets of W_l, b_l and alpha_l inside the flat parameter vector."""
    n_layers = widths.shape[0] - 1
    w_off = np.empty(n_layers, np.int64)
    b_off = np.empty(n_layers, np.int64)
    a_off = np.empty(max(n_layers - 1, 0), np.int64)
    pos = 0
    for i in range(n_layers):
        w_off[i] = pos
        pos += n_joints * widths[i] * widths[i + 1]
    for i in range(n_layers):
        b_off[i] = pos
        pos += n_joints * widths[i + 1]
    for i in range(n_layers - 1):
        a_off[i] = pos
        pos += n_joints
    return w_off, b_off, a_off, pos


@njit(cache=True)
def _weights(flat, w_off, widths, n_joints, i, j):
    fan_in, fan_out = widths[i], widths[i + 1]
    start = w_off[i] + j * fan_in * fan_out
    return flat[start : start + fan_in * fan_out].reshape((fan_in, fan_out))


@njit(cache=True)
def _bias(flat, b_off, widths, i, j):
    start = b_off[i] + j * widths[i + 1]
    return flat[start : start + widths[i + 1]]


@njit(cache=True)
def mlp_forward_one(flat, widths, n_joints, u):
    """Raw output of every joint network for one standardized input."""
    w_off, b_off, a_off, _ = layer_offsets(widths, n_joints)
    n_layers = widths.shape[0] - 1
    out = np.empty(n_joints)
    for j in range(n_joints):
        h = u.copy()
        for i in range(n_layers):
            z = np.dot(h, _weights(flat, w_off, widths, n_joints, i, j)) + _bias(flat, b_off, widths, i, j)
            if i < n_layers - 1:
                a = flat[a_off[i] + j]
                for c in range(z.shape[0]):
                    if not z[c] > 0:
                        z[c] = a * z[c]
            h = z
        out[j] = h[0]
    return out


@njit(cache=True)
def loss_and_grad_flat(flat, widths, n_joints, u, v, grad):
    """Batch MSE (summed over joints) and its gradient written into ``grad``."""
    w_off, b_off, a_off, _ = layer_offsets(widths, n_joints)
    n_layers = widths.shape[0] - 1
    n = u.shape[0]
    loss = 0.0
    for j in range(n_joints):
        hs = [u]
        zs = [u]
        h = u
        for i in range(n_layers):
            z = np.dot(h, _weights(flat, w_off, widths, n_joints, i, j)) + _bias(flat, b_off, widths, i, j)
            zs.append(z)
            if i < n_layers - 1:
                a = flat[a_off[i] + j]
                hn = z.copy()
                for r in range(z.shape[0]):
                    for c in range(z.shape[1]):
                        if not z[r, c] > 0:
                            hn[r, c] = a * z[r, c]
                h = hn
            else:
                h = z
            hs.append(h)
        g = np.empty((n, 1))
        for r in range(n):
            res = h[r, 0] - v[r, j]
            loss += res * res / n
            g[r, 0] = (2.0 / n) * res
        for i in range(n_layers - 1, -1, -1):
            if i < n_layers - 1:
                z = zs[i + 1]
                a = flat[a_off[i] + j]
                ga = 0.0
                for r in range(z.shape[0]):
                    for c in range(z.shape[1]):
                        if not z[r, c] > 0:
                            ga += z[r, c] * g[r, c]
                            g[r, c] = a * g[r, c]
                grad[a_off[i] + j] = ga
            gw = np.dot(hs[i].T, g)
            fan_in, fan_out = widths[i], widths[i + 1]
            start = w_off[i] + j * fan_in * fan_out
            grad[start : start + fan_in * fan_out] = gw.ravel()
            bstart = b_off[i] + j * fan_out
            for c in range(fan_out):
                acc = 0.0
                for r in range(n):
                    acc += g[r, c]
                grad[bstart + c] = acc
            if i > 0:
                g = np.dot(g, np.ascontiguousarray(_weights(flat, w_off, widths, n_joints, i, j).T))
    return loss


@njit(cache=True)
def train_adam(flat, widths, n_joints, u, v, perms, batch_size, lr, beta1, beta2, eps):
    """Minibatch Adam over the epochs encoded by the rows of ``perms``."""
    n = u.shape[0]
    grad = np.zeros_like(flat)
    m = np.zeros_like(flat)
    s = np.zeros_like(flat)
    t = 0
    for e in range(perms.shape[0]):
        for start in range(0, n, batch_size):
            stop = min(start + batch_size, n)
            idx = perms[e, start:stop]
            ub = np.empty((stop - start, u.shape[1]))
            vb = np.empty((stop - start, v.shape[1]))
            for r in range(stop - start):
                ub[r] = u[idx[r]]
                vb[r] = v[idx[r]]
            loss_and_grad_flat(flat, widths, n_joints, ub, vb, grad)
            t += 1
            c1 = 1.0 - beta1**t
            c2 = 1.0 - beta2**t
            for p in range(flat.shape[0]):
                gp = grad[p]
                m[p] = beta1 * m[p] + (1.0 - beta1) * gp
                s[p] = beta2 * s[p] + (1.0 - beta2) * gp * gp
                flat[p] -= lr * (m[p] / c1) / (np.sqrt(s[p] / c2) + eps)
    return t


@njit(cache=True)
def _coulomb(q, edges, n_edges, levels, strides):
    idx = 0
    for i in range(q.shape[0]):
        k = 0
        for e in range(n_edges[i]):
            if edges[i, e] <= q[i]:
                k += 1
        idx += k * strides[i]
    return levels[idx]


@njit(cache=True)
def episode(q0, noise, ref, dt, horizon,
            mass, mass_hat, h_hat, viscous, edges, n_edges, levels, strides, break_torque, v_stick,
            q_des, kp_pol, kd_pol,
            ctrl_kind, kp, ki, kd, integral_limit, eta, leak, g_low, g_high, beta, apply_feedback,
            has_model, flat, widths, x_mean, x_scale, y_mean, y_scale, clamp,
            conv_pos_tol, conv_vel_tol, abort_threshold):
    """Roll out one task execution; returns per-step arrays and flags.

    ``ctrl_kind`` 0 is PID, 1 is the adaptive offset.  ``noise`` holds the
    pre-drawn measurement noise for the initial and every later reading.
    """
    d = q0.shape[0]
    T = horizon
    q_meas = np.zeros((T + 1, d))
    qd_est = np.zeros((T + 1, d))
    q_true = np.zeros((T + 1, d))
    qd_true_out = np.zeros((T + 1, d))
    qdd_d_out = np.zeros((T, d))
    qdd_a_out = np.full((T, d), np.nan)
    tau_out = np.zeros((T, d))
    fb_out = np.zeros((T, d))
    learner_out = np.zeros((T, d))
    f_out = np.zeros((T, d))

    q = q0.copy()
    qd = np.zeros(d)
    q_true[0] = q
    q_meas[0] = q + noise[0]
    applied = np.zeros(d)
    shadow = np.zeros(d)
    learner = np.zeros(d)
    integ_l = np.zeros(d)
    integ_h = np.zeros(d)
    last_l = np.zeros(d)
    last_h = np.zeros(d)
    off_l = np.zeros(d)
    off_h = np.zeros(d)
    f_prev = np.zeros(d)
    n_joints = d

    steps = 0
    converged = False
    aborted = False
    for t in range(T):
        qm = q_meas[t]
        qde = qd_est[t]
        qdd_d = kp_pol * (q_des - qm) - kd_pol * qde
        if has_model:
            x = np.empty(3 * d)
            x[:d] = qm
            x[d : 2 * d] = qde
            x[2 * d :] = qdd_d
            raw = mlp_forward_one(flat, widths, n_joints, (x - x_mean) / x_scale)
            f_prev = np.minimum(np.maximum(raw * y_scale + y_mean, -clamp), clamp)
        tau_fb = applied.copy() if apply_feedback else np.zeros(d)
        tau = mass_hat * qdd_d + h_hat + np.minimum(np.maximum(f_prev, -clamp), clamp) + tau_fb
        qdd_d_out[t] = qdd_d
        tau_out[t] = tau
        fb_out[t] = tau_fb
        learner_out[t] = learner
        f_out[t] = f_prev
        steps = t + 1
        finite = True
        for i in range(d):
            if not np.isfinite(tau[i]):
                finite = False
        if not finite:
            aborted = True
            break

        # plant: semi-implicit Euler with stiction hold
        c = _coulomb(q, edges, n_edges, levels, strides)
        qd_new = np.empty(d)
        for i in range(d):
            drive = tau[i] - viscous[i] * qd[i]
            if abs(qd[i]) < v_stick and abs(drive) < break_torque:
                qd_new[i] = 0.0
            else:
                qdd = (drive - c * np.sign(qd[i])) / mass[i]
                qd_new[i] = qd[i] + qdd * dt
        qd = qd_new
        q = q + qd * dt
        q_true[t + 1] = q
        qd_true_out[t + 1] = qd
        q_next = q + noise[t + 1]
        q_meas[t + 1] = q_next

        qd_next = (q_next - qm) / dt
        qdd_a = (qd_next - qde) / dt
        qd_est[t + 1] = qd_next
        if t > 0:
            qdd_a_out[t] = qdd_a

        if ctrl_kind == 0:
            err = ref[t + 1] - q_next
            integ_l = np.minimum(np.maximum(integ_l + err * dt, -integral_limit), integral_limit)
            deriv = (err - last_l) / dt
            last_l = err
            applied = g_low * (kp * err + ki * integ_l + kd * deriv)
            integ_h = np.minimum(np.maximum(integ_h + err * dt, -integral_limit), integral_limit)
            deriv = (err - last_h) / dt
            last_h = err
            shadow = g_high * (kp * err + ki * integ_h + kd * deriv)
        else:
            off_l = (1.0 - leak) * off_l + g_low * eta * (qdd_d - qdd_a)
            off_h = (1.0 - leak) * off_h + g_high * eta * (qdd_d - qdd_a)
            applied = off_l.copy()
            shadow = off_h.copy()
        learner = (1.0 - beta) * learner + beta * shadow

        big = False
        for i in range(d):
            if not (np.isfinite(q[i]) and np.isfinite(qd[i])):
                big = True
            elif abs(q[i]) > abort_threshold or abs(qd[i]) > abort_threshold:
                big = True
        if big:
            aborted = True
            break
        if np.sqrt(np.sum((q - q_des) ** 2)) < conv_pos_tol and np.sqrt(np.sum(qd**2)) < conv_vel_tol:
            converged = True
            break
    return (steps, converged, aborted, q_meas, qd_est, q_true, qd_true_out,
            qdd_d_out, qdd_a_out, tau_out, fb_out, learner_out, f_out)

"""Reference computations that share no code with the package under test."""

import math

import numpy as np


def central_difference(f, x, h=1e-5):
    """Gradient of scalar ``f`` at float64 array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def relative_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


def cross_entropy_scalar(logits, labels):
    """Mean softmax cross-entropy, one sample at a time with plain floats."""
    total = 0.0
    for row, label in zip(logits, labels):
        row = [float(v) for v in row]
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[int(label)]
    return total / len(labels)


def boxcar_scalar(v, width=0.5):
    return 0.5 if abs(v) <= width else 0.0


def lif_network_oracle(x, W, b1, V, b2, labels, alpha, theta, width=0.5):
    """Hand-unrolled forward and BPTT for  input -> LIF layer -> output accumulator.

    ``x`` has shape (N, T, n_in); W is (n_in, H); V is (H, C). Currents are
    ``x[t] @ W + b1``, membranes follow u[t] = alpha*u[t-1]*(1-s[t-1]) + I[t]
    with s[t] = [u[t] >= theta]; logits are the step sum of ``s[t] @ V + b2``
    and the loss is the batch-mean cross-entropy. The spike derivative is
    the boxcar, and gradients flow through the reset term as well.
    """
    N, T, n_in = x.shape
    H, C = V.shape
    dW = np.zeros_like(W)
    db1 = np.zeros_like(b1)
    dV = np.zeros_like(V)
    db2 = np.zeros_like(b2)
    loss = 0.0
    for n in range(N):
        u = [[0.0] * H for _ in range(T)]
        s = [[0.0] * H for _ in range(T)]
        for t in range(T):
            for j in range(H):
                current = b1[j] + sum(x[n, t, i] * W[i, j] for i in range(n_in))
                carried = 0.0
                if t > 0:
                    carried = alpha * u[t - 1][j] * (1.0 - s[t - 1][j])
                u[t][j] = carried + current
                s[t][j] = 1.0 if u[t][j] >= theta else 0.0
        logits = [sum(s[t][j] * V[j, c] for t in range(T) for j in range(H)) + T * b2[c]
                  for c in range(C)]
        m = max(logits)
        z = sum(math.exp(v - m) for v in logits)
        loss += (m + math.log(z) - logits[labels[n]]) / N
        g = [(math.exp(logits[c] - m) / z - (1.0 if c == labels[n] else 0.0)) / N for c in range(C)]
        for c in range(C):
            db2[c] += T * g[c]
            for t in range(T):
                for j in range(H):
                    dV[j, c] += s[t][j] * g[c]
        du_next = [0.0] * H
        for t in reversed(range(T)):
            du = [0.0] * H
            for j in range(H):
                ds = sum(V[j, c] * g[c] for c in range(C))
                if t + 1 < T:
                    ds += du_next[j] * (-alpha * u[t][j])
                du[j] = ds * boxcar_scalar(u[t][j] - theta, width)
                if t + 1 < T:
                    du[j] += du_next[j] * alpha * (1.0 - s[t][j])
                db1[j] += du[j]
                for i in range(n_in):
                    dW[i, j] += du[j] * x[n, t, i]
            du_next = du
    return loss, {"W": dW, "b1": db1, "V": dV, "b2": db2}


def adam_scalar_trace(p0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Parameter values after each Adam step on a scalar parameter."""
    p, m, v = p0, 0.0, 0.0
    trace = []
    for k, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** k)
        v_hat = v / (1 - b2 ** k)
        p = p - lr * m_hat / (math.sqrt(v_hat) + eps)
        trace.append(p)
    return trace


def uniform_mass(bound, delta):
    """Probability that U(-bound, bound) falls in [-delta, delta]."""
    return min(1.0, delta / bound)

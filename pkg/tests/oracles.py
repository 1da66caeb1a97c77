"""Independent oracles shared by the test suite.

Everything here is deliberately written without touching the code paths
it checks: finite differences instead of the recorded graph, plain
summation instead of fused losses, Monte Carlo instead of closed forms.
"""

import numpy as np

from personavae import autodiff as ad

FD_STEP = 1e-5
FD_RTOL = 1e-4
FD_ATOL = 1e-7


def finite_difference(loss_fn, params, step=FD_STEP):
    """Central finite-difference gradient of a scalar loss.

    loss_fn: () -> float, reading the current contents of each params entry.
    params: list of np.ndarray buffers perturbed in place.
    Returns one gradient array per buffer.
    """
    grads = []
    for arr in params:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = loss_fn()
            flat[i] = orig - step
            minus = loss_fn()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * step)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rtol=FD_RTOL, atol=FD_ATOL, label=""):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    err = np.abs(analytic - numeric)
    tol = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    bad = err > tol
    assert not bad.any(), (
        f"gradient mismatch {label}: worst |err|={err.max():.3e} "
        f"analytic={analytic[bad].flat[0]:.6e} numeric={numeric[bad].flat[0]:.6e}"
    )


def gradcheck_op(build_loss, arrays, rtol=FD_RTOL, atol=FD_ATOL, label=""):
    """Check backward() of a scalar-valued graph against central differences.

    build_loss: (list of Tensors) -> scalar Tensor. Called fresh for each
    evaluation so the graph is rebuilt from the (possibly perturbed) buffers.
    arrays: list of np.ndarray leaf buffers.
    """
    leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
    loss = build_loss(leaves)
    loss.backward()

    def value():
        consts = [ad.Tensor(a) for a in arrays]
        return build_loss(consts).item()

    numeric = finite_difference(value, arrays)
    for leaf, num in zip(leaves, numeric):
        got = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        assert_grads_close(got, num, rtol=rtol, atol=atol, label=label)


def mc_kl_gaussians(mu_q, logvar_q, mu_p, logvar_p, n_samples=100_000, seed=0):
    """Monte Carlo estimate of KL(q || p) for diagonal Gaussians."""
    rng = np.random.default_rng(seed)
    sd_q = np.exp(0.5 * np.asarray(logvar_q))
    z = np.asarray(mu_q) + sd_q * rng.standard_normal((n_samples, len(mu_q)))

    def logpdf(z, mu, logvar):
        var = np.exp(np.asarray(logvar))
        return -0.5 * (np.log(2 * np.pi) + np.asarray(logvar) + (z - np.asarray(mu)) ** 2 / var).sum(axis=1)

    return float(np.mean(logpdf(z, mu_q, logvar_q) - logpdf(z, mu_p, logvar_p)))

"""Independent reference implementations used as test oracles.

Each oracle is written from the mathematical definition only and shares no
code with the package.
"""
import math

import numpy as np
import torch

ALPHABET = "ACDEFGHIKLMNPQRSTVWY"

PKA = {"N_term": 8.6, "C_term": 3.6, "K": 10.8, "R": 12.5, "H": 6.5, "D": 3.9, "E": 4.1, "C": 8.5, "Y": 10.1}


def random_peptides(rng, n, lo=10, hi=128, alphabet=ALPHABET):
    return ["".join(rng.choice(list(alphabet), size=int(rng.integers(lo, hi + 1)))) for _ in range(n)]


def charge_direct(seq, ph, pka=PKA):
    total = 1 / (1 + 10 ** (ph - pka["N_term"])) - 1 / (1 + 10 ** (pka["C_term"] - ph))
    for ch in seq:
        if ch in "KRH":
            total += 1 / (1 + 10 ** (ph - pka[ch]))
        elif ch in "DECY":
            total -= 1 / (1 + 10 ** (pka[ch] - ph))
    return total


def pi_grid_scan(seq, step=0.001):
    """pH on a ``step`` grid where the direct charge is closest to zero."""
    grid = np.arange(0.0, 14.0 + step / 2, step)
    q = np.array([charge_direct(seq, p) for p in grid])
    return float(grid[np.argmin(np.abs(q))])


def entropy_counts(seqs):
    counts = {}
    for s in seqs:
        for ch in s:
            counts[ch] = counts.get(ch, 0) + 1
    n = sum(counts.values())
    return -math.fsum(c / n * math.log2(c / n) for c in counts.values())


def lcs_dp(a, b):
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i, ca in enumerate(a):
        for j, cb in enumerate(b):
            table[i + 1][j + 1] = table[i][j] + 1 if ca == cb else max(table[i][j + 1], table[i + 1][j])
    return table[-1][-1]


def gaussian_kl_quadrature(mu, log_var):
    """KL(N(mu, s^2) || N(0, 1)) for one dimension by numerical integration."""
    from scipy import integrate, stats

    s = math.exp(0.5 * log_var)
    p = stats.norm(mu, s)
    q = stats.norm(0.0, 1.0)
    f = lambda x: p.pdf(x) * (p.logpdf(x) - q.logpdf(x))
    val, _ = integrate.quad(f, mu - 30 * s, mu + 30 * s, limit=400, epsabs=1e-13, epsrel=1e-12)
    return val


def posterior_variance_bayes(beta, t, n_grid=200001):
    """Variance of z_{t-1} | (z_t, z_0) by brute-force density products on a grid."""
    beta = np.asarray(beta, dtype=np.float64)
    abar = np.cumprod(1 - beta)
    ab_prev = 1.0 if t == 1 else abar[t - 2]
    z0, zt = 0.7, -0.3
    prior_m, prior_v = math.sqrt(ab_prev) * z0, 1 - ab_prev
    a = 1 - beta[t - 1]
    like_m, like_sd = zt / math.sqrt(a), math.sqrt(beta[t - 1] / a)
    width = 12 * max(math.sqrt(prior_v), like_sd)
    x = np.linspace(min(prior_m, like_m) - width, max(prior_m, like_m) + width, n_grid)
    logp = -0.5 * (x - prior_m) ** 2 / prior_v - 0.5 * (zt - math.sqrt(a) * x) ** 2 / beta[t - 1]
    w = np.exp(logp - logp.max())
    w /= w.sum()
    m = (w * x).sum()
    return float((w * (x - m) ** 2).sum())


def central_fd_check(loss_fn, params, h=1e-6, max_entries=None, rng=None):
    """Largest per-tensor relative error between autograd and central differences.

    ``loss_fn()`` must be deterministic and return a float64 scalar tensor.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad.detach().clone().reshape(-1)
        flat = p.data.view(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and len(idx) > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(idx, size=max_entries, replace=False)
        numeric = torch.zeros(len(idx), dtype=torch.float64)
        with torch.no_grad():
            for k, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric[k] = (up - down) / (2 * h)
        a = analytic[torch.as_tensor(idx)]
        denom = max(a.norm().item(), numeric.norm().item())
        if denom < 1e-10:
            continue
        worst = max(worst, (a - numeric).norm().item() / denom)
    return worst

"""Fast invariant checks run by ``propdiff selftest``."""
from __future__ import annotations

import math
import tempfile
import traceback
from pathlib import Path

import numpy as np
import torch

from .diffusion import make_schedule, posterior_step
from .features import ALPHABET, PhyschemFeaturizer
from .generation import read_fasta, write_fasta
from .metrics import isoelectric_point, lcs_length, net_charge, shannon_entropy


def _random_peptides(rng, n, lo=10, hi=128):
    return ["".join(rng.choice(list(ALPHABET), size=int(rng.integers(lo, hi + 1)))) for _ in range(n)]


def _lcs_dp(a, b):
    prev = [0] * (len(b) + 1)
    for ca in a:
        cur = [0]
        for j, cb in enumerate(b):
            cur.append(prev[j] + 1 if ca == cb else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def check_featurizer(rng):
    seqs = _random_peptides(rng, 50)
    one_hot, local, glob, lengths = PhyschemFeaturizer().arrays(seqs)
    for i, n in enumerate(lengths):
        assert np.max(np.abs(local[i, :n].mean(0) - glob[i])) <= 1e-12, f"global != mean(local) for item {i}"
    assert np.all(one_hot.sum(-1) == 1.0), "one-hot rows must sum to 1"


def check_charge(rng):
    grid = np.round(np.arange(0, 14.0001, 0.1), 10)
    for seq in _random_peptides(rng, 20):
        q = np.array([net_charge(seq, p) for p in grid])
        assert np.all(np.diff(q) < 0), f"net charge not decreasing for {seq}"
        assert abs(net_charge(seq, isoelectric_point(seq))) < 1e-4


def check_entropy(rng):
    assert math.isclose(shannon_entropy([ALPHABET]), math.log2(20), rel_tol=0, abs_tol=1e-12)
    assert shannon_entropy(["AAAA"]) == 0.0


def check_lcs(rng):
    for _ in range(200):
        a = "".join(rng.choice(list("ACDE"), size=int(rng.integers(0, 25))))
        b = "".join(rng.choice(list("ACDE"), size=int(rng.integers(0, 25))))
        assert lcs_length(a, b) == _lcs_dp(a, b), (a, b)


def check_schedule(rng):
    s = make_schedule(1000)
    assert np.all(np.diff(s.alpha_bar) < 0) and 0 < s.alpha_bar[-1] < 1
    z0 = torch.as_tensor(rng.standard_normal((4, 8)))
    z = torch.as_tensor(rng.standard_normal((4, 8)))
    sched = make_schedule(50)
    for t in range(sched.T, 0, -1):
        z = posterior_step(z, z0, t, sched, torch.zeros_like(z))
    assert torch.max(torch.abs(z - z0)) < 1e-6, "oracle reverse pass did not recover z_0"


def check_fasta(rng):
    seqs = _random_peptides(rng, 5, 1, 150)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "x.fasta"
        write_fasta([(f"s{i}", s) for i, s in enumerate(seqs)], path)
        assert [s for _, s in read_fasta(path)] == seqs


CHECKS = {
    "featurizer": check_featurizer,
    "net_charge": check_charge,
    "entropy": check_entropy,
    "lcs": check_lcs,
    "schedule": check_schedule,
    "fasta": check_fasta,
}


def run_selftest(seed: int = 0, echo=print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        try:
            fn(np.random.default_rng(seed))
            echo(f"PASS {name}")
        except Exception as exc:  # report every failure, keep going
            ok = False
            detail = str(exc) or traceback.format_exc(limit=1).strip().splitlines()[-1]
            echo(f"FAIL {name}: {detail}")
    return ok

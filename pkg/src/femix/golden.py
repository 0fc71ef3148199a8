"""Golden vectors for cross-language parity: seeded inputs and outputs as round-trippable CSV.

One row per array: ``case,field,shape,values`` with shape ``AxBxC`` and the
values space-separated in C order at ``%.17g`` (exact float64 round trip).
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import fem_read as fr
from .fem_read import FemGates
from .priors import softmax_prior

GOLDEN_FIELDS = ("case", "field", "shape", "values")


def golden_cases(seed: int = 0, n_cases: int = 4) -> list[tuple[str, dict[str, np.ndarray]]]:
    rng = np.random.default_rng(seed)
    cases = []
    for k in range(n_cases):
        T, d = 5, 3
        w = softmax_prior(rng.normal(0.0, 1.0, (T, T))).weights
        v = rng.normal(0.0, 1.0, (T, d))
        beta = np.exp(rng.uniform(np.log(0.2), np.log(4.0), d))
        lam = rng.uniform(0.0, 1.0, (T, d))
        g = rng.uniform(0.5, 1.5, (T, d))
        rd = fr.two_gate_read(w, v, FemGates(lam, g, beta))
        up = rng.normal(size=(T, d))
        grads = fr.backward_two_gate(rd, up, w, v, FemGates(lam, g, beta))
        cases.append(
            (
                f"read{k}",
                {
                    "prior": w,
                    "values": v,
                    "beta_max": beta,
                    "lambda": lam,
                    "gate": g,
                    "mu": rd.mu,
                    "f_max": rd.f_max,
                    "f_tilde": rd.f_tilde,
                    "o": rd.o,
                    "posterior": fr.posterior(w, v, beta),
                    "upstream": up,
                    "dv": grads.dv,
                    "dlambda": grads.dlambda,
                    "dg": grads.dg,
                    "dbeta_max": grads.dbeta_max,
                    "dp": grads.dp,
                },
            )
        )
    table = np.array([[fr.min_truncation_degree(R, e) for e in (1e-4, 1e-6, 1e-8)] for R in (5, 10)], dtype=float)
    cases.append(("truncation", {"R": np.array([5.0, 10.0]), "eps": np.array([1e-4, 1e-6, 1e-8]), "degree": table}))
    return cases


def write_golden(path, cases) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GOLDEN_FIELDS)
        for case, arrays in cases:
            for field, arr in arrays.items():
                a = np.asarray(arr, dtype=np.float64)
                shape = "x".join(map(str, a.shape))
                w.writerow([case, field, shape, " ".join("%.17g" % x for x in a.ravel())])
                n += 1
    return n


def read_golden(path) -> dict[str, dict[str, np.ndarray]]:
    out: dict[str, dict[str, np.ndarray]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            shape = tuple(int(s) for s in row["shape"].split("x")) if row["shape"] else ()
            vals = np.array([float(x) for x in row["values"].split()], dtype=np.float64)
            out.setdefault(row["case"], {})[row["field"]] = vals.reshape(shape)
    return out

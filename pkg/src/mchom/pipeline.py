"""Staged runs, convergence studies and verification reports.

A :class:`Run` computes each stage lazily and at most once; with a cache
directory the fine solution, NLMC basis and cell solutions are reused
across runs.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import scipy.sparse as sp

from . import fem
from .cells import (CellCache, LocalizedBasisSet, build_auxiliary, build_nlmc_basis, patch_system,
                    solve_all_cell_sets)
from .config import RunConfig, resolve_load
from .downscale import CoarseMesh, MacroField, downscale_nlmc, project_continuum_average
from .field import KIND_BROKEN, KIND_CELL, KIND_NODE, generate_medium, write_binary, write_field_csv
from .macro import (assemble_effective_tensors, assemble_effective_tensors_rve,
                    assemble_macro_system, compute_load_moments, reconstruct, solve_macro,
                    verify_averaging_identity, write_tensors_csv)
from .mesh import ShiftedPartition, build_fine_grid, oversample, write_partition_csv

__all__ = [
    "StageError",
    "Check",
    "Run",
    "ReportRow",
    "REPORT_COLUMNS",
    "rve_windows",
    "random_macro_pairs",
    "run_study",
    "run_verify",
    "write_report",
    "loglog_slope",
]

log = logging.getLogger(__name__)

METRICS = (
    "energy_error",
    "energy_error_rel",
    "l2_error_rel",
    "galerkin_energy_error_rel",
    "mean_preservation",
    "macro_l2_error",
    "macro_l2_error_rel",
    "identity_discrepancy",
    "time_fine",
    "time_basis",
    "time_cells",
    "time_macro",
)
PARAMS = ("n_fine", "scale_eps", "scale", "k_layers", "kappa_high", "bc")
REPORT_COLUMNS = ("study", "config_hash", "kind", *PARAMS, *METRICS, "quantity", "value", "status")


class StageError(RuntimeError):
    def __init__(self, stage, err):
        super().__init__(f"stage {stage!r} failed: {type(err).__name__}: {err}")
        self.stage = stage
        self.cause = err


def _stage(name):
    def wrap(fn):
        def inner(self, *a, **kw):
            try:
                return fn(self, *a, **kw)
            except StageError:
                raise
            except Exception as err:
                raise StageError(name, err) from err
        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner
    return wrap


def rve_windows(p_H: ShiftedPartition, p_eps: ShiftedPartition, width):
    """Window of ``width`` near the middle of every coarse cell, on subcell lines."""
    n = p_H.grid.n
    w = int(round(width * n))
    m_eps = p_eps.m
    out = []
    for c in p_H.cells:
        box = []
        for lo, hi in c.box:
            start = lo + ((hi - lo - w) // 2 // m_eps) * m_eps
            box.append((start, start + w))
        out.append(tuple(box))
    return out


def random_macro_pairs(p_H, n_continua, n_pairs=3, seed=0):
    """Pairs of random per-cell macro data (values and gradients)."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        two = []
        for _ in range(2):
            vals = rng.standard_normal((len(p_H), n_continua))
            grads = rng.standard_normal((len(p_H), n_continua, 2))
            two.append(MacroField.from_cell_data(p_H, vals, grads))
        pairs.append(tuple(two))
    return pairs


class Run:
    """One parameter point of the workflow."""

    def __init__(self, cfg: RunConfig, out=None, write=True):
        self.cfg = cfg
        self.out = cfg.out if out is None else out
        self.write = write
        self.timings = {}
        self._memo = {}
        cache = cfg.cache_dir
        self.cache_dir = None if cache is None else os.path.join(cache, cfg.medium.kind)
        self.cell_cache = None if self.cache_dir is None else CellCache(os.path.join(self.cache_dir, "cells"))
        if write:
            os.makedirs(self.out, exist_ok=True)

    def path(self, name):
        return os.path.join(self.out, name)

    def _memoized(self, key, fn):
        if key not in self._memo:
            self._memo[key] = fn()
        return self._memo[key]

    def _disk(self, tag, parts, compute, save, load):
        if self.cache_dir is None:
            return compute()
        os.makedirs(self.cache_dir, exist_ok=True)
        key = hashlib.sha256("|".join(map(str, parts)).encode()).hexdigest()[:32]
        path = os.path.join(self.cache_dir, f"{tag}-{key}.npz")
        if os.path.exists(path):
            log.info("cache hit %s", path)
            return load(path)
        value = compute()
        save(path, value)
        return value

    def write_config(self):
        if self.write:
            self.cfg.write(self.path("config.resolved.yaml"))

    # -- stages -------------------------------------------------------------

    @_stage("generate")
    def medium(self):
        def make():
            grid = build_fine_grid(self.cfg.n_fine)
            field_, cmap = generate_medium(self.cfg.medium, grid)
            if self.write:
                write_binary(self.path("kappa.bin"), field_.values, grid.n, KIND_CELL)
                write_binary(self.path("labels.bin"), cmap.labels.astype(float), grid.n, KIND_CELL)
                write_field_csv(self.path("kappa.csv"), field_, cmap)
                with open(self.path("medium.json"), "w") as fh:
                    json.dump({"spec": self.cfg.medium.to_dict(), "n": grid.n,
                               "kappa_sha256": field_.digest(), "labels_sha256": cmap.digest(),
                               "fraction_1": float(cmap.labels.mean()),
                               "config_hash": self.cfg.digest()}, fh, indent=2)
            return grid, field_, cmap
        return self._memoized("medium", make)

    @_stage("fine-solve")
    def fine(self):
        def make():
            grid, field_, _ = self.medium()
            t = time.perf_counter()
            parts = ("fine", field_.digest(), repr(self.cfg.load))
            u = self._disk("fine", parts,
                           lambda: fem.solve_fine_reference(grid, field_, resolve_load(self.cfg.load),
                                                            tol=self.cfg.tol),
                           lambda p, v: np.savez(p, u=v), lambda p: np.load(p)["u"])
            self.timings["time_fine"] = time.perf_counter() - t
            if self.write:
                write_binary(self.path("u_fine.bin"), u, grid.n, KIND_NODE)
            return u
        return self._memoized("fine", make)

    def partitions(self, shift=(0.0, 0.0)):
        grid, _, cmap = self.medium()
        z = tuple(float(c) for c in shift)
        p_H = ShiftedPartition(grid, self.cfg.scale, z=z)
        # the subcell lines through z coincide with those through z mod H_eps
        z_eps = tuple(round(c * grid.n) % round(self.cfg.scale_eps * grid.n) / grid.n for c in z)
        p_eps = ShiftedPartition(grid, self.cfg.scale_eps, z=z_eps, continuum_map=cmap)
        return p_H, p_eps

    def auxiliary(self, shift=(0.0, 0.0)):
        def make():
            _, _, cmap = self.medium()
            _, p_eps = self.partitions(shift)
            return build_auxiliary(p_eps, cmap)
        return self._memoized(("aux", tuple(shift)), make)

    @_stage("basis")
    def basis(self):
        def make():
            _, field_, _ = self.medium()
            aux = self.auxiliary()
            k = self.cfg.resolved_k
            t = time.perf_counter()

            def save(p, b):
                sp.save_npz(p, b.matrix)

            def load(p):
                return LocalizedBasisSet(aux, k, sp.load_npz(p).tocsc())

            parts = ("basis", field_.digest(), repr(aux.partition.key()), k)
            b = self._disk("basis", parts, lambda: build_nlmc_basis(aux, field_, k, self.cfg.threads),
                           save, load)
            self.timings["time_basis"] = time.perf_counter() - t
            if self.write:
                write_partition_csv(aux.partition, self.path("subcells.csv"))
            return b
        return self._memoized("basis", make)

    @_stage("cells")
    def cell_sets(self, shift=(0.0, 0.0)):
        def make():
            _, field_, _ = self.medium()
            p_H, p_eps = self.partitions(shift)
            aux = self.auxiliary(shift)
            windows = None
            if self.cfg.rve_window is not None:
                windows = rve_windows(p_H, p_eps, self.cfg.rve_window)
            t = time.perf_counter()
            sets = solve_all_cell_sets(p_H, aux, field_, self.cfg.resolved_k, threads=self.cfg.threads,
                                       cache=self.cell_cache, windows=windows)
            if self.cell_cache is not None:
                log.info("cell cache: %d hits, %d misses", self.cell_cache.hits, self.cell_cache.misses)
            self.timings["time_cells"] = self.timings.get("time_cells", 0.0) + time.perf_counter() - t
            return sets
        return self._memoized(("cells", tuple(shift)), make)

    @_stage("tensors")
    def tensors(self, shift=(0.0, 0.0)):
        def make():
            _, field_, _ = self.medium()
            p_H, _ = self.partitions(shift)
            sets = self.cell_sets(shift)
            if self.cfg.rve_window is not None:
                t = assemble_effective_tensors_rve(sets, field_, p_H)
            else:
                t = assemble_effective_tensors(sets, field_, p_H)
            if self.write and tuple(shift) == (0.0, 0.0):
                write_tensors_csv(t, self.out)
            return t
        return self._memoized(("tensors", tuple(shift)), make)

    @_stage("macro")
    def macro(self):
        def make():
            grid, field_, _ = self.medium()
            f = resolve_load(self.cfg.load)
            p_H, _ = self.partitions()
            mesh = CoarseMesh(p_H)
            shifts = [tuple(float(c) for c in z) for z in self.cfg.shifts]
            ts, ms, ps = [], [], []
            for z in shifts:
                ts.append(self.tensors(z))
                ms.append(compute_load_moments(f, self.cell_sets(z), self.partitions(z)[0]))
                ps.append(self.partitions(z)[0])
            t = time.perf_counter()
            system = assemble_macro_system(ts, ms, mesh, self.cfg.bc, partitions=ps)
            sol = solve_macro(system, tol=self.cfg.tol)
            zero = (0.0, 0.0)
            reconstruct(sol, self.cell_sets(zero), self.partitions(zero)[0])
            self.timings["time_macro"] = time.perf_counter() - t
            if self.write:
                write_binary(self.path("reconstruction.bin"), sol.reconstruction, grid.n, KIND_BROKEN)
                nh = len(mesh.coords[0]) - 1
                for i in range(sol.U.shape[0]):
                    write_binary(self.path(f"macro_U{i}.bin"), sol.U[i], nh, KIND_NODE)
                with open(self.path("macro.csv"), "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["node", "x", "y", *[f"U{i}" for i in range(sol.U.shape[0])]])
                    for v, (x, y) in enumerate(mesh.node_coords()):
                        w.writerow([v, f"{x:.17g}", f"{y:.17g}", *[f"{u:.17g}" for u in sol.U[:, v]]])
            return sol
        return self._memoized("macro", make)

    # -- metrics ------------------------------------------------------------

    def nlmc_metrics(self):
        """Errors of the NLMC reconstruction ``φ·Π(u_ε)`` and the NLMC Galerkin solution."""
        grid, field_, _ = self.medium()
        u = self.fine()
        b = self.basis()
        aux = b.aux
        u_glo = downscale_nlmc(project_continuum_average(u, aux), b)
        diff = fem.norms(u_glo - u, field_)
        ref = fem.norms(u, field_)
        mean = np.abs(aux.global_matrix() @ (u_glo - u)).max(initial=0.0)
        out = {
            "energy_error": diff["energy"],
            "energy_error_rel": diff["energy"] / ref["energy"] if ref["energy"] > 0 else 0.0,
            "l2_error_rel": diff["l2"] / ref["l2"] if ref["l2"] > 0 else 0.0,
            "mean_preservation": mean / ref["l2"] if ref["l2"] > 0 else mean,
        }
        # Galerkin solution in the localized space
        A = fem.assemble_stiffness(grid, field_)
        F = fem.load_vector(grid, resolve_load(self.cfg.load))
        interior = np.setdiff1d(np.arange(grid.n_nodes), grid.boundary_nodes())
        B = b.matrix[interior]
        used = np.asarray(B.getnnz(axis=0) > 0).ravel()
        B = B[:, used]
        Ams = (B.T @ A[interior][:, interior] @ B).toarray()
        c = np.linalg.solve(0.5 * (Ams + Ams.T), B.T @ F[interior])
        u_ms = np.zeros(grid.n_nodes)
        u_ms[interior] = B @ c
        e = fem.norms(u_ms - u, field_)["energy"]
        out["galerkin_energy_error_rel"] = e / ref["energy"] if ref["energy"] > 0 else e
        if self.write:
            write_binary(self.path("u_glo.bin"), u_glo, grid.n, KIND_NODE)
        return out

    def macro_metrics(self):
        grid, field_, _ = self.medium()
        u = self.fine()
        sol = self.macro()
        diff = fem.norms(sol.reconstruction - fem.corner_values(u, grid), field_)
        ref = fem.norms(u, field_)
        return {
            "macro_l2_error": diff["l2"],
            "macro_l2_error_rel": diff["l2"] / ref["l2"] if ref["l2"] > 0 else diff["l2"],
        }

    def identity_metric(self, n_pairs=3):
        _, field_, _ = self.medium()
        p_H, _ = self.partitions()
        t = self.tensors()
        pairs = random_macro_pairs(p_H, t.n_continua, n_pairs, seed=self.cfg.seed)
        return verify_averaging_identity(pairs, t, self.cell_sets(), field_, p_H)

    def report_row(self, study="pipeline", nlmc=True, macro=True):
        metrics = {}
        if nlmc:
            metrics.update(self.nlmc_metrics())
        if macro:
            metrics.update(self.macro_metrics())
            metrics["identity_discrepancy"] = self.identity_metric()
        metrics.update(self.timings)
        return ReportRow.from_config(study, self.cfg, metrics)


@dataclass
class ReportRow:
    study: str
    params: dict
    metrics: dict = field(default_factory=dict)
    kind: str = "point"
    quantity: str = ""
    value: float | None = None
    status: str = "ok"
    config_hash: str = ""

    def __post_init__(self):
        for k, v in self.metrics.items():
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"metric {k}={v!r} is not finite and nonnegative")

    @classmethod
    def from_config(cls, study, cfg: RunConfig, metrics=None, status="ok"):
        params = {"n_fine": cfg.n_fine, "scale_eps": cfg.scale_eps, "scale": cfg.scale,
                  "k_layers": cfg.resolved_k, "kappa_high": cfg.medium.kappa_high, "bc": cfg.bc}
        return cls(study, params, dict(metrics or {}), status=status, config_hash=cfg.digest())

    def as_csv(self):
        def fmt(v):
            if v is None or v == "":
                return ""
            if isinstance(v, (float, np.floating)):
                return f"{float(v):.17g}"
            return str(v)

        row = {"study": self.study, "config_hash": self.config_hash, "kind": self.kind,
               "quantity": self.quantity, "value": fmt(self.value), "status": self.status}
        row.update({k: fmt(self.params.get(k)) for k in PARAMS})
        row.update({k: fmt(self.metrics.get(k)) for k in METRICS})
        return row


def _number(v):
    try:
        return float(Fraction(str(v)))
    except (ValueError, ZeroDivisionError):
        return v


def write_report(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r.as_csv())


def loglog_slope(x, y):
    """Least-squares slope of ``log y`` against ``log x``; NaN if undefined."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 2 or np.unique(x[ok]).size < 2:
        return math.nan
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def _summaries(study, rows, sweep):
    """Slope rows for length sweeps and a max/min ratio row for contrast sweeps."""
    ok = [r for r in rows if r.status == "ok"]
    out = []
    for name, values in sweep.items():
        if name == "kappa_high":
            errs = [r.metrics.get("energy_error_rel") for r in ok if "energy_error_rel" in r.metrics]
            ratio = max(errs) / min(errs) if len(errs) >= 2 and min(errs) > 0 else None
            out.append(ReportRow(study, {}, kind="ratio", quantity="energy_error_rel max/min over kappa_high",
                                 value=ratio, status="ok" if ratio is not None else "not-applicable"))
            continue
        if name not in ("scale_eps", "scale"):
            continue
        for metric in ("energy_error", "macro_l2_error"):
            pts = [(r.params[name], r.metrics[metric]) for r in ok if metric in r.metrics]
            if not pts:
                continue
            s = loglog_slope(*zip(*pts)) if len(values) > 1 else math.nan
            out.append(ReportRow(study, {}, kind="slope", quantity=f"{metric} vs {name}",
                                 value=None if math.isnan(s) else s,
                                 status="ok" if not math.isnan(s) else "not-applicable"))
    return out


def run_study(cfg: RunConfig, study="study"):
    """Run every point of ``cfg.sweep`` (cartesian product) and summarize.

    A failing point is recorded with its stage and message; the study goes on.
    """
    sweep = cfg.sweep or {}
    names = list(sweep)
    rows = []
    for combo in itertools.product(*(sweep[k] for k in names)):
        changes = dict(zip(names, combo))
        try:
            point = cfg.with_(**changes, sweep={})
            sub = os.path.join(cfg.out, "points", point.digest())
            run = Run(point, out=sub)
            run.write_config()
            rows.append(run.report_row(study, nlmc="nlmc" in point.stages, macro="macro" in point.stages))
        except Exception as err:
            log.error("study point %s failed: %s", changes, err)
            try:
                row = ReportRow.from_config(study, cfg.with_(**changes, sweep={}), status=f"failed: {err}")
            except Exception:
                row = ReportRow(study, {k: _number(v) for k, v in changes.items()}, status=f"failed: {err}")
            rows.append(row)
    rows.extend(_summaries(study, rows, sweep))
    return rows


@dataclass
class Check:
    name: str
    value: float
    limit: float
    passed: bool
    detail: str = ""


def run_verify(run: Run):
    """Identity, mean preservation, tensor structure and solver-oracle checks."""
    cfg = run.cfg
    checks = []

    def add(name, value, limit, passed=None, detail=""):
        ok = bool(value <= limit) if passed is None else passed
        checks.append(Check(name, float(value), float(limit), ok, detail))

    t = run.tensors()
    add("tensor-symmetry", t.symmetry_violation(), 1e-12)
    add("tensor-psd", -t.min_eigenvalue_ratio(), 1e-10, detail="-(lambda_min/lambda_max) of the Gram blocks")
    add("averaging-identity", run.identity_metric(), cfg.identity_tol)
    m = run.nlmc_metrics()
    add("mean-preservation", m["mean_preservation"], cfg.mean_tol)
    checks.extend(_oracle_checks(run))
    return checks


def _oracle_checks(run: Run):
    """Iterative and Schur paths against dense factorization on small systems."""
    grid, field_, _ = run.medium()
    out = []
    if grid.n <= 64:
        A = fem.assemble_stiffness(grid, field_)
        interior = np.setdiff1d(np.arange(grid.n_nodes), grid.boundary_nodes())
        Ai = A[interior][:, interior]
        b = np.random.default_rng(run.cfg.seed).standard_normal(interior.size)
        dense = np.linalg.solve(Ai.toarray(), b)
        e = dense - fem.solve_spd(Ai, b, tol=1e-12, method="cg")
        rel = np.sqrt(e @ Ai @ e) / np.sqrt(dense @ Ai @ dense)
        out.append(Check("fine-spd-vs-dense", rel, 1e-8, rel <= 1e-8))
    aux = run.auxiliary()
    sub = aux.partition
    patch = oversample(sub, len(sub) // 2, 1)
    A_free, C_free, pieces, _ = patch_system(patch, aux, field_)
    if A_free.shape[0] + C_free.shape[0] <= 600:
        g = np.random.default_rng(run.cfg.seed + 1).standard_normal(C_free.shape[0])
        cons = fem.ConstraintSet(C_free, g)
        u_d, _ = fem.solve_constrained(A_free, cons, method="dense")
        u_s, _ = fem.solve_constrained(A_free, cons, method="schur", inner="cg", tol=1e-12)
        e = u_d - u_s
        rel = np.sqrt(e @ A_free @ e) / np.sqrt(u_d @ A_free @ u_d)
        out.append(Check("constrained-schur-vs-dense", rel, 1e-8, rel <= 1e-8))
    return out

"""Config-driven experiment runner.

A config is an INI file with the sections below; unknown sections or keys
are rejected before anything is computed.

    [experiment]  name, seed, trials, M_ladder, outputs
    [input]       kind = gm | density | csv, d, n_samples, modes, whiten, family, path
    [target]      name plus target parameters (see ``apce list-targets``)
    [basis]       kinds (comma list), p, near_mode
    [rotation]    mode = off | on, iterations, rebuild
    [solver]      sigma, max_iter
    [diagnostics] basis_bound, gram_deviation

For sample-set inputs ``S`` is split in halves: the basis is built on the
first half, training points are drawn from the second half and the error is
measured on the rest of the second half.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .basis import BasisError
from .diagnostics import basis_bound_table, gram_deviation
from .measure import (FAMILIES, SampleSet, pca_whiten, random_mixture, read_samples_csv,
                      sample_family, sample_gaussian_mixture, smolyak_rule)
from .problems import TARGETS, make_target
from .rotation import BASIS_KINDS, FitOptions, _build, fit_density, fit_discrete, save_surrogate
from .sparse_solver import relative_l1_error, relative_l2_error


class ConfigError(ValueError):
    pass


class ExperimentError(RuntimeError):
    pass


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _int_list(v: str) -> list[int]:
    return [int(x) for x in v.replace(",", " ").split()]


def _str_list(v: str) -> list[str]:
    return [x for x in v.replace(",", " ").split()]


_SCHEMA = {
    "experiment": {"name": str, "seed": int, "trials": int, "M_ladder": _int_list, "outputs": str},
    "input": {"kind": str, "d": int, "n_samples": int, "modes": int, "whiten": _bool,
              "family": str, "path": str, "input_seed": int},
    "basis": {"kinds": _str_list, "p": int, "near_mode": str},
    "rotation": {"mode": str, "iterations": int, "rebuild": _bool},
    "solver": {"sigma": float, "max_iter": int},
    "diagnostics": {"basis_bound": _bool, "gram_deviation": _bool},
}
_REQUIRED = {"experiment": {"name", "seed", "M_ladder"}, "input": {"kind", "d"},
             "target": {"name"}, "basis": {"p"}}
_TARGET_KEYS = {
    "monomial": {"s": int, "coeff_mode": str, "seed": int},
    "elliptic": {"l_c": float, "sigma": float, "a0": float, "x_star": float, "quad_n": int},
    "linear": {"weights": lambda v: [float(x) for x in v.replace(",", " ").split()]},
}


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    M_ladder: list
    input: dict
    target: str
    target_params: dict
    d: int
    p: int
    bases: list
    rotate: str = "on"
    iterations: int = 1
    rebuild: bool = True
    near_mode: str = "pairwise"
    trials: int = 20
    sigma: float = 0.0
    max_iter: int = 100_000
    outputs: str = ""
    diagnostics: dict = field(default_factory=dict)
    source_text: str = ""
    base_dir: Path = field(default_factory=Path.cwd)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.source_text.encode()).hexdigest()


def bundled_configs() -> dict[str, Path]:
    root = resources.files("apce") / "configs"
    return {p.name[:-4]: Path(str(p)) for p in root.iterdir() if p.name.endswith(".ini")}


def resolve_config(ref: str) -> Path:
    p = Path(ref)
    if p.exists():
        return p
    known = bundled_configs()
    if ref in known:
        return known[ref]
    raise ConfigError(f"no config file {ref!r} and no bundled config of that name "
                      f"(bundled: {', '.join(sorted(known))})")


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    vals: dict[str, dict] = {}
    for sec in cp.sections():
        if sec == "target":
            continue
        if sec not in _SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        vals[sec] = {}
        for key, raw in cp.items(sec):
            if key not in _SCHEMA[sec]:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            try:
                vals[sec][key] = _SCHEMA[sec][key](raw)
            except ValueError as exc:
                raise ConfigError(f"[{sec}] {key}: {exc}") from None
    if not cp.has_section("target"):
        raise ConfigError("missing section [target]")
    tgt = dict(cp.items("target"))
    for sec, keys in _REQUIRED.items():
        have = tgt if sec == "target" else vals.get(sec, {})
        missing = keys - set(have)
        if missing:
            raise ConfigError(f"[{sec}] is missing {sorted(missing)}")
    tname = tgt.pop("name")
    if tname not in _TARGET_KEYS:
        raise ConfigError(f"unknown target {tname!r}; known: {sorted(_TARGET_KEYS)}")
    tparams = {}
    for key, raw in tgt.items():
        if key not in _TARGET_KEYS[tname]:
            raise ConfigError(f"unknown key {key!r} for target {tname!r}")
        try:
            tparams[key] = _TARGET_KEYS[tname][key](raw)
        except ValueError as exc:
            raise ConfigError(f"[target] {key}: {exc}") from None

    ex, inp = vals["experiment"], vals["input"]
    bas = vals["basis"]
    rot = vals.get("rotation", {})
    sol = vals.get("solver", {})
    kind = inp["kind"]
    if kind not in ("gm", "density", "csv"):
        raise ConfigError(f"[input] kind must be gm, density or csv, got {kind!r}")
    if kind == "density":
        fam = inp.get("family")
        if fam not in FAMILIES:
            raise ConfigError(f"[input] family must be one of {FAMILIES}")
        default_bases = ["classical"]
    else:
        if kind == "csv" and "path" not in inp:
            raise ConfigError("[input] kind = csv needs a path")
        default_bases = ["near"]
    bases = bas.get("kinds", default_bases)
    allowed = ("classical",) if kind == "density" else BASIS_KINDS
    for b in bases:
        if b not in allowed:
            raise ConfigError(f"[basis] kind {b!r} not available for {kind} input (use {allowed})")
    mode = rot.get("mode", "on")
    if mode not in ("on", "off"):
        raise ConfigError("[rotation] mode must be on or off")
    if ex.get("trials", 20) < 1 or any(m < 1 for m in ex["M_ladder"]) or not ex["M_ladder"]:
        raise ConfigError("trials and every ladder entry must be positive")
    if inp["d"] < 1 or bas["p"] < 0:
        raise ConfigError("d must be >= 1 and p >= 0")
    if rot.get("iterations", 1) < 1:
        raise ConfigError("[rotation] iterations must be >= 1")
    if sol.get("sigma", 0.0) < 0:
        raise ConfigError("[solver] sigma must be >= 0")
    if bas.get("near_mode", "pairwise") not in ("pairwise", "grouped"):
        raise ConfigError("[basis] near_mode must be pairwise or grouped")
    if kind != "csv" and inp.get("n_samples", 0) < 2:
        raise ConfigError("[input] n_samples must be >= 2")
    return ExperimentConfig(
        name=ex["name"], seed=ex["seed"], M_ladder=ex["M_ladder"], input=inp, target=tname,
        target_params=tparams, d=inp["d"], p=bas["p"], bases=bases, rotate=mode,
        iterations=rot.get("iterations", 1), rebuild=rot.get("rebuild", True),
        near_mode=bas.get("near_mode", "pairwise"), trials=ex.get("trials", 20),
        sigma=sol.get("sigma", 0.0), max_iter=sol.get("max_iter", 100_000),
        outputs=ex.get("outputs", ""), diagnostics=vals.get("diagnostics", {}),
        source_text=text, base_dir=base_dir or Path.cwd())


def load_config(ref: str) -> ExperimentConfig:
    path = resolve_config(ref)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse_config(text, path.parent)


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

def _rng(cfg: ExperimentConfig, *tags: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *tags])


def _input_samples(cfg: ExperimentConfig) -> tuple[SampleSet, dict]:
    inp = cfg.input
    kind = inp["kind"]
    prov: dict = {"kind": kind}
    if kind == "gm":
        iseed = inp.get("input_seed", cfg.seed)
        spec = random_mixture(cfg.d, inp.get("modes", 3), seed=iseed)
        S = sample_gaussian_mixture(spec, inp["n_samples"], seed=iseed + 1)
        prov["mixture_weights"] = spec.weights.tolist()
        if inp.get("whiten", False):
            S, _, _ = pca_whiten(S)
            prov["whitened"] = True
    elif kind == "density":
        rng = _rng(cfg, 1)
        pts = sample_family(inp["family"], (inp["n_samples"], cfg.d), rng)
        S = SampleSet(pts)
        prov["family"] = inp["family"]
    else:
        path = Path(inp["path"])
        if not path.is_absolute():
            path = cfg.base_dir / path
        if not path.exists():
            raise ConfigError(f"input file {path} does not exist")
        S = read_samples_csv(path)
        if S.d != cfg.d:
            raise ConfigError(f"{path} has dimension {S.d}, config says {cfg.d}")
        prov["path"] = str(inp["path"])
    return S, prov


def _variants(cfg: ExperimentConfig) -> list[tuple[str, str]]:
    out = []
    for b in cfg.bases:
        out.append((b, "none"))
        if cfg.rotate == "on":
            if cfg.input["kind"] == "density":
                out += [(b, "rebuilt"), (b, "reused")]
            else:
                out.append((b, "rebuilt" if (cfg.rebuild and b in ("exact", "near")) else "reused"))
    return out


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def run_experiment(cfg: ExperimentConfig, outputs: str | Path | None = None) -> dict:
    """Run every (basis, rotation, M, trial) cell and write CSV + JSON outputs.

    Returns the report dictionary.  On failure the report is still written
    with ``status = "failed"`` and the cells finished so far.
    """
    out_dir = Path(outputs) if outputs is not None else Path(cfg.outputs or f"apce-out/{cfg.name}")
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    report = {
        "name": cfg.name,
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "trials": cfg.trials,
        "M_ladder": cfg.M_ladder,
        "versions": {"apce": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        "status": "running",
    }
    try:
        _run(cfg, rows, report, out_dir)
        report["status"] = "ok"
    except ConfigError as exc:
        report["status"] = "failed"
        report["error"] = f"ConfigError: {exc}"
        raise
    except ExperimentError as exc:
        report["status"] = "failed"
        report["error"] = str(exc)
        raise
    except (BasisError, ArithmeticError, FloatingPointError, ValueError, RuntimeError) as exc:
        report["status"] = "failed"
        report["error"] = f"{type(exc).__name__}: {exc}"
        raise ExperimentError(report["error"]) from exc
    finally:
        _write_outputs(out_dir, rows, report)
    return report


def _run(cfg: ExperimentConfig, rows: list, report: dict, out_dir: Path) -> None:
    S, prov = _input_samples(cfg)
    report["input"] = prov
    f = make_target(cfg.target, cfg.d, cfg.p, **cfg.target_params)
    density = cfg.input["kind"] == "density"
    rule = None
    if density:
        pool = S
        build = None
        if cfg.rotate == "on":
            rule = smolyak_rule(cfg.input["family"], cfg.d, cfg.p)
    else:
        build, pool = S.split()
    fvals = np.asarray(f(pool.points), dtype=float)
    if not np.all(np.isfinite(fvals)):
        raise ExperimentError("target returned non-finite values")
    report["n_build"] = 0 if build is None else build.n
    report["n_pool"] = pool.n
    variants = _variants(cfg)
    report["variants"] = [f"{b}/{r}" for b, r in variants]
    diag = {}
    if build is not None and (cfg.diagnostics.get("basis_bound") or cfg.diagnostics.get("gram_deviation")):
        for b in cfg.bases:
            if b not in ("exact", "near"):
                continue
            basis, _, _ = _build(b, build, cfg.d, cfg.p, cfg.near_mode)
            entry = {}
            if cfg.diagnostics.get("basis_bound"):
                entry["basis_bound"] = {str(k): v for k, v in basis_bound_table(basis, S).items()}
            if cfg.diagnostics.get("gram_deviation"):
                entry["gram_deviation_pool"] = gram_deviation(basis, pool)
            diag[b] = entry
    report["diagnostics"] = diag
    top = max(cfg.M_ladder)
    for M in cfg.M_ladder:
        if M >= pool.n:
            raise ExperimentError(f"M = {M} leaves no held-out points (pool has {pool.n})")
        for t in range(cfg.trials):
            rng = _rng(cfg, 2, t, M)
            train = np.sort(rng.choice(pool.n, size=M, replace=False))
            mask = np.ones(pool.n, dtype=bool)
            mask[train] = False
            test = np.nonzero(mask)[0]
            assert np.intersect1d(train, test).size == 0
            X, y = pool.points[train], fvals[train]
            Xt, yt = pool.points[test], fvals[test]
            for b in cfg.bases:
                fits = {}
                if density:
                    opt = FitOptions(basis="classical", sigma=cfg.sigma, rotate=cfg.rotate == "on",
                                     iterations=cfg.iterations, rebuild=True,
                                     max_iter=cfg.max_iter)
                    res = fit_density(X, y, cfg.input["family"], cfg.d, cfg.p, opt, rule)
                    fits["none"] = res.initial
                    if cfg.rotate == "on":
                        fits["rebuilt"] = res.surrogate
                        res2 = fit_density(X, y, cfg.input["family"], cfg.d, cfg.p,
                                           FitOptions(basis="classical", sigma=cfg.sigma,
                                                      iterations=cfg.iterations, rebuild=False,
                                                      max_iter=cfg.max_iter), rule)
                        fits["reused"] = res2.surrogate
                else:
                    rebuild = cfg.rebuild and b in ("exact", "near")
                    opt = FitOptions(basis=b, sigma=cfg.sigma, rotate=cfg.rotate == "on",
                                     iterations=cfg.iterations, rebuild=rebuild, near_mode=cfg.near_mode,
                                     max_iter=cfg.max_iter)
                    res = fit_discrete(build, X, y, cfg.d, cfg.p, opt)
                    fits["none"] = res.initial
                    if cfg.rotate == "on":
                        fits["rebuilt" if rebuild else "reused"] = res.surrogate
                for rot, sur in fits.items():
                    pred = sur.predict(Xt)
                    rows.append({"basis": b, "rotation": rot, "M": M, "trial": t,
                                 "eps_l2": relative_l2_error(pred, yt),
                                 "eps_l1": relative_l1_error(pred, yt),
                                 "nonzeros": int(np.count_nonzero(sur.c))})
                    if M == top and t == 0:
                        save_surrogate(out_dir / f"surrogate_{b}_{rot}.json", sur)


def _write_outputs(out_dir: Path, rows: list, report: dict) -> None:
    with open(out_dir / "trials.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["basis", "rotation", "M", "trial", "eps_l2", "eps_l1", "nonzeros"])
        for r in rows:
            w.writerow([r["basis"], r["rotation"], r["M"], r["trial"], _fmt(r["eps_l2"]),
                        _fmt(r["eps_l1"]), r["nonzeros"]])
    curves = summarize(rows)
    with open(out_dir / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["basis", "rotation", "M", "trials", "mean_eps_l2", "median_eps_l2",
                    "q25_eps_l2", "q75_eps_l2", "mean_eps_l1", "median_eps_l1"])
        for c in curves:
            w.writerow([c["basis"], c["rotation"], c["M"], c["trials"]]
                       + [_fmt(c[k]) for k in ("mean_eps_l2", "median_eps_l2", "q25_eps_l2",
                                               "q75_eps_l2", "mean_eps_l1", "median_eps_l1")])
    report["curves"] = curves
    if report.get("status") != "ok":
        report["partial"] = True
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")


def summarize(rows: list) -> list[dict]:
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["basis"], r["rotation"], r["M"]), []).append(r)
    out = []
    for (b, rot, M), rs in groups.items():
        e2 = np.array([r["eps_l2"] for r in rs])
        e1 = np.array([r["eps_l1"] for r in rs])
        out.append({"basis": b, "rotation": rot, "M": M, "trials": len(rs),
                    "mean_eps_l2": float(e2.mean()), "median_eps_l2": float(np.median(e2)),
                    "q25_eps_l2": float(np.quantile(e2, 0.25)), "q75_eps_l2": float(np.quantile(e2, 0.75)),
                    "mean_eps_l1": float(e1.mean()), "median_eps_l1": float(np.median(e1))})
    return out


def read_curves(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["M"] = int(r["M"])
        for k in list(r):
            if k.startswith(("mean", "median", "q25", "q75")):
                r[k] = float(r[k])
    return rows


def target_descriptions() -> dict[str, str]:
    return {k: v[1] for k, v in TARGETS.items()}

"""Experiment registry, configuration, reports, and slope fitting.

Configs are flat JSON documents validated against per-experiment
schemas: unknown keys are rejected by name, a seed is mandatory, and
defaults are filled in so the completed config can be echoed verbatim
into the report.  ``run_experiment`` dispatches to the registered
experiment, collects measured constants and pass/fail checks (each
check names its anchor string), and writes artifacts atomically:
``report.json``, one or more CSV tables with fixed schemas and
deterministic bytes (floats as %.12e; wall-clock lives only in the
JSON), and optional SVG line plots.
"""

import json
import os
import tempfile
import time

import numpy as np

from . import dyadic, flowmaps, linearized
from . import compressible as cns
from .fourier import SpectralField, make_grid, random_field, set_fft_workers
from .paraproduct import bony_decompose, dealias_product


class ConfigError(ValueError):
    """Configuration rejected: unknown key, missing key, or bad value."""


# ---------------------------------------------------------------------------
# schema validation


def _check_type(path, value, kind):
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {path!r} must be a number, got {value!r}")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {path!r} must be an integer, got {value!r}")
        return value
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"config key {path!r} must be a string, got {value!r}")
        return value
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config key {path!r} must be true/false, got {value!r}")
        return value
    if kind is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key {path!r} must be a list, got {value!r}")
        return list(value)
    raise AssertionError(kind)


def validate_config(config, schema, path=""):
    """Validate ``config`` against a nested schema, filling defaults.

    Schema nodes are either dicts (nested objects) or tuples
    (type, default) where default None marks the key required.  Unknown
    keys are rejected naming the offending key.
    """
    if not isinstance(config, dict):
        raise ConfigError(f"config section {path or '<root>'!r} must be an object")
    out = {}
    for key in config:
        if key not in schema:
            full = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key {full!r}")
    for key, node in schema.items():
        full = f"{path}.{key}" if path else key
        if isinstance(node, dict):
            sub = config.get(key, {})
            out[key] = validate_config(sub, node, full)
        else:
            kind, default = node
            if key in config:
                out[key] = _check_type(full, config[key], kind)
            elif default is None:
                raise ConfigError(f"missing required config key {full!r}")
            else:
                out[key] = default
    return out


_GRID_SCHEMA = {"d": (int, 2), "N": (int, 32), "M": (float, 1.0)}
_PARAMS_SCHEMA = {"mu": (float, 0.5), "lam": (float, 0.0),
                  "gamma": (float, 1.4), "eps": (float, 1.0)}
_DATA_SCHEMA = {"kind": (str, "random-band"), "amplitude": (float, 0.01),
                "band": (int, 4), "mean": (float, 0.0)}


def _base_schema(**extra):
    schema = {"experiment": (str, ""), "seed": (int, None),
              "comment": (str, "")}
    schema.update(extra)
    return schema


def _make_params(cfg):
    return cns.CnsParams.barotropic(gamma=cfg["gamma"], mu=cfg["mu"],
                                    lam=cfg["lam"], eps=cfg["eps"])


def _make_field(grid, recipe, rng, ncomp=None):
    kind = recipe["kind"]
    if kind == "zero":
        f = SpectralField.zero(grid, ncomp=ncomp)
    elif kind == "random-band":
        f = random_field(grid, rng, ncomp=ncomp, amplitude=recipe["amplitude"],
                         band=recipe["band"])
    else:
        raise ConfigError(f"unknown data recipe kind {kind!r}")
    if recipe.get("mean", 0.0) and ncomp is None:
        c = f.coeffs.copy()
        c[(0,) * grid.d] += recipe["mean"] * grid.box_volume
        f = f.with_coeffs(c)
    return f


# ---------------------------------------------------------------------------
# slope fitting


def fit_decay_slope(times, values, window):
    """Least-squares slope of log(value) against log(t) inside ``window``.

    Returns (slope, stderr).  Requires at least 8 samples strictly
    inside the window and positive values there.
    """
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    lo, hi = window
    keep = (times >= lo) & (times <= hi)
    if int(np.sum(keep)) < 8:
        raise ValueError(f"need at least 8 samples in window [{lo}, {hi}], "
                         f"got {int(np.sum(keep))}")
    t = times[keep]
    v = values[keep]
    if np.any(v <= 0.0) or np.any(t <= 0.0):
        raise ValueError("slope fit needs positive times and values in the window")
    x = np.log(t)
    y = np.log(v)
    n = len(x)
    xbar = np.mean(x)
    sxx = np.sum((x - xbar) ** 2)
    slope = float(np.sum((x - xbar) * y) / sxx)
    inter = float(np.mean(y) - slope * xbar)
    resid = y - (inter + slope * x)
    sigma2 = float(np.sum(resid ** 2)) / max(n - 2, 1)
    return slope, float(np.sqrt(sigma2 / sxx))


# ---------------------------------------------------------------------------
# atomic artifact writers


def _atomic_write_bytes(path, data):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt_cell(x):
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.12e" % float(x)


def write_csv(path, header, rows):
    """Write a CSV table with deterministic bytes (floats as %.12e, \\n ends)."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt_cell(x) for x in row))
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def write_json(path, obj):
    _atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True,
                                          default=_json_default) + "\n").encode())


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x)}")


# ---------------------------------------------------------------------------
# snapshots: flat little-endian binary + JSON sidecar


def save_snapshot(prefix, arrays, meta):
    """Persist named complex arrays as one flat '<c16' binary + JSON sidecar.

    ``arrays`` is a dict name -> ndarray (complexified on write); the
    sidecar records shapes and byte offsets so load_snapshot can slice
    the blob back without guessing.
    """
    blob = bytearray()
    entries = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<c16")
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": len(blob), "count": int(arr.size)})
        blob += arr.tobytes()
    _atomic_write_bytes(prefix + ".bin", bytes(blob))
    sidecar = dict(meta)
    sidecar["arrays"] = entries
    sidecar["dtype"] = "<c16"
    write_json(prefix + ".json", sidecar)


def load_snapshot(prefix):
    """Inverse of save_snapshot: returns (dict of arrays, sidecar meta)."""
    with open(prefix + ".json") as fh:
        meta = json.load(fh)
    blob = np.fromfile(prefix + ".bin", dtype="<c16")
    arrays = {}
    for ent in meta["arrays"]:
        start = ent["offset"] // 16
        arrays[ent["name"]] = blob[start:start + ent["count"]].reshape(ent["shape"])
    return arrays, meta


def save_state_snapshot(prefix, state, params=None, extra=None):
    meta = {"t": state.t,
            "grid": {"d": state.grid.d, "N": state.grid.N, "M": state.grid.M}}
    if params is not None:
        meta["params"] = {"mu": params.mu, "lam": params.lam, "eps": params.eps,
                          "alpha": params.alpha}
    if extra:
        meta.update(extra)
    save_snapshot(prefix, {"a": state.a.coeffs, "u": state.u.coeffs}, meta)


def load_state_snapshot(prefix):
    arrays, meta = load_snapshot(prefix)
    grid = make_grid(meta["grid"]["d"], meta["grid"]["N"], meta["grid"]["M"])
    a = SpectralField(grid, arrays["a"], real=True)
    u = SpectralField(grid, arrays["u"], real=True)
    return cns.CnsState(a, u, t=float(meta["t"])), meta


# ---------------------------------------------------------------------------
# report structure


class RunReport:
    """Everything one experiment produced: config echo, checks, tables.

    ``checks`` is a list of dicts with name / passed / value / bound /
    anchor; ``measured`` holds recorded constants; ``tables`` maps table
    names to (header, rows) pairs destined for CSV files.
    """

    def __init__(self, experiment, config):
        self.experiment = experiment
        self.config = config
        self.checks = []
        self.measured = {}
        self.tables = {}
        self.wall_clock_s = None
        self.artifacts = []

    def check(self, name, passed, value, bound, anchor):
        self.checks.append({"name": name, "passed": bool(passed),
                            "value": value, "bound": bound, "anchor": anchor})

    @property
    def passed(self):
        return all(c["passed"] for c in self.checks)

    def to_dict(self):
        return {"experiment": self.experiment, "config": self.config,
                "checks": self.checks, "measured": self.measured,
                "passed": self.passed, "wall_clock_s": self.wall_clock_s,
                "artifacts": self.artifacts}

    def summary_lines(self):
        lines = []
        for c in self.checks:
            status = "PASS" if c["passed"] else "FAIL"
            lines.append(f"[{status}] {self.experiment}: {c['name']} = "
                         f"{c['value']:.6g} (bound {c['bound']:.6g}, "
                         f"anchor: {c['anchor']})")
        return lines


# ---------------------------------------------------------------------------
# experiments


def _exp_lp_check(cfg, rng, report):
    n, d = cfg["grid"]["N"], cfg["grid"]["d"]
    defect_rows = []
    worst_defect = 0.0
    worst_ortho = 0.0
    pair = dyadic.build_cutoffs()
    for M in cfg["M_list"]:
        grid = make_grid(d, n, float(M))
        j_min, j_max = dyadic.resolvable_range(grid)
        rho = grid.xi_norm().ravel()
        defect = pair.partition_defect(rho[rho > 0], j_min - 2, j_max + 2)
        defect_rows.append((M, j_min, j_max, defect))
        worst_defect = max(worst_defect, defect)
        for _ in range(cfg["n_fields"]):
            u = random_field(grid, rng, amplitude=1.0)
            for j in range(j_min, j_max + 1):
                bj = dyadic.dyadic_block(u, j)
                for k in range(j + 2, j_max + 1):
                    worst_ortho = max(
                        worst_ortho, dyadic.dyadic_block(bj, k).l2())
    report.check("partition_defect", worst_defect <= cfg["defect_tol"],
                 worst_defect, cfg["defect_tol"], "partition-of-unity")
    report.check("quasi_orthogonality", worst_ortho <= cfg["ortho_tol"],
                 worst_ortho, cfg["ortho_tol"], "partition-of-unity")
    report.tables["partition"] = (["M", "j_min", "j_max", "defect"], defect_rows)


def _exp_para_check(cfg, rng, report):
    rows = []
    worst = 0.0
    for d in cfg["dims"]:
        grid = make_grid(d, cfg["grid"]["N"], cfg["grid"]["M"])
        for i in range(cfg["n_pairs"]):
            u = random_field(grid, rng, amplitude=rng.uniform(0.5, 2.0))
            v = random_field(grid, rng, amplitude=rng.uniform(0.5, 2.0))
            triple = bony_decompose(u, v)
            resid = (triple.total() - dealias_product(u, v)).l2()
            rel = resid / (u.l2() * v.l2())
            rows.append((d, i, rel))
            worst = max(worst, rel)
    report.check("bony_identity", worst <= cfg["tol"], worst, cfg["tol"],
                 "bony-identity")
    report.tables["bony"] = (["d", "pair", "relative_residual"], rows)


def _exp_linear_heat(cfg, rng, report):
    grid = make_grid(cfg["grid"]["d"], cfg["grid"]["N"], cfg["grid"]["M"])
    u0 = _make_field(grid, cfg["data"], rng)
    t_grid = np.linspace(0.0, cfg["time"]["T"], cfg["time"]["n_t"])
    spec = dyadic.NormSpec(s=cfg["norm_s"], p=cfg["norm_p"], r=1)
    series, rep = linearized.heat_solve(u0, None, t_grid, kappa=cfg["kappa"],
                                        norm_spec=spec)
    j_min, j_max = dyadic.resolvable_range(grid)
    worst = 0.0
    t1 = float(t_grid[-1])
    for j in range(j_min, j_max + 1):
        b0 = dyadic.dyadic_block(u0, j)
        bt = dyadic.dyadic_block(series[-1], j)
        if b0.l2() == 0.0:
            continue
        bound = np.exp(-(9.0 / 16.0) * 4.0 ** j * cfg["kappa"] * t1) * b0.l2()
        worst = max(worst, bt.l2() / bound)
    report.check("block_decay_p2", worst <= 1.0 + 1e-10, worst, 1.0,
                 "heat-block-decay")
    report.check("maximal_regularity", rep["ratio"] <= cfg["mr_bound"],
                 rep["ratio"], cfg["mr_bound"], "heat-maximal-regularity")
    report.measured["mr_ratio"] = rep["ratio"]
    report.tables["heat"] = (["t", "l2"], [(t, s.l2()) for t, s in zip(t_grid, series)])


def _exp_linear_transport(cfg, rng, report):
    grid = make_grid(cfg["grid"]["d"], cfg["grid"]["N"], cfg["grid"]["M"])
    a0 = _make_field(grid, cfg["data"], rng)
    v = _make_field(grid, cfg["velocity"], rng, ncomp=grid.d)
    t_grid = np.linspace(0.0, cfg["time"]["T"], cfg["time"]["n_t"])
    v_series = [v] * len(t_grid)
    spec = dyadic.NormSpec(s=cfg["norm_s"], p=2.0, r=1)
    series, rep = linearized.transport_solve(v_series, a0, None, cfg["lam"],
                                             t_grid, err_tol=cfg["err_tol"],
                                             report_spec=spec)
    report.check("growth_exponent", rep["measured_exponent"] <= cfg["c_bound"],
                 rep["measured_exponent"], cfg["c_bound"], "transport-gronwall")
    report.measured["growth_ratio"] = rep["growth_ratio"]
    report.measured["V_T"] = rep["V_T"]
    report.measured["substeps"] = rep["substeps"]
    report.tables["transport"] = (
        ["t", "besov_a"],
        [(t, dyadic.besov_norm(a, spec)) for t, a in zip(t_grid, series)])


def _exp_linear_lame(cfg, rng, report):
    grid = make_grid(cfg["grid"]["d"], cfg["grid"]["N"], cfg["grid"]["M"])
    u0 = _make_field(grid, cfg["data"], rng, ncomp=grid.d)
    rough = cfg["coeff_roughness"]
    one = SpectralField.from_samples(grid, np.ones(grid.shape))
    bump = random_field(grid, rng, amplitude=rough, band=3)
    coeffs = {
        "a": one + bump, "b": one + bump,
        "mu": (one + bump) * cfg["params"]["mu"],
        "lam": one * cfg["params"]["lam"],
    }
    t_grid = np.linspace(0.0, cfg["time"]["T"], cfg["time"]["n_t"])
    series, rep = linearized.lame_solve(u0, None, t_grid, coeffs=coeffs,
                                        report_m=0)
    growth = series[-1].l2() / max(series[0].l2(), 1e-300)
    report.check("no_growth", growth <= cfg["growth_bound"], growth,
                 cfg["growth_bound"], "lame-rough-smallness")
    if rep is not None:
        report.measured["rough_diagnostics"] = {
            k: rep[k] for k in ("min_smoothed_shear", "min_smoothed_bulk",
                                "positivity_ok", "coeff_gradient_high",
                                "smallness_ok")}
    report.tables["lame"] = (["t", "l2"], [(t, s.l2()) for t, s in zip(t_grid, series)])


def _exp_linear_modes(cfg, rng, report):
    from scipy.linalg import expm
    rho_grid = np.geomspace(cfg["rho_min"], cfg["rho_max"], cfg["n_rho"])
    rho_grid = rho_grid[np.abs(rho_grid - 2.0) > 1e-3]
    worst_eig = 0.0
    worst_prop = 0.0
    rows = []
    for rho in rho_grid:
        spec = linearized.mode_spectrum(rho)
        M = linearized.mode_matrix(rho)
        lam_num = np.linalg.eigvals(M)
        lam_cf = sorted([spec.lam_plus, spec.lam_minus], key=lambda z: (z.real, z.imag))
        lam_nm = sorted(lam_num, key=lambda z: (z.real, z.imag))
        worst_eig = max(worst_eig, max(abs(a - b) for a, b in zip(lam_cf, lam_nm)))
        for t in (0.1, 1.0):
            E = np.array(linearized.mode_semigroup(rho, t)).reshape(2, 2)
            ref = expm(M * t)
            worst_prop = max(worst_prop,
                             np.max(np.abs(E - ref)) / max(1.0, np.max(np.abs(ref))))
        rows.append((rho, spec.lam_plus.real, spec.lam_minus.real, spec.regime))
    # continuity across the defective point: both one-sided propagators and
    # the point itself must sit on the expm curve to 1e-9 (the curve itself
    # moves at O(h) in rho, so agreement with the oracle is the meaningful
    # statement), with the symmetric second difference recorded as the
    # branch-smoothness measure.
    cont = 0.0
    for t in (0.1, 1.0, 5.0):
        vals = {}
        for rho in (2.0 - 1e-4, 2.0, 2.0 + 1e-4):
            E = np.array(linearized.mode_semigroup(rho, t)).reshape(2, 2)
            ref = expm(linearized.mode_matrix(rho) * t)
            cont = max(cont, float(np.max(np.abs(E - ref))))
            vals[rho] = E
        curvature = vals[2.0 - 1e-4] - 2.0 * vals[2.0] + vals[2.0 + 1e-4]
        report.measured.setdefault("defective_second_difference", {})[
            f"t={t:g}"] = float(np.max(np.abs(curvature)))
    sub = rho_grid[rho_grid < 2.0]
    re_err = max(
        (abs(linearized.mode_spectrum(r).lam_plus.real + r * r / 2.0) for r in sub),
        default=0.0)
    report.check("eigenvalues_vs_numeric", worst_eig <= cfg["eig_tol"],
                 worst_eig, cfg["eig_tol"], "mode-eigenvalues")
    report.check("semigroup_vs_expm", worst_prop <= cfg["eig_tol"],
                 worst_prop, cfg["eig_tol"], "mode-eigenvalues")
    report.check("defective_continuity", cont <= cfg["continuity_tol"],
                 cont, cfg["continuity_tol"], "mode-eigenvalues")
    report.check("oscillatory_real_part", re_err <= 1e-12, re_err, 1e-12,
                 "mode-eigenvalues")
    report.tables["modes"] = (["rho", "re_lam_plus", "re_lam_minus", "regime"], rows)


def _exp_linear_decay_profile(cfg, rng, report):
    t_grid = np.geomspace(cfg["t_min"], cfg["t_max"], cfg["n_t"])
    s_list = [float(s) for s in cfg["s_list"]]
    prof = linearized.linear_decay_profile(cfg["grid"]["d"], s_list, t_grid)
    rows = [[t] + [prof["curves"][s][i] for s in s_list]
            for i, t in enumerate(t_grid)]
    report.tables["profile"] = (["t"] + [f"s{('%g' % s)}" for s in s_list], rows)
    window = (cfg["fit_lo"], cfg["fit_hi"])
    slopes = {}
    for s in s_list:
        slope, err = fit_decay_slope(t_grid, prof["curves"][s], window)
        slopes[f"s={s:g}"] = {"slope": slope, "stderr": err}
        expect = -(cfg["grid"]["d"] / 4.0 + s / 2.0)
        report.check(f"profile_slope_s{s:g}",
                     abs(slope - expect) <= cfg["slope_tol"],
                     slope, expect, "energy-decay-rate")
    report.measured["slopes"] = slopes


def _monitor_table(mon):
    header = ["t", "besov_s0_low", "besov_s1_low", "D_high_alpha",
              "D_tnablau_high", "Xp"]
    return header, [tuple(r) for r in mon.rows]


def _exp_cns_run(cfg, rng, report, out_dir=None):
    grid = make_grid(cfg["grid"]["d"], cfg["grid"]["N"], cfg["grid"]["M"])
    params = _make_params(cfg["params"])
    a0 = _make_field(grid, cfg["data_a"], rng)
    u0 = _make_field(grid, cfg["data_u"], rng, ncomp=grid.d)
    state = cns.CnsState(a0, u0)
    mon = cns.Monitors(grid, params=params, p=cfg["monitor_p"], k0=cfg["k0"])
    out = cns.cns_run(state, params, T=cfg["time"]["T"],
                      out_dt=cfg["time"]["out_dt"],
                      h=cfg["time"]["h"] if cfg["time"]["h"] > 0 else None,
                      monitors=mon)
    rep = mon.report()
    report.check("mass_drift", rep["mass_drift_max"] <= cfg["mass_tol"],
                 rep["mass_drift_max"], cfg["mass_tol"], "global-bound")
    report.check("x_ratio", rep["X_ratio_max"] <= cfg["x_ratio_bound"],
                 rep["X_ratio_max"], cfg["x_ratio_bound"], "global-bound")
    report.check("min_density", rep["min_density"] >= cfg["density_floor"],
                 rep["min_density"], cfg["density_floor"], "density-floor")
    resid = out["state"].a.imag_residue() + out["state"].u.imag_residue()
    amp = max(out["state"].pair_l2(), 1e-300)
    report.check("reality", resid <= 1e-9 * amp, resid, 1e-9 * amp,
                 "global-bound")
    report.measured["early_stop"] = out["early_stop"]
    report.measured["X_final"] = rep["X_final"]
    report.tables["monitors"] = _monitor_table(mon)
    if out_dir is not None:
        prefix = os.path.join(out_dir, "final_state")
        save_state_snapshot(prefix, out["state"], params=params)
        report.artifacts.extend([prefix + ".bin", prefix + ".json"])


def _exp_local_scheme(cfg, rng, report):
    grid = make_grid(cfg["grid"]["d"], cfg["grid"]["N"], cfg["grid"]["M"])
    params = _make_params(cfg["params"])
    a0 = _make_field(grid, cfg["data_a"], rng)
    u0 = _make_field(grid, cfg["data_u"], rng, ncomp=grid.d)
    a_s, u_s, t_grid, rep = cns.local_iteration_scheme(
        a0, u0, params, T=cfg["time"]["T"], n_max=cfg["n_max"],
        p=cfg["scheme_p"], n_t=cfg["time"]["n_t"])
    report.check("asymptotic_ratio",
                 rep["asymptotic_ratio"] <= cfg["ratio_bound"],
                 rep["asymptotic_ratio"], cfg["ratio_bound"],
                 "iteration-contraction")
    rows = [(n, q, r) for n, (q, r) in
            enumerate(zip(rep["Q"], [np.nan] + rep["ratios"]))]
    report.tables["iteration"] = (["n", "increment", "ratio"], rows)
    if cfg["cross_check"]:
        state0 = cns.CnsState(a0, u0)
        out = cns.cns_run(state0, params, T=cfg["time"]["T"],
                          out_dt=cfg["time"]["T"],
                          h=cfg["time"]["T"] / (cfg["time"]["n_t"] * 4))
        ref = out["state"]
        num = (ref.a - a_s[-1]).l2() + (ref.u - u_s[-1]).l2()
        den = max(ref.pair_l2(), 1e-300)
        report.check("cross_solver_agreement", num / den <= cfg["cross_tol"],
                     num / den, cfg["cross_tol"], "iteration-contraction")


def _exp_lagrangian_check(cfg, rng, report):
    grid = make_grid(cfg["grid"]["d"], cfg["grid"]["N"], cfg["grid"]["M"])
    params = _make_params(cfg["params"])
    t_grid = np.linspace(0.0, cfg["time"]["T"], cfg["time"]["n_t"])
    v = _make_field(grid, cfg["velocity"], rng, ncomp=grid.d)
    v_series = [v * np.cos(0.3 * t) for t in t_grid]
    flow = flowmaps.flow_map(v_series, t_grid)
    sl = flow.final()
    piola = flowmaps.piola_residual(sl)
    f = _make_field(grid, cfg["data_a"], rng)
    H = _make_field(grid, cfg["velocity"], rng, ncomp=grid.d)
    divres = flowmaps.pullback_divergence_residual(H, sl)
    fl = flowmaps.change_coords(f, sl, "to_lagrangian")
    fb = flowmaps.change_coords(fl, sl, "to_eulerian")
    rt = (fb - f).l2() / max(f.l2(), 1e-300)
    report.check("piola_residual", piola <= cfg["piola_tol"], piola,
                 cfg["piola_tol"], "piola-identity")
    report.check("divergence_identity", divres <= cfg["piola_tol"], divres,
                 cfg["piola_tol"], "piola-identity")
    report.check("round_trip", rt <= cfg["roundtrip_tol"], rt,
                 cfg["roundtrip_tol"], "flow-roundtrip")
    rho0 = SpectralField.from_samples(
        grid, 1.0 + _make_field(grid, cfg["data_a"], rng).samples())
    u0 = _make_field(grid, cfg["data_u"], rng, ncomp=grid.d)
    lag, rep = flowmaps.lagrangian_fixed_point_solve(
        rho0, u0, params, T=cfg["time"]["T"], n_t=cfg["time"]["n_t"])
    report.check("fixed_point_mass", rep["mass_residual"] <= cfg["mass_tol"],
                 rep["mass_residual"], cfg["mass_tol"], "lagrangian-contraction")
    converged = rep["increments"][-1] <= 1e-8 * 10
    report.check("fixed_point_converged", converged, rep["increments"][-1],
                 1e-7, "lagrangian-contraction")
    bounds = flowmaps.flow_bound_ratios(lag.flow.final(), lag.u_series,
                                        lag.t_grid)
    report.measured["flow_bound_ratios"] = bounds["ratios"]
    report.measured["fixed_point"] = {"iterations": rep["iterations"],
                                      "increments": rep["increments"],
                                      "gate_integral": rep["gate_integral"]}
    rows = [(k, v) for k, v in sorted(bounds["ratios"].items())]
    report.tables["flow_bounds"] = (["quantity", "ratio"], rows)


def _exp_low_mach(cfg, rng, report):
    params = _make_params(cfg["params"])
    out = cns.low_mach_experiment(
        d=cfg["grid"]["d"], N=cfg["grid"]["N"], M=cfg["grid"]["M"],
        eps_list=tuple(float(e) for e in cfg["eps_list"]),
        T=cfg["time"]["T"], out_dt=cfg["time"]["out_dt"], params=params,
        p_high=cfg["p_high"], j0=cfg["j0"], eta=cfg["eta"],
        seed=cfg["seed"], well_prepared=cfg["well_prepared"])
    rows = [(r["eps"], r["sup_Qu_L2"], r["err_Pu_vs_v_LinfL2"], r["C0_eps_nu"])
            for r in out["rows"]]
    report.tables["lowmach"] = (
        ["eps", "sup_Qu_L2", "err_Pu_vs_v_LinfL2", "C0_eps_nu"], rows)
    qu = [r["sup_Qu_L2"] for r in out["rows"]]
    er = [r["err_Pu_vs_v_LinfL2"] for r in out["rows"]]
    dec_q = all(b < a for a, b in zip(qu, qu[1:]))
    dec_e = all(b < a for a, b in zip(er, er[1:]))
    report.check("sup_Qu_strictly_decreasing", dec_q, qu[-1], qu[0],
                 "lowmach-convergence")
    report.check("err_Pu_strictly_decreasing", dec_e, er[-1], er[0],
                 "lowmach-convergence")
    if "packet_norm_exponent" in out:
        meas = out["packet_norm_exponent"]
        expect = out["packet_norm_exponent_expected"]
        report.check("data_norm_trend",
                     abs(meas - expect) <= cfg["trend_tol"] * abs(expect),
                     meas, expect, "lowmach-convergence")
        report.measured["packet_norm_exponent"] = meas
    report.measured["gates"] = [
        {"eps": r["eps"], "C0": r["C0_eps_nu"], "k0_eff": r["k0_eff"]}
        for r in out["rows"]]


def _exp_decay(cfg, rng, report):
    grid = make_grid(cfg["grid"]["d"], cfg["grid"]["N"], cfg["grid"]["M"])
    params = _make_params(cfg["params"])
    a0 = _make_field(grid, cfg["data_a"], rng)
    u0 = _make_field(grid, cfg["data_u"], rng, ncomp=grid.d)
    target = cfg["x_target"]
    mon0 = cns.Monitors(grid, params=params, p=2.0, k0=cfg["k0"])
    mon0.update(cns.CnsState(a0, u0))
    x0 = mon0.series["Xp"][0]
    if target > 0 and x0 > 0:
        a0 = a0 * (target / x0)
        u0 = u0 * (target / x0)
    state = cns.CnsState(a0, u0)
    out = cns.decay_run(state, params, T=cfg["time"]["T"],
                        out_dt=cfg["time"]["out_dt"],
                        h=cfg["time"]["h"] if cfg["time"]["h"] > 0 else None,
                        s_list=(0, 1), k0=cfg["k0"])
    mon = out["monitors"]
    rep = mon.report()
    slopes = out["slopes"]
    report.measured["slopes"] = {
        str(k): {"slope": v[0], "stderr": v[1]} for k, v in slopes.items()}
    report.measured["window"] = list(out["window"])
    report.measured["transition"] = out["transition"]
    lo, hi = cfg["l2_slope_lo"], cfg["l2_slope_hi"]
    l2_slope = slopes["l2"][0]
    report.check("l2_slope_in_window", lo <= l2_slope <= hi,
                 l2_slope, lo, "nonlinear-decay")
    rows = np.asarray(mon.rows, dtype=np.float64)
    tcol, tn = rows[:, 0], rows[:, 4]
    after = tcol >= cfg["monotone_after"]
    diffs = np.diff(tn[after])
    worst_rise = float(np.max(diffs)) if diffs.size else 0.0
    report.check("tnablau_high_nonincreasing", worst_rise <= 1e-12,
                 worst_rise, 0.0, "nonlinear-decay")
    report.check("x_ratio", rep["X_ratio_max"] <= cfg["x_ratio_bound"],
                 rep["X_ratio_max"], cfg["x_ratio_bound"], "global-bound")
    report.check("mass_drift", rep["mass_drift_max"] <= cfg["mass_tol"],
                 rep["mass_drift_max"], cfg["mass_tol"], "global-bound")
    report.check("min_density", rep["min_density"] >= cfg["density_floor"],
                 rep["min_density"], cfg["density_floor"], "density-floor")
    report.tables["monitors"] = _monitor_table(mon)


# ---------------------------------------------------------------------------
# registry: experiment id -> (schema, runner)


_TIME_SCHEMA = {"T": (float, 1.0), "out_dt": (float, 0.1),
                "h": (float, 0.0), "n_t": (int, 17)}

EXPERIMENTS = {
    "lp-check": (_base_schema(
        grid={"d": (int, 2), "N": (int, 64)}, M_list=(list, [1.0, 8.0]),
        n_fields=(int, 5), defect_tol=(float, 1e-10), ortho_tol=(float, 1e-12)),
        _exp_lp_check),
    "para-check": (_base_schema(
        grid=_GRID_SCHEMA, dims=(list, [1, 2]), n_pairs=(int, 10),
        tol=(float, 1e-10)), _exp_para_check),
    "linear-heat": (_base_schema(
        grid=_GRID_SCHEMA, data=_DATA_SCHEMA, time=_TIME_SCHEMA,
        kappa=(float, 1.0), norm_s=(float, 0.5), norm_p=(float, 2.0),
        mr_bound=(float, 10.0)), _exp_linear_heat),
    "linear-transport": (_base_schema(
        grid=_GRID_SCHEMA, data=_DATA_SCHEMA, velocity=_DATA_SCHEMA,
        time=_TIME_SCHEMA, lam=(float, 0.0), err_tol=(float, 1e-6),
        norm_s=(float, 0.0), c_bound=(float, 2.0)), _exp_linear_transport),
    "linear-lame": (_base_schema(
        grid=_GRID_SCHEMA, data=_DATA_SCHEMA, params=_PARAMS_SCHEMA,
        time=_TIME_SCHEMA, coeff_roughness=(float, 0.1),
        growth_bound=(float, 1.05)), _exp_linear_lame),
    "linear-modes": (_base_schema(
        rho_min=(float, 1e-3), rho_max=(float, 50.0), n_rho=(int, 200),
        eig_tol=(float, 1e-11), continuity_tol=(float, 1e-9)),
        _exp_linear_modes),
    "linear-decay-profile": (_base_schema(
        grid={"d": (int, 2)}, s_list=(list, [0.0, 1.0]), t_min=(float, 1.0),
        t_max=(float, 1e3), n_t=(int, 40), fit_lo=(float, 10.0),
        fit_hi=(float, 1e3), slope_tol=(float, 0.05)),
        _exp_linear_decay_profile),
    "cns-run": (_base_schema(
        grid=_GRID_SCHEMA, params=_PARAMS_SCHEMA, data_a=_DATA_SCHEMA,
        data_u=_DATA_SCHEMA, time=_TIME_SCHEMA, monitor_p=(float, 2.0),
        k0=(int, 0), mass_tol=(float, 1e-10), x_ratio_bound=(float, 3.0),
        density_floor=(float, 0.9)), _exp_cns_run),
    "local-scheme": (_base_schema(
        grid={"d": (int, 3), "N": (int, 24), "M": (float, 1.0)},
        params=_PARAMS_SCHEMA, data_a=_DATA_SCHEMA, data_u=_DATA_SCHEMA,
        time={"T": (float, 0.25), "n_t": (int, 17)}, n_max=(int, 8),
        scheme_p=(float, 2.0), ratio_bound=(float, 0.725),
        cross_check=(bool, False), cross_tol=(float, 1e-4)),
        _exp_local_scheme),
    "lagrangian-check": (_base_schema(
        grid={"d": (int, 2), "N": (int, 24), "M": (float, 1.0)},
        params=_PARAMS_SCHEMA, data_a=_DATA_SCHEMA, data_u=_DATA_SCHEMA,
        velocity=_DATA_SCHEMA, time={"T": (float, 0.2), "n_t": (int, 9)},
        piola_tol=(float, 1e-6), roundtrip_tol=(float, 1e-4),
        mass_tol=(float, 1e-5)), _exp_lagrangian_check),
    "low-mach": (_base_schema(
        grid={"d": (int, 2), "N": (int, 96), "M": (float, 1.0)},
        params=_PARAMS_SCHEMA, eps_list=(list, [0.2, 0.1, 0.05]),
        time={"T": (float, 2.0), "out_dt": (float, 0.05)},
        p_high=(float, 4.0), j0=(int, 0), eta=(float, 0.1),
        well_prepared=(bool, False), trend_tol=(float, 0.2)),
        _exp_low_mach),
    "decay": (_base_schema(
        grid={"d": (int, 2), "N": (int, 256), "M": (float, 16.0)},
        params=_PARAMS_SCHEMA, data_a=_DATA_SCHEMA, data_u=_DATA_SCHEMA,
        time={"T": (float, 200.0), "out_dt": (float, 0.5), "h": (float, 0.0)},
        k0=(int, 0), x_target=(float, 1e-2), l2_slope_lo=(float, -0.75),
        l2_slope_hi=(float, -0.30), monotone_after=(float, 5.0),
        x_ratio_bound=(float, 3.0), mass_tol=(float, 1e-10),
        density_floor=(float, 0.9)), _exp_decay),
}


def default_config(experiment):
    """The completed default config for an experiment (seed still required)."""
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    schema, _ = EXPERIMENTS[experiment]
    cfg = validate_config({"experiment": experiment, "seed": 0}, schema)
    del cfg["seed"]
    return cfg


def run_experiment(config, out_dir=None, svg=False, threads=None):
    """Validate, run, and persist one experiment; returns a RunReport.

    Deterministic given (config, seed, thread count); all artifacts are
    written via temp-file + rename so concurrent runs over distinct
    output directories never interleave.
    """
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    name = config.get("experiment")
    if not name:
        raise ConfigError("missing required config key 'experiment'")
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}")
    schema, runner = EXPERIMENTS[name]
    cfg = validate_config(config, schema)
    cfg["experiment"] = name
    if threads is not None:
        set_fft_workers(threads)
    rng = np.random.default_rng(cfg["seed"])
    report = RunReport(name, cfg)
    start = time.perf_counter()
    if runner is _exp_cns_run:
        runner(cfg, rng, report, out_dir=out_dir)
    else:
        runner(cfg, rng, report)
    report.wall_clock_s = time.perf_counter() - start
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for tname, (header, rows) in report.tables.items():
            path = os.path.join(out_dir, f"{tname}.csv")
            write_csv(path, header, rows)
            report.artifacts.append(path)
        if svg:
            for tname in report.tables:
                path = os.path.join(out_dir, f"{tname}.svg")
                _plot_table(path, tname, *report.tables[tname])
                report.artifacts.append(path)
        write_json(os.path.join(out_dir, "report.json"), report.to_dict())
        report.artifacts.append(os.path.join(out_dir, "report.json"))
    return report


def _plot_table(path, title, header, rows):
    """Post-hoc line plot of a table's numeric columns against its first."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    numeric = [r for r in rows
               if all(isinstance(x, (int, float, np.integer, np.floating))
                      for x in r)]
    if not numeric:
        return
    arr = np.asarray(numeric, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 4))
    x = arr[:, 0]
    positive = np.all(arr > 0)
    for col in range(1, arr.shape[1]):
        ax.plot(x, arr[:, col], label=header[col])
    if positive and x.size > 2:
        ax.set_xscale("log")
        ax.set_yscale("log")
    ax.set_xlabel(header[0])
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)

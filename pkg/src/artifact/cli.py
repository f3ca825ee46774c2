"""Batch front end: simulate, price, hedge, fund and classify from one flat TOML or JSON config.

Exit codes: 0 ok, 1 runtime or regime error, 2 validation error.
The `result` payload is a pure function of the config and seed; timing lives only in `manifest`.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import sys
import time
from pathlib import Path
from typing import Optional

import click
import numpy as np

from . import __version__
from . import paths as P
from .classify import NumericFamily, classify
from .deflator import price_increasing_profit, price_master, price_na1, price_strong_arbitrage
from .diffusions import PowerLawDiffusion
from .errors import ArtifactError, ParameterError
from .funding import SCHEMES, QProfile, localtime_shares, shares_with_arbitrager
from .hedging import (barrier_delta_strategy, bessel_na_strategy, gains, increasing_profit_strategy,
                      localtime_corrected_strategy, skew_corrected_strategy, skew_price, verify_superreplication,
                      wealth_process)
from .pricers import BarrierSpec, Payoff, bachelier_knockout, bessel_survival, bs_barrier_call, bs_call

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

CSV_VERSION = "v1"
NUM, INT, STR, BOOL, NUMLIST = "number", "integer", "string", "boolean", "number list"

COMMON = {"n_paths": INT, "seed": INT, "dt": NUM, "n_steps": INT, "maturity": NUM, "workers": INT}
MODEL_KEYS = {"model": STR}
PAYOFF_KEYS = {"payoff": STR, "strike": NUM}
SCHEMAS = {
    "simulate": {**COMMON, **MODEL_KEYS, "future_inf": BOOL},
    "price": {**COMMON, **MODEL_KEYS, **PAYOFF_KEYS, "method": STR, "bridge": BOOL, "eps": NUMLIST},
    "hedge": {**COMMON, **MODEL_KEYS, **PAYOFF_KEYS, "strategy": STR, "fortune_scale": NUM, "tolerance": NUM,
              "bandwidth": NUM, "csv_paths": INT},
    "fund": {**COMMON, **MODEL_KEYS, "n0": NUM, "q_lower": NUM, "q_upper": NUM, "scheme": STR},
    "classify": {"family": STR, "mu0": NUM, "mu_exponent": NUM, "sigma0": NUM, "sigma_exponent": NUM, "mu": NUM,
                 "sigma": NUM, "delta": NUM, "mode": STR, "C": NUM},
}
MODEL_PARAMS = {name: {f.name: NUM for f in dataclasses.fields(cls)} for name, cls in P.MODEL_KINDS.items()}
DEFAULTS = {"n_paths": 10_000, "seed": 0, "dt": 1e-3, "maturity": 1.0, "workers": 1}
METHODS = ("ip", "sa", "na1", "master", "closed_form")
STRATEGIES = ("barrier_delta", "localtime", "skew", "bessel_na", "increasing_profit")


class ValidationError(ArtifactError):
    """Config does not match the command schema."""


# ---------------------------------------------------------------- config handling


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    try:
        if p.suffix.lower() == ".json":
            cfg = json.loads(p.read_text())
        else:
            cfg = tomllib.loads(p.read_text())
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValidationError("config must be a flat table")
    return cfg


def _type_ok(value, kind) -> bool:
    if kind == NUM:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if kind == INT:
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == STR:
        return isinstance(value, str)
    if kind == BOOL:
        return isinstance(value, bool)
    return isinstance(value, list) and all(_type_ok(v, NUM) for v in value)


def validate(command: str, cfg: dict) -> dict:
    """Check keys and types; returns the config with defaults filled in."""
    schema = dict(SCHEMAS[command])
    if "model" in cfg:
        if cfg["model"] not in MODEL_PARAMS:
            raise ValidationError(f"unknown model {cfg['model']!r}; choose from {sorted(MODEL_PARAMS)}")
        schema.update(MODEL_PARAMS[cfg["model"]])
    unknown = sorted(set(cfg) - set(schema))
    if unknown:
        raise ValidationError(f"unknown keys for {command}: {unknown}")
    for key, value in cfg.items():
        if not _type_ok(value, schema[key]):
            raise ValidationError(f"{key} must be a {schema[key]}")
    out = {k: v for k, v in DEFAULTS.items() if k in schema}
    out.update(cfg)
    if command != "classify":
        if "model" not in out:
            raise ValidationError("model is required")
        missing = sorted(set(MODEL_PARAMS[out["model"]]) - set(out))
        if missing:
            raise ValidationError(f"missing parameters for {out['model']}: {missing}")
        if out["n_paths"] <= 0:
            raise ValidationError("n_paths must be positive")
        if out["workers"] < 1:
            raise ValidationError("workers must be >= 1")
        if out.get("n_steps") is not None and out["n_steps"] < 1:
            raise ValidationError("n_steps must be >= 1")
        if out["dt"] <= 0 or out["maturity"] <= 0:
            raise ValidationError("dt and maturity must be positive")
    return out


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)


def dump_config(cfg: dict, path: str) -> None:
    p = Path(path)
    if p.suffix.lower() == ".json":
        p.write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n")
    else:
        p.write_text("".join(f"{k} = {_toml_value(cfg[k])}\n" for k in sorted(cfg)))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# ---------------------------------------------------------------- shared builders


def build_model(cfg: dict):
    cls = P.MODEL_KINDS[cfg["model"]]
    return cls(**{f.name: float(cfg[f.name]) for f in dataclasses.fields(cls)})


def build_grid(cfg: dict) -> P.TimeGrid:
    T = float(cfg["maturity"])
    n = cfg.get("n_steps") or max(1, int(round(T / cfg["dt"])))
    return P.TimeGrid(0.0, T, int(n))


def build_payoff(cfg: dict) -> Payoff:
    kind = cfg.get("payoff", "call")
    T = float(cfg["maturity"])
    if kind == "call":
        return Payoff.call(cfg.get("strike", P.initial_value(build_model(cfg))), T)
    if kind == "put":
        return Payoff.put(cfg.get("strike", P.initial_value(build_model(cfg))), T)
    if kind == "digital":
        return Payoff.digital(cfg.get("strike"), T)
    raise ValidationError(f"payoff must be call, put or digital, got {kind!r}")


def oracle_price(model, g: Payoff) -> Optional[float]:
    """Closed-form reference price where the model reduces to a known formula."""
    T = g.maturity
    if isinstance(model, P.ReflectedGBM) and g.kind == "call" and g.scale == 1:
        return float(bs_barrier_call(T, model.s0, model.b, g.strike, model.sigma))
    if isinstance(model, P.ConstDriftGBM) and g.kind == "call" and g.scale == 1:
        return float(bs_call(T, model.s0, g.strike, model.sigma))
    if isinstance(model, P.LocalTimeAlpha):
        return float(bachelier_knockout(g, T, model.s0, BarrierSpec(model.s0 - model.beta0_abs, "lower")))
    if isinstance(model, P.SkewBM):
        return float(skew_price(g, T, model.s0))
    if isinstance(model, P.WilliamsBessel):
        return float(bachelier_knockout(g, T, model.x0, BarrierSpec(model.j, "lower")))
    if isinstance(model, P.BesselIndex) and model.nu == -0.5:
        return float(bachelier_knockout(g, T, model.x0, BarrierSpec(0.0, "lower")))
    if isinstance(model, P.Bessel3):
        return float(bachelier_knockout(g, T, model.x0, BarrierSpec(0.0, "lower")))
    if isinstance(model, P.SqrtDrift):
        return float(bachelier_knockout(g, T, model.s0))
    if isinstance(model, (P.DoublyReflectedBM,)):
        return None
    return None


def _csv_text(header: list[str], rows, kind: str) -> str:
    buf = io.StringIO()
    buf.write(f"# artifact-csv {CSV_VERSION} {kind}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


def _estimate_fields(est, oracle):
    out = {"mc_price": est.price, "std_error": est.std_error, "n_paths": est.n_paths, "oracle_price": oracle}
    out["z_score"] = None if oracle is None else est.z_score(oracle)
    return out


# ---------------------------------------------------------------- commands


def cmd_simulate(cfg: dict):
    model, grid = build_model(cfg), build_grid(cfg)
    batch = P.simulate_batch(model, grid, cfg["seed"], np.arange(cfg["n_paths"]))
    if cfg.get("future_inf"):
        batch = P.future_infimum(batch)
    levels = sorted(batch.local_times)
    header = ["path", "t", "S", "kappa", "kappa_var"] + [f"L_{lv:g}" for lv in levels]
    if batch.future_inf is not None:
        header.append("J")
    t = grid.times

    def rows():
        for i in range(batch.n_paths):
            for k in range(grid.n_steps + 1):
                r = [int(batch.path_indices[i]), t[k], batch.values[i, k], batch.kappa[i, k], batch.kappa_var[i, k]]
                r += [batch.local_times[lv][i, k] for lv in levels]
                if batch.future_inf is not None:
                    r.append(batch.future_inf[i, k])
                yield r

    term = batch.values[:, -1]
    result = {"n_paths": batch.n_paths, "n_steps": grid.n_steps, "terminal_mean": float(term.mean()),
              "terminal_std": float(term.std()), "absorbed_fraction": float((batch.absorbed_at >= 0).mean()),
              "kappa_var_mean": float(batch.kappa_var[:, -1].mean())}
    return result, _csv_text(header, rows(), "paths")


def cmd_price(cfg: dict):
    model, grid, g = build_model(cfg), build_grid(cfg), build_payoff(cfg)
    method = cfg.get("method", "master")
    if method not in METHODS:
        raise ValidationError(f"method must be one of {METHODS}")
    oracle = oracle_price(model, g)
    n, seed, workers, bridge = cfg["n_paths"], cfg["seed"], cfg["workers"], cfg.get("bridge", True)
    if method == "closed_form":
        if oracle is None:
            raise ParameterError(f"no closed form for {type(model).__name__} with a {g.kind} payoff")
        return {"method": method, "oracle_price": oracle}, None
    if method == "sa":
        eps = cfg.get("eps", [1e-2, 1e-3, 1e-4])
        seq = price_strong_arbitrage(model, g, eps, n, n_steps=grid.n_steps, seed=seed, workers=workers)
        return {"method": method, "oracle_price": oracle,
                "estimates": [{"eps": e, **_estimate_fields(est, oracle)} for e, est in seq]}, None
    fn = {"ip": price_increasing_profit, "na1": price_na1, "master": price_master}[method]
    est = fn(model, g, n, grid, seed=seed, bridge=bridge, workers=workers)
    return {"method": method, **_estimate_fields(est, oracle)}, None


def _hedge_strategy(cfg, model, g):
    name = cfg.get("strategy")
    T = g.maturity
    bw = cfg.get("bandwidth")
    if name not in STRATEGIES:
        raise ValidationError(f"strategy must be one of {STRATEGIES}")
    if name == "barrier_delta":
        if not isinstance(model, P.ReflectedGBM) or g.kind != "call":
            raise ValidationError("barrier_delta needs a ReflectedGBM model and a call payoff")
        return barrier_delta_strategy(model.b, g.strike, T, model.sigma)
    if name == "localtime":
        if not isinstance(model, P.LocalTimeAlpha):
            raise ValidationError("localtime needs a LocalTimeAlpha model")
        return localtime_corrected_strategy(g, T, model.alpha, bw)
    if name == "skew":
        if not isinstance(model, P.SkewBM):
            raise ValidationError("skew needs a SkewBM model")
        return skew_corrected_strategy(g, T, model.alpha, bw)
    if name == "bessel_na":
        if not isinstance(model, P.Bessel3):
            raise ValidationError("bessel_na needs a Bessel3 model")
        return bessel_na_strategy(T, model.x0)
    return increasing_profit_strategy(model, bw if bw is not None else 1e-9 * max(P.initial_value(model), 1.0))


def cmd_hedge(cfg: dict):
    model, grid, g = build_model(cfg), build_grid(cfg), build_payoff(cfg)
    strat = _hedge_strategy(cfg, model, g)
    n, seed, workers = cfg["n_paths"], cfg["seed"], cfg["workers"]
    csv_paths = min(cfg.get("csv_paths", 1), n)
    sample = P.simulate_batch(model, grid, seed, np.arange(csv_paths))
    if cfg["strategy"] == "increasing_profit":
        x0 = 0.0
        batch = P.simulate_batch(model, grid, seed, np.arange(n))
        G = gains(batch, strat)
        steps = np.diff(G, axis=1)
        result = {"strategy": strat.name, "mean_final_gain": float(G[:, -1].mean()),
                  "prob_positive_gain": float((G[:, -1] > 0).mean()),
                  "min_step_gain": float(steps.min()), "paths_checked": n}
    else:
        zero = Payoff.digital(None, g.maturity).scaled(0.0)
        target = zero if cfg["strategy"] == "bessel_na" else g
        x0 = strat.initial_fortune(model) * cfg.get("fortune_scale", 1.0)
        rep = verify_superreplication(model, strat, x0, target, n, grid, seed, cfg.get("tolerance"), workers)
        result = {"strategy": strat.name, **rep.summary()}
        if cfg["strategy"] == "bessel_na":
            result["expected_terminal_wealth"] = 1.0 - float(bessel_survival(g.maturity, model.x0))
    h = strat.holdings(sample)
    v = wealth_process(sample, strat, x0)
    t = grid.times

    def rows():
        for i in range(csv_paths):
            for k in range(grid.n_steps + 1):
                yield [i, t[k], sample.values[i, k], h[i, k] if k < grid.n_steps else float("nan"), v[i, k]]

    return result, _csv_text(["path", "t", "S", "h", "V"], rows(), "wealth")


def cmd_fund(cfg: dict):
    model, grid = build_model(cfg), build_grid(cfg)
    scheme = cfg.get("scheme", "trapezoid")
    if scheme not in SCHEMES:
        raise ValidationError(f"scheme must be one of {SCHEMES}")
    n0 = cfg.get("n0", 1.0)
    q = QProfile(cfg.get("q_lower", 0.0), cfg.get("q_upper", 0.0))
    batch = P.simulate_batch(model, grid, cfg["seed"], np.arange(cfg["n_paths"]))
    track = shares_with_arbitrager(batch, n0, q, scheme)
    resid = np.abs(track.zero_sum_residual)
    result = {"scheme": scheme, "n0": n0, "q_lower": q.q_at_lower, "q_upper": q.q_at_upper,
              "max_zero_sum_residual": float(resid.max()),
              "max_capital_residual": float(np.abs(track.capital_residual).max()),
              "mean_final_shares": float(track.n[:, -1].mean()), "mean_final_F": float(track.F[:, -1].mean()),
              "mean_final_G": float(track.G[:, -1].mean()), "mean_final_H": float(track.H[:, -1].mean())}
    if isinstance(model, P.LocalTimeAlpha) and model.alpha > 1:
        c = model.alpha - 1.0
        closed = localtime_shares(n0, model.s0 - model.beta0_abs, c, batch.aux["beta_local_time"][:, -1],
                                  q.q_at_lower)
        result["max_rel_error_final_shares_vs_closed_form"] = float(np.max(np.abs(track.n[:, -1] / closed - 1)))
    first = shares_with_arbitrager(batch.path(0), n0, q, scheme)
    header = ["t", "S", "n", "F", "G", "H", "V_cap", "zero_sum_residual", "capital_residual"]
    return result, _csv_text(header, first.rows(), "funding")


def build_family(cfg: dict):
    fam = cfg.get("family", "power_law")
    try:
        if fam == "gbm":
            return PowerLawDiffusion.gbm(cfg["mu"], cfg["sigma"])
        if fam == "squared_bessel":
            return PowerLawDiffusion.squared_bessel(cfg["delta"])
        if fam == "brownian":
            return PowerLawDiffusion.brownian(cfg.get("sigma", 1.0))
        if fam == "power_law":
            return PowerLawDiffusion(cfg["mu0"], cfg["mu_exponent"], cfg["sigma0"], cfg["sigma_exponent"])
    except KeyError as exc:
        raise ValidationError(f"family {fam} needs key {exc.args[0]}") from None
    raise ValidationError("family must be gbm, squared_bessel, brownian or power_law")


def cmd_classify(cfg: dict):
    rep = classify(build_family(cfg), cfg.get("mode"), float(cfg.get("C", 0.0)))
    return rep.as_dict(), rep.table()


COMMANDS = {"simulate": cmd_simulate, "price": cmd_price, "hedge": cmd_hedge, "fund": cmd_fund,
            "classify": cmd_classify}


def run(command: str, cfg: dict) -> tuple[dict, Optional[str]]:
    """Validated run: (payload, side text). The payload's `result` is deterministic."""
    cfg = validate(command, cfg)
    start = time.perf_counter()
    result, side = COMMANDS[command](cfg)
    manifest = {"command": command, "config_hash": config_hash(cfg), "tool_version": __version__,
                "seed": cfg.get("seed"), "wall_time_s": round(time.perf_counter() - start, 6)}
    return {"config": cfg, "manifest": manifest, "result": _plain(result)}, side


# ---------------------------------------------------------------- click wiring


def _options(fn):
    for opt in reversed([
        click.option("--config", "config_path", type=click.Path(), help="TOML or JSON config file."),
        click.option("--seed", type=int), click.option("--paths", "n_paths", type=int),
        click.option("--dt", type=float), click.option("--workers", type=int),
        click.option("--out", type=click.Path(), help="Output file (JSON payload, or CSV with --format csv)."),
        click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json"),
        click.option("--dump-config", type=click.Path(), help="Write the effective config here."),
    ]):
        fn = opt(fn)
    return fn


def _execute(command, config_path, seed, n_paths, dt, workers, out, fmt, dump_config_path):
    try:
        cfg = load_config(config_path)
        for key, val in (("seed", seed), ("n_paths", n_paths), ("dt", dt), ("workers", workers)):
            if val is not None and key in SCHEMAS[command]:
                cfg[key] = val
        if dump_config_path:
            dump_config(validate(command, cfg), dump_config_path)
        payload, side = run(command, cfg)
    except (ValidationError, ParameterError) as exc:
        click.echo(f"validation error: {exc}", err=True)
        sys.exit(2)
    except ArtifactError as exc:
        click.echo(f"{type(exc).__name__}: {exc}", err=True)
        sys.exit(1)
    text = canonical_json(payload) + "\n"
    if fmt == "csv":
        if side is None or command == "classify":
            click.echo("validation error: this command has no CSV output", err=True)
            sys.exit(2)
        if out is None:
            click.echo(side, nl=False)
            click.echo(text, err=True, nl=False)
            return
        Path(out).write_text(side)
        click.echo(text, nl=False)
        return
    if out is not None:
        Path(out).write_text(text)
    else:
        click.echo(text, nl=False)
    if command == "classify" and side:
        click.echo(side, err=True)


@click.group()
@click.version_option(__version__)
def main():
    """Simulation, pricing and classification experiments for diffusion markets with singular terms."""


def _make(command, doc):
    @_options
    def cmd(config_path, seed, n_paths, dt, workers, out, fmt, dump_config):
        _execute(command, config_path, seed, n_paths, dt, workers, out, fmt, dump_config)
    cmd.__doc__ = doc
    main.command(command)(cmd)


_make("simulate", "Simulate paths; CSV columns path, t, S, kappa, kappa_var, L_level..., J.")
_make("price", "Monte Carlo price (ip, sa, na1, master) with the closed-form oracle when one exists.")
_make("hedge", "Run a hedging strategy pathwise and report its wealth statistics.")
_make("fund", "Share schedule, money raised and arbitrager gain along simulated paths.")
_make("classify", "No-arbitrage regime report for a power-law diffusion family.")


if __name__ == "__main__":
    main()

"""Batch front-end: config-driven simulate / estimate / mcmc / abc / em /
sobol runs plus canned figure reproductions.

Configs are JSON (a structured key/value text file); results are written
as results.json (estimates, covariances, ellipsoids, per-replicate
table), series.csv (paths or posterior draws) and ellipse.csv (2-D
confidence-ellipse polylines).  Outputs are byte-identical for identical
(config, seed) on one platform.
"""

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def ingest_csv(path, schema):
    """Parse one of the supported CSV schemas.

    'removals': single column t -> sorted removal times
    'series':   t,S,I[,R] -> times, values, mask (missing R masked)
    'generic':  t,X1[,...,Xp]
    Strict numeric parsing with the offending line number in errors, and a
    monotone-time check.
    """
    if schema not in ("removals", "series", "generic"):
        raise ConfigError(f"unknown CSV schema {schema!r}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ConfigError(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: malformed numeric field") from None
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    data = np.asarray(rows)
    times = data[:, 0]
    if np.any(np.diff(times) <= 0):
        bad = int(np.nonzero(np.diff(times) <= 0)[0][0]) + 3  # header + 1-based + next row
        raise ConfigError(f"{path}:{bad}: non-monotone time column")

    if schema == "removals":
        if len(header) != 1:
            raise ConfigError(f"{path}: removals schema expects a single 't' column")
        return {"kind": "removals", "times": times}

    values = data[:, 1:]
    if schema == "series":
        want = ["t", "S", "I", "R"]
        if [h.upper() for h in header[:3]] != ["T", "S", "I"]:
            raise ConfigError(f"{path}: series schema expects columns t,S,I[,R]")
        mask = np.array([True, True, len(header) > 3])
        if len(header) > 3:
            cols = values[:, :3]
        else:
            cols = np.column_stack([values, np.full(len(values), np.nan)])
        return {"kind": "series", "times": times, "values": cols, "mask": mask}
    return {"kind": "generic", "times": times, "values": values}


def _uniform_delta(times):
    d = np.diff(times)
    if len(d) == 0 or np.any(np.abs(d - d[0]) > 1e-9 * max(1.0, abs(d[0]))):
        raise ConfigError("time grid is not uniform")
    return float(d[0])


# ---------------------------------------------------------------------------
# Serialization helpers
# ---------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    return obj


def write_results(out_dir, payload):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "results.json")
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def write_csv(out_dir, name, header, rows):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def _ellipse_rows(est, level=0.95):
    from .results import confidence_ellipsoid

    try:
        ell = confidence_ellipsoid(est, level)
    except ValueError:
        return []
    rows = []
    names = est.names
    k = len(names)
    for i in range(k):
        for j in range(i + 1, k):
            for px, py in ell.boundary((i, j)):
                rows.append([f"{names[i]}-{names[j]}", px, py])
    return rows


# ---------------------------------------------------------------------------
# Mode runners
# ---------------------------------------------------------------------------


def _require(config, key, kind=float, positive=False):
    if key not in config:
        raise ConfigError(f"missing config field: {key}")
    try:
        val = kind(config[key])
    except (TypeError, ValueError):
        raise ConfigError(f"config field {key} has invalid type") from None
    if positive and val <= 0:
        raise ConfigError(f"config field {key} must be positive")
    return val


def _build(config):
    from .models import build_model

    mc = config.get("model", {})
    return build_model(mc.get("name", "sir"), mc.get("config"))


def _theta_values_from(config, model):
    th = config["theta_true"]
    if isinstance(th, dict):
        return np.array([float(th[name]) for name in model.param_names])
    return np.asarray(th, dtype=float)


def _one_replicate(args):
    config, rep = args
    from .complete_mle import r0_estimate, sir_mle_complete
    from .contrast import estimate_hf, estimate_lf
    from .partial_obs import PartialConfig, estimate_partial
    from .simulate import gillespie, sample_path

    model = _build(config)
    theta = _theta_values_from(config, model)
    N = int(_require(config, "N", int, positive=True))
    T = _require(config, "T", positive=True)
    delta = _require(config, "delta", positive=True)
    seed = int(config["seed"])
    x0 = np.asarray(config["x0"], dtype=float)
    counts0 = np.rint(x0 * N).astype(int)

    path = gillespie(model, theta, N, counts0, T, seed=(seed, rep))
    series = sample_path(path, delta)
    eps = 1.0 / np.sqrt(N)
    est_id = config.get("estimator", {}).get("id", "mle_complete")
    opts = dict(config.get("estimator", {}).get("options", {}))
    if est_id == "mle_complete":
        est = sir_mle_complete(path)
        r0 = r0_estimate(est) if not est.flags else (float("nan"), float("nan"))
        extra = {"r0": r0[0], "r0_var": r0[1]}
    elif est_id == "hf":
        est = estimate_hf(model, series, eps, init=theta, **opts)
        extra = {}
    elif est_id == "lf":
        est = estimate_lf(model, series, eps, init=theta, **opts)
        extra = {}
    elif est_id == "partial":
        obs_idx = int(opts.pop("observed_idx", 1))
        cfg = PartialConfig(observed_idx=obs_idx, estimate_xi=True)
        init_alpha = theta[list(model.alpha_idx)]
        est = estimate_partial(
            model,
            series.values[:, obs_idx],
            delta,
            eps,
            init_alpha=init_alpha,
            xi_init=float(x0[1 - obs_idx]),
            config=cfg,
            **opts,
        )
        extra = {}
    else:
        raise ConfigError(f"unknown estimator id {est_id!r}")
    row = {
        "replicate": rep,
        "final_size": path.final_size(),
        "estimate": dict(zip(est.names, est.values)),
        "flags": est.flags,
    }
    row.update(extra)
    cov = None if est.cov is None else est.cov
    return row, cov, est.names, series


def run(config, out_dir=None, threads=1):
    """Execute one configured experiment; returns the results payload."""
    config = dict(config)
    mode = config.get("mode")
    if mode not in ("simulate", "estimate", "mcmc", "abc", "em", "sobol"):
        raise ConfigError(f"unknown mode {mode!r}")
    if ("theta_true" in config) == ("data" in config):
        if mode in ("simulate", "estimate"):
            raise ConfigError("exactly one of theta_true / data must be given")
    seed = int(config.get("seed", 0))
    config.setdefault("seed", seed)
    out_dir = out_dir or config.get("out", "epiinfer_out")

    payload = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "mode": mode,
        "config": config,
    }
    series_rows = []
    ellipse_rows = []

    if mode == "simulate":
        from .simulate import gillespie, sample_path

        model = _build(config)
        theta = _theta_values_from(config, model)
        N = int(_require(config, "N", int, positive=True))
        T = _require(config, "T", positive=True)
        delta = _require(config, "delta", positive=True)
        reps = int(config.get("replicates", 1))
        x0 = np.asarray(config["x0"], dtype=float)
        counts0 = np.rint(x0 * N).astype(int)
        finals = []
        for rep in range(reps):
            path = gillespie(model, theta, N, counts0, T, seed=(seed, rep))
            ser = sample_path(path, delta)
            finals.append(path.final_size())
            for t, row in zip(ser.times, ser.values):
                series_rows.append([rep, t, *row])
        payload["results"] = {"final_sizes": finals}
        header = ["replicate", "t"] + [f"x{i+1}" for i in range(model.p)]

    elif mode == "estimate":
        if "data" in config:
            payload["results"] = _run_fit(config)
            header, series_rows = None, []
        else:
            reps = int(config.get("replicates", 1))
            jobs = [(config, rep) for rep in range(reps)]
            if threads > 1:
                with ProcessPoolExecutor(max_workers=threads) as pool:
                    results = list(pool.map(_one_replicate, jobs))
            else:
                results = [_one_replicate(job) for job in jobs]
            table = [r[0] for r in results]
            covs = [r[1] for r in results]
            names = results[0][2]
            est_matrix = np.array(
                [[row["estimate"][n] for n in names] for row in table], dtype=float
            )
            summary = {
                "names": list(names),
                "mean": est_matrix.mean(axis=0),
                "median": np.median(est_matrix, axis=0),
            }
            payload["results"] = {
                "replicates": table,
                "summary": summary,
                "covariance_last": covs[-1],
            }
            if covs[-1] is not None:
                from .models import Theta
                from .results import EstimateResult

                est = EstimateResult(
                    theta=Theta(est_matrix[-1], names), cov=np.asarray(covs[-1])
                )
                ellipse_rows = _ellipse_rows(est)
            header = None

    elif mode == "mcmc":
        from .bayes import mcmc_oneill_roberts

        tau = _removal_times(config)
        pri = config.get("priors", {"lambda": [0.1, 1.0], "gamma": [0.1, 0.1]})
        res = mcmc_oneill_roberts(
            tau,
            S0=int(_require(config, "S0", int, positive=True)),
            priors={k: tuple(v) for k, v in pri.items()},
            iters=int(config.get("iters", 10000)),
            seed=seed,
            rho=float(config.get("rho", 1.0)),
            T=config.get("T"),
        )
        burn = int(config.get("burn_in", len(res.lam) // 2))
        payload["results"] = {
            "posterior_mean": {
                "lambda": res.lam[burn:].mean(),
                "gamma": res.gam[burn:].mean(),
            },
            "acceptance": res.acceptance,
            "burn_in": burn,
        }
        for i in range(len(res.lam)):
            series_rows.append([i, res.lam[i], res.gam[i], res.sigma1[i], int(res.m[i])])
        header = ["iter", "lambda", "gamma", "sigma1", "m"]

    elif mode == "abc":
        from .bayes import abc_rejection, removal_distance, sir_seeded_removal_simulator

        tau = _removal_times(config)
        T = float(config.get("T", tau[-1]))
        pri = config.get("priors", {"lambda": [0.1, 1.0], "gamma": [0.1, 0.1]})
        a_l, b_l = pri["lambda"]
        a_g, b_g = pri["gamma"]

        def prior_sampler(rng):
            return np.array([rng.gamma(a_l, 1.0 / b_l), rng.gamma(a_g, 1.0 / b_g)])

        sim = sir_seeded_removal_simulator(
            S0=int(_require(config, "S0", int, positive=True)),
            I0=int(config.get("I0", 1)),
            T=T,
            rho=float(config.get("rho", 1.0)),
        )
        sample = abc_rejection(
            tau,
            prior_sampler,
            sim,
            n_sims=int(config.get("n_sims", 20000)),
            accept_frac=float(config.get("accept_frac", 0.01)),
            kernel=config.get("kernel", "epanechnikov"),
            distance=lambda s, so: removal_distance(s, so, T),
            seed=seed,
        )
        from .bayes import posterior_summaries

        summ = posterior_summaries(sample)
        payload["results"] = {
            "delta": sample.meta["delta"],
            "posterior": {"lambda": summ[0], "gamma": summ[1]},
        }
        for i in range(sample.n):
            series_rows.append([i, sample.draws[i, 0], sample.draws[i, 1], sample.weights[i]])
        header = ["draw", "lambda", "gamma", "weight"]

    elif mode == "em":
        from .em_jump import DiscreteChainObs, em_fit

        data = ingest_csv(config["data"]["path"], "generic")
        states = data["values"][:, 0].astype(int)
        delta = _uniform_delta(data["times"])
        Q0 = np.asarray(config.get("Q0", _default_q0(states)))
        res = em_fit(DiscreteChainObs(states, delta), Q0, max_iter=int(config.get("max_iter", 200)))
        payload["results"] = {
            "Q": res.Q,
            "loglik_trace": res.loglik_trace,
            "n_iter": res.n_iter,
            "converged": res.converged,
        }
        header = None

    elif mode == "sobol":
        payload["results"] = _run_sobol(config, seed)
        header = None

    write_results(out_dir, payload)
    if series_rows and header:
        write_csv(out_dir, "series.csv", header, series_rows)
    if ellipse_rows:
        write_csv(out_dir, "ellipse.csv", ["pair", "x", "y"], ellipse_rows)
    return payload


def _default_q0(states):
    S = int(states.max()) + 1
    Q0 = np.full((S, S), 0.5)
    np.fill_diagonal(Q0, 0.0)
    np.fill_diagonal(Q0, -Q0.sum(axis=1))
    return Q0


def _removal_times(config):
    if "data" in config:
        return ingest_csv(config["data"]["path"], "removals")["times"]
    return np.asarray(config["removals"], dtype=float)


def _run_fit(config):
    from .contrast import estimate_hf, estimate_lf
    from .partial_obs import PartialConfig, estimate_partial
    from .simulate import SampledSeries

    model = _build(config)
    data = ingest_csv(config["data"]["path"], config["data"].get("schema", "generic"))
    delta = _uniform_delta(data["times"])
    values = data["values"]
    N = int(_require(config, "N", int, positive=True))
    eps = 1.0 / np.sqrt(N)
    if values.max() > 1.5:  # raw counts: normalize
        values = values / N
    est_id = config.get("estimator", {}).get("id", "hf")
    opts = dict(config.get("estimator", {}).get("options", {}))
    init = np.asarray(config["init"], dtype=float)
    if est_id == "partial":
        obs_idx = int(opts.pop("observed_idx", 1))
        cfg = PartialConfig(observed_idx=obs_idx, estimate_xi=True)
        obs1 = values[:, 0] if values.ndim > 1 else values
        est = estimate_partial(
            model,
            obs1,
            delta,
            eps,
            init_alpha=init,
            xi_init=float(config.get("xi_init", 0.9)),
            config=cfg,
            **opts,
        )
    else:
        series = SampledSeries(delta=delta, values=values, scale={"N": N})
        fn = estimate_hf if est_id == "hf" else estimate_lf
        est = fn(model, series, eps, init=init, **opts)
    return {
        "estimate": dict(zip(est.names, est.values)),
        "cov": est.cov,
        "rate_tag": est.rate_tag,
        "flags": est.flags,
    }


def _run_sobol(config, seed):
    from scipy import stats

    from .simulate import sir_final_sizes
    from .sobol import SobolDesign, jansen_estimate, sobol_nw, sobol_wavelet
    from .rng import make_rng

    bench = config.get("benchmark", "sir")
    n = int(config.get("n", 10000))
    if bench == "additive":
        dists = [stats.uniform(0, 1), stats.uniform(0, 1)]

        def f(X, rng):
            return X[:, 0] + 2.0 * X[:, 1]

    elif bench == "sir":
        dists = [stats.uniform(1.0 / 15000, 2.0 / 15000), stats.uniform(1.0 / 15, 2.0 / 15)]
        S0 = int(config.get("S0", 1190))
        I0 = int(config.get("I0", 10))

        def f(X, rng):
            return sir_final_sizes(X[:, 0], X[:, 1], S0, I0, rng).astype(float)

    else:
        raise ConfigError(f"unknown sobol benchmark {bench!r}")
    design = SobolDesign(dists, n, f, seed=seed, vectorized=True)
    jans = jansen_estimate(design)
    rng = make_rng(seed, 3, 0)
    n_pairs = int(config.get("n_pairs", 3 * n))
    X = np.column_stack([d.rvs(size=n_pairs, random_state=rng) for d in dists])
    Y = f(X, make_rng(seed, 3, 1))
    nw = [sobol_nw(X[:, l], Y) for l in range(len(dists))]
    ww = [sobol_wavelet(X[:, l], Y) for l in range(len(dists))]
    return {
        "jansen_first": jans.first,
        "jansen_total": jans.total,
        "jansen_sd": jans.sd_first,
        "nw_first": nw,
        "wavelet_first": ww,
        "n_calls_jansen": jans.n_calls,
        "n_pairs": n_pairs,
    }


# ---------------------------------------------------------------------------
# Figure reproduction presets
# ---------------------------------------------------------------------------

_FIGURES = {
    "fig-nvar": {
        "mode": "simulate",
        "model": {"name": "sir"},
        "theta_true": {"lambda": 0.5, "gamma": 1.0 / 3.0},
        "x0": [0.99, 0.01],
        "N": 1000,
        "T": 40.0,
        "delta": 1.0,
        "replicates": 5,
    },
    "fig-sir-ce": {
        "mode": "estimate",
        "model": {"name": "sir"},
        "theta_true": {"lambda": 0.5, "gamma": 1.0 / 3.0},
        "x0": [0.99, 0.01],
        "N": 1000,
        "T": 40.0,
        "delta": 1.0,
        "replicates": 20,
        "estimator": {"id": "hf", "options": {"tol_ode": 1e-6, "nm_maxiter": 0}},
    },
    "fig-sirpart": {
        "mode": "estimate",
        "model": {"name": "sir"},
        "theta_true": {"lambda": 0.5, "gamma": 1.0 / 3.0},
        "x0": [0.97, 0.03],
        "N": 10000,
        "T": 40.0,
        "delta": 1.0,
        "replicates": 10,
        "estimator": {
            "id": "partial",
            "options": {"tol_ode": 1e-6, "nm_maxiter": 200, "compute_cov": False},
        },
    },
    "fig-3obs": {
        "mode": "abc",
        "removals": [0.0, 0.24128976, 1.03349307],
        "S0": 9,
        "T": 2.0,
        "n_sims": 20000,
        "accept_frac": 0.005,
    },
    "table-sobol-sir": {"mode": "sobol", "benchmark": "sir", "n": 2000, "n_pairs": 6000},
}


def reproduce(figure_id, out_dir=None, seed=0, threads=1):
    if figure_id not in _FIGURES:
        raise ConfigError(
            f"unknown figure id {figure_id!r}; known: {', '.join(sorted(_FIGURES))}"
        )
    config = dict(_FIGURES[figure_id])
    config["seed"] = seed
    return run(config, out_dir=out_dir or f"reproduce_{figure_id}", threads=threads)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def main(argv=None):
    parser = argparse.ArgumentParser(prog="epiinfer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "estimate", "mcmc", "abc", "em", "sobol"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--replicates", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
    p = sub.add_parser("reproduce")
    p.add_argument("figure_id")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--threads", type=int, default=None)

    args = parser.parse_args(argv)
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("EPIINFER_THREADS", "1"))

    try:
        if args.command == "reproduce":
            reproduce(args.figure_id, out_dir=args.out, seed=args.seed, threads=threads)
            return 0
        with open(args.config) as fh:
            config = json.load(fh)
        config["mode"] = args.command
        if args.seed is not None:
            config["seed"] = args.seed
        if args.replicates is not None:
            config["replicates"] = args.replicates
        run(config, out_dir=args.out or config.get("out", "epiinfer_out"), threads=threads)
        return 0
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        record = {"error": str(exc), "type": type(exc).__name__}
        sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Config-driven experiment implementations behind the CLI.

Every experiment takes a validated config dict and a master seed, derives
all randomness through `Rng(seed).spawn(...)` streams (one per independent
trial, so multi-seed experiments can fan out across workers and still
merge deterministically), and returns a JSON-serializable summary plus a
dict of CSV trace tables.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import datagen, encdec, fjlt, linalg, sketch
from .grad import TrainConfig
from .rng import Rng


class ConfigError(Exception):
    """Invalid or inconsistent experiment configuration."""


_SCHEMAS = {
    "jl_check": {
        "n": (int, 256),
        "eps": (float, 0.5),
        "ells": (list, [8, 16, 32, 64]),
        "trials": (int, 2000),
    },
    "approx_check": {
        "n1": (int, 128),
        "n2": (int, 128),
        "eps": (float, 0.5),
        "k_values": (list, [8, 16, 32, 64, 128]),
        "trials": (int, 1000),
        "w_rank": (int, 8),
        "exact_trials": (int, 50),
    },
    "autoencode": {
        "n": (int, 128),
        "d": (int, 128),
        "rank": (int, 32),
        "k_values": (list, [1, 2, 4, 8, 16, 24, 32, 40, 48]),
        "ell": (int, 0),  # 0 = auto: max(k, min(48, n))
        "learning_rate": (float, 0.05),
        "steps": (int, 1200),
    },
    "two_phase": {
        "n": (int, 64),
        "d": (int, 64),
        "rank": (int, 8),
        "k": (int, 4),
        "ell": (int, 16),
        "eps": (float, 0.5),
        "seeds": (int, 200),
        "learning_rate": (float, 0.05),
        "steps": (int, 1200),
        "phase2_steps": (int, 400),
    },
    "verify_critical": {
        "n": (int, 64),
        "d": (int, 64),
        "rank": (int, 8),
        "k": (int, 4),
        "ell": (int, 12),
        "seeds": (int, 20),
        "grad_tol_scale": (float, 1e-9),
        "learning_rate": (float, 0.05),
        "steps": (int, 1500),
        "polish_steps": (int, 60000),
    },
    "sketch_train": {
        "n": (int, 64),
        "d": (int, 48),
        "rank": (int, 8),
        "tail": (float, 0.3),
        "decay": (float, 0.7),
        "noise": (float, 0.01),
        "ell": (int, 10),
        "k": (int, 10),
        "n_train": (int, 60),
        "n_test": (int, 20),
        "learning_rate": (float, 0.05),
        "steps": (int, 200),
        "seeds": (int, 10),
    },
    "gen_data": {
        "kind": (str, "rank_r"),
        "n": (int, 64),
        "d": (int, 64),
        "rank": (int, 8),
        "noise": (float, 0.0),
        "tail": (float, 0.3),
        "decay": (float, 0.7),
        "count": (int, 1),
        "format": (str, "csv"),
        "prefix": (str, "data"),
    },
}


def validate_config(cfg: dict) -> dict:
    """Check the experiment discriminator and fill schema defaults."""
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    name = cfg.get("experiment")
    if name not in _SCHEMAS:
        raise ConfigError(
            f"unknown experiment {name!r}; expected one of {sorted(_SCHEMAS)}"
        )
    schema = _SCHEMAS[name]
    out = {"experiment": name, "seed": int(cfg.get("seed", 0))}
    for key, value in cfg.items():
        if key in ("experiment", "seed"):
            continue
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} for experiment {name}")
    for key, (typ, default) in schema.items():
        value = cfg.get(key, default)
        if typ is float and isinstance(value, int):
            value = float(value)
        if not isinstance(value, typ):
            raise ConfigError(f"key {key!r} must be {typ.__name__}")
        out[key] = value
    _cross_validate(out)
    return out


def _cross_validate(cfg: dict) -> None:
    """Inter-field consistency checks; violations are config errors."""
    name = cfg["experiment"]
    if name in ("two_phase", "verify_critical", "sketch_train"):
        if not 1 <= cfg["k"] <= cfg["ell"]:
            raise ConfigError(f"need 1 <= k <= ell, got k={cfg['k']}, "
                              f"ell={cfg['ell']}")
    if "rank" in cfg and "n" in cfg and "d" in cfg:
        if not 1 <= cfg["rank"] <= min(cfg["n"], cfg["d"]):
            raise ConfigError(f"rank={cfg['rank']} outside "
                              f"[1, {min(cfg['n'], cfg['d'])}]")
    if name == "jl_check":
        if cfg["trials"] < 100:
            raise ConfigError("trials must be >= 100")
        if any(not 1 <= e <= 1 << (cfg["n"] - 1).bit_length()
               for e in cfg["ells"]):
            raise ConfigError("every ell must lie in [1, next_pow2(n)]")
    if name == "gen_data" and cfg["format"] not in ("csv", "binary"):
        raise ConfigError(f"format must be csv or binary, got {cfg['format']!r}")


def _map_seeds(worker, count, threads):
    """Run worker(i) for i in range(count), merging in index order."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(worker, range(count)))
    return [worker(i) for i in range(count)]


# -- jl_check ------------------------------------------------------------


def run_jl_check(cfg: dict, threads: int = 1):
    master = Rng(cfg["seed"])

    def one(i):
        ell = int(cfg["ells"][i])
        rate = fjlt.estimate_failure_rate(
            cfg["n"], ell, cfg["eps"], cfg["trials"], master.spawn(i)
        )
        return {"ell": ell, "failure_rate": rate}

    rows = _map_seeds(one, len(cfg["ells"]), threads)
    rates = [r["failure_rate"] for r in rows]
    summary = {
        "experiment": "jl_check",
        "n": cfg["n"],
        "eps": cfg["eps"],
        "trials": cfg["trials"],
        "rows": rows,
        "monotone_nonincreasing": all(a >= b for a, b in zip(rates, rates[1:])),
        "strictly_decreasing": all(a > b for a, b in zip(rates, rates[1:])),
    }
    trace = [["ell", "failure_rate"]] + [
        [r["ell"], repr(r["failure_rate"])] for r in rows
    ]
    return summary, {"trace_failure_rates.csv": trace}


# -- approx_check --------------------------------------------------------


def run_approx_check(cfg: dict, threads: int = 1):
    master = Rng(cfg["seed"])
    n1, n2 = cfg["n1"], cfg["n2"]
    w = datagen.gaussian_rank_r(n2, n1, cfg["w_rank"], master.spawn(10_000))
    w = w / linalg.spectral_norm(w)

    def one(i):
        k = int(cfg["k_values"][i])
        rate = fjlt.approx_success_rate(
            w, cfg["eps"], k, k, cfg["trials"], master.spawn(i)
        )
        return {"k": k, "success_rate": rate}

    rows = _map_seeds(one, len(cfg["k_values"]), threads)
    rng = master.spawn(20_000)
    max_err_full = 0.0
    for _ in range(cfg["exact_trials"]):
        j1 = fjlt.sample_fjlt(n1, 1 << (n1 - 1).bit_length(), rng)
        j2 = fjlt.sample_fjlt(n2, 1 << (n2 - 1).bit_length(), rng)
        x = rng.unit_vector(n1)
        err = float(np.linalg.norm(fjlt.ApproxOperator(w, j1, j2).apply(x) - w @ x))
        max_err_full = max(max_err_full, err)
    rates = [r["success_rate"] for r in rows]
    summary = {
        "experiment": "approx_check",
        "n1": n1,
        "n2": n2,
        "eps": cfg["eps"],
        "w_rank": cfg["w_rank"],
        "trials": cfg["trials"],
        "rows": rows,
        "nondecreasing_in_k": all(a <= b for a, b in zip(rates, rates[1:])),
        "max_error_full_truncation": max_err_full,
    }
    trace = [["k", "success_rate"]] + [[r["k"], repr(r["success_rate"])] for r in rows]
    return summary, {"trace_success_rates.csv": trace}


# -- autoencode ----------------------------------------------------------


def _train_autoencoder(x, k, ell, lr, steps, rng, grad_tol):
    model = encdec.random_model(x.shape[0], k, ell, x.shape[0], rng)
    chain = model.chain()
    cfg = TrainConfig(optimizer="adam", learning_rate=lr, max_steps=steps,
                      grad_tol=grad_tol)
    trace = encdec.anneal_train(chain, x, x, cfg, lr_factors=(1.0, 0.2, 0.04))
    return model, trace


def run_autoencode(cfg: dict, threads: int = 1):
    master = Rng(cfg["seed"])
    x = datagen.gaussian_rank_r(cfg["n"], cfg["d"], cfg["rank"], master.spawn(0))
    tr = linalg.fro_norm_sq(x)
    s = linalg.svd(x).s
    grad_tol = 1e-7 * (1.0 + tr)

    def one(i):
        k = int(cfg["k_values"][i])
        ell = cfg["ell"] if cfg["ell"] > 0 else max(k, min(48, x.shape[0]))
        delta_k = float(np.sum(s[k:] ** 2))
        _, trace = _train_autoencoder(
            x, k, ell, cfg["learning_rate"], cfg["steps"], master.spawn(100 + i),
            grad_tol,
        )
        j = fjlt.sample_fjlt(x.shape[0], ell, master.spawn(500 + i))
        fjlt_pca = sketch.sketch_residual(sketch.ButterflySketch(j), x, k)
        return {
            "k": k,
            "ell": ell,
            "butterfly_loss": trace.final_loss,
            "pca_loss": delta_k,
            "fjlt_pca_loss": fjlt_pca,
            "steps_run": trace.steps[-1],
        }

    rows = _map_seeds(one, len(cfg["k_values"]), threads)
    summary = {
        "experiment": "autoencode",
        "n": cfg["n"],
        "d": cfg["d"],
        "rank": cfg["rank"],
        "trace_of_gram": tr,
        "rows": rows,
    }
    trace = [["k", "butterfly_loss", "pca_loss", "fjlt_pca_loss"]] + [
        [r["k"], repr(r["butterfly_loss"]), repr(r["pca_loss"]),
         repr(r["fjlt_pca_loss"])]
        for r in rows
    ]
    return summary, {"trace_ksweep.csv": trace}


# -- two_phase -----------------------------------------------------------


def run_two_phase(cfg: dict, threads: int = 1):
    master = Rng(cfg["seed"])

    def one(i):
        srng = master.spawn(i)
        x = datagen.gaussian_rank_r(cfg["n"], cfg["d"], cfg["rank"], srng.spawn(0))
        s = linalg.svd(x).s
        delta_k = float(np.sum(s[cfg["k"]:] ** 2))
        tc = TrainConfig(optimizer="adam", learning_rate=cfg["learning_rate"],
                         max_steps=cfg["steps"])
        p2 = tc.replace(max_steps=cfg["phase2_steps"],
                        learning_rate=cfg["learning_rate"] * 0.1)
        result = encdec.two_phase_train(
            x, x, cfg["k"], cfg["ell"], tc, srng.spawn(1),
            anneal=(1.0, 0.1, 0.01), phase2_cfg=p2,
        )
        return {
            "seed_index": i,
            "phase1_loss": result.phase1_loss,
            "phase2_loss": result.phase2_loss,
            "delta_k": delta_k,
            "within_budget": bool(
                result.phase1_loss <= (1.0 + cfg["eps"]) * delta_k
            ),
            "monotone": bool(result.phase2_loss <= result.phase1_loss + 1e-12),
        }

    rows = _map_seeds(one, cfg["seeds"], threads)
    frac = sum(r["within_budget"] for r in rows) / max(len(rows), 1)
    summary = {
        "experiment": "two_phase",
        "n": cfg["n"],
        "d": cfg["d"],
        "rank": cfg["rank"],
        "k": cfg["k"],
        "ell": cfg["ell"],
        "eps": cfg["eps"],
        "seeds": cfg["seeds"],
        "fraction_within_budget": frac,
        "all_monotone": all(r["monotone"] for r in rows),
        "rows": rows,
    }
    trace = [["seed_index", "phase1_loss", "phase2_loss", "delta_k"]] + [
        [r["seed_index"], repr(r["phase1_loss"]), repr(r["phase2_loss"]),
         repr(r["delta_k"])]
        for r in rows
    ]
    return summary, {"trace_two_phase.csv": trace}


# -- verify_critical -----------------------------------------------------


def run_verify_critical(cfg: dict, threads: int = 1):
    master = Rng(cfg["seed"])

    def one(i):
        srng = master.spawn(i)
        x = datagen.gaussian_rank_r(cfg["n"], cfg["d"], cfg["rank"], srng.spawn(0))
        tr = linalg.fro_norm_sq(x)
        tol = cfg["grad_tol_scale"] * (1.0 + tr)
        model = encdec.random_model(x.shape[0], cfg["k"], cfg["ell"],
                                    x.shape[0], srng.spawn(1))
        chain = model.chain()
        tc = TrainConfig(optimizer="adam", learning_rate=cfg["learning_rate"],
                         max_steps=cfg["steps"], grad_tol=tol,
                         freeze=frozenset({"butterfly"}))
        trace = encdec.anneal_train(chain, x, x, tc,
                                    lr_factors=(1.0, 0.1, 0.01, 0.001))
        if trace.final_grad_inf > tol:
            x_t = model.bfly.apply(x)
            curvature = linalg.spectral_norm(x_t @ x_t.T) * (
                1.0 + linalg.spectral_norm(model.decoder) ** 2
                + linalg.spectral_norm(model.mixer) ** 2
            )
            lr0 = 0.25 / max(curvature, 1e-12)
            polish = encdec.gd_polish(chain, x, x, frozenset({"butterfly"}),
                                      tol, lr0, cfg["polish_steps"])
            trace.extend(polish)
        row = {
            "seed_index": i,
            "grad_inf": trace.final_grad_inf,
            "trace_of_gram": tr,
            "converged": bool(trace.final_grad_inf <= tol),
        }
        if not row["converged"]:
            row["outcome"] = "non_converged"
            return row
        try:
            report = encdec.verify_critical_point(model, x, x, tol=tol)
        except encdec.DegenerateSpectrum as exc:
            row["outcome"] = "degenerate_spectrum"
            row["detail"] = str(exc)
            return row
        sigma_fro = float(np.sqrt(np.sum(report.eigenvalues**2)))
        loss_ok = report.loss_formula_error() <= 1e-4 * tr
        commutator_ok = report.commutator_residual <= 1e-6 * sigma_fro
        index_ok = report.eigen_indices == tuple(range(cfg["k"]))
        row.update({
            "outcome": "verified" if (loss_ok and commutator_ok and index_ok)
            else "formula_mismatch",
            "loss": report.loss,
            "predicted_loss": report.predicted_loss,
            "loss_formula_error": report.loss_formula_error(),
            "projection_residual": report.projection_residual,
            "commutator_residual": report.commutator_residual,
            "eigen_indices": list(report.eigen_indices),
            "is_local_min_candidate": report.is_local_min_candidate,
        })
        return row

    rows = _map_seeds(one, cfg["seeds"], threads)
    outcomes = [r["outcome"] for r in rows]
    summary = {
        "experiment": "verify_critical",
        "n": cfg["n"],
        "d": cfg["d"],
        "rank": cfg["rank"],
        "k": cfg["k"],
        "ell": cfg["ell"],
        "seeds": cfg["seeds"],
        "verified": outcomes.count("verified"),
        "non_converged": outcomes.count("non_converged"),
        "degenerate_spectrum": outcomes.count("degenerate_spectrum"),
        "formula_mismatch": outcomes.count("formula_mismatch"),
        "rows": rows,
    }
    trace = [["seed_index", "outcome", "grad_inf"]] + [
        [r["seed_index"], r["outcome"], repr(r["grad_inf"])] for r in rows
    ]
    return summary, {"trace_verify.csv": trace}


# -- sketch_train --------------------------------------------------------


def run_sketch_train(cfg: dict, threads: int = 1):
    master = Rng(cfg["seed"])
    ell, k = cfg["ell"], cfg["k"]

    def one(i):
        srng = master.spawn(i)
        mats = datagen.spectral_family(
            cfg["n"], cfg["d"], cfg["rank"], cfg["tail"], cfg["decay"],
            cfg["noise"], cfg["n_train"] + cfg["n_test"], srng.spawn(0),
        )
        mats = datagen.normalize_top_singular(mats)
        train_set = mats[: cfg["n_train"]]
        test_set = mats[cfg["n_train"]:]
        tc = TrainConfig(optimizer="adam", learning_rate=cfg["learning_rate"],
                         max_steps=cfg["steps"], keep_best=True)
        bfly_res = sketch.train_sketch(train_set, "butterfly", ell, k, tc,
                                       srng.spawn(1))
        sparse_res = sketch.train_sketch(train_set, "sparse", ell, k, tc,
                                         srng.spawn(2), nnz=1)
        dense_res = sketch.train_sketch(train_set, "sparse", ell, k, tc,
                                        srng.spawn(3), nnz=ell)
        count = sketch.sample_baseline("countsketch", ell, cfg["n"], srng.spawn(4))
        gauss = sketch.sample_baseline("gaussian", ell, cfg["n"], srng.spawn(5))
        errs = {
            "butterfly": sketch.err_metric(bfly_res.sketch, test_set, k),
            "sparse": sketch.err_metric(sparse_res.sketch, test_set, k),
            "dense": sketch.err_metric(dense_res.sketch, test_set, k),
            "countsketch": sketch.err_metric(count, test_set, k),
            "gaussian": sketch.err_metric(gauss, test_set, k),
        }
        return {
            "seed_index": i,
            "err": errs,
            "ordering_bfly_sparse_random": bool(
                errs["butterfly"] < errs["sparse"] < errs["countsketch"]
            ),
            "bfly_below_dense": bool(errs["butterfly"] < errs["dense"]),
        }

    rows = _map_seeds(one, cfg["seeds"], threads)
    summary = {
        "experiment": "sketch_train",
        "ell": ell,
        "k": k,
        "seeds": cfg["seeds"],
        "ordering_bfly_sparse_random_count": sum(
            r["ordering_bfly_sparse_random"] for r in rows
        ),
        "bfly_below_dense_count": sum(r["bfly_below_dense"] for r in rows),
        "rows": rows,
    }
    trace = [["seed_index", "butterfly", "sparse", "dense", "countsketch",
              "gaussian"]] + [
        [r["seed_index"]] + [repr(r["err"][m]) for m in
                             ("butterfly", "sparse", "dense", "countsketch",
                              "gaussian")]
        for r in rows
    ]
    return summary, {"trace_sketch_errs.csv": trace}


# -- gen_data ------------------------------------------------------------


def run_gen_data(cfg: dict, threads: int = 1, out_dir=None):
    import os

    master = Rng(cfg["seed"])
    ext = ".csv" if cfg["format"] == "csv" else ".dmat"
    files = []
    rng = master.spawn(0)
    for i in range(cfg["count"]):
        if cfg["kind"] == "rank_r":
            x = datagen.gaussian_rank_r(cfg["n"], cfg["d"], cfg["rank"], rng)
        elif cfg["kind"] == "noisy":
            x = datagen.noisy_rank_r(cfg["n"], cfg["d"], cfg["rank"],
                                     cfg["noise"], rng)
        elif cfg["kind"] == "family":
            x = datagen.spectral_family(cfg["n"], cfg["d"], cfg["rank"],
                                        cfg["tail"], cfg["decay"],
                                        cfg["noise"], 1, rng)[0]
        else:
            raise ConfigError(f"unknown gen_data kind {cfg['kind']!r}")
        name = f"{cfg['prefix']}_{i:03d}{ext}"
        if out_dir is not None:
            datagen.save_matrix(x, os.path.join(out_dir, name))
        files.append({"file": name, "fro_norm_sq": linalg.fro_norm_sq(x)})
    summary = {
        "experiment": "gen_data",
        "kind": cfg["kind"],
        "count": cfg["count"],
        "files": files,
    }
    return summary, {}


RUNNERS = {
    "jl_check": run_jl_check,
    "approx_check": run_approx_check,
    "autoencode": run_autoencode,
    "two_phase": run_two_phase,
    "verify_critical": run_verify_critical,
    "sketch_train": run_sketch_train,
    "gen_data": run_gen_data,
}

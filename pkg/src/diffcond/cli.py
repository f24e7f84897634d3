"""Command-line entry point: ``train``, ``sample``, ``oracle`` and ``evaluate``.

Exit codes: 0 success, 2 configuration/input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path as FsPath

import numpy as np

from . import guidance, smc
from .config import ConfigError, ExperimentConfig, load_config
from .filtering import GaussianJointChain, JointDiffusion, chain_csv, gibbs_filtering_sampler, trippe_dou_sampler
from .guidance import (AnalyticScore, DoobBridgeSpec, DoobReversal, checkpoint_hash, doob_conditional_sampler,
                       dps_measurement_score, guided_reversal, joint_bridging_sampler, metadata_text,
                       read_samples_csv, samples_csv, train_doob_reversal)
from .hmc import HmcConfig, hmc_sample
from .neural import CheckpointError, MlpSpec, Network, load_checkpoint, save_checkpoint
from .numerics import RngState, compare_to_oracle
from .sde import brownian_sde, euler_maruyama, ou_sde, reversal_transition
from .targets import CrescentModel, GridDensity, LinearGaussianModel, ZeroMassError, posterior_oracle
from .training import (BridgePair, DsmConfig, IpfConfig, ScoreNetwork, TrainingDivergedError, cdsb_train,
                       dsb_train, dsm_train, losses_csv, standard_normal_ref)

log = logging.getLogger("diffcond")

TRAIN, SAMPLE, ORACLE = 1, 2, 3


class NumericFailure(RuntimeError):
    pass


# ----------------------------------------------------------------------------------
# model and artefact helpers


def build_model(cfg: ExperimentConfig):
    if cfg["model"] == "crescent":
        return CrescentModel(lik_var=cfg["model.lik_var"])
    return LinearGaussianModel(cfg["model.prior_mean"], cfg["model.prior_var"], cfg["model.coeff"],
                               cfg["model.obs_var"])


def _artefact(cfg) -> str:
    """Name of the trained object a method needs (None when nothing is trained)."""
    method, model = cfg["method"], cfg["model"]
    if method == "hmc":
        return None
    if model != "crescent":
        if method in ("pf", "gibbs", "fk-bootstrap", "fk-twisted", "dps"):
            return None
        if method == "doob":
            return "doob"
        raise ConfigError(f"method {method!r} needs model = crescent")
    return {"cdsb": "cdsb", "dsb-prior": "dsb-prior", "fk-bootstrap": "dsb-prior", "fk-twisted": "dsm-prior",
            "dps": "dsm-prior", "pf": "dsm-joint", "gibbs": "dsm-joint", "doob": "doob"}[method]


def _prefix(cfg, name) -> FsPath:
    return FsPath(cfg["checkpoint"]) if cfg["checkpoint"] else FsPath(cfg["output_dir"]) / name


def _mlp(cfg, dim, cond_dim):
    return MlpSpec(state_dim=dim, out_dim=dim, cond_dim=cond_dim, hidden=tuple(cfg["train.hidden"]))


def _ipf_config(cfg, conditional):
    return IpfConfig(reference=brownian_sde(cfg["reference.sigma"], cfg["T"], cfg["steps"]),
                     outer_iterations=cfg["train.outer_iterations"],
                     inner_iterations=cfg["train.inner_iterations"], batch_size=cfg["train.batch_size"],
                     learning_rate=cfg["train.learning_rate"], n_paths=cfg["train.n_paths"],
                     conditional=conditional, hidden=tuple(cfg["train.hidden"]), ema_decay=cfg["train.ema_decay"])


def _forward_ou(cfg):
    return ou_sde(cfg["forward.theta"], cfg["forward.sigma"], cfg["T"], cfg["steps"])


def _dsm_config(cfg):
    return DsmConfig(_forward_ou(cfg), batch_size=cfg["train.batch_size"], iterations=cfg["train.iterations"],
                     learning_rate=cfg["train.learning_rate"], hidden=tuple(cfg["train.hidden"]),
                     ema_decay=cfg["train.ema_decay"])


def _write(path: FsPath, data):
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, bytes):
        path.write_bytes(data)
    else:
        path.write_text(data)


def _read_meta(path: FsPath) -> dict:
    if not path.exists():
        raise ConfigError(f"missing checkpoint metadata {path}")
    out = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            out[k] = v
    return out


def _y_tag(y) -> str:
    return f"y{y:g}"


# ----------------------------------------------------------------------------------
# train


def cmd_train(cfg: ExperimentConfig) -> list:
    name = _artefact(cfg)
    if name is None:
        log.info("method %s with model %s needs no training", cfg["method"], cfg["model"])
        return []
    model = build_model(cfg)
    root = RngState(cfg["seed"]).split(TRAIN)
    prefix = _prefix(cfg, name)
    meta = {"artefact": name, "model": cfg["model"], "method": cfg["method"], "seed": cfg["seed"]}
    files = {}
    if name in ("cdsb", "dsb-prior"):
        conditional = name == "cdsb"
        sampler = (lambda g, n: model.sample_joint(g, n)) if conditional else (lambda g, n: model.sample_prior(g, n))
        pair = (cdsb_train if conditional else dsb_train)(root, sampler, _ipf_config(cfg, conditional))
        files[".fwd"] = save_checkpoint(pair.forward_net.params, pair.forward_net.spec)
        files[".bwd"] = save_checkpoint(pair.backward_net.params, pair.backward_net.spec)
        losses = pair.losses
        meta.update(kind="bridge", reference="brownian", dim=pair.dim, cond_dim=pair.cond_dim,
                    hash=checkpoint_hash(pair.forward_net, pair.backward_net))
    elif name in ("dsm-prior", "dsm-joint"):
        if name == "dsm-prior":
            sampler = lambda g, n: model.sample_prior(g, n)
        else:
            sampler = lambda g, n: np.concatenate(model.sample_joint(g, n), axis=1)
        score = dsm_train(root, sampler, _dsm_config(cfg))
        files[".score"] = save_checkpoint(score.net.params, score.net.spec)
        losses = [(i + 1, "dsm", l) for i, l in enumerate(score.losses)]
        meta.update(kind="score", forward="linear-ou", dim=score.net.spec.state_dim, cond_dim=0,
                    hash=checkpoint_hash(score.net))
    else:
        spec = DoobBridgeSpec(brownian_sde(cfg["reference.sigma"], cfg["T"], cfg["steps"]))
        rev = train_doob_reversal(root, lambda g, n: model.sample_joint(g, n), spec, cfg["train.iterations"],
                                  cfg["train.batch_size"], cfg["train.learning_rate"], cfg["train.hidden"],
                                  cfg["train.ema_decay"])
        files[".x0"] = save_checkpoint(rev.predictor.params, rev.predictor.spec)
        losses = [(i + 1, "doob", l) for i, l in enumerate(rev.losses)]
        meta.update(kind="doob", reference="brownian", dim=model.dim, cond_dim=model.dim,
                    hash=checkpoint_hash(rev.predictor))
    written = []
    for suffix, data in files.items():
        _write(prefix.with_name(prefix.name + suffix), data)
        written.append(prefix.with_name(prefix.name + suffix))
    _write(prefix.with_name(prefix.name + "_losses.csv"), losses_csv(losses))
    _write(prefix.with_name(prefix.name + ".meta"), metadata_text({**meta, **dict(cfg.items())}))
    return written


def _load(cfg, suffix, spec, kind):
    name = _artefact(cfg)
    prefix = _prefix(cfg, name)
    meta = _read_meta(prefix.with_name(prefix.name + ".meta"))
    if meta.get("kind") != kind:
        raise ConfigError(f"checkpoint {prefix} holds a {meta.get('kind')!r} model, method needs {kind!r}")
    if int(meta.get("dim", -1)) != spec.state_dim or int(meta.get("cond_dim", -1)) != spec.cond_dim:
        raise ConfigError(f"checkpoint {prefix} dimensions do not match the configured model")
    path = prefix.with_name(prefix.name + suffix)
    if not path.exists():
        raise ConfigError(f"missing checkpoint {path}")
    return Network(spec, load_checkpoint(path.read_bytes(), spec)), meta


def _load_pair(cfg, model, conditional):
    spec = _mlp(cfg, model.dim, model.y_dim if conditional else 0)
    fwd, meta = _load(cfg, ".fwd", spec, "bridge")
    bwd, _ = _load(cfg, ".bwd", spec, "bridge")
    ref = brownian_sde(cfg["reference.sigma"], cfg["T"], cfg["steps"])
    pair = BridgePair(fwd, bwd, ref, lambda g, n, y=None: standard_normal_ref(g, n, y, model.dim), trained=True)
    return pair, meta


def _load_score(cfg, dim):
    net, meta = _load(cfg, ".score", _mlp(cfg, dim, 0), "score")
    return ScoreNetwork(net, _forward_ou(cfg)), meta


def _gaussian_score(m, v, sde):
    """Score of ``N(m, v)`` pushed through the OU forward (and its input VJP)."""

    def moments(t):
        a, s = sde.marginal_coeffs(t)
        return a * m, a * a * v + s

    def fn(x, cond, t):
        mt, vt = moments(t)
        return -(x - mt) / vt

    def vjp(x, cond, t, w):
        return -w / moments(t)[1]

    return AnalyticScore(fn, vjp)


# ----------------------------------------------------------------------------------
# sample


def _cached(cache, key, load):
    if key not in cache:
        cache[key] = load()
    return cache[key]


def _sample_one(cfg, model, method, y, rng, cache):
    """Returns ``(samples, weights or None, extra files dict, metadata dict)``."""
    n = cfg["samples"]
    yv = np.array([y])
    extra, meta = {}, {}
    if method == "cdsb":
        pair, m = _cached(cache, "pair", lambda: _load_pair(cfg, model, True))
        meta["checkpoint_hash"] = m["hash"]
        return joint_bridging_sampler(rng, pair, yv, n), None, extra, meta
    if method == "dsb-prior":
        pair, m = _cached(cache, "pair", lambda: _load_pair(cfg, model, False))
        meta["checkpoint_hash"] = m["hash"]
        return pair.sample(rng, n), None, extra, meta
    if method == "hmc":
        x0 = np.array([0.0, y - 0.5]) if cfg["model"] == "crescent" else np.array([model.prior_mean])
        hc = HmcConfig(cfg["hmc.step_size"], cfg["hmc.n_leapfrog"], np.ones(model.dim), n, cfg["hmc.burn_in"])
        chain = hmc_sample(rng, lambda x: model.log_joint(x, yv), lambda x: model.log_joint_grad(x, yv), hc, x0)
        meta["accept_rate"] = f"{chain.accept_rate:.6f}"
        return chain.samples, None, extra, meta
    if method in ("fk-bootstrap", "fk-twisted"):
        if n == 0:
            return np.empty((0, model.dim)), np.empty(0), extra, meta
        if n == 1:
            raise ConfigError("SMC needs samples >= 2 particles")
        lam = cfg["smc.lambda"]
        if cfg["model"] == "crescent":
            init = lambda g, J: g.standard_normal((J, model.dim))
            if method == "fk-bootstrap":
                pair, m = _cached(cache, "pair", lambda: _load_pair(cfg, model, False))
                meta["checkpoint_hash"] = m["hash"]
                fk = smc.fk_bootstrap(init, lambda u, k: pair.reverse_transition(u, None, k - 1), cfg["steps"],
                                      model.likelihood_logpdf, yv, lam)
            else:
                score, m = _cached(cache, "score", lambda: _load_score(cfg, model.dim))
                meta["checkpoint_hash"] = m["hash"]
                fk = _twisted_from_score(cfg, model, score, yv, init)
        else:
            chain = smc.StationaryChain(model.prior_mean, model.prior_var, cfg["steps"], cfg["T"])
            init, transition = smc.stationary_fk_parts(model, chain)
            if method == "fk-bootstrap":
                fk = smc.fk_bootstrap(init, transition, chain.n_steps, model.likelihood_logpdf, yv, lam)
            else:
                log_l, grad_l = smc.exact_lookahead(model, chain, y)
                fk = smc.fk_twisted(init, transition, chain.n_steps, log_l, grad_l,
                                    cfg["smc.delta_scale"], cfg["smc.cov_scale"])
        res = smc.smc_run(rng, fk, n, cfg["smc.ess_threshold"])
        extra["ess"] = res.trace_csv()
        meta["log_normaliser"] = repr(res.log_normaliser)
        meta["final_ess"] = f"{res.ess_trace[-1][1]:.6f}"
        return res.ensemble.particles, res.ensemble.weights, extra, meta
    if method == "dps":
        sde = _forward_ou(cfg)
        if cfg["model"] == "crescent":
            score, m = _cached(cache, "score", lambda: _load_score(cfg, model.dim))
            meta["checkpoint_hash"] = m["hash"]
        else:
            score = _gaussian_score(model.prior_mean, model.prior_var, sde)
        meas = lambda u, c, t: dps_measurement_score(u, t, score, sde, model.likelihood_grad, yv)
        rev = guided_reversal(sde, score, meas)
        start = np.sqrt(sde.stationary_var()) * rng.generator().standard_normal((n, model.dim))
        return euler_maruyama(rng.split(1), rev, start, keep_path=False).terminal, None, extra, meta
    if method == "doob":
        net, m = _cached(cache, "doob", lambda: _load(cfg, ".x0", _mlp(cfg, model.dim, model.dim), "doob"))
        meta["checkpoint_hash"] = m["hash"]
        spec = DoobBridgeSpec(brownian_sde(cfg["reference.sigma"], cfg["T"], cfg["steps"]))
        return doob_conditional_sampler(rng, DoobReversal(net, spec, [0.0]), yv, n), None, extra, meta
    if method in ("pf", "gibbs"):
        jd = cache.get("jd")
        if jd is None:
            if cfg["model"] == "crescent":
                score, m = _load_score(cfg, model.dim + 1)
                meta["checkpoint_hash"] = m["hash"]
                jd = JointDiffusion(_forward_ou(cfg), model.dim, 1, score)
            else:
                jd = GaussianJointChain(model, _forward_ou(cfg))
            cache["jd"] = jd
        J = cfg["filter.particles"]
        if n == 0:
            return np.empty((0, model.dim)), None, extra, meta
        if method == "pf":
            return trippe_dou_sampler(rng, jd, yv, n, J), None, extra, meta
        oracle = posterior_oracle(y, model, _bounds(cfg, model), min(cfg["oracle.resolution"], 200))
        x_init = oracle.resample(rng.split(1), n)
        chain = gibbs_filtering_sampler(rng.split(2), jd, yv, x_init, cfg["gibbs.sweeps"], J)
        extra["chain"] = chain_csv(chain)
        return chain[-1], None, extra, meta
    raise ConfigError(f"unsupported method {method!r}")


def _twisted_from_score(cfg, model, score, yv, init):
    sde = score.sde
    rev = guided_reversal(sde, score)
    N, dt = sde.N, sde.dt
    transition = lambda u, k: reversal_transition(rev, u, None, (k - 1) * dt)
    log_l, grad_l = smc.tweedie_lookahead(score, sde, model.likelihood_logpdf, model.likelihood_grad, yv, N)
    return smc.fk_twisted(init, transition, N, log_l, grad_l, cfg["smc.delta_scale"], cfg["smc.cov_scale"])


def _bounds(cfg, model):
    b = cfg["oracle.bounds"]
    pairs = [(b[i], b[i + 1]) for i in range(0, len(b), 2)]
    if len(pairs) == 1:
        pairs = pairs * model.dim
    if len(pairs) != model.dim:
        raise ConfigError(f"oracle.bounds gives {len(pairs)} ranges for a {model.dim}-dimensional model")
    return pairs


def cmd_sample(cfg: ExperimentConfig) -> list:
    model = build_model(cfg)
    _artefact(cfg)
    method = cfg["method"]
    root = RngState(cfg["seed"]).split(SAMPLE)
    out = FsPath(cfg["output_dir"])
    cache, written = {}, []
    ys = [None] if method == "dsb-prior" else cfg["y"]
    for i, y in enumerate(ys):
        rng = root.split(i)
        samples, weights, extra, meta = _sample_one(cfg, model, method, 0.0 if y is None else y, rng, cache)
        stem = f"samples_{method}" + ("" if y is None else "_" + _y_tag(y))
        path = out / f"{stem}.csv"
        _write(path, samples_csv(samples.reshape(-1, model.dim), weights))
        written.append(path)
        for key, text in extra.items():
            _write(out / f"{stem}_{key}.csv", text)
            written.append(out / f"{stem}_{key}.csv")
        info = {"method": method, "y": "none" if y is None else repr(float(y)), "seed": cfg["seed"],
                "N": cfg["steps"], "T": cfg["T"], "checkpoint_hash": "none", **meta}
        _write(out / f"{stem}.meta", metadata_text({**info, **{f"config.{k}": v for k, v in cfg.items()}}))
    return written


# ----------------------------------------------------------------------------------
# oracle / evaluate


def cmd_oracle(cfg: ExperimentConfig) -> list:
    model = build_model(cfg)
    out = FsPath(cfg["output_dir"])
    written = []
    for y in cfg["y"]:
        grid = posterior_oracle(y, model, _bounds(cfg, model), cfg["oracle.resolution"])
        stem = f"oracle_{cfg['model']}_{_y_tag(y)}"
        _write(out / f"{stem}.csv", grid.to_csv())
        meta = {"y": repr(float(y)), "resolution": cfg["oracle.resolution"], "integral": f"{grid.integral():.12f}",
                "edge_mass": f"{grid.edge_mass():.6e}"}
        _write(out / f"{stem}.meta", metadata_text({**meta, **{f"config.{k}": v for k, v in cfg.items()}}))
        written.append(out / f"{stem}.csv")
    return written


def cmd_evaluate(cfg: ExperimentConfig) -> list:
    if not cfg["evaluate.samples"] or not cfg["evaluate.oracle"]:
        raise ConfigError("evaluate needs evaluate.samples and evaluate.oracle")
    spath, opath = FsPath(cfg["evaluate.samples"]), FsPath(cfg["evaluate.oracle"])
    for p in (spath, opath):
        if not p.exists():
            raise ConfigError(f"missing input file {p}")
    try:
        samples, weights = read_samples_csv(spath.read_text())
    except ValueError as e:
        raise ConfigError(f"{spath}: {e}") from None
    try:
        oracle = GridDensity.from_csv(opath.read_text())
    except ValueError as e:
        raise ConfigError(f"{opath}: {e}") from None
    if samples.shape[1] != oracle.ndim:
        raise ConfigError(f"samples have dimension {samples.shape[1]}, oracle has {oracle.ndim}")
    if samples.shape[0] == 0:
        raise ConfigError(f"{spath}: no samples to evaluate")
    report = compare_to_oracle(samples, oracle, weights, bins=cfg["evaluate.bins"],
                               n_projections=cfg["evaluate.projections"], rng=RngState(cfg["seed"], (4,)))
    lines = ["metric,value"] + [f"{k},{v:.17g}" for k, v in report.rows()]
    path = FsPath(cfg["output_dir"]) / f"metrics_{spath.stem}.csv"
    _write(path, "\n".join(lines) + "\n")
    return [path]


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "oracle": cmd_oracle, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="diffcond", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="path to a key = value config file")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        text = FsPath(args.config).read_text() if args.config else ""
    except OSError as e:
        print(f"error: cannot read config: {e}", file=sys.stderr)
        return 2
    try:
        cfg = load_config(text, args.override)
        written = COMMANDS[args.command](cfg)
    except (ConfigError, CheckpointError, guidance.DimensionMismatchError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FloatingPointError, ZeroMassError, TrainingDivergedError, NumericFailure) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())

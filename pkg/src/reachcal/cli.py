"""Command-line pipeline: generate, train, calibrate, evaluate, validate.

Every command reads one JSON config; unknown keys are rejected so typos
cannot silently change an experiment.  Artifacts embed the config hash and
the hashes of their inputs, and downstream commands refuse stale chains.
Outputs are byte-identical across reruns with unchanged inputs.
"""

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import calibration, christoffel, datastore, denoiser, diffusion, dynamics, evaluation
from .checkpoint import load_model, save_model
from .errors import ConfigurationError, ReachcalError, StalenessError
from .hashing import artifact_hash, config_hash

log = logging.getLogger("reachcal")

DEFAULT_CONFIG = {
    "system": {"name": "duffing", "params": {}},
    "dataset": {"n_trajectories": 1000, "n_steps": 30, "dt": 0.1, "seed": 7,
                "substeps": 10, "t1": 5.0},
    "split": {"train": 0.6, "cal": 0.2, "test": 0.2, "seed": 11},
    "schedule": {"steps": 1000, "beta_start": 1e-4, "beta_end": 0.02},
    "denoiser": {"hidden_dim": 128, "layers": 2, "embed_dim": 64, "lr": 5e-4,
                 "weight_decay": 0.01, "batch_size": 1024, "epochs": 60,
                 "seed": 3, "dtype": "float32"},
    "score": {"taus": [1, 2, 3], "repeats": 8, "weighting": "uniform", "seed": 23},
    "budget": {"alpha": 0.05, "delta": 0.2},
    "calibration": {"grid_size": 2000},
    "evaluation": {"grid_cells": 128, "steps": None, "projection_dims": None,
                   "volume_bound": None},
    "sensitivity": {"sigmas": [0.0, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5],
                    "step": None, "max_states": 1000, "seed": 99},
    "christoffel": {"degree": 11, "ridge": None, "dims": None},
    "pac": {"n_splits": 100, "seed": 5, "cal_fraction": 0.5},
}

_SYSTEM_PARAM_KEYS = {
    "duffing": {"a", "b", "c", "amplitude", "omega", "x0_box"},
    "quadrotor": {"g", "k_rotor", "d0", "d1", "n0", "x0_box", "u1_range", "u2_range"},
    "gray_scott": {"du", "dv", "feed", "kill", "grid", "dx", "substeps"},
}

# per-seed-override offsets, applied in this order
_SEED_FIELDS = (
    ("dataset", "seed"), ("split", "seed"), ("denoiser", "seed"),
    ("score", "seed"), ("sensitivity", "seed"), ("pac", "seed"),
)


def _merge_checked(defaults, override, path=""):
    merged = copy.deepcopy(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigurationError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict) and key != "params":
            if not isinstance(value, dict):
                raise ConfigurationError(f"{where} must be an object")
            merged[key] = _merge_checked(defaults[key], value, where)
        else:
            merged[key] = value
    return merged


def load_config(path):
    with open(path) as fh:
        try:
            user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from exc
    cfg = _merge_checked(DEFAULT_CONFIG, user)
    name = cfg["system"]["name"]
    if name not in _SYSTEM_PARAM_KEYS:
        raise ConfigurationError(f"unknown system {name!r}")
    unknown = set(cfg["system"]["params"]) - _SYSTEM_PARAM_KEYS[name]
    if unknown:
        raise ConfigurationError(f"unknown system.params keys: {sorted(unknown)}")
    return cfg


def apply_seed_override(cfg, seed):
    for offset, (section, field) in enumerate(_SEED_FIELDS):
        cfg[section][field] = int(seed) + offset
    return cfg


def system_from_config(cfg):
    name = cfg["system"]["name"]
    params = dict(cfg["system"]["params"])
    for key in ("x0_box", "u1_range", "u2_range"):
        if key in params:
            params[key] = np.asarray(params[key], dtype=np.float64)
    cls = {
        "duffing": dynamics.DuffingParams,
        "quadrotor": dynamics.QuadrotorParams,
        "gray_scott": dynamics.GrayScottParams,
    }[name]
    return cls(**params)


def schedule_from_config(cfg):
    sc = cfg["schedule"]
    return diffusion.make_schedule(sc["steps"], sc["beta_start"], sc["beta_end"])


def score_config_from_config(cfg):
    sc = cfg["score"]
    return diffusion.ScoreConfig(
        taus=tuple(sc["taus"]), repeats=sc["repeats"],
        weighting=sc["weighting"], seed=sc["seed"],
    )


def budget_from_config(cfg, n_steps):
    return calibration.RiskBudget(
        alpha=cfg["budget"]["alpha"], delta=cfg["budget"]["delta"], n_steps=n_steps
    )


def split_from_config(cfg, dataset):
    sp = cfg["split"]
    return datastore.split(dataset, (sp["train"], sp["cal"], sp["test"]), seed=sp["seed"])


def _artifact_paths(out_dir):
    out = Path(out_dir)
    return {
        "dataset": out / "dataset.rchd",
        "checkpoint": out / "model.rcpt",
        "calibration": out / "calibration.json",
        "metrics": out / "metrics.csv",
        "masks": out / "masks",
        "pac": out / "pac_report.json",
        "sensitivity": out / "sensitivity.csv",
        "christoffel": out / "christoffel_metrics.csv",
    }


def _provenance(cfg, **hashes):
    items = [f"config_hash={config_hash(cfg):#018x}"]
    items += [f"{key}={value:#018x}" for key, value in hashes.items()]
    return items


def cmd_generate(cfg, out_dir):
    paths = _artifact_paths(out_dir)
    system = system_from_config(cfg)
    ds_cfg = cfg["dataset"]
    log.info("generating %s dataset: N=%d K=%d", cfg["system"]["name"],
             ds_cfg["n_trajectories"], ds_cfg["n_steps"])
    dataset = dynamics.generate_dataset(
        system, ds_cfg["n_trajectories"], ds_cfg["n_steps"], dt=ds_cfg["dt"],
        seed=ds_cfg["seed"], substeps=ds_cfg["substeps"], t1=ds_cfg["t1"],
    )
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    datastore.save_dataset(dataset, paths["dataset"])
    log.info("wrote %s", paths["dataset"])
    return [paths["dataset"]]


def _load_dataset_checked(paths):
    if not paths["dataset"].exists():
        raise StalenessError(f"missing dataset artifact {paths['dataset']}")
    return datastore.load_dataset(paths["dataset"]), artifact_hash(paths["dataset"])


def cmd_train(cfg, out_dir):
    paths = _artifact_paths(out_dir)
    dataset, ds_hash = _load_dataset_checked(paths)
    parts = split_from_config(cfg, dataset)
    schedule = schedule_from_config(cfg)
    normalizer = datastore.fit_normalizer(dataset, parts.train_ids)
    dn = cfg["denoiser"]
    config = denoiser.DenoiserConfig(
        hidden_dim=dn["hidden_dim"], layers=dn["layers"], embed_dim=dn["embed_dim"],
        lr=dn["lr"], weight_decay=dn["weight_decay"], batch_size=dn["batch_size"],
        epochs=dn["epochs"], seed=dn["seed"], dtype=dn["dtype"],
    )
    log.info("training %dx%d denoiser on %d trajectories",
             config.hidden_dim, config.layers, len(parts.train_ids))
    model = denoiser.train_denoiser(dataset, parts.train_ids, schedule, config,
                                    normalizer, log=log)
    save_model(model, paths["checkpoint"], extra_meta={
        "dataset_hash": ds_hash, "config_hash": config_hash(cfg),
    })
    log.info("wrote %s (final loss %.5f)", paths["checkpoint"], model.loss_curve[-1])
    return [paths["checkpoint"]]


def _load_model_checked(cfg, paths, ds_hash):
    if not paths["checkpoint"].exists():
        raise StalenessError(f"missing checkpoint artifact {paths['checkpoint']}")
    model, _ = load_model(paths["checkpoint"])
    model_hash = artifact_hash(paths["checkpoint"])
    with open(paths["checkpoint"], "rb") as fh:
        meta_len = int.from_bytes(fh.read(8), "little")
        meta = json.loads(fh.read(meta_len).decode())
    extra = meta.get("extra", {})
    if extra.get("dataset_hash") != ds_hash:
        raise StalenessError(
            f"checkpoint {paths['checkpoint']} was trained on a different dataset "
            f"(stored {extra.get('dataset_hash')}, current {ds_hash})"
        )
    schedule = schedule_from_config(cfg)
    from .hashing import crc64

    if model.schedule_hash != crc64(schedule.tobytes()):
        raise StalenessError("checkpoint schedule differs from the configured schedule")
    return model, model_hash, schedule


def cmd_calibrate(cfg, out_dir):
    paths = _artifact_paths(out_dir)
    dataset, ds_hash = _load_dataset_checked(paths)
    model, model_hash, schedule = _load_model_checked(cfg, paths, ds_hash)
    parts = split_from_config(cfg, dataset)
    budget = budget_from_config(cfg, dataset.n_steps)
    score_cfg = score_config_from_config(cfg)
    log.info("calibrating %d steps at alpha=%g delta=%g",
             dataset.n_steps, budget.alpha, budget.delta)
    result = calibration.calibrate_all(
        dataset, parts.cal_ids, model, schedule, score_cfg, budget,
        grid_size=cfg["calibration"]["grid_size"], model_hash=model_hash,
    )
    payload = {
        "config_hash": config_hash(cfg),
        "dataset_hash": ds_hash,
        "model_hash": model_hash,
        "result": json.loads(result.to_json()),
    }
    with open(paths["calibration"], "w") as fh:
        json.dump(payload, fh, sort_keys=True)
    log.info("wrote %s (thresholds %s)", paths["calibration"],
             np.round(result.thresholds, 4).tolist())
    return [paths["calibration"]]


def _load_predictor_checked(cfg, paths):
    dataset, ds_hash = _load_dataset_checked(paths)
    model, model_hash, schedule = _load_model_checked(cfg, paths, ds_hash)
    if not paths["calibration"].exists():
        raise StalenessError(f"missing calibration artifact {paths['calibration']}")
    with open(paths["calibration"]) as fh:
        payload = json.load(fh)
    if payload["dataset_hash"] != ds_hash:
        raise StalenessError("calibration was computed from a different dataset")
    if payload["model_hash"] != model_hash:
        raise StalenessError("calibration was computed from a different checkpoint")
    result = calibration.CalibrationResult.from_json(json.dumps(payload["result"]))
    predictor = calibration.ReachPredictor(
        model=model, schedule=schedule,
        score_config=score_config_from_config(cfg), calibration=result,
    )
    return dataset, ds_hash, model_hash, predictor


def _evaluation_grid(cfg, dataset, test_ids, dims=None):
    states = dataset.states[np.asarray(test_ids)].astype(np.float64)
    flat = states.reshape(-1, dataset.n_dims)
    if dims is not None:
        flat = flat[:, list(dims)]
    return evaluation.GridSpec.from_states(flat, cells=cfg["evaluation"]["grid_cells"])


def _eval_steps(cfg, n_steps):
    steps = cfg["evaluation"]["steps"]
    return list(range(n_steps)) if steps is None else [int(k) for k in steps]


def _evaluate_predictor(cfg, dataset, parts, predictor, metrics_path, masks_dir,
                        mask_prefix, provenance):
    dims = cfg["evaluation"]["projection_dims"]
    dims = None if dims is None else tuple(dims)
    use_masks = dataset.n_dims <= 3 or dims is not None
    vb_cfg = cfg["evaluation"]["volume_bound"]
    per_step_fnr, _ = evaluation.fnr(dataset, parts.test_ids, predictor)
    rows = []
    if use_masks:
        grid = _evaluation_grid(cfg, dataset, parts.test_ids, dims)
        masks_dir.mkdir(parents=True, exist_ok=True)
    for k in _eval_steps(cfg, dataset.n_steps):
        row = {
            "step": k,
            "fnr": float(per_step_fnr[k]),
            "threshold": predictor.calibration.threshold(k),
            "iou": "", "precision": "", "bound": "", "measured_missed_volume": "",
        }
        if use_masks:
            test_states = dataset.states_at(k, parts.test_ids)
            proj_states = test_states if dims is None else test_states[:, list(dims)]
            ref = evaluation.build_reference_mask(proj_states, grid, step=k)
            if dims is None:
                pred = evaluation.predict_mask(predictor, k, grid)
            else:
                pred = evaluation.predict_mask_projected(
                    predictor, k, grid, test_states, dims
                )
            iou, precision = evaluation.iou_precision(pred, ref)
            row["iou"] = iou
            row["precision"] = precision
            if vb_cfg is not None:
                vb = evaluation.VolumeBoundInput(
                    c0=vb_cfg["c0"], divergence=vb_cfg["divergence"],
                    t_k=k * dataset.dt, alpha=cfg["budget"]["alpha"],
                )
                measured, bound = evaluation.volume_bound_check(pred, ref, vb)
                row["measured_missed_volume"] = measured
                row["bound"] = bound
            evaluation.write_mask_pgm(ref, masks_dir / f"{mask_prefix}ref_k{k:03d}.pgm")
            evaluation.write_mask_pgm(pred, masks_dir / f"{mask_prefix}pred_k{k:03d}.pgm")
            evaluation.write_mask_csv(pred, masks_dir / f"{mask_prefix}pred_k{k:03d}.csv",
                                      provenance)
        rows.append(row)
    evaluation.write_metrics_csv(
        metrics_path, rows,
        ["step", "iou", "precision", "fnr", "threshold", "bound",
         "measured_missed_volume"],
        provenance,
    )
    return rows


def cmd_evaluate(cfg, out_dir):
    paths = _artifact_paths(out_dir)
    dataset, ds_hash, model_hash, predictor = _load_predictor_checked(cfg, paths)
    parts = split_from_config(cfg, dataset)
    provenance = _provenance(cfg, dataset_hash=ds_hash, model_hash=model_hash)
    rows = _evaluate_predictor(cfg, dataset, parts, predictor, paths["metrics"],
                               paths["masks"], "", provenance)
    max_fnr = max(r["fnr"] for r in rows)
    log.info("wrote %s (max FNR %.5f at alpha=%g)", paths["metrics"], max_fnr,
             cfg["budget"]["alpha"])
    return [paths["metrics"], paths["masks"]]


def cmd_pac_validate(cfg, out_dir):
    paths = _artifact_paths(out_dir)
    dataset, ds_hash, model_hash, predictor = _load_predictor_checked(cfg, paths)
    parts = split_from_config(cfg, dataset)
    pool_ids = np.concatenate([parts.cal_ids, parts.test_ids])
    log.info("scoring %d-state pool for %d re-splits", len(pool_ids),
             cfg["pac"]["n_splits"])
    pool_scores = [
        predictor.score_states(dataset.states_at(k, pool_ids), k,
                               domain=diffusion.DOMAIN_CAL)
        for k in range(dataset.n_steps)
    ]
    budget = budget_from_config(cfg, dataset.n_steps)
    outcome = evaluation.pac_validate(
        pool_scores, budget, cfg["pac"]["n_splits"], seed=cfg["pac"]["seed"],
        grid_size=cfg["calibration"]["grid_size"],
        cal_fraction=cfg["pac"]["cal_fraction"],
    )
    payload = {
        "config_hash": config_hash(cfg),
        "dataset_hash": ds_hash,
        "model_hash": model_hash,
        "pass_rate": outcome.pass_rate,
        "floor": 1.0 - budget.delta,
        "records": outcome.records,
    }
    with open(paths["pac"], "w") as fh:
        json.dump(payload, fh, sort_keys=True)
    log.info("wrote %s (pass rate %.3f, floor %.3f)", paths["pac"],
             outcome.pass_rate, 1.0 - budget.delta)
    return [paths["pac"]]


def cmd_sensitivity(cfg, out_dir):
    paths = _artifact_paths(out_dir)
    dataset, ds_hash, model_hash, predictor = _load_predictor_checked(cfg, paths)
    parts = split_from_config(cfg, dataset)
    sens = cfg["sensitivity"]
    k = dataset.n_steps - 1 if sens["step"] is None else int(sens["step"])
    states = dataset.states_at(k, parts.test_ids)[: sens["max_states"]]
    train_flat = dataset.states[np.asarray(parts.train_ids)].reshape(-1, dataset.n_dims)
    sigma_px = np.maximum(train_flat.astype(np.float64).std(axis=0), 1e-12)
    curve = evaluation.sensitivity_curve(
        predictor, states, sens["sigmas"], sigma_px, k, seed=sens["seed"]
    )
    rows = [{"sigma": s, "acceptance_rate": ar} for s, ar in curve]
    evaluation.write_metrics_csv(
        paths["sensitivity"], rows, ["sigma", "acceptance_rate"],
        _provenance(cfg, dataset_hash=ds_hash, model_hash=model_hash) + [f"step={k}"],
    )
    log.info("wrote %s", paths["sensitivity"])
    return [paths["sensitivity"]]


def cmd_baseline_christoffel(cfg, out_dir):
    paths = _artifact_paths(out_dir)
    dataset, ds_hash = _load_dataset_checked(paths)
    parts = split_from_config(cfg, dataset)
    budget = budget_from_config(cfg, dataset.n_steps)
    ch = cfg["christoffel"]
    dims = None if ch["dims"] is None else tuple(ch["dims"])
    log.info("fitting degree-%d Christoffel baseline", ch["degree"])
    predictor = christoffel.fit_christoffel_predictor(
        dataset, parts.train_ids, parts.cal_ids, ch["degree"], budget,
        grid_size=cfg["calibration"]["grid_size"], ridge=ch["ridge"], dims=dims,
    )
    eval_cfg = copy.deepcopy(cfg)
    if dims is not None and eval_cfg["evaluation"]["projection_dims"] is None:
        eval_cfg["evaluation"]["projection_dims"] = list(dims)
    provenance = _provenance(cfg, dataset_hash=ds_hash)
    # Christoffel scores the projected state directly, so its mask comes from
    # cell centers even when a projection is configured.
    if dims is not None:
        eval_cfg["evaluation"]["projection_dims"] = None
        sub_states = dataset.states[:, :, list(dims)]
        sub_dataset = datastore.Dataset(states=sub_states, dt=dataset.dt,
                                        system_tag=dataset.system_tag)
        predictor.dims = None
        rows = _evaluate_predictor(eval_cfg, sub_dataset, parts, predictor,
                                   paths["christoffel"], paths["masks"],
                                   "christoffel_", provenance)
    else:
        rows = _evaluate_predictor(eval_cfg, dataset, parts, predictor,
                                   paths["christoffel"], paths["masks"],
                                   "christoffel_", provenance)
    max_fnr = max(r["fnr"] for r in rows)
    log.info("wrote %s (max FNR %.5f)", paths["christoffel"], max_fnr)
    return [paths["christoffel"]]


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "pac-validate": cmd_pac_validate,
    "sensitivity": cmd_sensitivity,
    "baseline-christoffel": cmd_baseline_christoffel,
}


def _setup_logging():
    level = os.environ.get("REACHCAL_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigurationError(f"REACHCAL_LOG must be one of {sorted(levels)}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def _limit_threads(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("threadpoolctl unavailable; --threads ignored")
        return None
    return threadpool_limits(limits=n)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="reachcal",
        description="Reachable-set prediction with PAC-calibrated diffusion scores",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="JSON run configuration")
        cmd.add_argument("--out", required=True, help="artifact directory")
        cmd.add_argument("--seed", type=int, default=None,
                         help="override every seed in the config")
        cmd.add_argument("--threads", type=int, default=None,
                         help="cap worker threads (BLAS pools)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    _setup_logging()
    limiter = _limit_threads(args.threads) if args.threads else None
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            apply_seed_override(cfg, args.seed)
        outputs = COMMANDS[args.command](cfg, args.out)
        for path in outputs:
            print(path)
        return 0
    except ReachcalError as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())

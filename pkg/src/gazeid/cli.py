"""Command-line entry point: reproducible experiment pipelines.

One binary with subcommands (detect, fit, scores, train, identify,
simulate, eval). Options come from an optional JSON config file plus
flags; flags win. Every artifact embeds the tool version, a hash of the
effective configuration, and the seed, so results are attributable to an
exact invocation. Outputs are written atomically (temp file + rename).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__, classify, fisher, markov, scenewalk, simulate
from .core import detect_saccades, extract_features, load_recording_csv, save_scanpath_csv
from .dataset import GazeDataset, load_dataset, save_dataset


def _effective_config(
    args: argparse.Namespace, keys: list[str], required: tuple[str, ...] = ()
) -> dict:
    """Merge the JSON config file with CLI flags; flags win.

    Unknown config keys are rejected; options in ``required`` must be
    present after the merge.
    """
    config = {}
    if args.config:
        with open(args.config) as fh:
            config = json.load(fh)
        unknown = set(config) - set(keys)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
    merged = {}
    for key in keys:
        flag_val = getattr(args, key, None)
        merged[key] = flag_val if flag_val is not None else config.get(key)
    missing = [key for key in required if merged.get(key) is None]
    if missing:
        raise ValueError(f"missing required options: {missing} (flag or config file)")
    return merged


def _provenance(config: dict) -> dict:
    canonical = json.dumps(config, sort_keys=True, default=str)
    return {
        "tool_version": __version__,
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": config.get("seed"),
        "config": config,
    }


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path: Path, doc: dict) -> None:
    _atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def _default_threads() -> int:
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_detect(args) -> int:
    config = _effective_config(args, ["raw", "out", "multiplier", "min_dur", "seed"], required=("raw", "out"))
    raw_dir = Path(config["raw"])
    out_dir = Path(config["out"])
    multiplier = config["multiplier"] if config["multiplier"] is not None else 6.0
    min_dur = config["min_dur"] if config["min_dur"] is not None else 6.0

    csv_files = sorted(p for p in raw_dir.glob("*.csv"))
    if not csv_files:
        raise ValueError(f"no recording CSVs found in {raw_dir}")
    (out_dir / "scanpaths").mkdir(parents=True, exist_ok=True)
    entries = []
    for path in csv_files:
        rec = load_recording_csv(path)
        sp = detect_saccades(rec, multiplier, min_dur)
        stem = f"{rec.subject_id}__{rec.image_id}"
        save_scanpath_csv(sp, out_dir / "scanpaths" / f"{stem}.csv")
        entries.append({"subject_id": rec.subject_id, "image_id": rec.image_id})
    _write_json(
        out_dir / "manifest.json",
        {
            "items": entries,
            "has_features": False,
            "saliency_images": [],
            "meta": {"provenance": _provenance(config)},
        },
    )
    print(f"detected {len(entries)} scanpaths -> {out_dir}")
    return 0


def _load_dataset_or_fail(data_dir: str) -> GazeDataset:
    root = Path(data_dir)
    if not (root / "manifest.json").exists():
        raise ValueError(f"no scanpaths found in {root} (missing manifest.json)")
    data = load_dataset(root)
    if not data.items:
        raise ValueError(f"no scanpaths found in {root}")
    return data


def cmd_fit(args) -> int:
    config = _effective_config(args, ["data", "model", "out", "seed", "rho", "max_iter"], required=("data", "model", "out"))
    if config["model"] not in ("markov", "markov-dyn", "scenewalk"):
        raise ValueError("model must be one of markov, markov-dyn, scenewalk")
    data = _load_dataset_or_fail(config["data"])
    out = Path(config["out"])

    if config["model"] in ("markov", "markov-dyn"):
        channels = (
            markov.BASE_CHANNELS if config["model"] == "markov" else markov.DYNAMICS_CHANNELS
        )
        if config["model"] == "markov-dyn" and all(it.features is None for it in data.items):
            raise ValueError(
                "dynamics channels unavailable: dataset carries no per-saccade feature files"
            )
        feats = [
            list(it.features) if it.features is not None else extract_features(it.scanpath)
            for it in data.items
        ]
        params = markov.fit(feats, channels)
        doc = {"model": config["model"], **markov.params_to_json_dict(params)}
    else:
        if not data.saliency:
            raise ValueError("scenewalk fitting requires saliency maps in the dataset")
        pairs = [(it.scanpath, data.saliency[it.image_id]) for it in data.items]
        rho = config["rho"] if config["rho"] is not None else 1.0
        max_iter = config["max_iter"] if config["max_iter"] is not None else 500
        result = scenewalk.fit(pairs, rho=rho, max_iter=max_iter)
        doc = {"model": "scenewalk", **result.to_json_dict()}
    doc["provenance"] = _provenance(config)
    _write_json(out, doc)
    print(f"fitted {config['model']} on {len(data.items)} scanpaths -> {out}")
    return 0


def _load_model_json(path: str):
    with open(path) as fh:
        doc = json.load(fh)
    kind = doc.get("model")
    if kind in ("markov", "markov-dyn"):
        return kind, markov.params_from_json_dict(doc)
    if kind == "scenewalk":
        return kind, scenewalk.SceneWalkParams.from_vector(
            [doc["params"][name] for name in scenewalk.PARAM_NAMES]
        )
    raise ValueError(f"{path}: unknown or missing model kind {kind!r}")


def cmd_scores(args) -> int:
    config = _effective_config(
        args,
        ["data", "model_json", "out", "seed", "eps_reg", "normalize", "info_in", "info_out"],
        required=("data", "model_json", "out"),
    )
    data = _load_dataset_or_fail(config["data"])
    kind, params = _load_model_json(config["model_json"])
    eps = config["eps_reg"] if config["eps_reg"] is not None else fisher.DEFAULT_RIDGE
    normalize = bool(config["normalize"]) if config["normalize"] is not None else False

    if kind in ("markov", "markov-dyn"):
        def grad_fn(item):
            feats = list(item.features) if item.features is not None else extract_features(item.scanpath)
            return markov.grad_loglik(feats, params)
    else:
        if not data.saliency:
            raise ValueError("scenewalk scoring requires saliency maps in the dataset")
        def grad_fn(item):
            return scenewalk.grad_loglik(item.scanpath, data.saliency[item.image_id], params)

    scores = fisher.compute_scores(
        data.items, grad_fn, model_tag=kind, ids=lambda it: (it.subject_id, it.image_id)
    )
    if config["info_in"]:
        with open(config["info_in"]) as fh:
            info_doc = json.load(fh)
        matrix = np.asarray(info_doc["matrix"], dtype=float)
        ridge = info_doc["eps_reg"] * float(np.trace(matrix)) / matrix.shape[0]
        info = fisher.FisherInformation(
            matrix=matrix,
            eps_reg=info_doc["eps_reg"],
            n_scores=info_doc["n_scores"],
            factor=np.linalg.cholesky(matrix + ridge * np.eye(matrix.shape[0])),
        )
    else:
        info = fisher.estimate_information(scores, eps)

    out = Path(config["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    tmpdir = out.parent
    fd, tmp = tempfile.mkstemp(dir=tmpdir, prefix=f".{out.name}.")
    os.close(fd)
    fisher.export_features_csv(scores, info, tmp, normalize=normalize)
    os.replace(tmp, out)

    info_out = config["info_out"] or str(out.with_suffix(".info.json"))
    _write_json(
        Path(info_out),
        {
            "eps_reg": info.eps_reg,
            "n_scores": info.n_scores,
            "matrix": [[float(v) for v in row] for row in info.matrix],
            "normalize": normalize,
            "provenance": _provenance(config),
        },
    )
    _write_json(out.with_suffix(".provenance.json"), _provenance(config))
    print(f"scored {len(scores)} items -> {out}")
    return 0


def cmd_train(args) -> int:
    config = _effective_config(args, ["features", "out", "C", "seed", "max_epochs"], required=("features", "out"))
    subjects, _, X = fisher.load_features_csv(config["features"])
    C = config["C"] if config["C"] is not None else 1.0
    seed = config["seed"] if config["seed"] is not None else 0
    max_epochs = config["max_epochs"] if config["max_epochs"] is not None else 1000
    model = classify.train(X, subjects, C=C, seed=seed, max_epochs=max_epochs)
    _write_json(
        Path(config["out"]),
        {
            "classes": list(model.classes),
            "weights": [[float(v) for v in row] for row in model.weights],
            "C": model.C,
            "provenance": _provenance(config),
        },
    )
    print(f"trained {len(model.classes)}-class linear model -> {config['out']}")
    return 0


def cmd_identify(args) -> int:
    config = _effective_config(args, ["features", "classifier", "out", "group_k", "seed"], required=("features", "classifier", "out"))
    subjects, images, X = fisher.load_features_csv(config["features"])
    with open(config["classifier"]) as fh:
        doc = json.load(fh)
    model = classify.LinearModel(
        weights=np.asarray(doc["weights"], dtype=float),
        classes=tuple(doc["classes"]),
        C=float(doc["C"]),
    )
    k = config["group_k"] if config["group_k"] is not None else 1

    rows = []
    by_subject: dict[str, list[int]] = {}
    for idx, s in enumerate(subjects):
        by_subject.setdefault(s, []).append(idx)
    for subject, idxs in by_subject.items():
        for g in range(0, len(idxs) - k + 1, k):
            group = idxs[g : g + k]
            predicted = classify.identify(model, X[group])
            rows.append((subject, images[group[0]], predicted, predicted == subject))

    out = Path(config["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out.parent, prefix=f".{out.name}.")
    with os.fdopen(fd, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "group_first_image", "predicted", "correct"])
        for row in rows:
            writer.writerow([row[0], row[1], row[2], int(row[3])])
    os.replace(tmp, out)
    _write_json(out.with_suffix(".provenance.json"), _provenance(config))
    accuracy = float(np.mean([r[3] for r in rows])) if rows else float("nan")
    print(f"identified {len(rows)} groups (k={k}), accuracy {accuracy:.4f} -> {out}")
    return 0


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        rows, cols = text.lower().split("x")
        return int(rows), int(cols)
    except ValueError as exc:
        raise ValueError(f"--grid expects ROWSxCOLS, got {text!r}") from exc


def cmd_simulate(args) -> int:
    config = _effective_config(args, ["spec", "out", "seed", "grid"], required=("spec", "out"))
    with open(config["spec"]) as fh:
        spec_doc = json.load(fh)
    if config["seed"] is not None:
        spec_doc["seed"] = config["seed"]
    if config["grid"] is not None:
        spec_doc["grid_shape"] = list(_parse_grid(config["grid"]))
    spec = simulate.SyntheticCohortSpec.from_json_dict(spec_doc)
    cohort = simulate.generate_cohort(spec)
    out_dir = Path(config["out"])
    data = GazeDataset(
        items=cohort.data.items,
        saliency=cohort.data.saliency,
        meta={**(cohort.data.meta or {}), "provenance": _provenance(config)},
    )
    save_dataset(data, out_dir)
    print(f"simulated {len(data.items)} scanpaths -> {out_dir}")
    return 0


def cmd_eval(args) -> int:
    config = _effective_config(
        args,
        [
            "data",
            "family",
            "model",
            "classifier",
            "out",
            "seed",
            "threads",
            "splits",
            "cv_folds",
            "train_fraction",
            "max_k",
            "svm_max_epochs",
            "scenewalk_rho",
            "scenewalk_max_iter",
        ],
        required=("data", "out"),
    )
    if config["family"] is None:
        if config["model"] is None or config["classifier"] is None:
            raise ValueError("give either --family or both --model and --classifier")
        config["family"] = f"{config['classifier']}-{config['model']}"
    if config["family"] not in classify.FAMILIES:
        raise ValueError(f"family must be one of {classify.FAMILIES}")
    data = _load_dataset_or_fail(config["data"])
    defaults = classify.EvalProtocol()
    protocol = classify.EvalProtocol(
        train_fraction=config["train_fraction"] if config["train_fraction"] is not None else defaults.train_fraction,
        n_splits=config["splits"] if config["splits"] is not None else defaults.n_splits,
        cv_folds=config["cv_folds"] if config["cv_folds"] is not None else defaults.cv_folds,
        max_k=config["max_k"] if config["max_k"] is not None else defaults.max_k,
        seed=config["seed"] if config["seed"] is not None else defaults.seed,
        svm_max_epochs=config["svm_max_epochs"] if config["svm_max_epochs"] is not None else defaults.svm_max_epochs,
        scenewalk_rho=config["scenewalk_rho"] if config["scenewalk_rho"] is not None else defaults.scenewalk_rho,
        scenewalk_max_iter=config["scenewalk_max_iter"] if config["scenewalk_max_iter"] is not None else defaults.scenewalk_max_iter,
    )
    threads = config["threads"] if config["threads"] is not None else _default_threads()
    result = classify.run_protocol(data, config["family"], protocol, threads=threads)

    out_dir = Path(config["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = result.to_json_dict()
    doc["provenance"] = _provenance(config)
    _write_json(out_dir / "results.json", doc)
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".results.csv.")
    os.close(fd)
    classify.save_results_csv(result, tmp)
    os.replace(tmp, out_dir / "results.csv")
    k1 = result.curve.mean_at(1) if result.curve.entries else float("nan")
    print(f"evaluated {config['family']}: k=1 accuracy {k1:.4f} -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gazeid", description="Viewer identification from eye-gaze scanpaths."
    )
    parser.add_argument("--version", action="version", version=f"gazeid {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("detect", help="raw recording CSVs -> scanpath dataset")
    common(p)
    p.add_argument("--raw", default=None, help="directory of recording CSVs + sidecar JSON")
    p.add_argument("--out", default=None)
    p.add_argument("--multiplier", type=float, default=None, help="velocity threshold multiplier")
    p.add_argument("--min-dur", dest="min_dur", type=float, default=None, help="min saccade ms")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("fit", help="fit a generative model on a dataset")
    common(p)
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--model", choices=["markov", "markov-dyn", "scenewalk"], default=None)
    p.add_argument("--out", default=None, help="output model JSON")
    p.add_argument("--rho", type=float, default=None, help="scenewalk regularization")
    p.add_argument("--max-iter", dest="max_iter", type=int, default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("scores", help="Fisher feature matrix from a fitted model")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--model-json", dest="model_json", default=None)
    p.add_argument("--out", default=None, help="output feature CSV")
    p.add_argument("--eps-reg", dest="eps_reg", type=float, default=None)
    p.add_argument("--normalize", action="store_const", const=True, default=None)
    p.add_argument("--info-in", dest="info_in", default=None, help="reuse a stored information matrix")
    p.add_argument("--info-out", dest="info_out", default=None)
    p.set_defaults(func=cmd_scores)

    p = sub.add_parser("train", help="train the linear classifier on features")
    common(p)
    p.add_argument("--features", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--C", type=float, default=None)
    p.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("identify", help="predict viewers for feature groups")
    common(p)
    p.add_argument("--features", default=None)
    p.add_argument("--classifier", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--group-k", dest="group_k", type=int, default=None)
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("simulate", help="generate a synthetic cohort dataset")
    common(p)
    p.add_argument("--spec", default=None, help="cohort spec JSON")
    p.add_argument("--out", default=None)
    p.add_argument("--grid", default=None, help="ROWSxCOLS saliency grid override")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eval", help="run the evaluation protocol on a dataset")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--family", default=None, help="|".join(classify.FAMILIES))
    p.add_argument("--model", choices=["markov", "markov-dyn", "scenewalk"], default=None,
                   help="generative model (with --classifier, alternative to --family)")
    p.add_argument("--classifier", choices=["bayes", "fisher-svm"], default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--splits", type=int, default=None)
    p.add_argument("--cv-folds", dest="cv_folds", type=int, default=None)
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=None)
    p.add_argument("--max-k", dest="max_k", type=int, default=None)
    p.add_argument("--svm-max-epochs", dest="svm_max_epochs", type=int, default=None)
    p.add_argument("--scenewalk-rho", dest="scenewalk_rho", type=float, default=None)
    p.add_argument("--scenewalk-max-iter", dest="scenewalk_max_iter", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # single-line machine-parsable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

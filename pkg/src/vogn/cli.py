"""Command-line front end.

    vogn {train,eval,ood,sweep,continual} --config run.json [--seed N] [--workers P] [--out DIR]

The output directory is taken from ``--out``, else ``$VOGN_OUT_DIR``, else the
config's ``output_dir``. Exit codes: 0 success, 2 config error, 3 numeric failure.
Wall-clock times only appear in ``timing.csv`` and ``wall_time.csv`` so every
other file is a pure function of (seed, config, worker count).
"""
import argparse
import csv
import logging
import os
import sys

import numpy as np
from scipy import linalg

from . import metrics
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, load_config
from .continual import make_tasks, run_continual
from .data import AugmentationSpec, load_csv, load_digits, load_idx, make_synthetic
from .network import Network, layer_from_dict, mlp
from .optimizers import OptimizerState
from .parallel import WorkerPlan
from .posterior import predict_mc, write_predictions
from .tensor import RngStream
from .training import DivergenceError, make_posterior, train

log = logging.getLogger("vogn")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
OUT_ENV = "VOGN_OUT_DIR"

# stream tags under the run seed
_SPLIT, _INIT, _EVAL = 11, 12, 13

LOG_FIELDS = ["epoch", "lr", "tau", "train_loss", "train_acc", "train_nll", "val_acc", "val_nll"]


# -- builders -----------------------------------------------------------------

def build_dataset(spec, seed):
    seed = spec["seed"] if spec["seed"] is not None else seed
    kind = spec["kind"]
    if kind in ("two-moons", "gaussian-blobs"):
        data = make_synthetic(kind, spec["n"], spec["noise"], seed, n_classes=spec["n_classes"],
                              centers=spec["centers"], shift=spec["shift"])
    elif kind == "digits":
        data = load_digits(flat=spec["flat"])
    else:
        try:
            if kind == "idx":
                data = load_idx(spec["images"], spec["labels"], n_classes=spec["n_classes"])
            else:
                data = load_csv(spec["path"], spec["label_column"], n_classes=spec["n_classes"])
        except OSError as e:
            raise ConfigError("dataset", f"cannot read {e.filename}: {e.strerror}") from None
        if kind == "idx" and spec["flat"]:
            data.x = data.x.reshape(len(data), -1)
    if spec["name"]:
        data.name = spec["name"]
    return data


def split_dataset(data, n_val, seed):
    if n_val == 0:
        return data, None
    if n_val >= len(data):
        raise ConfigError("dataset.n_val", f"{n_val} validation examples leaves no training data (n={len(data)})")
    return data.split(n_val, RngStream(seed, _SPLIT))


def build_network(arch):
    try:
        if arch["kind"] == "mlp":
            return mlp(arch["sizes"], batchnorm=arch["batchnorm"])
        return Network([layer_from_dict(d) for d in arch["layers"]], tuple(arch["input_shape"]))
    except (TypeError, ValueError) as e:
        raise ConfigError("architecture", str(e)) from None


def check_compatible(model, data, where="dataset"):
    if tuple(data.x.shape[1:]) != tuple(model.input_shape):
        raise ConfigError(where, f"inputs have shape {data.x.shape[1:]} but the network expects {model.input_shape}")
    if data.n_classes != model.n_classes:
        raise ConfigError(where, f"{data.n_classes} classes but the network has {model.n_classes} outputs")


def make_plan(cfg, mc_samples=None):
    return WorkerPlan(cfg.parallel["workers"], mc_samples or cfg.hyperparams.mc_samples,
                      cfg.parallel["rng_mode"], cfg.seed)


def _augmentation(cfg):
    aug = cfg.training["augmentation"]
    return None if aug is None else AugmentationSpec(**aug)


# -- file helpers -------------------------------------------------------------

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_rows(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fields, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k)) for k in fields})


def _checkpoint_path(cfg, out):
    return cfg.evaluation["checkpoint"] or os.path.join(out, "checkpoint.ckpt")


def _load_for_eval(cfg, out):
    path = _checkpoint_path(cfg, out)
    if not os.path.exists(path):
        raise ConfigError("evaluation.checkpoint", f"no checkpoint at {path}")
    try:
        ck = load_checkpoint(path)
    except (ValueError, KeyError) as e:
        raise ConfigError("evaluation.checkpoint", str(e)) from None
    model = ck["model"]
    expected = build_network(cfg.architecture)
    if expected.spec() != model.spec():
        raise ConfigError("architecture", f"checkpoint {path} was written for a different architecture")
    post = make_posterior(model, ck["optimizer"], ck["state"], ck["hp"], ck["prior"])
    return model, post


def _eval_data(cfg):
    data = build_dataset(cfg.dataset, cfg.seed)
    train_set, val = split_dataset(data, cfg.dataset["n_val"], cfg.seed)
    return train_set, (val if val is not None else train_set)


def _predict(cfg, model, post, data, tag=0):
    return predict_mc(model, post, data.x, cfg.evaluation["mc_samples"], RngStream(cfg.seed, _EVAL).child(tag))


def write_report(out, probs, data, n_bins, prefix=""):
    rep = metrics.evaluate(probs, data.y, n_bins)
    write_predictions(os.path.join(out, f"{prefix}predictions.csv"), probs, data.y)
    metrics.write_json(os.path.join(out, f"{prefix}metrics.json"), rep.summary())
    metrics.write_calibration_csv(os.path.join(out, f"{prefix}calibration.csv"), rep.calibration)
    metrics.write_histogram_csv(os.path.join(out, f"{prefix}entropy_hist.csv"), rep.entropy_counts, rep.entropy_edges)
    if rep.auroc is not None:
        conf = probs.max(axis=1)
        metrics.write_roc_csv(os.path.join(out, f"{prefix}roc.csv"), conf, probs.argmax(axis=1) == data.y)
    return rep


# -- subcommands --------------------------------------------------------------

def cmd_train(cfg, out):
    os.makedirs(out, exist_ok=True)
    data = build_dataset(cfg.dataset, cfg.seed)
    train_set, val = split_dataset(data, cfg.dataset["n_val"], cfg.seed)
    model = build_network(cfg.architecture)
    check_compatible(model, train_set)
    model.init_params(RngStream(cfg.seed, _INIT))
    with open(os.path.join(out, "config.json"), "w") as fh:
        fh.write(cfg.to_json())
    tr = cfg.training
    res = train(model, train_set, cfg.hyperparams, cfg.optimizer, epochs=tr["epochs"],
                batch_size=tr["batch_size"], plan=make_plan(cfg), seed=cfg.seed, val_data=val,
                val_samples=tr["val_samples"], augmentation=_augmentation(cfg), eval_every=tr["eval_every"])
    write_rows(os.path.join(out, "log.csv"), LOG_FIELDS, res.history)
    write_rows(os.path.join(out, "wall_time.csv"), ["epoch", "seconds"], res.history)
    write_rows(os.path.join(out, "timing.csv"), ["epoch", "step", "batch", "seconds"], res.timings)
    save_checkpoint(os.path.join(out, "checkpoint.ckpt"), model, cfg.optimizer, cfg.hyperparams, res.state,
                    res.prior, meta={"seed": cfg.seed, "workers": cfg.parallel["workers"], "dataset": train_set.name})
    post = res.posterior()
    eval_set = val if val is not None else train_set
    rep = write_report(out, _predict(cfg, model, post, eval_set), eval_set, cfg.evaluation["n_bins"])
    train_probs = _predict(cfg, model, post, train_set, tag=1)
    summary = rep.summary()
    summary["train_accuracy"] = float(np.mean(train_probs.argmax(axis=1) == train_set.y))
    summary["train_nll"] = metrics.nll(train_probs, train_set.y)
    metrics.write_json(os.path.join(out, "metrics.json"), summary)
    return summary


def cmd_eval(cfg, out):
    os.makedirs(out, exist_ok=True)
    model, post = _load_for_eval(cfg, out)
    _, data = _eval_data(cfg)
    check_compatible(model, data)
    return write_report(out, _predict(cfg, model, post, data), data, cfg.evaluation["n_bins"], "eval_").summary()


def _slug(data, i):
    name = data.name if data.name and "/" not in data.name and len(data.name) < 40 else f"out{i}"
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)


def cmd_ood(cfg, out):
    if not cfg.ood["datasets"]:
        raise ConfigError("ood.datasets", "need at least one out-of-distribution dataset")
    os.makedirs(out, exist_ok=True)
    model, post = _load_for_eval(cfg, out)
    _, data_in = _eval_data(cfg)
    check_compatible(model, data_in)
    ent_in = metrics.predictive_entropy(_predict(cfg, model, post, data_in))
    counts, edges = metrics.entropy_histogram(ent_in, model.n_classes)
    metrics.write_histogram_csv(os.path.join(out, "entropy_in.csv"), counts, edges)
    summary = {"in": {"name": data_in.name, "n": len(data_in), "mean_entropy": float(ent_in.mean())}, "pairs": []}
    for i, spec in enumerate(cfg.ood["datasets"]):
        data_out = build_dataset(spec, cfg.seed)
        check_compatible(model, data_out, f"ood.datasets[{i}]")
        # same weight draws as the in-distribution set, so only the inputs differ
        ent_out = metrics.predictive_entropy(_predict(cfg, model, post, data_out))
        slug = f"{i}_{_slug(data_out, i)}"
        counts, edges = metrics.entropy_histogram(ent_out, model.n_classes)
        metrics.write_histogram_csv(os.path.join(out, f"entropy_out_{slug}.csv"), counts, edges)
        # low entropy = confident = scored as in-distribution
        scores = np.r_[-ent_in, -ent_out]
        positive = np.r_[np.ones(len(ent_in), bool), np.zeros(len(ent_out), bool)]
        metrics.write_roc_csv(os.path.join(out, f"roc_{slug}.csv"), scores, positive)
        summary["pairs"].append({
            "out": data_out.name,
            "n": len(data_out),
            "mean_entropy": float(ent_out.mean()),
            "auroc": metrics.auroc(scores, positive),
            "fpr_at_95tpr": metrics.fpr_at_95_tpr(-ent_in, -ent_out),
        })
    metrics.write_json(os.path.join(out, "ood_summary.json"), summary)
    return summary


SWEEP_FIELDS = ["value", "train_acc", "val_acc", "gap", "train_nll", "val_nll", "val_ece"]


def cmd_sweep(cfg, out):
    values = cfg.sweep["values"]
    if not values:
        raise ConfigError("sweep.values", "need at least one value")
    os.makedirs(out, exist_ok=True)
    rows = []
    for v in values:
        hp = cfg.hyperparams.to_dict()
        if cfg.sweep["axis"] == "prior-variance":
            hp["prior_prec"] = 1.0 / v
        else:
            hp["mc_samples"] = v
        sub = cfg.replace(hyperparams=hp)
        run_dir = os.path.join(out, f"{cfg.sweep['axis']}={v}")
        s = cmd_train(sub, run_dir)
        rows.append({"value": v, "train_acc": s["train_accuracy"], "val_acc": s["accuracy"],
                     "gap": s["train_accuracy"] - s["accuracy"], "train_nll": s["train_nll"],
                     "val_nll": s["nll"], "val_ece": s["ece"]})
    write_rows(os.path.join(out, "sweep.csv"), SWEEP_FIELDS, rows)
    return rows


def cmd_continual(cfg, out):
    if cfg.optimizer != "vogn":
        raise ConfigError("optimizer", "continual learning runs VOGN only")
    os.makedirs(out, exist_ok=True)
    data = build_dataset(cfg.dataset, cfg.seed)
    train_set, test_set = split_dataset(data, cfg.dataset["n_val"], cfg.seed)
    if test_set is None:
        raise ConfigError("dataset.n_val", "continual learning needs a held-out test split (n_val > 0)")
    probe = build_network(cfg.architecture)
    check_compatible(probe, train_set)
    co = cfg.continual
    seq = make_tasks(train_set, test_set, co["tasks"], cfg.seed)

    def make_model(rng):
        m = build_network(cfg.architecture)
        m.init_params(rng)
        return m

    res = run_continual(seq, cfg.hyperparams, make_model, epochs=cfg.training["epochs"],
                        batch_size=cfg.training["batch_size"], seed=cfg.seed, chain=co["chain"],
                        reset_mean=co["reset_mean"], init_precision=co["init_precision"],
                        test_samples=co["test_samples"], plan=None, workers=cfg.parallel["workers"],
                        rng_mode=cfg.parallel["rng_mode"])
    res.write_csv(os.path.join(out, "accuracy.csv"))
    for t, post in enumerate(res.posteriors):
        model = build_network(cfg.architecture)
        model.params = [np.array(p, copy=True) for p in post.mean]
        state = OptimizerState([np.zeros_like(p) for p in post.mean], list(post.scale), n_eff=post.n_eff)
        state.set_tempering(cfg.hyperparams.tau, cfg.hyperparams.prior_prec)
        save_checkpoint(os.path.join(out, f"task_{t}.ckpt"), model, "vogn", cfg.hyperparams, state, post.prior,
                        meta={"seed": cfg.seed, "task": t})
    return {"accuracy": res.accuracy.tolist(), "average": res.average.tolist()}


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ood": cmd_ood, "sweep": cmd_sweep, "continual": cmd_continual}


def build_parser():
    p = argparse.ArgumentParser(prog="vogn", description="Train and evaluate Bayesian deep networks with VOGN.")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--workers", type=int, help="override the number of simulated workers")
    p.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve(args):
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.workers is not None:
        changes["parallel"] = dict(cfg.parallel, workers=args.workers)
    if changes:
        cfg = cfg.replace(**changes)
    out = args.out or os.environ.get(OUT_ENV) or cfg.output_dir
    return cfg, out


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        cfg, out = resolve(args)
        result = COMMANDS[args.command](cfg, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FloatingPointError, linalg.LinAlgError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    if args.command in ("train", "eval"):
        log.info("%s: accuracy=%.4f nll=%.4f ece=%.4f -> %s", args.command, result["accuracy"],
                 result["nll"], result["ece"], out)
    else:
        log.info("%s finished -> %s", args.command, out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

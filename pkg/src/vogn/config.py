"""Run configuration: a versioned JSON document validated before any work starts.

Every section has a fixed set of keys with defaults; unknown keys anywhere are
rejected. :meth:`RunConfig.to_dict` emits the fully-populated form, so
``parse(serialize(parse(d))) == parse(d)``.
"""
import copy
import json
from dataclasses import dataclass

from .optimizers import Hyperparams
from .training import OPTIMIZERS

SCHEMA_VERSION = 1

DATASET_KINDS = ("two-moons", "gaussian-blobs", "digits", "idx", "csv")

# section -> {key: default}
DATASET_DEFAULTS = {
    "kind": "two-moons",
    "name": None,
    "n": 500,
    "noise": 0.1,
    "n_classes": 3,
    "centers": None,
    "shift": None,
    "seed": None,  # None: use the run seed
    "n_val": 100,
    "flat": True,
    "images": None,
    "labels": None,
    "path": None,
    "label_column": "label",
}
ARCH_DEFAULTS = {"kind": "mlp", "sizes": [2, 32, 32, 2], "batchnorm": False, "layers": None, "input_shape": None}
TRAINING_DEFAULTS = {"epochs": 50, "batch_size": 64, "val_samples": 10, "eval_every": 1, "augmentation": None}
AUGMENT_DEFAULTS = {"pad": 0, "crop": None, "hflip": True, "hflip_prob": 0.5}
PARALLEL_DEFAULTS = {"workers": 1, "rng_mode": "example"}
EVAL_DEFAULTS = {"checkpoint": None, "mc_samples": 10, "n_bins": 20}
OOD_DEFAULTS = {"datasets": []}
SWEEP_DEFAULTS = {"axis": "prior-variance", "values": []}
CONTINUAL_DEFAULTS = {"tasks": 3, "chain": True, "reset_mean": True, "init_precision": 1e6, "test_samples": 100}

TOP_KEYS = ("schema_version", "seed", "output_dir", "optimizer", "hyperparams", "dataset", "architecture",
            "training", "parallel", "evaluation", "ood", "sweep", "continual")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key path."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


def _section(raw, defaults, where):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(where, "must be an object")
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}", "unknown key")
    out = copy.deepcopy(defaults)
    out.update(copy.deepcopy(raw))
    return out


def _int(v, where, lo=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(where, f"expected an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigError(where, f"must be >= {lo}")
    return v


def _num(v, where, lo=None, strict=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(where, f"expected a number, got {v!r}")
    if lo is not None and (v <= lo if strict else v < lo):
        raise ConfigError(where, f"must be {'>' if strict else '>='} {lo}")
    return float(v)


def _bool(v, where):
    if not isinstance(v, bool):
        raise ConfigError(where, f"expected true/false, got {v!r}")
    return v


def _str(v, where, choices=None, optional=False):
    if v is None and optional:
        return None
    if not isinstance(v, str):
        raise ConfigError(where, f"expected a string, got {v!r}")
    if choices is not None and v not in choices:
        raise ConfigError(where, f"must be one of {list(choices)}, got {v!r}")
    return v


def _vector(v, where, optional=True):
    if v is None and optional:
        return None
    if not isinstance(v, list):
        raise ConfigError(where, "expected a list")
    return v


def parse_dataset(raw, where="dataset"):
    d = _section(raw, DATASET_DEFAULTS, where)
    _str(d["kind"], f"{where}.kind", DATASET_KINDS)
    _str(d["name"], f"{where}.name", optional=True)
    _int(d["n"], f"{where}.n", 2)
    d["noise"] = _num(d["noise"], f"{where}.noise", 0)
    _int(d["n_classes"], f"{where}.n_classes", 2)
    _vector(d["centers"], f"{where}.centers")
    _vector(d["shift"], f"{where}.shift")
    if d["seed"] is not None:
        _int(d["seed"], f"{where}.seed", 0)
    _int(d["n_val"], f"{where}.n_val", 0)
    _bool(d["flat"], f"{where}.flat")
    for k in ("images", "labels", "path"):
        _str(d[k], f"{where}.{k}", optional=True)
    _str(d["label_column"], f"{where}.label_column")
    if d["kind"] == "idx" and (d["images"] is None or d["labels"] is None):
        raise ConfigError(f"{where}.images", "idx datasets need both 'images' and 'labels'")
    if d["kind"] == "csv" and d["path"] is None:
        raise ConfigError(f"{where}.path", "csv datasets need 'path'")
    return d


def parse_architecture(raw):
    a = _section(raw, ARCH_DEFAULTS, "architecture")
    _str(a["kind"], "architecture.kind", ("mlp", "layers"))
    _bool(a["batchnorm"], "architecture.batchnorm")
    if a["kind"] == "mlp":
        sizes = _vector(a["sizes"], "architecture.sizes", optional=False)
        if len(sizes) < 2:
            raise ConfigError("architecture.sizes", "need at least input and output sizes")
        for i, s in enumerate(sizes):
            _int(s, f"architecture.sizes[{i}]", 1)
    else:
        layers = _vector(a["layers"], "architecture.layers", optional=False)
        for i, layer in enumerate(layers):
            if not isinstance(layer, dict) or "kind" not in layer:
                raise ConfigError(f"architecture.layers[{i}]", "expected an object with 'kind'")
        shape = _vector(a["input_shape"], "architecture.input_shape", optional=False)
        for i, s in enumerate(shape):
            _int(s, f"architecture.input_shape[{i}]", 1)
    return a


@dataclass
class RunConfig:
    schema_version: int
    seed: int
    output_dir: str
    optimizer: str
    hyperparams: Hyperparams
    dataset: dict
    architecture: dict
    training: dict
    parallel: dict
    evaluation: dict
    ood: dict
    sweep: dict
    continual: dict

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        unknown = sorted(set(raw) - set(TOP_KEYS))
        if unknown:
            raise ConfigError(unknown[0], "unknown key")
        if "schema_version" not in raw:
            raise ConfigError("schema_version", "required")
        if raw["schema_version"] != SCHEMA_VERSION:
            raise ConfigError("schema_version", f"unsupported version {raw['schema_version']!r}; expected {SCHEMA_VERSION}")
        seed = _int(raw.get("seed", 0), "seed", 0)
        out = _str(raw.get("output_dir", "runs/default"), "output_dir")
        opt = _str(raw.get("optimizer", "vogn"), "optimizer", OPTIMIZERS)
        hp_raw = raw.get("hyperparams", {})
        if not isinstance(hp_raw, dict):
            raise ConfigError("hyperparams", "must be an object")
        try:
            hp = Hyperparams.from_dict(hp_raw)
        except (TypeError, ValueError) as e:
            raise ConfigError("hyperparams", str(e)) from None

        tr = _section(raw.get("training"), TRAINING_DEFAULTS, "training")
        _int(tr["epochs"], "training.epochs", 1)
        _int(tr["batch_size"], "training.batch_size", 1)
        _int(tr["val_samples"], "training.val_samples", 1)
        _int(tr["eval_every"], "training.eval_every", 1)
        if tr["augmentation"] is not None:
            aug = _section(tr["augmentation"], AUGMENT_DEFAULTS, "training.augmentation")
            _int(aug["pad"], "training.augmentation.pad", 0)
            if aug["crop"] is not None:
                _int(aug["crop"], "training.augmentation.crop", 1)
            _bool(aug["hflip"], "training.augmentation.hflip")
            aug["hflip_prob"] = _num(aug["hflip_prob"], "training.augmentation.hflip_prob", 0)
            tr["augmentation"] = aug

        par = _section(raw.get("parallel"), PARALLEL_DEFAULTS, "parallel")
        _int(par["workers"], "parallel.workers", 1)
        _str(par["rng_mode"], "parallel.rng_mode", ("example", "worker"))

        ev = _section(raw.get("evaluation"), EVAL_DEFAULTS, "evaluation")
        _str(ev["checkpoint"], "evaluation.checkpoint", optional=True)
        _int(ev["mc_samples"], "evaluation.mc_samples", 1)
        _int(ev["n_bins"], "evaluation.n_bins", 1)

        ood = _section(raw.get("ood"), OOD_DEFAULTS, "ood")
        _vector(ood["datasets"], "ood.datasets", optional=False)
        ood["datasets"] = [parse_dataset(d, f"ood.datasets[{i}]") for i, d in enumerate(ood["datasets"])]

        sw = _section(raw.get("sweep"), SWEEP_DEFAULTS, "sweep")
        _str(sw["axis"], "sweep.axis", ("prior-variance", "mc-samples"))
        _vector(sw["values"], "sweep.values", optional=False)
        for i, v in enumerate(sw["values"]):
            if sw["axis"] == "mc-samples":
                _int(v, f"sweep.values[{i}]", 1)
            else:
                _num(v, f"sweep.values[{i}]", 0, strict=True)

        co = _section(raw.get("continual"), CONTINUAL_DEFAULTS, "continual")
        _int(co["tasks"], "continual.tasks", 1)
        _bool(co["chain"], "continual.chain")
        _bool(co["reset_mean"], "continual.reset_mean")
        co["init_precision"] = _num(co["init_precision"], "continual.init_precision", 0, strict=True)
        _int(co["test_samples"], "continual.test_samples", 1)

        return cls(SCHEMA_VERSION, seed, out, opt, hp, parse_dataset(raw.get("dataset")),
                   parse_architecture(raw.get("architecture")), tr, par, ev, ood, sw, co)

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "optimizer": self.optimizer,
            "hyperparams": self.hyperparams.to_dict(),
            "dataset": copy.deepcopy(self.dataset),
            "architecture": copy.deepcopy(self.architecture),
            "training": copy.deepcopy(self.training),
            "parallel": dict(self.parallel),
            "evaluation": dict(self.evaluation),
            "ood": copy.deepcopy(self.ood),
            "sweep": copy.deepcopy(self.sweep),
            "continual": dict(self.continual),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return RunConfig.from_dict(d)


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as e:
        raise ConfigError("--config", f"cannot read {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError("--config", f"{path} is not valid JSON (line {e.lineno}, column {e.colno})") from None
    return RunConfig.from_dict(raw)

"""Config-driven training runs and their on-disk artifacts.

A run directory holds:

    config.json        the RunConfig snapshot (re-running it reproduces the run)
    metrics.csv        one row per epoch, epoch 0 = evaluation before training
    rates.csv          mean applied drop rate per training step and hooked layer
    model_state.json   architecture plus every weight, as exact float reprs
    run_meta.json      wall clock, sizes, rate summary; written last
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import data as data_mod
from .errors import ConfigError, StateError
from .nn import (Conv2D, Dense, Flatten, ModelSpec, ReLU, SoftmaxCrossEntropy, backward,
                 cross_entropy_per_sample, forward, init_states, logits_of, parameters)
from .optim import AdamWState, CosineSchedule, adamw_step, cosine_lr
from .bound import time_mean
from .regularizers import build_regularizer

# run protocol of the original experiments, recorded next to desk-scale deviations
REFERENCE_PROTOCOL = {"epochs": 50, "batch_size": 8, "optimizer": "AdamW",
                      "schedule": "cosine annealing"}


def _strict(cls, d: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class ModelConfig:
    kind: str = "mlp"
    hidden: list = field(default_factory=lambda: [256])
    # conv stages as [out_channels, kernel, stride]
    conv: list = field(default_factory=list)

    def __post_init__(self):
        self.hidden = [int(h) for h in self.hidden]
        self.conv = [[int(v) for v in c] for c in self.conv]
        if self.kind not in ("mlp", "cnn"):
            raise ConfigError(f"model.kind must be 'mlp' or 'cnn', got {self.kind!r}")
        if self.kind == "cnn" and not self.conv:
            raise ConfigError("cnn model needs at least one conv stage")
        if any(len(c) != 3 for c in self.conv):
            raise ConfigError("conv stages are [out_channels, kernel, stride]")


@dataclass
class OptimConfig:
    lr_max: float = 1e-3
    lr_min: float = 0.0
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    weight_decay: float = 0.01
    schedule_per_epoch: bool = False

    def __post_init__(self):
        self.betas = [float(b) for b in self.betas]
        if len(self.betas) != 2:
            raise ConfigError("optimizer.betas needs two values")


@dataclass
class RunConfig:
    dataset: str = "blobs"
    subset_per_class: Optional[int] = None
    test_subset_per_class: Optional[int] = None
    blobs: dict = field(default_factory=dict)
    model: ModelConfig = field(default_factory=ModelConfig)
    regularizer: dict = field(default_factory=lambda: {"kind": "none"})
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 5
    batch_size: int = 32
    drop_last: bool = True
    seed: int = 0
    loss_clip_B: float = 1.0
    delta: float = 0.05
    output_dir: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = _strict(ModelConfig, self.model, "model")
        if isinstance(self.optimizer, dict):
            self.optimizer = _strict(OptimConfig, self.optimizer, "optimizer")
        if self.dataset not in ("mnist", "cifar10", "blobs"):
            raise ConfigError(f"dataset must be mnist, cifar10 or blobs, got {self.dataset!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.loss_clip_B > 0:
            raise ConfigError("loss_clip_B must be positive")
        if "kind" not in self.regularizer:
            raise ConfigError("regularizer needs a 'kind'")
        build_regularizer(self.regularizer)  # validates parameters

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _strict(cls, dict(d), "config")

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(raw)


PROFILES = ("mnist-desk", "cifar-desk", "blobs-ci")


def load_profile(name: str) -> RunConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {', '.join(PROFILES)}")
    text = resources.files("magdrop_lab").joinpath("profiles", f"{name}.json").read_text()
    return RunConfig.from_dict(json.loads(text))


def derive_seed(seed: int, stream: str) -> int:
    """Independent integer seed for a named stream (init, shuffle, mask)."""
    return int(np.random.SeedSequence([seed, zlib.crc32(stream.encode())]).generate_state(1)[0])


# -- model construction --------------------------------------------------------

def build_model(cfg: ModelConfig, dataset: data_mod.Dataset, seed: int) -> ModelSpec:
    layers = []
    if cfg.kind == "mlp":
        shape = (math.prod(dataset.image_shape),)
        width = shape[0]
    else:
        shape = tuple(dataset.image_shape)
        ch = shape[0]
        for out_ch, k, s in cfg.conv:
            layers += [Conv2D(ch, out_ch, k, s), ReLU()]
            ch = out_ch
        layers.append(Flatten())
        width = math.prod(ModelSpec(shape, layers + [SoftmaxCrossEntropy()]).shapes[-2])
    for h in cfg.hidden:
        layers += [Dense(width, h), ReLU()]
        width = h
    layers += [Dense(width, dataset.num_classes), SoftmaxCrossEntropy()]
    return ModelSpec(shape, layers, seed=seed)


def model_to_dict(model: ModelSpec) -> dict:
    return {"input_shape": list(model.input_shape), "seed": model.seed,
            "layers": [{"type": type(layer).__name__, **asdict(layer)} for layer in model.layers]}


_LAYER_TYPES = {c.__name__: c for c in (Dense, ReLU, Conv2D, Flatten, SoftmaxCrossEntropy)}


def model_from_dict(d: dict) -> ModelSpec:
    layers = []
    for spec in d["layers"]:
        spec = dict(spec)
        kind = spec.pop("type")
        if kind not in _LAYER_TYPES:
            raise ConfigError(f"unknown layer type {kind!r}")
        layers.append(_LAYER_TYPES[kind](**spec))
    return ModelSpec(tuple(d["input_shape"]), layers, seed=d["seed"])


def save_model_state(path, model: ModelSpec, states) -> None:
    params = [{"layer": i, "weights": states[i].weights.tolist(), "bias": states[i].bias.tolist()}
              for i in model.param_layer_indices()]
    Path(path).write_text(json.dumps({"model": model_to_dict(model), "params": params}))


def load_model_state(path):
    d = json.loads(Path(path).read_text())
    model = model_from_dict(d["model"])
    states = init_states(model)
    for p in d["params"]:
        st = states[p["layer"]]
        st.weights = np.array(p["weights"], dtype=np.float64).reshape(st.weights.shape)
        st.bias = np.array(p["bias"], dtype=np.float64).reshape(st.bias.shape)
    return model, states


# -- training ------------------------------------------------------------------

@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)
    rate_steps: list = field(default_factory=list)
    hooked_layers: list = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def final(self) -> dict:
        return self.rows[-1]


def evaluate(model, states, dataset, chunk: int = 1000) -> tuple:
    """Evaluation-mode ``(accuracy %, mean cross-entropy)`` over a dataset."""
    correct = 0
    total_loss = 0.0
    for start in range(0, len(dataset), chunk):
        x = dataset.images[start:start + chunk]
        y = dataset.labels[start:start + chunk]
        logits = logits_of(model, states, x)
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
        total_loss += float(np.sum(cross_entropy_per_sample(logits, y)))
    n = max(len(dataset), 1)
    return 100.0 * correct / n, total_loss / n


def load_datasets(cfg: RunConfig, root=None):
    train = data_mod.load_named(cfg.dataset, "train", root, cfg.subset_per_class, cfg.blobs)
    test = data_mod.load_named(cfg.dataset, "test", root, cfg.test_subset_per_class, cfg.blobs)
    return train, test


def train(cfg: RunConfig, train_ds, test_ds, log=None):
    """Train from scratch; returns ``(model, states, regularizer, metrics)``."""
    t0 = time.perf_counter()
    model = build_model(cfg.model, train_ds, derive_seed(cfg.seed, "init"))
    states = init_states(model)
    reg = build_regularizer(cfg.regularizer, seed=derive_seed(cfg.seed, "mask"))
    shuffle_seed = derive_seed(cfg.seed, "shuffle")
    hooked = model.relu_indices()

    def make_hook(i):
        # previous step's activation gradient; None before the first backward
        return lambda idx, a: reg.hook(idx, a, states[idx].last_activation_grad)

    hooks = {i: make_hook(i) for i in hooked}

    n = len(train_ds)
    steps_per_epoch = n // cfg.batch_size if cfg.drop_last else math.ceil(n / cfg.batch_size)
    if steps_per_epoch < 1:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds the {n} training samples")
    oc = cfg.optimizer
    total = cfg.epochs if oc.schedule_per_epoch else cfg.epochs * steps_per_epoch
    schedule = CosineSchedule(oc.lr_max, oc.lr_min, total)
    opt = AdamWState(lr=oc.lr_max, betas=tuple(oc.betas), eps=oc.eps, weight_decay=oc.weight_decay)

    metrics = RunMetrics(hooked_layers=hooked)

    def record(epoch, rate_means):
        tr_acc, tr_loss = evaluate(model, states, train_ds)
        te_acc, te_loss = evaluate(model, states, test_ds)
        row = {"epoch": epoch, "train_acc": tr_acc, "test_acc": te_acc,
               "train_loss": tr_loss, "test_loss": te_loss, "gen_gap": tr_acc - te_acc}
        for i in hooked:
            row[f"rate_layer{i}"] = rate_means.get(i)
        metrics.rows.append(row)
        if log:
            log(f"epoch {epoch}: train {tr_acc:.2f}% test {te_acc:.2f}% gap {tr_acc - te_acc:.2f}")

    record(0, {})
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        seen = {i: len(reg.rate_trace.get(i, [])) for i in hooked}
        if oc.schedule_per_epoch:
            opt.lr = cosine_lr(schedule, epoch - 1)
        for images, labels in data_mod.batches(train_ds, cfg.batch_size, shuffle_seed, epoch,
                                               cfg.drop_last):
            if not oc.schedule_per_epoch:
                opt.lr = cosine_lr(schedule, step)
            before = {i: len(reg.rate_trace.get(i, [])) for i in hooked}
            forward(model, states, images, labels, hooks)
            grads = reg.transform_grads(backward(model, states, labels))
            adamw_step(opt, parameters(model, states), grads)
            step += 1
            row = {}
            for i in hooked:
                trace = reg.rate_trace.get(i, [])
                row[i] = trace[-1] if len(trace) > before[i] else None
            metrics.rate_steps.append(row)
        means = {}
        for i in hooked:
            new = reg.rate_trace.get(i, [])[seen[i]:]
            means[i] = time_mean(new) if new else None
        record(epoch, means)
    metrics.wall_clock = time.perf_counter() - t0
    return model, states, reg, metrics



# -- run directories -----------------------------------------------------------

def _csv_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path, header: list, rows: list) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_csv_value(v) for v in row])
    Path(path).write_bytes(buf.getvalue().encode())


def read_csv(path) -> list:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def execute_run(cfg: RunConfig, root=None, log=None) -> RunMetrics:
    """Train according to ``cfg`` and write every artifact to ``cfg.output_dir``."""
    train_ds, test_ds = load_datasets(cfg, root)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta_path = out / "run_meta.json"
    if meta_path.exists():
        meta_path.unlink()
    (out / "config.json").write_text(cfg.to_json())

    model, states, reg, metrics = train(cfg, train_ds, test_ds, log=log)

    hooked = metrics.hooked_layers
    cols = ["epoch", "train_acc", "test_acc", "train_loss", "test_loss", "gen_gap"]
    cols += [f"rate_layer{i}" for i in hooked]
    _write_csv(out / "metrics.csv", cols, [[r[c] for c in cols] for r in metrics.rows])
    _write_csv(out / "rates.csv", ["step"] + [f"layer{i}" for i in hooked],
               [[s + 1] + [row[i] for i in hooked] for s, row in enumerate(metrics.rate_steps)])
    save_model_state(out / "model_state.json", model, states)

    layer_rates = {}
    for i in hooked:
        trace = reg.rate_trace.get(i, [])
        layer_rates[str(i)] = time_mean(trace) if trace else None
    present = [v for v in layer_rates.values() if v is not None]
    mean_rate = time_mean(present) if present else None
    meta = {
        "completed": True,
        "wall_clock_seconds": metrics.wall_clock,
        "train_size": len(train_ds),
        "test_size": len(test_ds),
        "input_norm_bound": train_ds.input_norm_bound,
        "regularizer": reg.name,
        "mean_applied_rate": mean_rate,
        "layer_mean_applied_rate": layer_rates,
        "reference_protocol": REFERENCE_PROTOCOL,
        "deviations": {"epochs": cfg.epochs, "batch_size": cfg.batch_size,
                       "loss_clip_B": cfg.loss_clip_B},
    }
    if reg.name == "magdrop":
        st = reg.state
        ceiling = st.p_base / (1.0 + st.beta)
        meta["rate_ceiling"] = ceiling
        meta["rate_ceiling_exceeded"] = bool(mean_rate is not None and mean_rate > ceiling)
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return metrics


def load_run(run_dir):
    """Reload ``(config, model, states, rate_trace)`` from a finished run."""
    run_dir = Path(run_dir)
    meta_path = run_dir / "run_meta.json"
    if not meta_path.exists() or not json.loads(meta_path.read_text()).get("completed"):
        raise StateError(f"{run_dir}: run has not completed; bounds are measured after training")
    cfg = RunConfig.from_json(run_dir / "config.json")
    model, states = load_model_state(run_dir / "model_state.json")
    trace = {}
    for row in read_csv(run_dir / "rates.csv"):
        for key, val in row.items():
            if key.startswith("layer") and val != "":
                trace.setdefault(int(key[5:]), []).append(float(val))
    return cfg, model, states, trace

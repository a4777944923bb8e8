"""Experiment configuration: flat ``key=value`` text (or JSON) and presets.

Keys are dotted by section, e.g. ``optim.eta=0.01``. Every field
round-trips through :func:`dumps` / :func:`loads` without loss.
"""
import json
import os
from dataclasses import dataclass, field, fields, replace
from typing import Optional

from .diagnostics import DiagConfig
from .errors import ConfigError
from .fields import ActivationKind, NetworkSpec, PositionalEncoding
from .optim import OptimizerConfig
from .tasks import SHAPES

TASK_KINDS = ("1d", "image", "occupancy", "quadratic")
IO_DIMS = {"1d": (1, 1), "image": (2, 3), "occupancy": (3, 1)}


@dataclass
class TaskConfig:
    kind: str = "image"
    source: str = "builtin:chirp"
    size: int = 64
    shape: str = "sphere"
    n_points: int = 256
    n_eval: int = 0
    batch_size: int = 512
    scales: tuple = ()

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        self.scales = tuple(float(s) for s in self.scales)


@dataclass
class NetConfig:
    activation: str = "gaussian"
    omega0: Optional[float] = None
    sigma: Optional[float] = None
    s: Optional[float] = None
    a: Optional[float] = None
    hidden: tuple = (256, 256, 256, 256)
    encoding: str = "none"
    pe_bands: int = 10
    pe_include_input: bool = True
    init_gain: float = 1.0
    init_hidden_gain: float = 1.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.encoding not in ("none", "pe"):
            raise ConfigError("net.encoding must be 'none' or 'pe'")

    def activation_kind(self):
        kw = {k: getattr(self, k) for k in ("omega0", "sigma", "s", "a") if getattr(self, k) is not None}
        if self.activation == "wavelet":
            kw.setdefault("omega0", 10.0)
        return ActivationKind(self.activation, **kw)


@dataclass
class TrainConfig:
    epochs: int = 10
    iterations: Optional[int] = None
    eval_interval: int = 10
    checkpoint_every: int = 0
    snapshots: bool = False


@dataclass
class ExperimentConfig:
    seed: int
    out_dir: str = "runs/default"
    name: str = ""
    task: TaskConfig = field(default_factory=TaskConfig)
    net: NetConfig = field(default_factory=NetConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    diag: DiagConfig = field(default_factory=DiagConfig)
    wall_time: bool = False

    def network_spec(self) -> Optional[NetworkSpec]:
        if self.task.kind == "quadratic":
            return None
        n_in, n_out = IO_DIMS[self.task.kind]
        enc = PositionalEncoding(self.net.pe_bands, self.net.pe_include_input) if self.net.encoding == "pe" else None
        return NetworkSpec(n_in, self.net.hidden, n_out, self.net.activation_kind(), enc)

    @property
    def label(self):
        if self.name:
            return self.name
        if self.task.kind == "quadratic":
            return self.optim.algorithm
        act = self.net.activation + ("-pe" if self.net.encoding == "pe" else "")
        return f"{act}-{self.optim.algorithm}"

    def validate_files(self):
        src = self.task.source
        if self.task.kind == "image" and not src.startswith("builtin:") and not os.path.exists(src):
            from .tasks import builtin_image
            try:
                builtin_image(src, 2)
            except Exception:
                raise ConfigError(f"image source {src!r} does not exist") from None
        if self.task.kind == "occupancy" and self.task.shape not in SHAPES and not os.path.exists(self.task.shape):
            raise ConfigError(f"occupancy shape {self.task.shape!r} is neither builtin nor an existing mesh file")


SECTIONS = {"task": TaskConfig, "net": NetConfig, "optim": OptimizerConfig,
            "train": TrainConfig, "diag": DiagConfig}
TOP = ("seed", "out_dir", "name", "wall_time")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def to_flat(cfg: ExperimentConfig) -> dict:
    out = {k: _fmt(getattr(cfg, k)) for k in TOP}
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            out[f"{sec}.{f.name}"] = _fmt(getattr(obj, f.name))
    return out


def dumps(cfg: ExperimentConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in to_flat(cfg).items())


def _parse(value: str, default, name):
    value = value.strip()
    kind = type(default)
    try:
        if isinstance(default, bool):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(x.strip() for x in value.split(",") if x.strip())
        if value == "":
            return None
        if default is None:
            # optional numeric fields
            return int(value) if value.lstrip("-").isdigit() else float(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {name}") from None


def from_flat(items: dict) -> ExperimentConfig:
    items = dict(items)
    if "seed" not in items or str(items["seed"]).strip() == "":
        raise ConfigError("config must set 'seed' (no implicit entropy)")
    kw = {}
    for sec, cls in SECTIONS.items():
        base = cls() if sec != "optim" else OptimizerConfig()
        vals = {}
        for f in fields(cls):
            key = f"{sec}.{f.name}"
            if key in items:
                vals[f.name] = _parse(str(items.pop(key)), getattr(base, f.name), key)
        try:
            kw[sec] = replace(base, **vals)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
    top = {}
    defaults = {"out_dir": "runs/default", "name": "", "wall_time": False}
    for k in TOP:
        if k in items:
            raw = str(items.pop(k))
            top[k] = int(raw) if k == "seed" else _parse(raw, defaults[k], k)
    if items:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(items))}")
    if top.get("name") is None:
        top["name"] = ""
    return ExperimentConfig(**top, **kw)


def loads(text: str) -> ExperimentConfig:
    text = text.strip()
    if text.startswith("{"):
        return from_json(json.loads(text))
    items = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value")
        k, v = line.split("=", 1)
        items[k.strip()] = v.strip()
    return from_flat(items)


def from_json(obj) -> ExperimentConfig:
    """Accepts nested ``{"optim": {"eta": ...}}`` or flat dotted keys."""
    flat = {}
    for k, v in obj.items():
        if isinstance(v, dict):
            for k2, v2 in v.items():
                flat[f"{k}.{k2}"] = _fmt(v2)
        else:
            flat[k] = _fmt(v)
    return from_flat(flat)


def to_json(cfg: ExperimentConfig) -> str:
    nested = {}
    for k, v in to_flat(cfg).items():
        if "." in k:
            sec, key = k.split(".", 1)
            nested.setdefault(sec, {})[key] = v
        else:
            nested[k] = v
    return json.dumps(nested, indent=2, sort_keys=True)


def load(path: str, check_files=True) -> ExperimentConfig:
    if path.startswith("preset:"):
        parts = path.split(":")
        cfg = preset(parts[1], parts[2] if len(parts) > 2 else "adam")
    else:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = loads(text)
    if check_files:
        cfg.validate_files()
    return cfg


def save(cfg: ExperimentConfig, path: str):
    with open(path, "w") as fh:
        fh.write(to_json(cfg) if path.endswith(".json") else dumps(cfg))


# ---------------------------------------------------------------------------
# presets

IMAGE_NET = dict(hidden=(256, 256, 256, 256))
PRESETS = {
    "1d-gauss": dict(
        task=TaskConfig(kind="1d", n_points=256, batch_size=256),
        net=NetConfig(activation="gaussian", sigma=0.1, hidden=(16, 16), init_hidden_gain=0.2),
        train=TrainConfig(epochs=2000, eval_interval=100),
        diag=DiagConfig(sparsity=False, kappa=True),
    ),
    "img-gauss": dict(
        task=TaskConfig(kind="image", source="builtin:chirp", size=64, batch_size=512),
        net=NetConfig(activation="gaussian", sigma=0.05, init_hidden_gain=0.4, **IMAGE_NET),
        train=TrainConfig(epochs=10, eval_interval=8),
        diag=DiagConfig(sparsity=False),
    ),
    "img-sine": dict(
        task=TaskConfig(kind="image", source="builtin:chirp", size=64, batch_size=512),
        net=NetConfig(activation="sine", omega0=30.0, **IMAGE_NET),
        train=TrainConfig(epochs=10, eval_interval=8),
        diag=DiagConfig(sparsity=False),
    ),
    "img-wavelet": dict(
        task=TaskConfig(kind="image", source="builtin:chirp", size=64, batch_size=512),
        net=NetConfig(activation="wavelet", omega0=10.0, s=1.0, init_hidden_gain=0.3, **IMAGE_NET),
        train=TrainConfig(epochs=10, eval_interval=8),
        diag=DiagConfig(sparsity=False),
    ),
    "img-relu-pe": dict(
        task=TaskConfig(kind="image", source="builtin:chirp", size=64, batch_size=512),
        net=NetConfig(activation="relu", encoding="pe", pe_bands=10, **IMAGE_NET),
        train=TrainConfig(epochs=10, eval_interval=8),
        diag=DiagConfig(sparsity=False),
    ),
    "occ-gauss": dict(
        task=TaskConfig(kind="occupancy", shape="sphere", n_points=20000, n_eval=10000, batch_size=4096),
        net=NetConfig(activation="gaussian", sigma=0.09, **IMAGE_NET),
        train=TrainConfig(epochs=20, eval_interval=10),
        diag=DiagConfig(sparsity=False),
    ),
    "occ-sine": dict(
        task=TaskConfig(kind="occupancy", shape="sphere", n_points=20000, n_eval=10000, batch_size=4096),
        net=NetConfig(activation="sine", omega0=30.0, **IMAGE_NET),
        train=TrainConfig(epochs=20, eval_interval=10),
        diag=DiagConfig(sparsity=False),
    ),
    "occ-wavelet": dict(
        task=TaskConfig(kind="occupancy", shape="sphere", n_points=20000, n_eval=10000, batch_size=4096),
        net=NetConfig(activation="wavelet", omega0=10.0, s=1.0, init_hidden_gain=0.2, **IMAGE_NET),
        train=TrainConfig(epochs=20, eval_interval=10),
        diag=DiagConfig(sparsity=False),
    ),
    "occ-relu-pe": dict(
        task=TaskConfig(kind="occupancy", shape="sphere", n_points=20000, n_eval=10000, batch_size=4096),
        net=NetConfig(activation="relu", encoding="pe", pe_bands=10, **IMAGE_NET),
        train=TrainConfig(epochs=20, eval_interval=10),
        diag=DiagConfig(sparsity=False),
    ),
}

# optimizer settings per (preset, algorithm), picked with benchmarks/lr_grid.py
# over 3 seeds; anything not listed falls back to DEFAULT_ETA and the
# OptimizerConfig defaults. ESGD on the image and occupancy presets refreshes
# its curvature estimate once per epoch and uses gradient momentum.
_ESGD_IMG = dict(damping=1.0, momentum=0.9, refresh_every=8)
_ESGD_OCC = dict(damping=1.0, momentum=0.9, refresh_every=5)
PRESET_OPTIM = {
    ("1d-gauss", "sgd"): dict(eta=0.1),
    ("1d-gauss", "esgd"): dict(eta=0.1),
    ("img-gauss", "adam"): dict(eta=1e-4),
    ("img-gauss", "esgd"): dict(eta=0.2, **_ESGD_IMG),
    ("img-sine", "adam"): dict(eta=2e-4),
    ("img-sine", "esgd"): dict(eta=0.3, **_ESGD_IMG),
    ("img-wavelet", "adam"): dict(eta=7e-4),
    ("img-wavelet", "esgd"): dict(eta=0.5, **_ESGD_IMG),
    ("img-relu-pe", "adam"): dict(eta=3e-3),
    ("img-relu-pe", "esgd"): dict(eta=0.3, **_ESGD_IMG),
    ("occ-gauss", "adam"): dict(eta=1e-4),
    ("occ-gauss", "esgd"): dict(eta=0.2, **_ESGD_OCC),
    ("occ-sine", "adam"): dict(eta=3e-4),
    ("occ-sine", "esgd"): dict(eta=0.1, **_ESGD_OCC),
    ("occ-wavelet", "adam"): dict(eta=5e-5),
    ("occ-wavelet", "esgd"): dict(eta=0.05, **_ESGD_OCC),
    ("occ-relu-pe", "adam"): dict(eta=3e-3),
    ("occ-relu-pe", "esgd"): dict(eta=0.3, **_ESGD_OCC),
}
DEFAULT_ETA = {"sgd": 1e-2, "precond_sgd": 1e-2, "adam": 1e-3, "esgd": 1e-2, "esgd_max": 1e-2,
               "adahessian_e": 1e-2, "adahessian_j": 1e-2, "shampoo": 1e-3}


def preset_names():
    return sorted(PRESETS)


def preset(name: str, algorithm: str = "adam", seed: int = 0) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    p = PRESETS[name]
    opt = dict(eta=DEFAULT_ETA.get(algorithm, 1e-3))
    opt.update(PRESET_OPTIM.get((name, algorithm), {}))
    return ExperimentConfig(
        seed=seed,
        out_dir=f"runs/{name}-{algorithm}",
        name=f"{name}-{algorithm}",
        task=replace(p["task"]),
        net=replace(p["net"]),
        optim=OptimizerConfig(algorithm=algorithm, **opt),
        train=replace(p["train"]),
        diag=replace(p["diag"]),
    )

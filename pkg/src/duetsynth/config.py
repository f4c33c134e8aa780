"""Run configuration: one INI document with a section per pipeline stage.

Every command writes its resolved configuration beside its outputs so a run
can be reproduced from the directory alone.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetSpec, SplitProtocol
from .errors import ConfigError
from .mesh import MeshWeights, SolverConfig
from .train import TrainConfig

NET_KEYS = {
    "latent_dim": int,
    "temporal_kernel": int,
    "dropout": float,
    "stgcn_channels": "int_tuple",
    "strides": "int_tuple",
    "stgcn3_channels": "int_tuple",
    "mlp1_widths": "int_tuple",
    "mlp2_widths": "int_tuple",
}


@dataclass(frozen=True)
class MetricOptions:
    n_generate: int = 10
    z_samples: int = 0
    window: int = 32
    extractor_epochs: int = 80

    def __post_init__(self):
        if self.n_generate < 0 or self.z_samples < 0:
            raise ConfigError("metric sample counts must be >= 0")
        if self.window < 4 or self.extractor_epochs < 1:
            raise ConfigError("invalid feature-extractor options")


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitProtocol = field(default_factory=lambda: SplitProtocol("random"))
    net: dict = field(default_factory=dict)
    metrics: MetricOptions = field(default_factory=MetricOptions)
    seed: int = 0
    out_dir: str = "runs"

    def __post_init__(self):
        for key in self.net:
            if key not in NET_KEYS:
                raise ConfigError(f"unknown net option {key!r}; known: {sorted(NET_KEYS)}")


def parse_scale_range(text: str) -> dict:
    """Parse the min:max:step grid syntax into DatasetSpec keywords."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"scale range must be min:max:step, got {text!r}")
    try:
        lo, hi, step = (float(p) for p in parts)
    except ValueError as e:
        raise ConfigError(f"non-numeric scale range {text!r}") from e
    return {"scale_min": lo, "scale_max": hi, "scale_step": step}


def format_scale_range(spec: DatasetSpec) -> str:
    return f"{spec.scale_min:g}:{spec.scale_max:g}:{spec.scale_step:g}"


def _csv(values) -> str:
    return ",".join(str(v) for v in values)


def _split_csv(text: str) -> tuple:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def save_config(config: RunConfig, path, extra: dict = None) -> Path:
    """Serialize the resolved configuration; ``extra`` lands in the [cli] section."""
    cp = configparser.ConfigParser()
    ds = config.dataset
    cp["dataset"] = {
        "kinds": _csv(ds.base_kinds),
        "scales": format_scale_range(ds),
        "modes": _csv(ds.scaling_modes),
        "frames": str(ds.n_frames),
        "seed": str(ds.seed),
    }
    if ds.single_bones is not None:
        cp["dataset"]["single_bones"] = _csv(ds.single_bones)
    cp["mesh-retarget"] = {
        "laplacian": str(ds.mesh_weights.laplacian),
        "bone": str(ds.mesh_weights.bone),
        "temporal": str(ds.mesh_weights.temporal),
        "max_iters": str(ds.solver.max_iters),
        "step_init": str(ds.solver.step_init),
        "tol": str(ds.solver.tol),
    }
    tr = config.train
    cp["train"] = {
        "batch_size": str(tr.batch_size),
        "learning_rate": str(tr.learning_rate),
        "epochs": str(tr.epochs),
        "seed": str(tr.seed),
        "teacher_forcing": str(tr.teacher_forcing).lower(),
        "val_fraction": str(tr.val_fraction),
        "split": config.split.kind,
        "test_fraction": str(config.split.test_fraction),
    }
    if tr.kl_warmup_epochs is not None:
        cp["train"]["kl_warmup_epochs"] = str(tr.kl_warmup_epochs)
    if config.net:
        cp["net"] = {
            k: _csv(v) if isinstance(v, (tuple, list)) else str(v)
            for k, v in config.net.items()
        }
    me = config.metrics
    cp["metrics"] = {
        "n_generate": str(me.n_generate),
        "z_samples": str(me.z_samples),
        "window": str(me.window),
        "extractor_epochs": str(me.extractor_epochs),
    }
    cp["cli"] = {"seed": str(config.seed), "out_dir": config.out_dir}
    if extra:
        for k, v in extra.items():
            cp["cli"][k] = str(v)
    path = Path(path)
    with path.open("w") as fh:
        cp.write(fh)
    return path


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path)
    except configparser.Error as e:
        raise ConfigError(f"malformed config file {path}: {e}") from e
    try:
        return _from_parser(cp)
    except (ValueError, KeyError) as e:
        raise ConfigError(f"invalid value in config file {path}: {e}") from e


def _from_parser(cp: configparser.ConfigParser) -> RunConfig:
    ds_kwargs = {}
    if cp.has_section("dataset"):
        sec = cp["dataset"]
        if "kinds" in sec:
            ds_kwargs["base_kinds"] = _split_csv(sec["kinds"])
        if "scales" in sec:
            ds_kwargs.update(parse_scale_range(sec["scales"]))
        if "modes" in sec:
            ds_kwargs["scaling_modes"] = _split_csv(sec["modes"])
        if "frames" in sec:
            ds_kwargs["n_frames"] = sec.getint("frames")
        if "seed" in sec:
            ds_kwargs["seed"] = sec.getint("seed")
        if "single_bones" in sec:
            ds_kwargs["single_bones"] = tuple(int(v) for v in _split_csv(sec["single_bones"]))
    if cp.has_section("mesh-retarget"):
        sec = cp["mesh-retarget"]
        ds_kwargs["mesh_weights"] = MeshWeights(
            laplacian=sec.getfloat("laplacian", MeshWeights.laplacian),
            bone=sec.getfloat("bone", MeshWeights.bone),
            temporal=sec.getfloat("temporal", MeshWeights.temporal),
        )
        ds_kwargs["solver"] = SolverConfig(
            max_iters=sec.getint("max_iters", SolverConfig.max_iters),
            step_init=sec.getfloat("step_init", SolverConfig.step_init),
            tol=sec.getfloat("tol", SolverConfig.tol),
        )
    dataset = DatasetSpec(**ds_kwargs)

    tr_kwargs = {}
    split_kind, test_fraction = "random", SplitProtocol("random").test_fraction
    if cp.has_section("train"):
        sec = cp["train"]
        for name, getter in (
            ("batch_size", sec.getint),
            ("epochs", sec.getint),
            ("seed", sec.getint),
            ("kl_warmup_epochs", sec.getint),
        ):
            if name in sec:
                tr_kwargs[name] = getter(name)
        for name in ("learning_rate", "val_fraction"):
            if name in sec:
                tr_kwargs[name] = sec.getfloat(name)
        if "teacher_forcing" in sec:
            tr_kwargs["teacher_forcing"] = sec.getboolean("teacher_forcing")
        split_kind = sec.get("split", split_kind)
        test_fraction = sec.getfloat("test_fraction", test_fraction)
    train = TrainConfig(**tr_kwargs)
    split = SplitProtocol(split_kind, test_fraction=test_fraction)

    net = {}
    if cp.has_section("net"):
        for key, raw in cp["net"].items():
            if key not in NET_KEYS:
                raise ConfigError(f"unknown net option {key!r}")
            kind = NET_KEYS[key]
            if kind == "int_tuple":
                net[key] = tuple(int(v) for v in _split_csv(raw))
            else:
                net[key] = kind(raw)

    me_kwargs = {}
    if cp.has_section("metrics"):
        sec = cp["metrics"]
        for name in ("n_generate", "z_samples", "window", "extractor_epochs"):
            if name in sec:
                me_kwargs[name] = sec.getint(name)
    metrics = MetricOptions(**me_kwargs)

    seed, out_dir = 0, "runs"
    if cp.has_section("cli"):
        seed = cp["cli"].getint("seed", 0)
        out_dir = cp["cli"].get("out_dir", "runs")
    return RunConfig(
        dataset=dataset, train=train, split=split, net=net, metrics=metrics,
        seed=seed, out_dir=out_dir,
    )

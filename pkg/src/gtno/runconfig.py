"""Flat key=value run configuration files.

One option per line, `#` starts a comment, blank lines are ignored. Unknown
keys are rejected (typos should fail loudly, not silently fall back to a
default). Values are typed per the schema below; every run writes its fully
resolved configuration next to its outputs.
"""

from __future__ import annotations

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

__all__ = ["SCHEMA", "load_runconfig", "parse_runconfig", "dump_runconfig",
           "dumps_runconfig", "model_config_from", "train_config_from"]


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _choice(*opts):
    def parse(s: str) -> str:
        if s not in opts:
            raise ValueError(f"must be one of {opts}, got {s!r}")
        return s

    return parse


def _positive(kind):
    def parse(s: str):
        v = kind(s)
        if v <= 0:
            raise ValueError(f"must be positive, got {s!r}")
        return v

    return parse


def _unit_interval(s: str) -> float:
    v = float(s)
    if not 0.0 <= v < 1.0:
        raise ValueError(f"must be in [0, 1), got {s!r}")
    return v


def _nonneg_int(s: str) -> int:
    v = int(s)
    if v < 0:
        raise ValueError(f"must be >= 0, got {s!r}")
    return v


# key -> (parser, default). Paths default to "" meaning unset.
SCHEMA: dict = {
    "train_data": (str, ""),
    "test_data": (str, ""),
    "out_dir": (str, "run"),
    # model
    "d_model": (_positive(int), 32),
    "n_gt_blocks": (_positive(int), 2),
    "n_heads": (_positive(int), 4),
    "d_dec": (_positive(int), 64),
    "n_out_mlp_layers": (_positive(int), 2),
    "n_prop_mlp_layers": (_positive(int), 3),
    "gf_dim": (_positive(int), 32),
    "gf_sigma": (_positive(float), 5.0),
    "rope_base": (_positive(float), 10000.0),
    "rope_scale": (_positive(float), 1.0),
    "pos_enc": (_choice("none", "concat", "rope"), "rope"),
    "attn_avg": (_bool, True),
    "graph_kind": (_choice("radius", "knn"), "radius"),
    "radius": (_positive(float), 0.1),
    "knn_k": (_positive(int), 8),
    "mode": (_choice("auto", "steady", "rollout"), "auto"),
    "rollout_steps": (_nonneg_int, 0),  # 0 = use the dataset's t_out
    # training
    "epochs": (_positive(int), 200),
    "batch_size": (_positive(int), 1),
    "lr_init": (_positive(float), 2e-3),
    "div_factor": (_positive(float), 20.0),
    "pct_start": (_unit_interval, 0.05),
    "final_div_factor": (_positive(float), 1000.0),
    "beta1": (_unit_interval, 0.9),
    "beta2": (_unit_interval, 0.999),
    "adam_eps": (_positive(float), 1e-8),
    "clip_norm": (_positive(float), 1.0),
    "loss": (_choice("auto", "mse", "rel_l2"), "auto"),
    "seed": (_nonneg_int, 0),
    "eval_every": (_positive(int), 1),
}


def parse_runconfig(text: str) -> dict:
    """Parse config text into a fully defaulted dict. Unknown or duplicate
    keys and untypeable values raise ConfigError."""
    cfg = {k: d for k, (_, d) in SCHEMA.items()}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        parser = SCHEMA[key][0]
        try:
            cfg[key] = parser(val)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {e}") from e
    return cfg


def load_runconfig(path: str) -> dict:
    with open(path) as f:
        return parse_runconfig(f.read())


def dumps_runconfig(cfg: dict, derived: dict | None = None) -> str:
    lines = ["# resolved run configuration"]
    for key in SCHEMA:
        v = cfg[key]
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{key} = {v}")
    if derived:
        lines.extend(f"# derived: {k} = {v}" for k, v in derived.items())
    return "\n".join(lines) + "\n"


def dump_runconfig(cfg: dict, path: str, derived: dict | None = None) -> None:
    """Write the resolved configuration (re-loadable; derived values are
    recorded as comments)."""
    with open(path, "w") as f:
        f.write(dumps_runconfig(cfg, derived))


def model_config_from(cfg: dict, dataset) -> ModelConfig:
    """Resolve the model architecture against a dataset: channel counts come
    from the data; mode/rollout_steps resolve their auto values."""
    mode = cfg["mode"]
    if mode == "auto":
        mode = "steady" if dataset.t_out == 0 else "rollout"
    steps = cfg["rollout_steps"]
    if mode == "rollout":
        if steps == 0:
            steps = dataset.t_out
        if dataset.t_out and steps != dataset.t_out:
            raise ConfigError(
                f"rollout_steps {steps} != dataset t_out {dataset.t_out}"
            )
        if steps < 1:
            raise ConfigError("rollout mode needs rollout_steps >= 1 or a time dataset")
    else:
        if dataset.t_out != 0:
            raise ConfigError("steady mode cannot train on a time-series dataset")
        steps = 1
    try:
        return ModelConfig(
            d_model=cfg["d_model"],
            n_gt_blocks=cfg["n_gt_blocks"],
            n_heads=cfg["n_heads"],
            d_dec=cfg["d_dec"],
            n_out_mlp_layers=cfg["n_out_mlp_layers"],
            n_prop_mlp_layers=cfg["n_prop_mlp_layers"],
            gf_dim=cfg["gf_dim"],
            gf_sigma=cfg["gf_sigma"],
            rope_base=cfg["rope_base"],
            rope_scale=cfg["rope_scale"],
            pos_enc=cfg["pos_enc"],
            attn_avg=cfg["attn_avg"],
            graph_kind=cfg["graph_kind"],
            radius=cfg["radius"],
            knn_k=cfg["knn_k"],
            mode=mode,
            rollout_steps=steps,
            in_channels=dataset.c,
            out_channels=dataset.out_channels,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


def train_config_from(cfg: dict, dataset=None) -> TrainConfig:
    loss = cfg["loss"]
    if loss == "auto":
        loss = "rel_l2"
    return TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        lr_init=cfg["lr_init"],
        div_factor=cfg["div_factor"],
        pct_start=cfg["pct_start"],
        final_div_factor=cfg["final_div_factor"],
        beta1=cfg["beta1"],
        beta2=cfg["beta2"],
        adam_eps=cfg["adam_eps"],
        clip_norm=cfg["clip_norm"],
        loss=loss,
        seed=cfg["seed"],
        eval_every=cfg["eval_every"],
    )

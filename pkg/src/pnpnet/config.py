"""Plain key=value run configuration shared by all commands.

A config file holds one `key = value` pair per line; `#` starts a comment.
Unknown keys are rejected. Command-line overrides win over file values.
"""

from __future__ import annotations


class ConfigError(ValueError):
    pass


# key -> (default, parser)
def _bool(s):
    s = str(s).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError("not a boolean: %r" % s)


def _ints(s):
    return tuple(int(x) for x in str(s).split(","))


def _floats(s):
    return tuple(float(x) for x in str(s).split(","))


SCHEMA = {
    # data generation
    "regime": ("A", str),
    "dim": (32, int),
    "n_classes": (3, int),
    "count": (50, int),
    "sigma_b": (1.0, float),
    "noise": (0.05, float),
    "patch_count": (8, int),
    "patch_intensity": (0.30, float),
    "jitter": (2.0, float),
    "slabs": (0, int),
    "split": ((0.8, 0.0, 0.2), _floats),
    # model
    "channels": ((8, 16, 32, 64), _ints),
    "blocks": ((1, 1, 1, 1), _ints),
    "norm": ("group", str),
    "center_dim": (32, int),
    "atlas_size": (12, int),
    "heads": (1, int),
    "sdm_iters": (1, int),
    "lambda_cc": (0.1, float),
    "enable_sdm": (True, _bool),
    "enable_ccm": (True, _bool),
    # optimization
    "lr": (5e-4, float),
    "pull_lr_mult": (1.0, float),
    "weight_decay": (1e-5, float),
    "epochs": (20, int),
    "warmup": (2, int),
    "checkpoint_every": (0, int),
    # bookkeeping
    "seed": (0, int),
    "data_dir": ("data", str),
    "out_dir": ("out", str),
    "deterministic": (False, _bool),
}


class RunConfig:
    def __init__(self, values=None):
        self._values = {k: v for k, (v, _) in SCHEMA.items()}
        if values:
            for k, v in values.items():
                self.set(k, v)

    def set(self, key, raw):
        if key not in SCHEMA:
            raise ConfigError("unknown config key %r" % key)
        _, parse = SCHEMA[key]
        default = self._values[key]
        if isinstance(raw, str):
            self._values[key] = parse(raw)
        else:
            self._values[key] = type(default)(raw) if raw is not None else default

    def __getattr__(self, key):
        values = object.__getattribute__(self, "_values")
        if key in values:
            return values[key]
        raise AttributeError(key)

    def items(self):
        return self._values.items()

    @property
    def dims(self):
        return (self.dim,) * 3


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join("%g" % x if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def load_config(path=None, overrides=None) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            with open(path) as fh:
                lines = fh.readlines()
        except OSError as exc:
            raise ConfigError("cannot read config %r: %s" % (path, exc))
        for lineno, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError("%s:%d: expected key = value" % (path, lineno))
            key, _, raw = line.partition("=")
            cfg.set(key.strip(), raw.strip())
    for key, raw in (overrides or {}).items():
        if raw is not None:
            cfg.set(key, raw)
    return cfg


def write_config(cfg: RunConfig, path):
    """Archive the fully resolved configuration next to a run's outputs."""
    with open(path, "w") as fh:
        for key in sorted(SCHEMA):
            fh.write("%s = %s\n" % (key, _fmt(getattr(cfg, key))))

"""Experiment configuration files.

Line-oriented ``key = value`` pairs with ``#`` comments. Global keys come
first; every ``[method]`` header opens a new method block::

    data = synth_gaussian(n=300, d=100, seed=7)
    loss = logistic
    mu = 0.01
    perturbation = dropout(0.1)
    epochs = 100
    seeds = 0, 1, 2, 3, 4

    [method]
    name = smiso
    eta = 1.0

Data sources are ``synth_gaussian(...)``, ``synth_heterogeneous(...)``,
``libsvm(path)`` or ``csv(path)``; relative paths resolve against the
config file's directory. Perturbations are ``none``, ``dropout(p)``,
``gaussian(a)`` or ``rescale(w)``. ``pool_size = K > 0`` freezes K copies
per example so that expectations are exact.
"""
import ast
import re
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import ConfigError, InvalidInputError
from .model import LOSSES
from .perturb import KINDS, PerturbationSpec
from .schedule import METHODS

_CALL = re.compile(r"^([A-Za-z_]\w*)\s*(?:\((.*)\))?$")

DATA_KINDS = {
    "synth_gaussian": ("n", "d", "seed", "label_noise"),
    "synth_heterogeneous": ("n", "d", "seed", "spread", "density", "label_noise"),
    "libsvm": ("path", "dim"),
    "csv": ("path",),
}


def _literal(text):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_call(text):
    """``name(a, k=v)`` -> ``(name, [a], {k: v})``; a bare name has no arguments."""
    m = _CALL.match(text.strip())
    if not m:
        raise ConfigError(f"cannot parse {text!r}; expected name or name(args)")
    name, body = m.group(1), m.group(2)
    args, kwargs = [], {}
    if body and body.strip():
        for part in body.split(","):
            if "=" in part:
                k, v = part.split("=", 1)
                k = k.strip()
                if k in kwargs:
                    raise ConfigError(f"argument {k!r} given twice in {text!r}")
                kwargs[k] = _literal(v)
            else:
                if kwargs:
                    raise ConfigError(f"positional argument after keyword in {text!r}")
                args.append(_literal(part))
    return name, args, kwargs


@dataclass
class DataSource:
    kind: str
    params: dict

    @classmethod
    def parse(cls, text, base_dir):
        name, args, kwargs = parse_call(text)
        if name not in DATA_KINDS:
            raise ConfigError(f"unknown data source {name!r}; expected one of {sorted(DATA_KINDS)}")
        allowed = DATA_KINDS[name]
        if len(args) > len(allowed):
            raise ConfigError(f"too many arguments for {name}")
        params = dict(zip(allowed, args))
        for k, v in kwargs.items():
            if k not in allowed:
                raise ConfigError(f"unknown argument {k!r} for {name}")
            if k in params:
                raise ConfigError(f"argument {k!r} given twice for {name}")
            params[k] = v
        if name in ("libsvm", "csv"):
            if "path" not in params:
                raise ConfigError(f"{name} needs a path")
            path = Path(str(params["path"]))
            params["path"] = path if path.is_absolute() else Path(base_dir) / path
        else:
            for k in ("n", "d"):
                if not isinstance(params.get(k), int) or params[k] < 1:
                    raise ConfigError(f"{name} needs a positive integer {k}")
            params.setdefault("seed", 0)
            if not isinstance(params["seed"], int):
                raise ConfigError("seed must be an integer")
            if name == "synth_heterogeneous":
                params.setdefault("spread", 1.0)
        return cls(name, params)

    def __str__(self):
        inner = ", ".join(f"{k}={v}" for k, v in self.params.items())
        return f"{self.kind}({inner})"


def parse_perturbation(text, master_seed=0):
    name, args, kwargs = parse_call(text)
    aliases = {"gaussian_additive": "gaussian", "uniform_rescale": "rescale"}
    name = aliases.get(name, name)
    if name not in KINDS:
        raise ConfigError(f"unknown perturbation {name!r}; expected one of {KINDS}")
    if kwargs:
        raise ConfigError("perturbation takes a single positional parameter")
    if name == "none":
        if args:
            raise ConfigError("'none' takes no parameter")
        return PerturbationSpec("none", 0.0, master_seed)
    if len(args) != 1 or not isinstance(args[0], (int, float)):
        raise ConfigError(f"{name} needs exactly one numeric parameter")
    try:
        return PerturbationSpec(name, float(args[0]), master_seed)
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from None


@dataclass
class MethodConfig:
    name: str
    label: str
    eta: float = 1.0
    mode: str = "tuned"
    warmup_epochs: int = 2


@dataclass
class ExperimentConfig:
    data: DataSource
    mu: float
    normalize: bool = True
    loss: str = "logistic"
    l1_weight: float = 0.0
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)
    pool_size: int = 0
    pool_seed: int = 0
    master_seed: int = 0
    epochs: int = 10
    seeds: list = field(default_factory=lambda: [0])
    averaging: bool = False
    averaging_start: int | None = None
    objective_k: int = 5
    objective_seed: int = 0
    variance_draws: int = 100
    variance_seed: int = 0
    output: Path | None = None
    workers: int = 1
    methods: list = field(default_factory=list)

    @property
    def pool_mode(self):
        return self.pool_size > 0


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("true", "yes", "on", "1"):
        return True
    if s in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _int(v):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ValueError(f"not an integer: {v!r}")
    return v


def _float(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValueError(f"not a number: {v!r}")
    return float(v)


def _seeds(v):
    items = v if isinstance(v, (list, tuple)) else (v,)
    if isinstance(v, str) and ".." in v:
        lo, hi = v.split("..")
        items = range(int(lo), int(hi) + 1)
    seeds = [_int(s) for s in items]
    if not seeds:
        raise ValueError("at least one seed is required")
    if min(seeds) < 0:
        raise ValueError("seeds must be non-negative")
    return seeds


GLOBAL_KEYS = {
    "data": None, "normalize": _bool, "loss": str, "mu": _float, "l1_weight": _float,
    "perturbation": None, "pool_size": _int, "pool_seed": _int, "master_seed": _int,
    "epochs": _int, "seeds": _seeds, "averaging": _bool, "averaging_start": _int,
    "objective_k": _int, "objective_seed": _int, "variance_draws": _int,
    "variance_seed": _int, "output": str, "workers": _int,
}
METHOD_KEYS = {"name": str, "label": str, "eta": _float, "mode": str, "warmup_epochs": _int}


def _split_lines(text):
    """Yield (lineno, section_start, key, raw_value)."""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if line != "[method]":
                raise ConfigError(f"line {lineno}: unknown section {line!r}")
            yield lineno, True, None, None
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        yield lineno, False, key, value


def parse_config(text, base_dir="."):
    """Parse and fully validate a configuration; raises :class:`ConfigError`."""
    glob = {}
    blocks = []
    for lineno, is_section, key, value in _split_lines(text):
        if is_section:
            blocks.append({"__line__": lineno})
            continue
        table, target = (METHOD_KEYS, blocks[-1]) if blocks else (GLOBAL_KEYS, glob)
        if key not in table:
            where = "method block" if blocks else "global section"
            raise ConfigError(f"line {lineno}: unknown key {key!r} in {where}")
        if key in target:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        conv = table[key]
        if conv is None or conv is str:
            target[key] = (value, lineno)
            continue
        try:
            literal = value if conv is _bool else _literal(value)
            target[key] = (conv(literal), lineno)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    return _build(glob, blocks, Path(base_dir))


def _build(glob, blocks, base_dir):
    def get(key, default=None):
        return glob[key][0] if key in glob else default

    if "data" not in glob:
        raise ConfigError("missing required key 'data'")
    if "mu" not in glob:
        raise ConfigError("missing required key 'mu'")
    data = DataSource.parse(glob["data"][0], base_dir)
    master_seed = get("master_seed", 0)
    pert = parse_perturbation(get("perturbation", "none"), master_seed)
    loss = get("loss", "logistic")
    if loss not in LOSSES:
        raise ConfigError(f"unknown loss {loss!r}; expected one of {sorted(LOSSES)}")
    mu = get("mu")
    if not mu > 0:
        raise ConfigError("mu must be positive")
    l1 = get("l1_weight", 0.0)
    if l1 < 0:
        raise ConfigError("l1_weight must be >= 0")
    if pert.kind == "gaussian" and data.kind in ("libsvm", "synth_heterogeneous"):
        raise ConfigError("gaussian perturbation requires dense data")
    cfg = ExperimentConfig(
        data=data, mu=mu, normalize=get("normalize", True), loss=loss, l1_weight=l1,
        perturbation=pert, pool_size=get("pool_size", 0), pool_seed=get("pool_seed", 0),
        master_seed=master_seed, epochs=get("epochs", 10), seeds=get("seeds", [0]),
        averaging=get("averaging", False), averaging_start=get("averaging_start"),
        objective_k=get("objective_k", 5), objective_seed=get("objective_seed", 0),
        variance_draws=get("variance_draws", 100), variance_seed=get("variance_seed", 0),
        workers=get("workers", 1))
    if "output" in glob:
        out = Path(glob["output"][0])
        cfg.output = out if out.is_absolute() else base_dir / out
    checks = [
        (cfg.pool_size >= 0, "pool_size must be >= 0"),
        (cfg.epochs >= 0, "epochs must be >= 0"),
        (cfg.objective_k >= 1, "objective_k must be >= 1"),
        (cfg.variance_draws >= 2, "variance_draws must be >= 2"),
        (cfg.workers >= 1, "workers must be >= 1"),
        (cfg.averaging_start is None or cfg.averaging_start >= 0, "averaging_start must be >= 0"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
    if not blocks:
        raise ConfigError("no [method] blocks")
    for b in blocks:
        line = b.pop("__line__")
        if "name" not in b:
            raise ConfigError(f"line {line}: method block without 'name'")
        name = b["name"][0]
        if name not in METHODS:
            raise ConfigError(f"line {b['name'][1]}: unknown method {name!r}; "
                              f"expected one of {METHODS}")
        m = MethodConfig(name=name, label=b.get("label", (name,))[0],
                         eta=b.get("eta", (1.0,))[0], mode=b.get("mode", ("tuned",))[0],
                         warmup_epochs=b.get("warmup_epochs", (2,))[0])
        if m.mode not in ("theory", "tuned"):
            raise ConfigError(f"line {line}: mode must be 'theory' or 'tuned'")
        if not m.eta > 0:
            raise ConfigError(f"line {line}: eta must be positive")
        if m.warmup_epochs < 0:
            raise ConfigError(f"line {line}: warmup_epochs must be >= 0")
        if "," in m.label:
            raise ConfigError(f"line {line}: label may not contain commas")
        cfg.methods.append(m)
    return cfg


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, path.parent)

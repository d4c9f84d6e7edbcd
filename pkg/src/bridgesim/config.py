"""Declarative experiment configs: JSON in, validated objects out.

A config names the model and its parameters, the start point, the
observation, the time grid, an optional auxiliary override and the network,
training and pCN settings. :func:`load_config` reports every problem it
finds, each tagged with the dotted path of the offending field.

Landmark start and end points may be given as ``{"ellipse": {...}}`` with
keys ``a``, ``b`` and optional ``center`` and ``rotation``; ``"L": "identity"``
observes the full state.
"""
from __future__ import annotations

import copy
import hashlib
import inspect
import json
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .conditioning import LinearAuxiliary, ObservationScheme
from .guided import GuidedSystem
from .models import MODELS, LandmarkModel, auxiliary_for, ellipse_landmarks, make_model
from .network import ACTIVATIONS, MlpArchitecture
from .sde import TimeGrid
from .training import TrainConfig

TOP_LEVEL = ("name", "model", "x0", "conditioning", "grid", "auxiliary", "net", "train", "pcn", "seed", "out")
PCN_DEFAULTS = {"eta": 0.9, "iters": 1000, "burn_in": 0, "thin": 1, "chains": 1}
NET_DEFAULTS = {"hidden": [32, 32, 32], "activation": "tanh", "cap": None}


class ParseError(ValueError):
    """The file is not valid JSON (or not a JSON object)."""


class ValidationError(ValueError):
    """One or more fields are invalid; ``errors`` lists ``(path, message)`` pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{p}: {m}" for p, m in self.errors))


def _is_int(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool) and np.isfinite(x)


def _matrix(value, path, errors, rows=None, cols=None):
    """A 2-D float array or None, with shape problems appended to ``errors``."""
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        errors.append((path, "must be a numeric matrix"))
        return None
    if arr.ndim != 2 or not np.isfinite(arr).all():
        errors.append((path, "must be a finite 2-D matrix (list of equal-length rows)"))
        return None
    if rows is not None and arr.shape[0] != rows:
        errors.append((path, f"needs {rows} rows, got {arr.shape[0]}"))
        return None
    if cols is not None and arr.shape[1] != cols:
        errors.append((path, f"needs {cols} columns to match the state dimension, got {arr.shape[1]}"))
        return None
    return arr


def _vector(value, path, errors, length=None):
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        errors.append((path, "must be a list of numbers"))
        return None
    if arr.ndim != 1 or not np.isfinite(arr).all():
        errors.append((path, "must be a flat list of finite numbers"))
        return None
    if length is not None and arr.shape[0] != length:
        errors.append((path, f"needs length {length}, got {arr.shape[0]}"))
        return None
    return arr


def _point(value, path, errors, model, length):
    """A state vector, or an ellipse spec for landmark models."""
    if isinstance(value, dict):
        if set(value) != {"ellipse"} or not isinstance(value["ellipse"], dict):
            errors.append((path, 'must be a list or {"ellipse": {...}}'))
            return None
        if not isinstance(model, LandmarkModel):
            errors.append((path, "ellipse points need the landmark model"))
            return None
        spec = value["ellipse"]
        unknown = set(spec) - {"a", "b", "center", "rotation"}
        if unknown:
            errors.append((path + ".ellipse", f"unknown keys {sorted(unknown)}"))
        bad = False
        for key in ("a", "b"):
            if not (_is_num(spec.get(key)) and spec[key] > 0):
                errors.append((f"{path}.ellipse.{key}", "must be a positive number"))
                bad = True
        center = _vector(spec.get("center", [0.0, 0.0]), f"{path}.ellipse.center", errors, model.dim)
        rotation = spec.get("rotation", 0.0)
        if not _is_num(rotation):
            errors.append((f"{path}.ellipse.rotation", "must be a number"))
            bad = True
        if bad or center is None or model.dim != 2:
            if model.dim != 2:
                errors.append((path, "ellipse points need dim = 2"))
            return None
        return ellipse_landmarks(model.n, spec["a"], spec["b"], center, rotation)
    return _vector(value, path, errors, length)


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated experiment; ``raw`` is the normalized JSON structure."""

    raw: dict
    model_obj: object
    x0: np.ndarray
    obs: ObservationScheme
    grid: TimeGrid
    aux_override: LinearAuxiliary | None
    arch: MlpArchitecture
    train: TrainConfig
    pcn: dict
    seed: int
    out: str

    @property
    def name(self) -> str:
        return self.raw["name"]

    @property
    def model(self):
        return self.model_obj

    def auxiliary(self) -> LinearAuxiliary:
        return self.aux_override if self.aux_override is not None else auxiliary_for(self.model_obj, self.obs)

    def system(self) -> GuidedSystem:
        return GuidedSystem.build(self.model_obj, self.auxiliary(), self.obs, self.grid, self.x0)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form."""
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def _section(raw, key, errors, required=True):
    if key not in raw or raw[key] is None:
        if required:
            errors.append((key, "is required"))
        return None
    if not isinstance(raw[key], dict):
        errors.append((key, "must be an object"))
        return None
    return raw[key]


def _unknown(section, allowed, path, errors):
    extra = set(section) - set(allowed)
    if extra:
        errors.append((path, f"unknown keys {sorted(extra)}"))


def from_dict(raw: dict) -> ExperimentConfig:
    """Validate a parsed config; raises :class:`ValidationError` listing every problem."""
    if not isinstance(raw, dict):
        raise ValidationError([("", "config must be a JSON object")])
    errors: list = []
    raw = copy.deepcopy(raw)
    _unknown(raw, TOP_LEVEL, "<root>", errors)

    name = raw.setdefault("name", "experiment")
    if not isinstance(name, str) or not name:
        errors.append(("name", "must be a nonempty string"))

    # model
    model = None
    msec = _section(raw, "model", errors)
    if msec is not None:
        _unknown(msec, ("name", "params"), "model", errors)
        mname = msec.get("name")
        params = msec.setdefault("params", {})
        if mname not in MODELS:
            errors.append(("model.name", f"must be one of {sorted(MODELS)}"))
        elif not isinstance(params, dict):
            errors.append(("model.params", "must be an object"))
        else:
            accepted = set(inspect.signature(MODELS[mname]).parameters)
            unknown = set(params) - accepted
            if unknown:
                errors.append(("model.params", f"unknown parameters {sorted(unknown)} for {mname}"))
            else:
                try:
                    model = make_model(mname, **params)
                except (TypeError, ValueError) as exc:
                    errors.append(("model.params", str(exc)))
    d = model.d if model is not None else None
    d_w = model.d_w if model is not None else None

    # grid
    grid = None
    gsec = _section(raw, "grid", errors)
    if gsec is not None:
        _unknown(gsec, ("T", "M"), "grid", errors)
        T, M = gsec.get("T"), gsec.get("M")
        ok = True
        if not (_is_num(T) and T > 0):
            errors.append(("grid.T", "must be a positive number"))
            ok = False
        if not (_is_int(M) and M >= 1):
            errors.append(("grid.M", "must be an integer >= 1"))
            ok = False
        if ok:
            grid = TimeGrid(float(T), M)

    # start point
    x0 = None
    if "x0" not in raw:
        errors.append(("x0", "is required"))
    elif model is not None:
        x0 = _point(raw["x0"], "x0", errors, model, d)

    # conditioning
    obs = None
    csec = _section(raw, "conditioning", errors)
    if csec is not None:
        _unknown(csec, ("L", "v", "eps2"), "conditioning", errors)
        L_raw = csec.get("L")
        if L_raw == "identity":
            L_raw = np.eye(d).tolist() if d is not None else None
        L = _matrix(L_raw, "conditioning.L", errors, cols=d)
        v = None
        if "v" not in csec:
            errors.append(("conditioning.v", "is required"))
        elif model is not None and L is not None:
            v = _point(csec["v"], "conditioning.v", errors, model, L.shape[0])
        eps2 = csec.get("eps2")
        if not (_is_num(eps2) and eps2 > 0):
            errors.append(("conditioning.eps2", "must be a positive number"))
            eps2 = None
        if L is not None and v is not None and eps2 is not None and grid is not None:
            try:
                obs = ObservationScheme.isotropic(L, v, float(eps2), grid.T)
            except ValueError as exc:
                errors.append(("conditioning", str(exc)))

    # auxiliary override
    aux = None
    asec = raw.get("auxiliary")
    if asec is not None:
        if not isinstance(asec, dict):
            errors.append(("auxiliary", "must be an object or null"))
        elif model is not None:
            _unknown(asec, ("beta", "B", "sigma"), "auxiliary", errors)
            beta = _vector(asec.get("beta"), "auxiliary.beta", errors, d)
            B = _matrix(asec.get("B"), "auxiliary.B", errors, rows=d, cols=d)
            sig = _matrix(asec.get("sigma"), "auxiliary.sigma", errors, rows=d, cols=d_w)
            if beta is not None and B is not None and sig is not None:
                aux = LinearAuxiliary.constant(beta, B, sig)
    else:
        raw["auxiliary"] = None

    # network
    arch = None
    nsec = raw.setdefault("net", dict(NET_DEFAULTS))
    if not isinstance(nsec, dict):
        errors.append(("net", "must be an object"))
    else:
        for k, val in NET_DEFAULTS.items():
            nsec.setdefault(k, copy.copy(val))
        _unknown(nsec, NET_DEFAULTS, "net", errors)
        hidden, act, cap = nsec["hidden"], nsec["activation"], nsec["cap"]
        ok = True
        if not (isinstance(hidden, list) and hidden and all(_is_int(h) and h >= 1 for h in hidden)):
            errors.append(("net.hidden", "must be a nonempty list of positive integers"))
            ok = False
        if act not in ACTIVATIONS:
            errors.append(("net.activation", f"must be one of {list(ACTIVATIONS)}"))
            ok = False
        if cap is not None and not (_is_num(cap) and cap > 0):
            errors.append(("net.cap", "must be a positive number or null"))
            ok = False
        if ok and model is not None and grid is not None:
            arch = MlpArchitecture(d, d_w, tuple(hidden), act, cap, grid.T)

    # training
    train = None
    tsec = raw.setdefault("train", {})
    if not isinstance(tsec, dict):
        errors.append(("train", "must be an object"))
    else:
        names = [f.name for f in fields(TrainConfig)]
        _unknown(tsec, names, "train", errors)
        defaults = TrainConfig()
        for f in names:
            val = getattr(defaults, f)
            tsec.setdefault(f, list(val) if isinstance(val, tuple) else val)
        try:
            train = TrainConfig(**{k: tsec[k] for k in names})
        except (TypeError, ValueError) as exc:
            for msg in str(exc).split("; "):
                field_name = msg.split(" ", 1)[0]
                errors.append((f"train.{field_name}" if field_name in names else "train", msg))

    # pCN
    psec = raw.setdefault("pcn", dict(PCN_DEFAULTS))
    pcn = None
    if not isinstance(psec, dict):
        errors.append(("pcn", "must be an object"))
    else:
        for k, val in PCN_DEFAULTS.items():
            psec.setdefault(k, val)
        _unknown(psec, PCN_DEFAULTS, "pcn", errors)
        ok = True
        if not (_is_num(psec["eta"]) and 0 <= psec["eta"] <= 1):
            errors.append(("pcn.eta", "must lie in [0, 1]"))
            ok = False
        for k in ("iters", "thin", "chains"):
            if not (_is_int(psec[k]) and psec[k] >= 1):
                errors.append((f"pcn.{k}", "must be an integer >= 1"))
                ok = False
        if not (_is_int(psec["burn_in"]) and psec["burn_in"] >= 0):
            errors.append(("pcn.burn_in", "must be an integer >= 0"))
            ok = False
        elif ok and psec["burn_in"] >= psec["iters"]:
            errors.append(("pcn.burn_in", "must be smaller than pcn.iters"))
            ok = False
        if ok:
            pcn = dict(psec)

    seed = raw.setdefault("seed", 0)
    if not (_is_int(seed) and seed >= 0):
        errors.append(("seed", "must be a nonnegative integer"))
    out = raw.setdefault("out", f"runs/{name}")
    if not isinstance(out, str) or not out:
        errors.append(("out", "must be a nonempty string"))

    if errors:
        raise ValidationError(errors)
    return ExperimentConfig(raw, model, x0, obs, grid, aux, arch, train, pcn, seed, out)


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ParseError(f"{source}: top level must be a JSON object")
    return from_dict(raw)


def load_config(path) -> ExperimentConfig:
    """Load a config file, or a bundled config by bare name (e.g. ``"ou_bridge"``)."""
    p = Path(path)
    if not p.exists() and p.suffix == "" and str(path) in bundled_names():
        p = bundled_path(str(path))
    try:
        text = p.read_text()
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def bundled_names() -> list:
    root = resources.files("bridgesim") / "configs"
    return sorted(f.name[:-5] for f in root.iterdir() if f.name.endswith(".json"))


def bundled_path(name: str) -> Path:
    path = Path(str(resources.files("bridgesim") / "configs" / f"{name}.json"))
    if not path.exists():
        raise FileNotFoundError(f"no bundled config {name!r}; available: {bundled_names()}")
    return path

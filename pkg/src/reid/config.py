"""Run configuration: one JSON document, one mandatory seed, strict keys.

Layout::

    {
      "seed": 0,
      "synth": {...SynthSpec...},
      "train": {"preset": "attn-cl", "recipe": {...overrides...}, ...TrainConfig...},
      "eval": {"N": 4, "ranks": [1, 5, 20], "rerank": true},
      "rerank": {"k1": 20, "k2": 6, "lam": 0.3},
      "gradcheck": {...GradcheckConfig...},
      "hpo": {"budget": 8, "space": {"sigma": [0.5, 3.0, false], ...}}
    }

Every section is optional; missing fields take their defaults.  ``resolve``
returns a :class:`RunConfig` whose ``to_dict()`` is the fully resolved form,
which resolves back to the same run.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import losses as L
from .datamodel import SynthSpec
from .dictconv import from_dict, to_dict
from .errors import ConfigError
from .evalkit import EvalConfig
from .trainer import DEFAULT_SPACE, TrainConfig

SECTIONS = ("seed", "synth", "train", "eval", "rerank", "gradcheck", "hpo")


@dataclass
class GradcheckConfig:
    tol: float = 1e-4
    seeds: tuple[int, ...] = (0, 1, 2)
    step: float = 1e-5
    # small problem so finite differences stay cheap
    identities: int = 8
    H: int = 4
    W: int = 4
    P: int = 2
    K: int = 2
    N: int = 4
    hidden: int = 8
    embed: int = 8


@dataclass
class HpoConfig:
    budget: int = 8
    space: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_SPACE.items()})

    def parsed_space(self) -> dict:
        out = {}
        for name, spec in self.space.items():
            if not isinstance(spec, (list, tuple)) or len(spec) not in (2, 3):
                raise ConfigError(f"hpo.space.{name}: expected [low, high] or [low, high, log]")
            low, high = float(spec[0]), float(spec[1])
            log = bool(spec[2]) if len(spec) == 3 else False
            if not low <= high or (log and low <= 0):
                raise ConfigError(f"hpo.space.{name}: invalid range")
            out[name] = (low, high, log)
        return out


@dataclass
class RunConfig:
    seed: int
    synth: SynthSpec
    train: TrainConfig
    eval: EvalConfig
    gradcheck: GradcheckConfig
    hpo: HpoConfig

    def to_dict(self) -> dict:
        train = to_dict(self.train)
        train.pop("seed")
        ev = to_dict(self.eval)
        rerank = {k: ev.pop(k) for k in ("k1", "k2", "lam")}
        ev.pop("seed")
        return {
            "seed": self.seed,
            "synth": to_dict(self.synth),
            "train": train,
            "eval": ev,
            "rerank": rerank,
            "gradcheck": to_dict(self.gradcheck),
            "hpo": to_dict(self.hpo),
        }


def _resolve_recipe(preset: str, overrides) -> L.LossRecipe:
    base = to_dict(L.preset(preset))
    if overrides is None:
        overrides = {}
    if not isinstance(overrides, dict):
        raise ConfigError("train.recipe must be an object")
    overrides = dict(overrides)
    osm = dict(base["osm"])
    osm_over = overrides.pop("osm", {}) or {}
    if not isinstance(osm_over, dict):
        raise ConfigError("train.recipe.osm must be an object")
    osm.update(osm_over)
    base.update(overrides)
    base["osm"] = osm
    return from_dict(L.LossRecipe, base, "train.recipe")


def resolve(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    seed = raw.get("seed")
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("config needs a non-negative integer 'seed'")

    synth = from_dict(SynthSpec, raw.get("synth"), "synth")
    synth.validate()

    train_raw = dict(raw.get("train") or {})
    if "seed" in train_raw:
        raise ConfigError("train.seed is not allowed; use the top-level seed")
    preset = train_raw.pop("preset", "baseline-bot")
    if not isinstance(preset, str):
        raise ConfigError("train.preset must be a string")
    recipe = _resolve_recipe(preset, train_raw.pop("recipe", None))
    train = from_dict(TrainConfig, train_raw, "train")
    train = replace(train, seed=seed, preset=preset, recipe=recipe)
    train.validate()

    ev_raw = dict(raw.get("eval") or {})
    if "seed" in ev_raw:
        raise ConfigError("eval.seed is not allowed; use the top-level seed")
    rr_raw = raw.get("rerank") or {}
    if not isinstance(rr_raw, dict) or set(rr_raw) - {"k1", "k2", "lam"}:
        raise ConfigError("rerank accepts only k1, k2, lam")
    ev = from_dict(EvalConfig, {**ev_raw, **rr_raw}, "eval")
    ev = replace(ev, seed=seed, ranks=tuple(int(r) for r in ev.ranks))
    if ev.N < 1 or not ev.ranks or min(ev.ranks) < 1:
        raise ConfigError("eval.N and eval.ranks must be >= 1")

    gc = from_dict(GradcheckConfig, raw.get("gradcheck"), "gradcheck")
    if gc.tol < 0 or gc.step <= 0 or not gc.seeds:
        raise ConfigError("gradcheck needs tol >= 0, step > 0 and at least one seed")
    hpo = from_dict(HpoConfig, raw.get("hpo"), "hpo")
    hpo.parsed_space()
    if hpo.budget < 1:
        raise ConfigError("hpo.budget must be >= 1")
    return RunConfig(seed, synth, train, ev, gc, hpo)


def load(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return resolve(raw)

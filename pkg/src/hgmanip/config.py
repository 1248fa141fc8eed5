"""Task configuration and the category router that assigns feature providers."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol

from .errors import HGMError
from .features import DEFAULT_REGISTRY, ObjectCategory
from .fusion import FusionConfig
from .policy import PolicyConfig
from .simenv import get_task

VARIANTS = ("full", "no-cg", "no-pe", "no-mfm")
ROLES = ("operated", "background")


@dataclass
class ObjectEntry:
    role: str
    name: str
    category: ObjectCategory
    provider: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise HGMError("bad-config", f"role {self.role!r} not in {ROLES}")
        try:
            self.category = ObjectCategory(self.category)
        except ValueError as err:
            raise HGMError("bad-config", f"unknown category {self.category!r}") from err


class CategoryClassifier(Protocol):
    """Maps an object name to a category; a vision-language model could implement this."""

    def classify(self, name: str) -> ObjectCategory: ...


@dataclass
class StaticClassifier:
    table: Mapping[str, ObjectCategory]

    def classify(self, name: str) -> ObjectCategory:
        if name not in self.table:
            raise HGMError("unknown-object", name)
        return ObjectCategory(self.table[name])


def route(names: Mapping[str, str], classifier: CategoryClassifier,
          registry: Mapping[ObjectCategory, str] = DEFAULT_REGISTRY) -> list[ObjectEntry]:
    """Role -> object name, classified, then category -> provider id via the registry."""
    entries = []
    for role in ROLES:
        if role not in names:
            raise HGMError("bad-config", f"missing {role} object")
        cat = classifier.classify(names[role])
        if cat not in registry:
            raise HGMError("no-provider", f"no provider registered for {cat.value}")
        entries.append(ObjectEntry(role, names[role], cat, registry[cat]))
    return entries


@dataclass
class TaskConfig:
    task: str
    objects: list[ObjectEntry]
    pca_dim: int = 5
    num_anchors: int = 8
    num_tokens: int = 32
    noise_sigma: float = 0.01
    embed_dim: int = 64
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    variant: str = "full"
    seed: int = 42

    def __post_init__(self):
        self.objects = [o if isinstance(o, ObjectEntry) else ObjectEntry(**o) for o in self.objects]
        roles = sorted(o.role for o in self.objects)
        if roles != sorted(ROLES):
            raise HGMError("bad-config", f"need exactly one operated and one background object, got {roles}")
        if self.variant not in VARIANTS:
            raise HGMError("bad-config", f"unknown variant {self.variant!r}")
        get_task(self.task)

    def entry(self, role: str) -> ObjectEntry:
        return next(o for o in self.objects if o.role == role)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        for o in d["objects"]:
            o["category"] = ObjectCategory(o["category"]).value
        return d

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "TaskConfig":
        data = dict(data)
        try:
            policy = PolicyConfig(**data.pop("policy", {}))
            fusion = FusionConfig(**data.pop("fusion", {}))
            return cls(policy=policy, fusion=fusion, **data)
        except TypeError as err:
            raise HGMError("bad-config", str(err)) from err

    def task_echo(self) -> dict:
        """The parts a checkpoint must agree on with an evaluation request."""
        return {"task": self.task, "objects": self.to_json()["objects"]}


def default_config(task: str, variant: str = "full", **overrides) -> TaskConfig:
    spec = get_task(task)
    classifier = StaticClassifier({spec.operated_name: spec.operated_category,
                                   spec.background_name: spec.background_category})
    entries = route({"operated": spec.operated_name, "background": spec.background_name}, classifier)
    cfg = TaskConfig(task=task, objects=entries, variant=variant, **overrides)
    if variant == "no-pe":
        cfg.fusion.enable_dual_stream = False
    return cfg


def load_config(path) -> TaskConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise HGMError("bad-config", f"{path}: {err}") from err
    return TaskConfig.from_json(data)

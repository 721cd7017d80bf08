"""Rule-based vehicle classification from box geometry, template hint and hue."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from typing import Optional

import numpy as np
import yaml


class VehicleClass(str, Enum):
    MOTORCYCLE = "motorcycle"
    TAXI = "taxi"
    PRIVATE_CAR = "private_car"
    PICKUP = "pickup"
    BUS = "bus"


CLASS_ORDER = [c.value for c in VehicleClass]


@dataclass(frozen=True)
class Rule:
    label: VehicleClass
    min_area: float = 0.0
    max_area: float = math.inf
    min_aspect: float = 1.0
    max_aspect: float = math.inf
    class_hint: Optional[str] = None
    hue_band: Optional[tuple] = None  # degrees, (lo, hi); lo > hi wraps through 0

    def matches(self, area: float, aspect: float, hint: Optional[str], hue: Optional[float]) -> bool:
        if not (self.min_area <= area < self.max_area and self.min_aspect <= aspect < self.max_aspect):
            return False
        if self.class_hint is not None and hint != self.class_hint:
            return False
        if self.hue_band is not None:
            if hue is None:
                return False
            lo, hi = self.hue_band
            inside = lo <= hue <= hi if lo <= hi else (hue >= lo or hue <= hi)
            if not inside:
                return False
        return True


@dataclass(frozen=True)
class ClassRules:
    rules: tuple
    fallback: VehicleClass = VehicleClass.PRIVATE_CAR

    @classmethod
    def from_dict(cls, d: dict) -> "ClassRules":
        rules = []
        for r in d.get("rules", []):
            r = dict(r)
            label = VehicleClass(r.pop("class"))
            if "hue_band" in r:
                r["hue_band"] = tuple(float(v) for v in r["hue_band"])
            for k in ("min_area", "max_area", "min_aspect", "max_aspect"):
                if k in r:
                    r[k] = float(r[k])
            rules.append(Rule(label, **r))
        return cls(tuple(rules), VehicleClass(d.get("fallback", "private_car")))

    @classmethod
    def load(cls, path=None) -> "ClassRules":
        if path is None:
            text = resources.files("aerotrack").joinpath("data/rules.yaml").read_text()
        else:
            with open(path) as fh:
                text = fh.read()
        return cls.from_dict(yaml.safe_load(text))


def mean_hue(patch) -> Optional[float]:
    """Circular mean hue (degrees) of reasonably saturated pixels, or None."""
    a = np.asarray(patch, dtype=np.float64).reshape(-1, 3) / 255.0
    mx, mn = a.max(axis=1), a.min(axis=1)
    delta = mx - mn
    sat = np.where(mx > 0, delta / np.where(mx > 0, mx, 1), 0)
    keep = (sat > 0.2) & (delta > 0)
    if not keep.any():
        return None
    r, g, b = a[keep].T
    mx, d = mx[keep], delta[keep]
    h = np.where(mx == r, ((g - b) / d) % 6, np.where(mx == g, (b - r) / d + 2, (r - g) / d + 4)) * 60.0
    ang = np.radians(h)
    return float(np.degrees(np.arctan2(np.sin(ang).mean(), np.cos(ang).mean())) % 360.0)


def classify(det, color_patch=None, rules: Optional[ClassRules] = None) -> VehicleClass:
    """First matching rule wins; the fallback makes this total."""
    rules = rules or default_rules()
    box = det.footprint or det.box
    hue = mean_hue(color_patch) if color_patch is not None else None
    for rule in rules.rules:
        if rule.matches(box.area, box.aspect, det.class_hint, hue):
            return rule.label
    return rules.fallback


_DEFAULT = None


def default_rules() -> ClassRules:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = ClassRules.load()
    return _DEFAULT

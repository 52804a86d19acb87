"""Robot description: declarative kinematic chain for the PSM arm.

Descriptions are loaded from a small YAML schema (see data/psm_default.yaml
and README for the field-by-field documentation). Loading is strict: any
malformed field raises DescriptionParseError, any constraint violation
raises DescriptionValidationError naming the offending joint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import yaml

from .so3 import quat_normalize

FORMAT_VERSION = 1

REVOLUTE = "revolute"
PRISMATIC = "prismatic"

# The PSM profile: 6 arm joints articulated revolute/revolute/prismatic/
# revolute/revolute/revolute (the jaw is carried separately in JointState).
PSM_PROFILE = (REVOLUTE, REVOLUTE, PRISMATIC, REVOLUTE, REVOLUTE, REVOLUTE)


class DescriptionError(ValueError):
    pass


class DescriptionParseError(DescriptionError):
    """The source text is not a well-formed description document."""


class DescriptionValidationError(DescriptionError):
    """The document parsed but violates a field constraint."""


@dataclass(frozen=True)
class JointSpec:
    name: str
    kind: str                 # REVOLUTE or PRISMATIC
    axis: np.ndarray          # unit 3-vector in the parent frame
    origin_pos: np.ndarray    # fixed translation, meters
    origin_quat: np.ndarray   # fixed rotation, unit quaternion (w, x, y, z)
    limits: tuple[float, float]


@dataclass(frozen=True)
class RobotDescription:
    name: str
    joints: tuple[JointSpec, ...]
    ee_offset_pos: np.ndarray
    ee_offset_quat: np.ndarray
    rcm_point: np.ndarray | None = None

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def lower_limits(self) -> np.ndarray:
        return np.array([j.limits[0] for j in self.joints])

    @property
    def upper_limits(self) -> np.ndarray:
        return np.array([j.limits[1] for j in self.joints])

    def clamp(self, q: np.ndarray) -> np.ndarray:
        return np.clip(q, self.lower_limits, self.upper_limits)


@dataclass
class Pose:
    """Rigid transform: position in meters, orientation quaternion (w, x, y, z)."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.orientation = np.asarray(self.orientation, dtype=np.float64)
        n = float(np.linalg.norm(self.orientation))
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"pose quaternion norm {n!r} not within 1e-9 of 1")
        if self.orientation[0] < 0.0:
            self.orientation = -self.orientation

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))


@dataclass
class JointState:
    """6-DOF arm configuration plus jaw opening in [0, 1] (0 closed, 1 open)."""

    q: np.ndarray
    jaw: float = 0.0

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.q.shape != (6,):
            raise ValueError(f"expected 6 joint values, got shape {self.q.shape}")
        self.jaw = float(min(max(self.jaw, 0.0), 1.0))


def _vec3(entry, where: str) -> np.ndarray:
    try:
        v = np.array([float(x) for x in entry], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DescriptionParseError(f"{where}: expected 3 numbers, got {entry!r}") from exc
    if v.shape != (3,):
        raise DescriptionParseError(f"{where}: expected 3 numbers, got {entry!r}")
    return v


def _quat(entry, where: str) -> np.ndarray:
    try:
        q = np.array([float(x) for x in entry], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DescriptionParseError(f"{where}: expected 4 numbers (w,x,y,z), got {entry!r}") from exc
    if q.shape != (4,):
        raise DescriptionParseError(f"{where}: expected 4 numbers (w,x,y,z), got {entry!r}")
    n = float(np.linalg.norm(q))
    if abs(n - 1.0) > 1e-6:
        raise DescriptionValidationError(f"{where}: quaternion norm {n} is not 1")
    return quat_normalize(q)


def load_robot_description(source: str, profile: str | None = "psm") -> RobotDescription:
    """Parse and validate a robot description from YAML text.

    profile="psm" enforces the 6-joint RRPRRR layout; profile=None accepts
    any joint count/order (used by unit fixtures).
    """
    try:
        doc = yaml.safe_load(source)
    except yaml.YAMLError as exc:
        raise DescriptionParseError(f"description is not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise DescriptionParseError("description must be a mapping")

    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise DescriptionParseError(f"unsupported format_version {version!r} (expected {FORMAT_VERSION})")

    name = doc.get("name")
    if not isinstance(name, str) or not name:
        raise DescriptionParseError("missing robot name")

    raw_joints = doc.get("joints")
    if not isinstance(raw_joints, list) or not raw_joints:
        raise DescriptionParseError("missing joint list")

    joints = []
    for i, rj in enumerate(raw_joints):
        if not isinstance(rj, dict):
            raise DescriptionParseError(f"joint {i}: expected a mapping")
        jname = rj.get("name", f"joint{i}")
        kind = rj.get("kind")
        if kind not in (REVOLUTE, PRISMATIC):
            raise DescriptionParseError(f"joint {jname}: kind must be revolute or prismatic, got {kind!r}")
        axis = _vec3(rj.get("axis"), f"joint {jname} axis")
        if abs(float(np.linalg.norm(axis)) - 1.0) > 1e-9:
            raise DescriptionValidationError(f"joint {jname}: axis {axis.tolist()} is not a unit vector")
        origin = rj.get("origin", {})
        opos = _vec3(origin.get("translation", [0, 0, 0]), f"joint {jname} origin")
        oquat = _quat(origin.get("rotation_wxyz", [1, 0, 0, 0]), f"joint {jname} origin")
        limits = rj.get("limits")
        try:
            lo, hi = float(limits[0]), float(limits[1])
        except (TypeError, ValueError, IndexError) as exc:
            raise DescriptionParseError(f"joint {jname}: limits must be [lo, hi]") from exc
        if not lo < hi:
            raise DescriptionValidationError(f"joint {jname}: limits ({lo}, {hi}) must satisfy lo < hi")
        if kind == REVOLUTE and (lo < -2 * math.pi - 1e-12 or hi > 2 * math.pi + 1e-12):
            raise DescriptionValidationError(f"joint {jname}: revolute limits ({lo}, {hi}) exceed ±2π")
        joints.append(JointSpec(jname, kind, axis, opos, oquat, (lo, hi)))

    if profile == "psm":
        kinds = tuple(j.kind for j in joints)
        if kinds != PSM_PROFILE:
            raise DescriptionValidationError(
                f"PSM profile requires 6 joints in R,R,P,R,R,R order, got {kinds}"
            )

    ee = doc.get("ee_offset", {})
    ee_pos = _vec3(ee.get("translation", [0, 0, 0]), "ee_offset")
    ee_quat = _quat(ee.get("rotation_wxyz", [1, 0, 0, 0]), "ee_offset")

    rcm = doc.get("rcm_point")
    rcm_point = _vec3(rcm, "rcm_point") if rcm is not None else None

    return RobotDescription(name, tuple(joints), ee_pos, ee_quat, rcm_point)


def load_robot_description_file(path: str, profile: str | None = "psm") -> RobotDescription:
    with open(path, "r", encoding="utf-8") as fh:
        return load_robot_description(fh.read(), profile=profile)


def default_psm_text() -> str:
    """YAML text of the bundled PSM-like description (configuration, not ground truth)."""
    return resources.files("psmsim").joinpath("data/psm_default.yaml").read_text(encoding="utf-8")


def default_psm() -> RobotDescription:
    return load_robot_description(default_psm_text())

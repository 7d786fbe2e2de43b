"""Infrastructure-led imitation pipeline.

Floating-car-data XML logs (the subset grammar below) are parsed into
per-timestep snapshots, sliced into per-ego trajectories, filtered down to
positive merge negotiations, encoded into fixed-width normalized sequences,
and used to train the sequence model. The trained policy travels as a
versioned, checksummed JSON artifact.

Input grammar (UTF-8):

    <fcd-export>
      <timestep time="0.00">                      time: strictly increasing
        <vehicle id="v0" x="5.0" y="1.5" speed="10.0" angle="90.0" lane="m_0"/>
      </timestep>
    </fcd-export>

Unknown attributes are ignored, unknown elements rejected.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass
from fnmatch import fnmatch
from typing import Callable, NamedTuple, Optional, Sequence
from xml.parsers import expat
from xml.sax.saxutils import quoteattr

import numpy as np

from . import rnn
from .rng import Rng


class FcdParseError(ValueError):
    """Rejected FCD input; carries 1-based line and 0-based column."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.reason = message
        self.line = line
        self.column = column


class ArtifactError(ValueError):
    """Artifact file cannot be loaded."""


class ChecksumMismatchError(ArtifactError):
    pass


class UnsupportedVersionError(ArtifactError):
    pass


class EncoderMismatchError(ValueError):
    """Sample encoder configuration does not match the policy artifact."""


class InsufficientDataError(ValueError):
    pass


class Snapshot(NamedTuple):
    vehicle_id: str
    x: float
    y: float
    speed: float
    angle: float
    lane: Optional[str] = None


class Timestep(NamedTuple):
    time: float
    snapshots: tuple[Snapshot, ...]


class TrajectoryStep(NamedTuple):
    time: float
    ego: Snapshot
    neighbors: tuple[Snapshot, ...]


@dataclass(frozen=True)
class Trajectory:
    ego_id: str
    steps: tuple[TrajectoryStep, ...]

    def __len__(self) -> int:
        return len(self.steps)


_REQUIRED_VEHICLE_ATTRS = ("id", "x", "y", "speed", "angle")


class _FcdHandler:
    def __init__(self, parser: expat.XMLParserType):
        self.parser = parser
        self.timesteps: list[Timestep] = []
        self.snapshots: list[Snapshot] = []
        self.seen_ids: set[str] = set()
        self.time: Optional[float] = None
        self.depth = 0
        self.last_time = -math.inf

    def _err(self, message: str):
        raise FcdParseError(message, self.parser.CurrentLineNumber, self.parser.CurrentColumnNumber)

    def _number(self, attrs: dict, name: str) -> float:
        raw = attrs.get(name)
        if raw is None:
            self._err(f"missing required attribute '{name}'")
        try:
            value = float(raw)
        except ValueError:
            self._err(f"non-numeric attribute {name}={raw!r}")
        if not math.isfinite(value):
            self._err(f"non-finite attribute {name}={raw!r}")
        return value

    def start(self, name: str, attrs: dict):
        self.depth += 1
        if self.depth == 1:
            if name != "fcd-export":
                self._err(f"unknown root element '{name}' (expected 'fcd-export')")
        elif self.depth == 2:
            if name != "timestep":
                self._err(f"unknown element '{name}' (expected 'timestep')")
            t = self._number(attrs, "time")
            if t <= self.last_time:
                self._err(f"timestep time {t} not strictly increasing (previous {self.last_time})")
            self.time = t
            self.snapshots = []
            self.seen_ids = set()
        elif self.depth == 3:
            if name != "vehicle":
                self._err(f"unknown element '{name}' (expected 'vehicle')")
            vid = attrs.get("id")
            if vid is None:
                self._err("missing required attribute 'id'")
            if vid in self.seen_ids:
                self._err(f"duplicate vehicle id '{vid}' in timestep")
            self.seen_ids.add(vid)
            x = self._number(attrs, "x")
            y = self._number(attrs, "y")
            speed = self._number(attrs, "speed")
            if speed < 0:
                self._err(f"negative speed {speed} for vehicle '{vid}'")
            angle = self._number(attrs, "angle") % 360.0
            self.snapshots.append(Snapshot(vid, x, y, speed, angle, attrs.get("lane")))
        else:
            self._err(f"unexpected element '{name}' below vehicle level")

    def end(self, name: str):
        if self.depth == 2:
            self.timesteps.append(Timestep(self.time, tuple(self.snapshots)))
            self.last_time = self.time
        self.depth -= 1

    def chars(self, data: str):
        if data.strip():
            self._err(f"unexpected text content {data.strip()[:20]!r}")


def parse_fcd(data) -> list[Timestep]:
    """Parse an FCD document (str or bytes) into timesteps.

    Any malformed XML or grammar violation raises FcdParseError with the
    offending location.
    """
    if isinstance(data, str):
        data = data.encode("utf-8")
    parser = expat.ParserCreate(encoding="utf-8")
    handler = _FcdHandler(parser)
    parser.StartElementHandler = handler.start
    parser.EndElementHandler = handler.end
    parser.CharacterDataHandler = handler.chars
    try:
        parser.Parse(data, True)
    except expat.ExpatError as exc:
        raise FcdParseError(
            f"malformed XML: {expat.errors.messages[exc.code]}", exc.lineno, exc.offset
        ) from exc
    return handler.timesteps


def serialize_fcd(timesteps: Sequence[Timestep]) -> str:
    """Write the subset grammar back out (full float precision)."""
    lines = ['<?xml version="1.0" encoding="UTF-8"?>', "<fcd-export>"]
    for ts in timesteps:
        lines.append(f'    <timestep time="{ts.time!r}">')
        for s in ts.snapshots:
            lane = f" lane={quoteattr(s.lane)}" if s.lane is not None else ""
            lines.append(
                f'        <vehicle id={quoteattr(s.vehicle_id)} x="{s.x!r}" y="{s.y!r}"'
                f' speed="{s.speed!r}" angle="{s.angle!r}"{lane}/>'
            )
        lines.append("    </timestep>")
    lines.append("</fcd-export>")
    return "\n".join(lines) + "\n"


def extract_ego_sequences(
    timesteps: Sequence[Timestep],
    ego_selector,
    window: Optional[tuple[float, float]] = None,
) -> list[Trajectory]:
    """One Trajectory per contiguous presence run of each selected ego.

    ego_selector is a glob pattern on vehicle id or a predicate Snapshot->bool;
    window optionally restricts to times in [t0, t1] before extraction.
    A vehicle that vanishes and reappears yields separate trajectories.
    """
    if callable(ego_selector):
        select: Callable[[Snapshot], bool] = ego_selector
    else:
        select = lambda snap: fnmatch(snap.vehicle_id, ego_selector)

    if window is not None:
        t0, t1 = window
        timesteps = [ts for ts in timesteps if t0 <= ts.time <= t1]

    ego_ids: list[str] = []
    seen: set[str] = set()
    for ts in timesteps:
        for snap in ts.snapshots:
            if snap.vehicle_id not in seen and select(snap):
                seen.add(snap.vehicle_id)
                ego_ids.append(snap.vehicle_id)

    trajectories: list[Trajectory] = []
    for ego_id in ego_ids:
        run: list[TrajectoryStep] = []
        for ts in timesteps:
            ego = next((s for s in ts.snapshots if s.vehicle_id == ego_id), None)
            if ego is None:
                if run:
                    trajectories.append(Trajectory(ego_id, tuple(run)))
                    run = []
                continue
            neighbors = tuple(s for s in ts.snapshots if s.vehicle_id != ego_id)
            run.append(TrajectoryStep(ts.time, ego, neighbors))
        if run:
            trajectories.append(Trajectory(ego_id, tuple(run)))
    return trajectories


@dataclass(frozen=True)
class MergeZone:
    x_min: float
    x_max: float
    lane_prefix: str = ""

    def contains(self, snap: Snapshot) -> bool:
        if not self.x_min <= snap.x <= self.x_max:
            return False
        if self.lane_prefix:
            return snap.lane is not None and snap.lane.startswith(self.lane_prefix)
        return True


@dataclass(frozen=True)
class FilterConfig:
    d_min: float = 2.0
    merge_zone: MergeZone = MergeZone(-math.inf, math.inf)
    t_min: int = 10
    t_max: int = 500

    def __post_init__(self):
        if self.d_min <= 0:
            raise ValueError("d_min must be > 0")
        if self.t_min > self.t_max:
            raise ValueError("t_min must be <= t_max")


class Classification(NamedTuple):
    positive: bool
    reason: Optional[str]


def classify_positive(traj: Trajectory, cfg: FilterConfig) -> Classification:
    """Positive iff no near-collision, merge completed, and length in bounds.

    The reason names the first failed clause: near-collision, merge-incomplete,
    too-short or too-long.
    """
    for step in traj.steps:
        ex, ey = step.ego.x, step.ego.y
        for n in step.neighbors:
            if math.hypot(ex - n.x, ey - n.y) < cfg.d_min:
                return Classification(False, "near-collision")
    if not traj.steps or not cfg.merge_zone.contains(traj.steps[-1].ego):
        return Classification(False, "merge-incomplete")
    if len(traj) < cfg.t_min:
        return Classification(False, "too-short")
    if len(traj) > cfg.t_max:
        return Classification(False, "too-long")
    return Classification(True, None)


@dataclass(frozen=True)
class EncoderConfig:
    k: int = 4           # neighbor slots
    v_norm: float = 30.0  # m/s full scale
    d_norm: float = 50.0  # m full scale

    def __post_init__(self):
        if self.k < 0 or self.v_norm <= 0 or self.d_norm <= 0:
            raise ValueError("invalid encoder configuration")

    @property
    def feature_dim(self) -> int:
        return 1 + 2 * self.k


@dataclass
class SequenceSample:
    sequence_id: str
    features: np.ndarray  # (T, 1 + 2k), all in [0, 1]
    targets: np.ndarray   # (T, 2): speed/v_norm, angle/360
    encoder: EncoderConfig


def _clamp01(x: float) -> float:
    return 0.0 if x < 0.0 else (1.0 if x > 1.0 else x)


def encode_features(traj: Trajectory, cfg: EncoderConfig, sequence_id: Optional[str] = None) -> SequenceSample:
    """Normalized per-step features: ego speed, then K nearest neighbors as
    (distance, speed) pairs ascending by distance (ties by vehicle id),
    padded with (1.0, 0.0)."""
    T = len(traj.steps)
    feats = np.empty((T, cfg.feature_dim), dtype=np.float64)
    targets = np.empty((T, 2), dtype=np.float64)
    for t, step in enumerate(traj.steps):
        ego = step.ego
        feats[t, 0] = _clamp01(ego.speed / cfg.v_norm)
        ranked = sorted(
            (
                (math.hypot(ego.x - n.x, ego.y - n.y), n.vehicle_id, n.speed)
                for n in step.neighbors
            ),
        )[: cfg.k]
        for slot in range(cfg.k):
            if slot < len(ranked):
                dist, _, speed = ranked[slot]
                feats[t, 1 + 2 * slot] = _clamp01(dist / cfg.d_norm)
                feats[t, 2 + 2 * slot] = _clamp01(speed / cfg.v_norm)
            else:
                feats[t, 1 + 2 * slot] = 1.0
                feats[t, 2 + 2 * slot] = 0.0
        targets[t, 0] = _clamp01(ego.speed / cfg.v_norm)
        targets[t, 1] = (ego.angle % 360.0) / 360.0
    return SequenceSample(sequence_id or traj.ego_id, feats, targets, cfg)


# --- dataset file: JSON lines, one sample per line ---

def write_dataset(samples: Sequence[SequenceSample], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(
                json.dumps(
                    {
                        "sequence_id": s.sequence_id,
                        "encoder": {"k": s.encoder.k, "v_norm": s.encoder.v_norm, "d_norm": s.encoder.d_norm},
                        "features": s.features.tolist(),
                        "targets": s.targets.tolist(),
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_dataset(path) -> list[SequenceSample]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: bad JSON on line {line_no}: {exc}") from exc
            enc = EncoderConfig(**doc["encoder"])
            samples.append(
                SequenceSample(
                    doc["sequence_id"],
                    np.asarray(doc["features"], dtype=np.float64),
                    np.asarray(doc["targets"], dtype=np.float64),
                    enc,
                )
            )
    return samples


# --- policy artifact ---

ARTIFACT_VERSION = 1


@dataclass
class PolicyArtifact:
    model_cfg: rnn.ModelConfig
    encoder: EncoderConfig
    params: dict[str, np.ndarray]
    version: int = ARTIFACT_VERSION

    def build_model(self) -> rnn.SeqModel:
        return rnn.SeqModel(self.model_cfg, *(self.params[n].copy() for n in rnn.SeqModel.PARAM_NAMES))

    def to_doc(self) -> dict:
        payload = _artifact_payload(self)
        payload["checksum"] = _payload_checksum(payload)
        return payload


def _artifact_payload(artifact: PolicyArtifact) -> dict:
    mc = artifact.model_cfg
    return {
        "format_version": artifact.version,
        "model": {
            "input_dim": mc.input_dim,
            "output_dim": mc.output_dim,
            "hidden_dim": mc.hidden_dim,
            "seed": mc.seed,
        },
        "encoder": {
            "k": artifact.encoder.k,
            "v_norm": artifact.encoder.v_norm,
            "d_norm": artifact.encoder.d_norm,
        },
        "params": {name: arr.ravel().tolist() for name, arr in artifact.params.items()},
    }


def _payload_checksum(payload: dict) -> int:
    scrubbed = {k: v for k, v in payload.items() if k != "checksum"}
    canon = json.dumps(scrubbed, sort_keys=True, separators=(",", ":"))
    return zlib.crc32(canon.encode("utf-8"))


def _param_shapes(cfg: rnn.ModelConfig) -> dict[str, tuple[int, ...]]:
    h, d, o = cfg.hidden_dim, cfg.input_dim, cfg.output_dim
    return {"wx": (4 * h, d), "wh": (4 * h, h), "b": (4 * h,), "wy": (o, h), "by": (o,)}


def artifact_from_doc(doc: dict) -> PolicyArtifact:
    """Rebuild and checksum-verify an artifact document."""
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise ArtifactError("not a policy artifact document")
    if doc["format_version"] != ARTIFACT_VERSION:
        raise UnsupportedVersionError(f"unsupported artifact version {doc['format_version']!r}")
    stored = doc.get("checksum")
    if stored is None or _payload_checksum(doc) != stored:
        raise ChecksumMismatchError("artifact checksum mismatch")
    try:
        model_cfg = rnn.ModelConfig(**doc["model"])
        encoder = EncoderConfig(**doc["encoder"])
        shapes = _param_shapes(model_cfg)
        params = {}
        for name, shape in shapes.items():
            flat = np.asarray(doc["params"][name], dtype=np.float64)
            params[name] = flat.reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(f"malformed artifact payload: {exc}") from exc
    return PolicyArtifact(model_cfg, encoder, params)


def save_artifact(artifact: PolicyArtifact, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(artifact.to_doc(), fh, sort_keys=True)
        fh.write("\n")


def load_artifact(path) -> PolicyArtifact:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"truncated or invalid artifact file: {exc}") from exc
    return artifact_from_doc(doc)


# --- training and evaluation ---

def train_policy(
    samples: Sequence[SequenceSample],
    split_ratio: float = 0.8,
    hidden_dim: int = 32,
    epochs: int = 200,
    patience: Optional[int] = 20,
    lr: float = 1e-3,
    seed: int = 0,
) -> tuple[PolicyArtifact, rnn.LossHistory]:
    """Seeded split by sequence, then rnn.fit; best model wrapped as artifact."""
    if len(samples) < 2:
        raise InsufficientDataError("insufficient data: need at least 2 sequences")
    encoder = samples[0].encoder
    for s in samples:
        if s.encoder != encoder:
            raise EncoderMismatchError("samples carry differing encoder configurations")

    order = list(range(len(samples)))
    Rng(seed).shuffle(order)
    n_train = max(1, min(len(samples) - 1, int(len(samples) * split_ratio)))
    train_set = [(samples[i].features, samples[i].targets) for i in order[:n_train]]
    val_set = [(samples[i].features, samples[i].targets) for i in order[n_train:]]

    model_cfg = rnn.ModelConfig(
        input_dim=encoder.feature_dim, output_dim=2, hidden_dim=hidden_dim, seed=seed
    )
    model = rnn.SeqModel.initialize(model_cfg)
    model, history = rnn.fit(model, train_set, val_set, epochs=epochs, patience=patience, lr=lr, seed=seed)
    params = {name: arr.copy() for name, arr in model.params().items()}
    return PolicyArtifact(model_cfg, encoder, params), history


@dataclass
class EvalReport:
    speed_rmse: float   # m/s, de-normalized
    angle_rmse: float   # degrees, de-normalized
    rows: list[tuple]   # (sequence_id, t, actual_speed, predicted_speed, actual_angle, predicted_angle)


EVAL_CSV_HEADER = "sequence_id,t,actual_speed,predicted_speed,actual_angle,predicted_angle"


def evaluate_policy(artifact: PolicyArtifact, samples: Sequence[SequenceSample]) -> EvalReport:
    """Pooled RMSE per output over all steps, plus per-step profile rows."""
    model = artifact.build_model()
    sq_speed = sq_angle = 0.0
    count = 0
    rows: list[tuple] = []
    for s in samples:
        if s.encoder != artifact.encoder:
            raise EncoderMismatchError(
                f"sample '{s.sequence_id}' encoder {s.encoder} != artifact encoder {artifact.encoder}"
            )
        if s.features.shape[1] != artifact.model_cfg.input_dim:
            raise EncoderMismatchError(
                f"sample '{s.sequence_id}' feature width {s.features.shape[1]} != model input {artifact.model_cfg.input_dim}"
            )
        ys, _ = rnn.forward(model, s.features)
        v = artifact.encoder.v_norm
        for t in range(ys.shape[0]):
            actual_speed = s.targets[t, 0] * v
            pred_speed = ys[t, 0] * v
            actual_angle = s.targets[t, 1] * 360.0
            pred_angle = ys[t, 1] * 360.0
            sq_speed += (actual_speed - pred_speed) ** 2
            sq_angle += (actual_angle - pred_angle) ** 2
            rows.append((s.sequence_id, t, actual_speed, pred_speed, actual_angle, pred_angle))
        count += ys.shape[0]
    if count == 0:
        raise InsufficientDataError("no steps to evaluate")
    return EvalReport(math.sqrt(sq_speed / count), math.sqrt(sq_angle / count), rows)


def eval_rows_to_csv(rows: Sequence[tuple]) -> str:
    lines = [EVAL_CSV_HEADER]
    for sid, t, a_s, p_s, a_a, p_a in rows:
        lines.append(f"{sid},{t},{a_s!r},{p_s!r},{a_a!r},{p_a!r}")
    return "\n".join(lines) + "\n"

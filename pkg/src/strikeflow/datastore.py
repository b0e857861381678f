"""Episode recording, storage, and training-example construction.

One file per episode: a single-line JSON header (schema version, scenario
echo, outcome, array shapes) followed by raw little-endian binary frame
blocks. Arrays round-trip bitwise. A dataset directory carries a
`manifest.ndjson` with one record per episode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import liegroup as lg
from .flowmatch import ActionNormalizer, ActionSequence
from .simenv import ContactInfo, MatchState, Observation, Outcome

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.ndjson"


@dataclass
class Frame:
    obs: Observation
    abs_pose: lg.Pose  # world-frame end-effector pose after this step
    action: lg.Pose  # relative target executed at this step
    twist: np.ndarray  # (6,)
    wall_time: float
    contact: ContactInfo
    match_state: str = MatchState.UNLIT.value


@dataclass
class Episode:
    frames: list[Frame]
    outcome: Outcome
    scenario: dict
    seed: int = 0
    rate_hz: float = 25.0

    def __len__(self) -> int:
        return len(self.frames)

    def validate(self) -> None:
        if len(self.frames) < 2:
            raise ValueError("episode needs at least 2 frames")
        dt = 1.0 / self.rate_hz
        times = [f.wall_time for f in self.frames]
        gaps = np.diff(times)
        if not np.allclose(gaps, dt, atol=1e-9):
            raise ValueError("frame timestamps must advance by the control period")


# declared per-frame record layout: (name, dtype, shape-resolver)
def _frame_layout(header: dict) -> list[tuple[str, str, tuple[int, ...]]]:
    h, w = header["image_shape"]
    th, tw, tc = header["tactile_shape"]
    return [
        ("image", "<f4", (h, w)),
        ("tactile", "<u2", (th, tw, tc)),
        ("proprio", "<f8", (6,)),
        ("abs_pose", "<f8", (7,)),
        ("action", "<f8", (7,)),
        ("twist", "<f8", (6,)),
        ("scalars", "<f8", (6,)),  # wall_time, force, arc, speed, d_force, d_point
        ("flags", "u1", (4,)),  # in_contact, valid, shaft, match_state code
    ]


_MATCH_CODE = {s.value: i for i, s in enumerate(MatchState)}
_MATCH_FROM_CODE = {i: s.value for i, s in enumerate(MatchState)}


def write_episode(path: str | Path, episode: Episode) -> None:
    episode.validate()
    first = episode.frames[0]
    header = {
        "schema_version": SCHEMA_VERSION,
        "outcome": episode.outcome.value,
        "scenario": episode.scenario,
        "seed": episode.seed,
        "rate_hz": episode.rate_hz,
        "n_frames": len(episode.frames),
        "image_shape": list(first.obs.image.shape),
        "tactile_shape": list(first.obs.tactile.shape),
    }
    layout = _frame_layout(header)
    blocks = []
    for f in episode.frames:
        c = f.contact
        values = {
            "image": np.ascontiguousarray(f.obs.image, dtype="<f4"),
            "tactile": np.ascontiguousarray(f.obs.tactile, dtype="<u2"),
            "proprio": np.ascontiguousarray(f.obs.proprio, dtype="<f8"),
            "abs_pose": f.abs_pose.as_array().astype("<f8"),
            "action": f.action.as_array().astype("<f8"),
            "twist": np.ascontiguousarray(f.twist, dtype="<f8"),
            "scalars": np.array(
                [f.wall_time, c.normal_force, c.arc_pos, c.tangential_speed, c.d_force, c.d_point],
                dtype="<f8",
            ),
            "flags": np.array(
                [c.in_contact, c.valid_location, c.shaft_contact, _MATCH_CODE[f.match_state]],
                dtype="u1",
            ),
        }
        for name, dtype, shape in layout:
            arr = values[name]
            if arr.shape != shape:
                raise ValueError(f"frame field {name} has shape {arr.shape}, expected {shape}")
            blocks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        for b in blocks:
            fh.write(b)


def load_episode(path: str | Path) -> Episode:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"unreadable episode header: {e}") from e
    for key in ("schema_version", "outcome", "n_frames", "image_shape", "tactile_shape"):
        if key not in header:
            raise ValueError(f"episode header missing field {key!r}")
    if header["schema_version"] != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {header['schema_version']}")
    layout = _frame_layout(header)
    frame_bytes = sum(int(np.prod(s)) * np.dtype(d).itemsize for _, d, s in layout)
    expected = frame_bytes * header["n_frames"]
    if len(payload) != expected:
        raise ValueError(f"episode payload is {len(payload)} bytes, expected {expected}")

    frames = []
    offset = 0
    for _ in range(header["n_frames"]):
        values = {}
        for name, dtype, shape in layout:
            n = int(np.prod(shape))
            arr = np.frombuffer(payload, dtype=dtype, count=n, offset=offset).reshape(shape)
            offset += n * np.dtype(dtype).itemsize
            values[name] = arr.copy()
        scalars, flags = values["scalars"], values["flags"]
        contact = ContactInfo(
            in_contact=bool(flags[0]),
            normal_force=float(scalars[1]),
            tangential_speed=float(scalars[3]),
            contact_point=np.zeros(3),
            arc_pos=float(scalars[2]),
            valid_location=bool(flags[1]),
            shaft_contact=bool(flags[2]),
            d_force=float(scalars[4]),
            d_point=float(scalars[5]),
        )
        frames.append(
            Frame(
                obs=Observation(
                    image=values["image"], tactile=values["tactile"], proprio=values["proprio"]
                ),
                abs_pose=lg.Pose.from_array(values["abs_pose"]),
                action=lg.Pose.from_array(values["action"]),
                twist=values["twist"],
                wall_time=float(scalars[0]),
                contact=contact,
                match_state=_MATCH_FROM_CODE[int(flags[3])],
            )
        )
    return Episode(
        frames=frames,
        outcome=Outcome(header["outcome"]),
        scenario=header.get("scenario", {}),
        seed=header.get("seed", 0),
        rate_hz=header.get("rate_hz", 25.0),
    )


def append_manifest(directory: str | Path, record: dict) -> None:
    with open(Path(directory) / MANIFEST_NAME, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record) + "\n")


def read_manifest(directory: str | Path) -> list[dict]:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


@dataclass
class Dataset:
    episodes: list[Episode]
    action_horizon: int = 16

    @staticmethod
    def load(directory: str | Path, action_horizon: int = 16) -> "Dataset":
        directory = Path(directory)
        records = read_manifest(directory)
        episodes = [load_episode(directory / r["file"]) for r in records]
        return Dataset(episodes, action_horizon)

    def __len__(self) -> int:
        return len(self.episodes)


@dataclass
class NormalizationStats:
    """Training-set statistics for action translations and proprio twists."""

    action: ActionNormalizer
    twist_mean: np.ndarray  # (6,)
    twist_std: np.ndarray  # (6,)

    def normalize_twist(self, twist: np.ndarray) -> np.ndarray:
        return (twist - self.twist_mean) / self.twist_std

    def to_dict(self) -> dict:
        return {
            "action_mean": self.action.mean.tolist(),
            "action_std": self.action.std.tolist(),
            "twist_mean": self.twist_mean.tolist(),
            "twist_std": self.twist_std.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "NormalizationStats":
        return NormalizationStats(
            action=ActionNormalizer(np.array(d["action_mean"]), np.array(d["action_std"])),
            twist_mean=np.array(d["twist_mean"]),
            twist_std=np.maximum(np.array(d["twist_std"]), 1e-6),
        )


def relative_targets(episode: Episode, k: int, horizon: int) -> ActionSequence:
    """Next `horizon` absolute poses re-expressed in frame k's EE frame.

    Episodes shorter than k + horizon repeat the final pose, so
    compose(pose_k, target_i) reproduces the recorded absolute poses.
    """
    inv_k = lg.inverse(episode.frames[k].abs_pose)
    last = len(episode.frames) - 1
    poses = []
    for i in range(1, horizon + 1):
        j = min(k + i, last)
        poses.append(lg.compose(inv_k, episode.frames[j].abs_pose))
    return ActionSequence.from_poses(poses)


def compute_normalization(dataset: Dataset) -> NormalizationStats:
    """Per-dimension mean/std over all target translations and twists."""
    if not dataset.episodes:
        raise ValueError("empty dataset")
    trans, twists = [], []
    for ep in dataset.episodes:
        for k in range(len(ep.frames) - 1):
            targets = relative_targets(ep, k, dataset.action_horizon)
            trans.append(targets.translations)
            twists.append(ep.frames[k].twist)
    t = np.concatenate(trans, axis=0)
    w = np.stack(twists)
    return NormalizationStats(
        action=ActionNormalizer(t.mean(axis=0), t.std(axis=0)),
        twist_mean=w.mean(axis=0),
        twist_std=np.maximum(w.std(axis=0), 1e-6),
    )


@dataclass
class TrainingExample:
    image: np.ndarray  # (H, W) float32
    tactile: np.ndarray  # (h, w, 2) uint16
    proprio: np.ndarray  # (6,) normalized twist
    target: ActionSequence  # translations normalized


def build_training_examples(dataset: Dataset, stats: NormalizationStats) -> list[TrainingExample]:
    """Flatten every (frame, 16-pose target) pair, normalized for training."""
    examples = []
    for ep in dataset.episodes:
        for k in range(len(ep.frames) - 1):
            targets = relative_targets(ep, k, dataset.action_horizon)
            normalized = ActionSequence(
                stats.action.normalize(targets.translations), targets.rotations
            )
            obs = ep.frames[k].obs
            examples.append(
                TrainingExample(
                    image=obs.image,
                    tactile=obs.tactile,
                    proprio=stats.normalize_twist(ep.frames[k].twist),
                    target=normalized,
                )
            )
    return examples


def make_training_examples(
    dataset: Dataset,
    rng: np.random.Generator,
    stats: NormalizationStats | None = None,
    batch_size: int = 64,
):
    """Yield shuffled batches (lists of TrainingExample), one epoch per call."""
    if not dataset.episodes:
        raise ValueError("empty dataset")
    stats = stats or compute_normalization(dataset)
    examples = build_training_examples(dataset, stats)
    order = rng.permutation(len(examples))
    for start in range(0, len(examples), batch_size):
        yield [examples[i] for i in order[start : start + batch_size]]

"""Measurement and cyber anomaly injection and labeled three-period dataset assembly."""
import json
import os
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from enum import Enum

import numpy as np
import pandas as pd

from icode_rca import configure_logger
from icode_rca.errors import ArtifactError, ValidationError
from icode_rca.systems import (
    Integrator, SystemSpec, add_sensor_noise, ground_truth_graph, integrate,
    read_trajectory_csv, write_trajectory_csv,
)

logger = configure_logger(__name__)

PERIODS = ("normal", "cyber", "measurement")


class AnomalyKind(str, Enum):
    MEASUREMENT = "Measurement"
    CYBER = "Cyber"


@dataclass(frozen=True)
class AnomalySegment:
    """
    One anomaly instance: offset a ~ N(alpha, 1) applied to variable root
    on samples [start, start + length).
    """

    kind: AnomalyKind
    root: int
    alpha: float
    offset: float
    start: int
    length: int

    def __post_init__(self):
        object.__setattr__(self, "kind", AnomalyKind(self.kind))
        if self.root < 0:
            raise ValidationError(f"segment root must be non-negative, got {self.root}")
        if self.length < 1:
            raise ValidationError(f"segment length must be at least 1, got {self.length}")
        if self.start < 0:
            raise ValidationError(f"segment start must be non-negative, got {self.start}")

    @property
    def stop(self):
        return self.start + self.length

    @classmethod
    def draw(cls, kind, root, alpha, start, length, rng):
        return cls(kind, int(root), float(alpha), float(rng.normal(alpha, 1.0)), int(start), int(length))

    def check_bounds(self, p, limit):
        if self.root >= p:
            raise ValidationError(f"segment root {self.root} is outside 0..{p - 1}")
        if self.stop > limit:
            raise ValidationError(f"segment window [{self.start}, {self.stop}) exceeds {limit} samples")

    def offsets(self, rng=None):
        """Per-sample offsets: the drawn constant, or fresh N(alpha, 1) draws when rng is given."""
        if rng is None:
            return np.full(self.length, self.offset)
        return rng.normal(self.alpha, 1.0, size=self.length)

    def to_dict(self):
        data = asdict(self)
        data["kind"] = self.kind.value
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(frozen=True)
class DatasetProtocol:
    """Arithmetic of one dataset build; the defaults reproduce the full-scale protocol."""

    points_per_period: int = 100_000
    segment_length: int = 500
    n_segments: int = 100
    downsample_to: int = 10_000
    alpha: float = 1.0
    noise_sigma: float = 0.01
    seed: int = 0
    gap_length: int = None
    noise_on_anomaly_periods: bool = True
    per_step_offsets: bool = False
    independent_periods: bool = False
    burn_in: int = 0
    dt: float = 0.01
    method: str = Integrator.RK4.value

    @property
    def gap(self):
        return self.segment_length if self.gap_length is None else self.gap_length

    @property
    def stride(self):
        return self.points_per_period // self.downsample_to

    def validate(self):
        if self.points_per_period < 2:
            raise ValidationError("a period needs at least 2 points", field="protocol.points_per_period")
        if self.downsample_to < 1 or self.points_per_period % self.downsample_to:
            raise ValidationError(
                f"stride sampling needs downsample_to to divide points_per_period "
                f"({self.points_per_period} / {self.downsample_to} is not whole)",
                field="protocol.downsample_to")
        if self.segment_length < 1:
            raise ValidationError("must be at least 1", field="protocol.segment_length")
        if self.n_segments < 0 or self.gap < 0:
            raise ValidationError("segment count and gap must be non-negative", field="protocol.n_segments")
        needed = self.n_segments * (self.gap + self.segment_length)
        if needed > self.points_per_period:
            raise ValidationError(
                f"{self.n_segments} segments of {self.segment_length} points with {self.gap}-point gaps "
                f"need {needed} points but a period has {self.points_per_period}",
                field="protocol.n_segments")
        if self.segment_length % self.stride or self.gap % self.stride:
            raise ValidationError(
                f"segment_length ({self.segment_length}) and gap ({self.gap}) must be multiples of the "
                f"downsampling stride {self.stride} so windows map onto whole samples",
                field="protocol.segment_length")
        if self.noise_sigma < 0:
            raise ValidationError("must be non-negative", field="protocol.noise_sigma")
        if not np.isfinite(self.alpha):
            raise ValidationError("must be finite", field="protocol.alpha")
        if self.dt <= 0:
            raise ValidationError("must be positive", field="protocol.dt")
        if self.burn_in < 0:
            raise ValidationError("must be non-negative", field="protocol.burn_in")
        Integrator(self.method)
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown keys {sorted(unknown)}", field="protocol")
        return cls(**data)


@dataclass(eq=False)
class LabeledDataset:
    """A period's trajectory with per-sample labels and the segments that produced them."""

    trajectory: object
    labels: np.ndarray
    segments: list
    spec: SystemSpec
    graph: object
    period: str = "normal"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (len(self.trajectory),):
            raise ValidationError(f"{self.labels.shape[0]} labels for {len(self.trajectory)} samples")

    def segment_window(self, segment):
        return self.trajectory.window(segment.start, segment.stop)


def inject_measurement(traj, segment, seed=None, per_step=False):
    """Post-hoc sensor corruption: only column root inside the window changes."""
    if segment.kind is not AnomalyKind.MEASUREMENT:
        raise ValidationError(f"expected a Measurement segment, got {segment.kind.value}")
    segment.check_bounds(traj.p, len(traj))
    states = np.array(traj.states)
    rng = np.random.default_rng(seed) if per_step else None
    states[segment.start:segment.stop, segment.root] += segment.offsets(rng)
    return traj.with_states(states)


def _offset_schedule(segments, p, rng=None):
    schedule = {}
    for segment in segments:
        for step, value in zip(range(segment.start, segment.stop), segment.offsets(rng)):
            vector = np.zeros(p)
            vector[segment.root] = value
            schedule[step] = vector
    return schedule.get


def inject_cyber(spec, x0, segment, dt, steps, seed=None, method=Integrator.RK4, per_step=False):
    """
    Simulate with the root replaced by A(x_root) = x_root + a inside the dynamics during
    the segment window. Every equation reads the offset through its coupling coefficients
    at the true state, so it propagates to the root's dependents; the recorded samples are
    the true state.
    """
    if segment.kind is not AnomalyKind.CYBER:
        raise ValidationError(f"expected a Cyber segment, got {segment.kind.value}")
    segment.check_bounds(spec.p, steps)
    rng = np.random.default_rng(seed) if per_step else None
    return integrate(spec, x0, dt, steps, method, state_offset=_offset_schedule([segment], spec.p, rng))


def _root_sequence(p, count, rng):
    # Without replacement until every variable is used, then reshuffle
    roots = []
    while len(roots) < count:
        roots.extend(int(k) for k in rng.permutation(p))
    return roots[:count]


def _layout(protocol, kind, p, rng):
    starts = [protocol.gap + i * (protocol.gap + protocol.segment_length) for i in range(protocol.n_segments)]
    roots = _root_sequence(p, protocol.n_segments, rng)
    return [
        AnomalySegment.draw(kind, root, protocol.alpha, start, protocol.segment_length, rng)
        for root, start in zip(roots, starts)
    ]


def _downsample(raw, segments, protocol):
    stride = protocol.stride
    trajectory = raw.stride(stride)
    mapped = [
        AnomalySegment(s.kind, s.root, s.alpha, s.offset, s.start // stride, s.length // stride)
        for s in segments
    ]
    labels = np.zeros(len(trajectory), dtype=np.int64)
    for segment in mapped:
        labels[segment.start:segment.stop] = 1
    return trajectory, labels, mapped


def build_dataset(spec, protocol):
    """
    Normal, cyber and measurement periods of points_per_period raw samples each,
    stride-downsampled to downsample_to samples with labels and segments remapped.
    """
    protocol.validate()
    method = Integrator(protocol.method)
    steps = protocol.points_per_period - 1
    root_seq, init_seq, noise_seq, draw_seq = np.random.SeedSequence(protocol.seed).spawn(4)
    roots_rng = np.random.default_rng(root_seq)
    init_children = init_seq.spawn(len(PERIODS))
    noise_children = noise_seq.spawn(len(PERIODS))

    def period_streams(index):
        # Shared streams make each anomaly period a counterfactual of the normal one
        if protocol.independent_periods:
            return init_children[index], noise_children[index]
        return init_seq, noise_seq

    def start_state(seq):
        x0 = spec.initial_state(np.random.default_rng(seq))
        if protocol.burn_in:
            x0 = integrate(spec, x0, protocol.dt, protocol.burn_in, method).states[-1]
        return x0

    def sensed(raw, seq, anomalous):
        sigma = protocol.noise_sigma if (protocol.noise_on_anomaly_periods or not anomalous) else 0.0
        return add_sensor_noise(raw, sigma, np.random.default_rng(seq).integers(2**63))

    graph = ground_truth_graph(spec)
    per_step_rng = np.random.default_rng(draw_seq) if protocol.per_step_offsets else None
    datasets = {}
    for index, period in enumerate(PERIODS):
        init, noise = period_streams(index)
        x0 = start_state(init)
        segments = []
        if period == "normal":
            raw = sensed(integrate(spec, x0, protocol.dt, steps, method), noise, anomalous=False)
        elif period == "cyber":
            segments = _layout(protocol, AnomalyKind.CYBER, spec.p, roots_rng)
            schedule = _offset_schedule(segments, spec.p, per_step_rng)
            raw = sensed(integrate(spec, x0, protocol.dt, steps, method, state_offset=schedule), noise, anomalous=True)
        else:
            segments = _layout(protocol, AnomalyKind.MEASUREMENT, spec.p, roots_rng)
            raw = sensed(integrate(spec, x0, protocol.dt, steps, method), noise, anomalous=True)
            for segment in segments:
                seed = per_step_rng.integers(2**63) if per_step_rng is not None else None
                raw = inject_measurement(raw, segment, seed=seed, per_step=per_step_rng is not None)

        trajectory, labels, mapped = _downsample(raw, segments, protocol)
        logger.info(f"Built {period} period: {len(trajectory)} samples, {len(mapped)} segments")
        datasets[period] = LabeledDataset(
            trajectory, labels, mapped, spec, graph, period=period,
            meta={"spec": spec.to_dict(), "protocol": protocol.to_dict(), "period": period,
                  "seed": protocol.seed},
        )
    return datasets


def save_dataset(dataset, directory):
    os.makedirs(directory, exist_ok=True)
    write_trajectory_csv(dataset.trajectory, os.path.join(directory, "trajectory.csv"))
    pd.DataFrame({"index": np.arange(len(dataset.labels)), "label": dataset.labels}).to_csv(
        os.path.join(directory, "labels.csv"), index=False)
    with open(os.path.join(directory, "segments.json"), "w") as handle:
        json.dump([s.to_dict() for s in dataset.segments], handle, indent=2)
    meta = dict(dataset.meta, created=datetime.now(timezone.utc).isoformat())
    with open(os.path.join(directory, "meta.json"), "w") as handle:
        json.dump(meta, handle, indent=2)
    return directory


def load_dataset(directory):
    if not os.path.isdir(directory):
        raise ArtifactError(f"Dataset directory not found: {directory}")
    try:
        with open(os.path.join(directory, "meta.json")) as handle:
            meta = json.load(handle)
        with open(os.path.join(directory, "segments.json")) as handle:
            segments = [AnomalySegment.from_dict(s) for s in json.load(handle)]
        labels = pd.read_csv(os.path.join(directory, "labels.csv"))["label"].to_numpy()
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise ArtifactError(f"Error reading dataset {directory}: {e}")
    trajectory = read_trajectory_csv(os.path.join(directory, "trajectory.csv"))
    spec = SystemSpec.from_dict(meta["spec"])
    return LabeledDataset(trajectory, labels, segments, spec, ground_truth_graph(spec),
                          period=meta.get("period", "normal"), meta=meta)


def save_datasets(datasets, root):
    return {period: save_dataset(dataset, os.path.join(root, period)) for period, dataset in datasets.items()}


def load_datasets(root):
    return {period: load_dataset(os.path.join(root, period)) for period in PERIODS}

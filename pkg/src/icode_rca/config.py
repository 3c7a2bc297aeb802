"""
Experiment configuration: one JSON document with full defaulting.

    {
      "system":   {"kind": "ReactionDiffusion", "p": 20, ...},
      "protocol": {"points_per_period": 100000, "downsample_to": 10000, ...},
      "train":    {"lambda": 0.01, "epochs": 200, ...},
      "analysis": {"window": 25, "quantile": 0.99, "m": 10, "cutoff": 0.8, ...},
      "output_dir": "runs/..."
    }

Any key may be overridden on the command line with --set section.key=value;
values are parsed as JSON literals and fall back to plain strings.
"""
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

from icode_rca.anomalies import DatasetProtocol
from icode_rca.errors import ArtifactError, ValidationError
from icode_rca.model import TrainConfig
from icode_rca.systems import SystemKind, SystemSpec

NEIGHBOR_GRAPHS = ("normal", "anomalous")
BENCHMARK_SYSTEMS = (SystemKind.LOTKA_VOLTERRA.value, SystemKind.LORENZ96.value, SystemKind.REACTION_DIFFUSION.value)


def default_output_root():
    return os.getenv("ICODE_OUTPUT_ROOT", "runs")


def _from_section(cls, data, section):
    if not isinstance(data, dict):
        raise ValidationError("expected a JSON object", field=section)
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ValidationError(f"unknown keys {sorted(unknown)}", field=section)
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ValidationError(str(e), field=section)


def _check_types(instance, section):
    """Reject values whose type does not match the field annotation (ints are accepted as floats)."""
    for f in fields(instance):
        value = getattr(instance, f.name)
        if value is None and f.default is None:
            continue
        if isinstance(value, bool) and f.type is not bool:
            matches = False
        elif f.type is float:
            matches = isinstance(value, (int, float))
        else:
            matches = isinstance(value, f.type)
        if not matches:
            name = "lambda" if f.name == "lam" else f.name
            raise ValidationError(f"expected {f.type.__name__}, got {type(value).__name__} {value!r}",
                                  field=f"{section}.{name}")
    return instance


@dataclass(frozen=True)
class SystemConfig:
    kind: str = SystemKind.REACTION_DIFFUSION.value
    p: int = 20
    forcing: float = 10.0
    seed: int = 0
    edge_probability: float = 0.2

    def build(self):
        try:
            kind = SystemKind(self.kind)
        except ValueError:
            raise ValidationError(f"'{self.kind}' is not one of {[k.value for k in SystemKind]}",
                                  field="system.kind")
        if kind is SystemKind.LORENZ96:
            return SystemSpec.lorenz96(self.p, self.forcing)
        if kind is SystemKind.REACTION_DIFFUSION:
            return SystemSpec.reaction_diffusion(self.p)
        if not 0.0 <= self.edge_probability <= 1.0:
            raise ValidationError("must lie in [0, 1]", field="system.edge_probability")
        if kind is SystemKind.LINEAR:
            return SystemSpec.linear(self.p, self.seed, self.edge_probability)
        return SystemSpec.lotka_volterra(self.p, self.seed, self.edge_probability)


@dataclass(frozen=True)
class AnalysisConfig:
    window: int = 25
    quantile: float = 0.99
    m: int = 10
    cutoff: float = 0.8
    retrain_epochs: int = 50
    neighbor_graph: str = "normal"
    kmeans_seed: int = 0

    def validate(self, p):
        if self.window < 1:
            raise ValidationError("must be at least 1", field="analysis.window")
        if not 0.0 < self.quantile < 1.0:
            raise ValidationError("must lie in (0, 1)", field="analysis.quantile")
        if not 1 <= self.m <= p * p:
            raise ValidationError(f"must lie in 1..{p * p}", field="analysis.m")
        if not 0.0 <= self.cutoff <= 1.0:
            raise ValidationError("must lie in [0, 1]", field="analysis.cutoff")
        if self.retrain_epochs < 0:
            raise ValidationError("must be non-negative", field="analysis.retrain_epochs")
        if self.neighbor_graph not in NEIGHBOR_GRAPHS:
            raise ValidationError(f"must be one of {list(NEIGHBOR_GRAPHS)}", field="analysis.neighbor_graph")
        return self


@dataclass(frozen=True)
class ExperimentConfig:
    system: SystemConfig = field(default_factory=SystemConfig)
    protocol: DatasetProtocol = field(default_factory=DatasetProtocol)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    output_dir: str = field(default_factory=default_output_root)

    def validate(self):
        for section in ("system", "protocol", "train", "analysis"):
            _check_types(getattr(self, section), section)
        if not isinstance(self.output_dir, str):
            raise ValidationError(f"expected a path string, got {self.output_dir!r}", field="output_dir")
        spec = self.system.build()
        self.protocol.validate()
        self.train.validate()
        self.analysis.validate(spec.p)
        return self

    def spec(self):
        return self.system.build()

    def with_seed(self, seed):
        """Same experiment with the data and training streams reseeded."""
        return replace(self, protocol=replace(self.protocol, seed=seed), train=replace(self.train, seed=seed))

    def to_dict(self):
        return {
            "system": asdict(self.system),
            "protocol": self.protocol.to_dict(),
            "train": self.train.to_dict(),
            "analysis": asdict(self.analysis),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ValidationError("expected a JSON object", field="config")
        unknown = set(data) - {"system", "protocol", "train", "analysis", "output_dir"}
        if unknown:
            raise ValidationError(f"unknown keys {sorted(unknown)}", field="config")
        try:
            protocol = DatasetProtocol.from_dict(data.get("protocol", {}))
            train = TrainConfig.from_dict(data.get("train", {}))
        except TypeError as e:
            raise ValidationError(str(e), field="config")
        return cls(
            system=_from_section(SystemConfig, data.get("system", {}), "system"),
            protocol=protocol,
            train=train,
            analysis=_from_section(AnalysisConfig, data.get("analysis", {}), "analysis"),
            output_dir=data.get("output_dir", default_output_root()),
        )


def desk_scale_protocol(**changes):
    """Five times smaller than the full protocol: 20,000 raw points to 2,000 samples, 20 segments."""
    return replace(DatasetProtocol(points_per_period=20_000, n_segments=20, downsample_to=2_000), **changes)


@dataclass(frozen=True)
class SuiteConfig:
    """A grid of systems x alphas x seeds, each cell a full experiment derived from base."""

    base: ExperimentConfig = field(
        default_factory=lambda: ExperimentConfig(protocol=desk_scale_protocol()))
    systems: tuple = BENCHMARK_SYSTEMS
    alphas: tuple = (0.5, 1.0)
    seeds: tuple = (0,)
    parallelism: int = 1
    output_dir: str = field(default_factory=default_output_root)

    def cells(self):
        cells = []
        for kind in self.systems:
            for alpha in self.alphas:
                for seed in self.seeds:
                    cell_id = f"{kind}-alpha{alpha:g}-seed{seed}"
                    config = replace(
                        self.base.with_seed(seed),
                        system=replace(self.base.system, kind=kind),
                        protocol=replace(self.base.protocol, alpha=alpha, seed=seed),
                        output_dir=os.path.join(self.output_dir, "cells", cell_id),
                    )
                    cells.append((cell_id, config))
        return cells

    def validate(self):
        if not self.systems or not self.alphas or not self.seeds:
            raise ValidationError("systems, alphas and seeds must all be non-empty", field="suite")
        if self.parallelism < 1:
            raise ValidationError("must be at least 1", field="suite.parallelism")
        for _, config in self.cells():
            config.validate()
        return self

    def to_dict(self):
        return {
            "base": self.base.to_dict(),
            "systems": list(self.systems),
            "alphas": list(self.alphas),
            "seeds": list(self.seeds),
            "parallelism": self.parallelism,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ValidationError("expected a JSON object", field="suite")
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValidationError(f"unknown keys {sorted(unknown)}", field="suite")
        defaults = cls()
        base = data.get("base")
        try:
            alphas = tuple(float(a) for a in data.get("alphas", defaults.alphas))
            seeds = tuple(int(s) for s in data.get("seeds", defaults.seeds))
            parallelism = int(data.get("parallelism", defaults.parallelism))
        except (TypeError, ValueError) as e:
            raise ValidationError(f"alphas, seeds and parallelism must be numeric: {e}", field="suite")
        return cls(
            base=ExperimentConfig.from_dict(base) if base is not None else defaults.base,
            systems=tuple(data.get("systems", defaults.systems)),
            alphas=alphas,
            seeds=seeds,
            parallelism=parallelism,
            output_dir=data.get("output_dir", defaults.output_dir),
        )


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data, overrides):
    """Apply 'a.b.c=value' assignments to a nested dict, returning a new dict."""
    data = json.loads(json.dumps(data))
    for override in overrides or ():
        key, sep, value = override.partition("=")
        if not sep or not key:
            raise ValidationError(f"override '{override}' is not of the form key=value", field="--set")
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValidationError(f"'{part}' is not a section", field=key)
        node[parts[-1]] = _parse_value(value)
    return data


def read_json(path):
    try:
        with open(path) as handle:
            return json.load(handle)
    except OSError as e:
        raise ArtifactError(f"Error reading config {path}: {e}")
    except json.JSONDecodeError as e:
        raise ValidationError(f"not valid JSON: {e}", field=str(path))


def load_config(path=None, overrides=None):
    data = read_json(path) if path else {}
    return ExperimentConfig.from_dict(apply_overrides(data, overrides)).validate()


def load_suite(path=None, overrides=None):
    data = read_json(path) if path else {}
    return SuiteConfig.from_dict(apply_overrides(data, overrides)).validate()


def write_config(config, path):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as handle:
        json.dump(config.to_dict(), handle, indent=2, sort_keys=True)

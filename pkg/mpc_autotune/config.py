import os
from pathlib import Path
from typing import Any, TypeVar

from pydantic import BaseModel, ValidationError
import yaml

from .utils.core import ConfigError, ErrorCode

DATA_PATH = Path(__file__).parent / "data"
ROBOTS_PATH = DATA_PATH / "robots"
CONFIGS_PATH = DATA_PATH / "configs"

M = TypeVar("M", bound=BaseModel)


class TunerConfig:
    """Named defaults shared by the solver, the twin and the tuning loop."""

    HORIZON_NODES = 20
    OCP_DT = 0.0025
    CONTROL_PERIOD = 0.002
    MPC_PERIOD = 0.004
    PHYSICS_SUBSTEP = 0.0005

    SOLVER_MAX_ITERATIONS = 10
    SOLVER_TOLERANCE = 1e-9
    SOLVER_GAP_TOLERANCE = 1e-9
    REG_MIN = 1e-9
    REG_MAX = 1e9
    REG_FACTOR = 10.0
    LINE_SEARCH_STEPS = 11
    ACCEPT_RATIO = 0.1

    ALPHA = 0.8
    FAILURE_PENALTY_FACTOR = 10.0
    ITERATION_COST_SECONDS = 1e-3

    GP_NOISE = 1e-6
    GP_MAX_JITTER = 1e-6
    SAAS_TAU_SCALE = 0.1
    NUTS_WARMUP = 1024
    NUTS_SAMPLES = 1024
    NUTS_THIN = 16
    NUTS_MAX_TREE_DEPTH = 10
    NUTS_TARGET_ACCEPT = 0.8
    NUTS_DIVERGENCE_WARN = 0.2

    ACQ_RAW_SAMPLES = 1024
    ACQ_RESTARTS = 8
    ACQ_SWEEPS = 3

    N_INIT = 100
    N_MAX = 300
    PATIENCE = 100
    PATIENCE_RTOL = 1e-6

    WORKERS = 1
    OUTPUT_DIR_ENV = "MPC_AUTOTUNE_OUT"
    OUTPUT_DIR = "runs"

    @classmethod
    def get_horizon_nodes(cls) -> int:
        return getattr(cls, "HORIZON_NODES", 20)

    @classmethod
    def get_ocp_dt(cls) -> float:
        """OCP node spacing; 20 nodes at 2.5 ms give the 50 ms lookahead"""
        return getattr(cls, "OCP_DT", 0.0025)

    @classmethod
    def get_solver_max_iterations(cls) -> int:
        return getattr(cls, "SOLVER_MAX_ITERATIONS", 10)

    @classmethod
    def get_solver_tolerance(cls) -> float:
        return getattr(cls, "SOLVER_TOLERANCE", 1e-9)

    @classmethod
    def get_line_search_steps(cls) -> list[float]:
        """Backtracking step set {1, 1/2, ..., 2^-10}"""
        count = getattr(cls, "LINE_SEARCH_STEPS", 11)
        return [2.0**-i for i in range(count)]

    @classmethod
    def get_alpha(cls) -> float:
        return getattr(cls, "ALPHA", 0.8)

    @classmethod
    def get_failure_penalty_factor(cls) -> float:
        return getattr(cls, "FAILURE_PENALTY_FACTOR", 10.0)

    @classmethod
    def get_nuts_counts(cls) -> tuple[int, int, int]:
        """(warmup, samples, thin)"""
        return (
            getattr(cls, "NUTS_WARMUP", 1024),
            getattr(cls, "NUTS_SAMPLES", 1024),
            getattr(cls, "NUTS_THIN", 16),
        )

    @classmethod
    def get_acquisition_budget(cls) -> tuple[int, int]:
        """(raw quasi-random candidates, refined restarts)"""
        return getattr(cls, "ACQ_RAW_SAMPLES", 1024), getattr(cls, "ACQ_RESTARTS", 8)

    @classmethod
    def get_workers(cls) -> int:
        return getattr(cls, "WORKERS", 1)

    @classmethod
    def get_output_dir(cls) -> Path:
        """Default output directory, overridable through the environment"""
        env = os.environ.get(cls.OUTPUT_DIR_ENV)
        return Path(env) if env else Path(getattr(cls, "OUTPUT_DIR", "runs"))


tuner_config = TunerConfig()


PARAM_LABELS: tuple[str, ...] = (
    "w_pos",
    "w_rot",
    "w_tau",
    "w_v",
    "K_p",
    "K_d",
    "K_pc_x",
    "K_pc_y",
    "K_pc_z",
    "K_dc_x",
    "K_dc_y",
    "K_dc_z",
)

# Cost-weight and gain columns of the tuning results; "default" is the hand-tuned start.
PRESETS: dict[str, list[float]] = {
    "default": [1e5, 1e-4, 1e-2, 1e-3, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
    "vanilla-bo": [7.2e4, 5.8e-5, 6.5e-3, 8.1e-4, 12.3, 0.45, 3.2, 2.8, 15.4, 1.5, 1.3, 8.7],
    "saasbo": [4.1e4, 2.3e-5, 3.7e-3, 7.9e-4, 28.7, 0.18, 7.8, 6.5, 89.2, 2.1, 1.8, 10.3],
}


def yaml_line_of(node: yaml.Node | None, loc: tuple[Any, ...]) -> int | None:
    """1-based line of the deepest node reachable along ``loc``."""
    line = node.start_mark.line + 1 if node is not None else None
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            child = None
            for key_node, value_node in node.value:
                if key_node.value == str(key):
                    child = value_node
                    line = key_node.start_mark.line + 1
                    break
            node = child
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int):
            if key >= len(node.value):
                break
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            break
        if node is None:
            break
    return line


def read_yaml(path: str | Path, code: ErrorCode = ErrorCode.CONFIG_INVALID) -> tuple[Any, yaml.Node | None]:
    """Parse a YAML file, keeping the node tree for line-anchored errors."""
    path = Path(path)
    if not path.exists():
        raise ConfigError("file not found", str(path), code=ErrorCode.CONFIG_NOT_FOUND)
    text = path.read_text(encoding="utf-8")
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        line = e.problem_mark.line + 1 if e.problem_mark else None
        raise ConfigError(f"YAML syntax error: {e.problem}", str(path), line, code=code) from e
    return data, node


def validate_model(
    model_cls: type[M],
    data: Any,
    node: yaml.Node | None,
    path: str | Path,
    loc_prefix: tuple[Any, ...] = (),
    error_cls: type[ConfigError] = ConfigError,
) -> M:
    """Validate ``data`` into ``model_cls``; the first error is anchored to its line."""
    try:
        return model_cls.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = loc_prefix + tuple(first["loc"])
        line = yaml_line_of(node, loc)
        where = ".".join(str(p) for p in loc) or "<root>"
        raise error_cls(f"{where}: {first['msg']}", str(path), line) from exc


def resolve_robot_path(name_or_path: str | Path, base_dir: Path | None = None) -> Path:
    """Bundled model name (``ur10e``) or a path relative to the config file."""
    candidate = Path(name_or_path)
    if candidate.suffix == "" and (ROBOTS_PATH / f"{candidate}.yaml").exists():
        return ROBOTS_PATH / f"{candidate}.yaml"
    if not candidate.is_absolute() and base_dir is not None:
        candidate = base_dir / candidate
    return candidate

"""
Settings
QSettings-backed INI configuration turned into frozen config dataclasses

Every concern owns one INI group:
    [driveline] [targets] [reference]   -> parameter file
    [bench]                             -> bench file
    [controller] [cost] [rollout]       -> cost file
    [gp] [learning]                     -> learning file
Missing keys fall back to the dataclass defaults below.
"""
import logging
import os
from dataclasses import dataclass, fields, replace

from errors import ConfigError, ShiftTuneError
from qt_compat import STATUS_FORMAT_ERROR, STATUS_OK, ini_settings

logger = logging.getLogger(__name__)

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
CONFIG_DIR = os.path.join(BASE_DIR, "config")

DEFAULT_PARAMS_FILE = os.path.join(CONFIG_DIR, "driveline.ini")
DEFAULT_BENCH_FILE = os.path.join(CONFIG_DIR, "bench.ini")
DEFAULT_COST_FILE = os.path.join(CONFIG_DIR, "cost.ini")
DEFAULT_LEARNING_FILE = os.path.join(CONFIG_DIR, "learning.ini")

# Reduced-scale two-speed layout: inverse inertia matrix [[500, -100], [-100, 300]]
# with brake kinematics r1 = 2, r2 = 1 (see docs/CONFIG_REFERENCE.md)
DEFAULT_C = (500.0, 100.0, -700.0, -600.0, -100.0, -300.0, 700.0, 400.0)


# =====================================================
#   Config dataclasses
# =====================================================
@dataclass(frozen=True)
class DrivelineConstants:
    """Raw driveline inputs before calibration (c1..c8, gear ratios, load)"""
    c: tuple = DEFAULT_C
    r1: float = 2.0
    r2: float = 1.0
    tv: float = 3.5


@dataclass(frozen=True)
class CalibrationTargets:
    natural_frequency: float = 5.0
    damping_ratio: float = 0.15
    inertia_ratio: float = 0.1


@dataclass(frozen=True)
class ReferenceConfig:
    duration: float = 1.0
    torque_fraction: float = 0.5
    dt: float = 0.01
    motor_speed: float = 20.0
    speed_margin: float = 1.0


@dataclass(frozen=True)
class BenchConfig:
    """Hidden perturbations and sensor noise of the virtual bench"""
    viscous: float = 0.02
    coulomb: float = 0.3
    blend_speed: float = 0.5
    clutch_gains: tuple = (0.85, 0.85)
    noise_std: tuple = (0.02, 0.02, 0.02, 2e-4)
    seed: int = 0

    def __post_init__(self):
        if len(self.clutch_gains) != 2 or min(self.clutch_gains) <= 0:
            raise ConfigError(f"bench clutch gains must be two positive values, got {self.clutch_gains}")
        if len(self.noise_std) != 4 or min(self.noise_std) < 0:
            raise ConfigError(f"bench noise stds must be four non-negative values, got {self.noise_std}")
        if self.blend_speed <= 0:
            raise ConfigError(f"bench blend speed must be positive, got {self.blend_speed}")

    @classmethod
    def ideal(cls, seed=0):
        """Bench without perturbations or noise: behaves as the nominal model"""
        return cls(viscous=0.0, coulomb=0.0, clutch_gains=(1.0, 1.0),
                   noise_std=(0.0, 0.0, 0.0, 0.0), seed=seed)

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


@dataclass(frozen=True)
class ControllerConfig:
    q_diag: tuple = (1.0, 1.0, 50.0, 50.0)
    r_diag: tuple = (0.1, 0.1)
    riccati_tol: float = 1e-12
    riccati_max_iter: int = 100000


@dataclass(frozen=True)
class CostConfig:
    """Diagonal of L^-1 (1 / width^2 per state dimension)"""
    l_inv: tuple = (0.25, 1.0, 25.0, 100.0)

    def __post_init__(self):
        if len(self.l_inv) != 4 or min(self.l_inv) < 0:
            raise ConfigError(f"cost l_inv must be four non-negative values, got {self.l_inv}")


@dataclass(frozen=True)
class RolloutConfig:
    initial_variance: float = 1e-4


@dataclass(frozen=True)
class GpConfig:
    n_max: int = 400
    restarts: int = 3
    max_iter: int = 100
    restart_spread: float = 0.5
    workers: int = 1


@dataclass(frozen=True)
class LearningConfig:
    outer_iters: int = 5
    policy_max_iter: int = 200
    grad_tol: float = 1e-6
    rel_tol: float = 1e-8
    armijo: float = 1e-4
    shrink: float = 0.5
    max_shrinks: int = 30
    fd_rel_step: float = 1e-5
    workers: int = 1
    early_stop: bool = False
    early_stop_tol: float = 0.02


@dataclass(frozen=True)
class RunConfig:
    """Where the configuration lives and where outputs go"""
    params_path: str = DEFAULT_PARAMS_FILE
    bench_path: str = DEFAULT_BENCH_FILE
    cost_path: str = DEFAULT_COST_FILE
    learning_path: str = DEFAULT_LEARNING_FILE
    seed: int = 0
    output_dir: str = "runs/latest"


@dataclass(frozen=True)
class Settings:
    driveline: DrivelineConstants = DrivelineConstants()
    targets: CalibrationTargets = CalibrationTargets()
    reference: ReferenceConfig = ReferenceConfig()
    bench: BenchConfig = BenchConfig()
    controller: ControllerConfig = ControllerConfig()
    cost: CostConfig = CostConfig()
    rollout: RolloutConfig = RolloutConfig()
    gp: GpConfig = GpConfig()
    learning: LearningConfig = LearningConfig()


# =====================================================
#   INI store
# =====================================================
class IniStore:
    """Reads and writes one INI file through QSettings"""

    def __init__(self, path, create=False):
        """
        Open an INI file

        Args:
            path: File path
            create: Start a fresh file (any existing file is replaced)
        """
        self.path = str(path)
        if create:
            folder = os.path.dirname(os.path.abspath(self.path))
            os.makedirs(folder, exist_ok=True)
            if os.path.exists(self.path):
                os.remove(self.path)
        elif not os.path.isfile(self.path):
            raise ConfigError(f"{self.path}: configuration file not found")
        self.settings = ini_settings(self.path)
        if self.settings.status() == STATUS_FORMAT_ERROR:
            raise ConfigError(f"{self.path}: malformed INI file")

    def groups(self):
        return list(self.settings.childGroups())

    def group(self, name):
        """Raw values of one group (strings, or string lists for comma values)"""
        self.settings.beginGroup(name)
        try:
            return {key: self.settings.value(key) for key in self.settings.childKeys()}
        finally:
            self.settings.endGroup()

    def write_group(self, name, values):
        self.settings.beginGroup(name)
        try:
            for key, value in values.items():
                self.settings.setValue(key, _format_value(value))
        finally:
            self.settings.endGroup()

    def sync(self):
        self.settings.sync()
        if self.settings.status() != STATUS_OK:
            raise ShiftTuneError(f"{self.path}: could not write INI file")


def write_ini(path, groups):
    """Write {group: {key: value}} to a fresh INI file"""
    store = IniStore(path, create=True)
    for name, values in groups.items():
        store.write_group(name, values)
    store.sync()


def read_ini(path):
    """Read every group of an INI file as raw values"""
    store = IniStore(path)
    return {name: store.group(name) for name in store.groups()}


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return [_format_value(item) for item in value]
    if isinstance(value, float):
        return repr(value)
    return str(value)


# -----------------------------------------------------
#   Value parsing
# -----------------------------------------------------
def parse_float(raw, key):
    if isinstance(raw, (list, tuple)):
        raise ConfigError(f"{key}: expected a single number, got a list {raw!r}")
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None


def parse_int(raw, key):
    value = parse_float(raw, key)
    if not value.is_integer():
        raise ConfigError(f"{key}: expected an integer, got {raw!r}")
    return int(value)


def parse_bool(raw, key):
    text = str(raw).strip().lower()
    if text in ("true", "1", "yes", "on"):
        return True
    if text in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected true/false, got {raw!r}")


def parse_vector(raw, key, size):
    items = list(raw) if isinstance(raw, (list, tuple)) else str(raw).split(",")
    try:
        values = tuple(float(item) for item in items)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {size} comma separated numbers, got {raw!r}") from None
    if len(values) != size:
        raise ConfigError(f"{key}: expected {size} values, got {len(values)}")
    return values


def _parse_like(default, raw, key):
    if isinstance(default, bool):
        return parse_bool(raw, key)
    if isinstance(default, int):
        return parse_int(raw, key)
    if isinstance(default, float):
        return parse_float(raw, key)
    if isinstance(default, tuple):
        return parse_vector(raw, key, len(default))
    return str(raw)


def _warn_unknown(store, name, raw, known):
    unknown = sorted(set(raw) - set(known))
    if unknown:
        logger.warning("%s: ignoring unknown keys in [%s]: %s", store.path, name, ", ".join(unknown))


def load_group(store, name, cls):
    """Build config dataclass `cls` from INI group `name`, defaults for missing keys"""
    raw = store.group(name)
    known = {f.name for f in fields(cls)}
    _warn_unknown(store, name, raw, known)
    template = cls()
    values = {}
    for key in known & set(raw):
        values[key] = _parse_like(getattr(template, key), raw[key], f"[{name}] {key}")
    return cls(**values)


def load_driveline(store):
    raw = store.group("driveline")
    _warn_unknown(store, "driveline", raw, [f"c{i + 1}" for i in range(8)] + ["r1", "r2", "tv"])
    base = DrivelineConstants()
    c = list(base.c)
    for i in range(8):
        key = f"c{i + 1}"
        if key in raw:
            c[i] = parse_float(raw[key], f"[driveline] {key}")
    values = {"c": tuple(c)}
    for key in ("r1", "r2", "tv"):
        if key in raw:
            values[key] = parse_float(raw[key], f"[driveline] {key}")
    return DrivelineConstants(**values)


# =====================================================
#   Entry points
# =====================================================
def load_settings(run=None):
    """Load the four configuration files named by a RunConfig"""
    run = run or RunConfig()
    params = IniStore(run.params_path)
    bench = IniStore(run.bench_path)
    cost = IniStore(run.cost_path)
    learning = IniStore(run.learning_path)

    settings = Settings(
        driveline=load_driveline(params),
        targets=load_group(params, "targets", CalibrationTargets),
        reference=load_group(params, "reference", ReferenceConfig),
        bench=load_group(bench, "bench", BenchConfig).with_seed(run.seed),
        controller=load_group(cost, "controller", ControllerConfig),
        cost=load_group(cost, "cost", CostConfig),
        rollout=load_group(cost, "rollout", RolloutConfig),
        gp=load_group(learning, "gp", GpConfig),
        learning=load_group(learning, "learning", LearningConfig),
    )
    logger.debug("Loaded settings from %s, %s, %s, %s",
                 run.params_path, run.bench_path, run.cost_path, run.learning_path)
    return settings

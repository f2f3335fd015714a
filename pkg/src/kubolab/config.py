"""Run configuration: a TOML file validated against a closed schema."""
import re
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BumpConfig(_Section):
    center: Tuple[float, float]
    width: float = Field(gt=0)
    amplitude: float


class PotentialConfig(_Section):
    kind: Literal["zero", "gaussian_bumps", "random_bumps"] = "zero"
    bumps: List[BumpConfig] = []
    count: int = Field(3, ge=1)
    radius: float = Field(4.0, gt=0)
    sup_norm: float = Field(1.0, ge=0)


class ModelConfig(_Section):
    backend: Literal["hofstadter", "landau"] = "hofstadter"
    L: int = Field(24, ge=2)
    p: int = Field(1, ge=0)
    q: int = Field(3, ge=1)
    boundary: Literal["open", "torus"] = "open"
    hopping: float = 1.0
    B: float = Field(1.0, gt=0)
    n_levels: int = Field(2, ge=1)
    m_max: int = Field(100, ge=1)
    lam: float = Field(0.0, ge=0)
    potential: PotentialConfig = PotentialConfig()


class SwitchConfig(_Section):
    m1: float = Field(1.0, gt=0)
    m2: float = Field(1.0, gt=0)
    order: int = Field(3, ge=1)
    sharp: bool = False
    check_margin: bool = True


class DriveConfig(_Section):
    kind: Literal["ramp", "pulse", "off"] = "ramp"
    k: int = Field(4, ge=1)
    onset: Optional[float] = None
    offset: Optional[float] = None
    amplitude: float = 1.0
    taus: List[float] = [32.0, 64.0, 128.0, 256.0, 512.0]
    step_factor: float = Field(8.0, gt=0)
    step_floor: int = Field(4096, ge=1)
    method: Literal["yoshida4", "midpoint"] = "yoshida4"
    certify: bool = True
    samples: int = Field(33, ge=2)


class ProbeConfig(_Section):
    s: List[float] = [0.25]
    fermi_energy: Optional[float] = None
    gap_index: int = Field(1, ge=1)
    window_half_width: Optional[float] = None
    convention: Optional[str] = None
    quantization_tolerance: float = Field(0.05, gt=0)
    lambda_fractions: List[float] = [0.0, 0.1, 0.2, 0.3]
    expansion_order: int = Field(3, ge=1)
    fd_step: float = Field(1e-3, gt=0)
    remainder_orders: List[int] = []
    energy_bound_m: int = Field(2, ge=0)
    energy_bound_taus: List[float] = [32.0, 256.0]

    @model_validator(mode="after")
    def _s_in_range(self):
        if any(not 0 <= s <= 1 for s in self.s):
            raise ValueError("probe s values must lie in [0, 1]")
        return self


class OutputConfig(_Section):
    directory: str = "out"
    formats: List[Literal["csv", "json", "svg"]] = ["csv", "json"]


class SeedConfig(_Section):
    potential: int = Field(0, ge=0)


STAGES = ("build", "kubo", "evolve", "sweep-tau", "sweep-lambda", "expansion", "diagnostics")


class RunConfig(_Section):
    pipeline: List[Literal[STAGES]] = ["build", "kubo"]
    model: ModelConfig = ModelConfig()
    switch: SwitchConfig = SwitchConfig()
    drive: DriveConfig = DriveConfig()
    probes: ProbeConfig = ProbeConfig()
    outputs: OutputConfig = OutputConfig()
    seeds: SeedConfig = SeedConfig()


def _key_line(text, loc):
    """Best-effort line number of the TOML key at ``loc`` (a pydantic error location)."""
    keys = [k for k in loc if isinstance(k, str)]
    if not keys:
        return None
    table, key = ".".join(keys[:-1]), keys[-1]
    current = ""
    fallback = None
    for n, line in enumerate(text.splitlines(), 1):
        head = re.match(r"\s*\[+\s*([^\]]+?)\s*\]+", line)
        if head:
            current = head.group(1)
            if current == ".".join(keys):
                fallback = n
            continue
        m = re.match(r"\s*([A-Za-z0-9_\-\.\"]+)\s*=", line)
        if m:
            full = ".".join(x for x in (current, m.group(1).strip('"')) if x)
            if full == ".".join(keys) or (current == table and m.group(1) == key):
                return n
    return fallback


def parse_config(text, source="<string>"):
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = err["loc"]
            key = ".".join(str(k) for k in loc)
            n = _key_line(text, loc)
            where = f"{source}:{n}" if n else source
            lines.append(f"{where}: {key}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from None


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), str(path))

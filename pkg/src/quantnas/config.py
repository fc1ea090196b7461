"""INI run configuration with strict key checking.

Sections and keys::

    [space]   channels, body_repeats, scale, bits, adq, adq_bn,
              exempt_first_last, global_residual, head, body, skip,
              upsample, tail
    [edge]    noise_dist, san_noise_scaling, act_noise
    [search]  every SearchConfig field
    [train]   every TrainConfig field
    [data]    n_train_images, n_test_images, image_hw, lr_patch, lr_stride,
              seed, image_dir
    [sweep]   etas

Lists are comma separated; sizes are written ``32x32``. Every error names
the file, line and key at fault.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from .search import SearchConfig, TrainConfig
from .supernet import BLOCKS, SearchSpaceSpec
from .tensor import ConfigurationError


@dataclass
class DataConfig:
    n_train_images: int = 64
    n_test_images: int = 16
    image_hw: Tuple[int, int] = (64, 64)
    lr_patch: int = 32
    lr_stride: Optional[int] = None
    seed: int = 0
    image_dir: Optional[str] = None


@dataclass
class EdgeConfig:
    noise_dist: str = "gaussian"
    san_noise_scaling: str = "range"
    act_noise: str = "post"

    def as_kwargs(self) -> dict:
        return {"noise_dist": self.noise_dist, "san_noise_scaling": self.san_noise_scaling, "act_noise": self.act_noise}


@dataclass
class RunConfig:
    space: SearchSpaceSpec = field(default_factory=SearchSpaceSpec)
    edge: EdgeConfig = field(default_factory=EdgeConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    etas: List[float] = field(default_factory=lambda: [0.0, 1e-4, 1e-3])


# -- value parsers ----------------------------------------------------------------

def _int(v: str) -> int:
    return int(v)


def _float(v: str) -> float:
    return float(v)


def _str(v: str) -> str:
    return v.strip()


def _bool(v: str) -> bool:
    key = v.strip().lower()
    if key not in configparser.ConfigParser.BOOLEAN_STATES:
        raise ValueError(f"not a boolean: {v!r}")
    return configparser.ConfigParser.BOOLEAN_STATES[key]


def _opt_int(v: str) -> Optional[int]:
    return None if v.strip().lower() in ("", "none") else int(v)


def _opt_str(v: str) -> Optional[str]:
    return None if v.strip().lower() in ("", "none") else v.strip()


def _int_tuple(v: str) -> Tuple[int, ...]:
    items = tuple(int(x) for x in v.split(",") if x.strip())
    if not items:
        raise ValueError("empty list")
    return items


def _float_list(v: str) -> List[float]:
    items = [float(x) for x in v.split(",") if x.strip()]
    if not items:
        raise ValueError("empty list")
    return items


def _str_list(v: str) -> List[str]:
    items = [x.strip() for x in v.split(",") if x.strip()]
    if not items:
        raise ValueError("empty list")
    return items


def _hw(v: str) -> Tuple[int, int]:
    parts = re.split(r"[x,]", v.strip().lower())
    if len(parts) != 2:
        raise ValueError(f"expected HxW, got {v!r}")
    return int(parts[0]), int(parts[1])


Parser = Callable[[str], object]

_SPACE_KEYS: Dict[str, Parser] = {
    "channels": _int,
    "body_repeats": _int,
    "scale": _int,
    "bits": _int_tuple,
    "adq": _bool,
    "adq_bn": _bool,
    "exempt_first_last": _bool,
    "global_residual": _str,
    **{blk: _str_list for blk in BLOCKS},
}
_EDGE_KEYS: Dict[str, Parser] = {"noise_dist": _str, "san_noise_scaling": _str, "act_noise": _str}
_SEARCH_KEYS: Dict[str, Parser] = {
    "epochs": _int,
    "batch_size": _int,
    "w_lr": _float,
    "w_momentum": _float,
    "w_weight_decay": _float,
    "w_optimizer": _str,
    "step_lr_scale": _float,
    "alpha_lr": _float,
    "eta": _float,
    "mu0": _float,
    "warmup_epochs": _int,
    "seed": _int,
    "strategy": _str,
    "bitops_hw": _hw,
    "max_iters_per_epoch": _opt_int,
}
_TRAIN_KEYS: Dict[str, Parser] = {
    "epochs": _int,
    "batch_size": _int,
    "w_lr": _float,
    "w_momentum": _float,
    "w_weight_decay": _float,
    "w_optimizer": _str,
    "step_lr_scale": _float,
    "seed": _int,
    "max_iters_per_epoch": _opt_int,
    "eval_crop": _opt_int,
}
_DATA_KEYS: Dict[str, Parser] = {
    "n_train_images": _int,
    "n_test_images": _int,
    "image_hw": _hw,
    "lr_patch": _int,
    "lr_stride": _opt_int,
    "seed": _int,
    "image_dir": _opt_str,
}
_SWEEP_KEYS: Dict[str, Parser] = {"etas": _float_list}

SCHEMA: Dict[str, Dict[str, Parser]] = {
    "space": _SPACE_KEYS,
    "edge": _EDGE_KEYS,
    "search": _SEARCH_KEYS,
    "train": _TRAIN_KEYS,
    "data": _DATA_KEYS,
    "sweep": _SWEEP_KEYS,
}

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s\[][^=:]*?)\s*[=:]")


def _line_numbers(text: str) -> Dict[Tuple[Optional[str], str], int]:
    """(section, key) -> 1-based line; sections are stored with key ''."""
    where: Dict[Tuple[Optional[str], str], int] = {}
    section: Optional[str] = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            where.setdefault((section, ""), lineno)
            continue
        m = _KEY_RE.match(line)
        if m and not line[:1].isspace():
            where.setdefault((section, m.group(1).strip().lower()), lineno)
    return where


def parse_config_text(text: str, source: str = "<config>", base: Optional[RunConfig] = None) -> RunConfig:
    """Parse INI text on top of ``base`` (defaults when omitted)."""
    lines = _line_numbers(text)

    def at(section: Optional[str], key: str = "") -> str:
        line = lines.get((section, key))
        return f"{source}:{line}" if line else source

    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigurationError(f"{source}:{exc.lineno}: key outside of any [section]") from exc
    except configparser.DuplicateOptionError as exc:
        raise ConfigurationError(f"{source}:{exc.lineno}: duplicate key {exc.option!r} in [{exc.section}]") from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigurationError(f"{source}:{exc.lineno}: duplicate section [{exc.section}]") from exc
    except configparser.Error as exc:
        raise ConfigurationError(f"{source}: {exc}") from exc

    cfg = base if base is not None else RunConfig()
    values: Dict[str, Dict[str, object]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigurationError(f"{at(section)}: unknown section [{section}]; expected one of {sorted(SCHEMA)}")
        schema = SCHEMA[section]
        parsed: Dict[str, object] = {}
        for key, raw in parser.items(section):
            if key not in schema:
                raise ConfigurationError(
                    f"{at(section, key)}: unknown key {key!r} in [{section}]; allowed: {', '.join(sorted(schema))}"
                )
            try:
                parsed[key] = schema[key](raw)
            except ValueError as exc:
                raise ConfigurationError(f"{at(section, key)}: bad value for {key!r} in [{section}]: {exc}") from exc
        values[section] = parsed

    space_vals = dict(values.get("space", {}))
    catalogs = {k: list(v) for k, v in cfg.space.catalogs.items()}
    for blk in BLOCKS:
        if blk in space_vals:
            catalogs[blk] = space_vals.pop(blk)
    space = replace(cfg.space, catalogs=catalogs, **space_vals)
    out = RunConfig(
        space=space,
        edge=replace(cfg.edge, **values.get("edge", {})),
        search=replace(cfg.search, **values.get("search", {})),
        train=replace(cfg.train, **values.get("train", {})),
        data=replace(cfg.data, **values.get("data", {})),
        etas=list(values.get("sweep", {}).get("etas", cfg.etas)),
    )
    _validate(out, at)
    return out


def _validate(cfg: RunConfig, at: Callable[..., str]) -> None:
    checks = [
        ("space", "global_residual", lambda: cfg.space.validate()),
        ("search", "", lambda: cfg.search.validate()),
        ("train", "", lambda: cfg.train.validate()),
    ]
    for section, key, check in checks:
        try:
            check()
        except ConfigurationError as exc:
            raise ConfigurationError(f"{at(section)}: [{section}] {exc}") from exc
    choices = {
        ("edge", "noise_dist"): ("gaussian", "uniform"),
        ("edge", "san_noise_scaling"): ("range", "raw"),
        ("edge", "act_noise"): ("pre", "post"),
        ("search", "strategy"): ("independent", "shared", "san"),
    }
    for (section, key), allowed in choices.items():
        value = getattr(getattr(cfg, section), key)
        if value not in allowed:
            raise ConfigurationError(f"{at(section, key)}: {key!r} must be one of {allowed}, got {value!r}")


def load_config(path, base: Optional[RunConfig] = None) -> RunConfig:
    p = Path(path)
    return parse_config_text(p.read_text(), str(p), base)


def dump_config(cfg: RunConfig) -> str:
    """INI text that parses back to ``cfg``."""

    def fmt(v) -> str:
        if v is None:
            return "none"
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (list, tuple)):
            return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        if isinstance(v, float):
            return repr(v)
        return str(v)

    out = ["[space]"]
    for f in fields(SearchSpaceSpec):
        if f.name == "catalogs":
            continue
        out.append(f"{f.name} = {fmt(getattr(cfg.space, f.name))}")
    for blk in BLOCKS:
        out.append(f"{blk} = {fmt(cfg.space.catalogs[blk])}")
    sections = (("edge", cfg.edge), ("search", cfg.search), ("train", cfg.train), ("data", cfg.data))
    hw_keys = {"bitops_hw", "image_hw"}
    for name, obj in sections:
        out.append("")
        out.append(f"[{name}]")
        for f in fields(obj):
            v = getattr(obj, f.name)
            out.append(f"{f.name} = {v[0]}x{v[1]}" if f.name in hw_keys else f"{f.name} = {fmt(v)}")
    out += ["", "[sweep]", f"etas = {fmt(cfg.etas)}", ""]
    return "\n".join(out)


def toy_preset() -> RunConfig:
    """Calibrated desk-scale toy task used by the acceptance suite.

    Architecture and W learning rates are raised (Adam, alpha lr 3e-2,
    entropy mu0 1e-2) so that the 20-epoch, ~300-iteration search moves
    alpha far enough to be meaningful; quantizer steps learn 100x slower
    than weights so that 8-bit activation steps (about 1e-3) do not collapse.
    """
    search = SearchConfig(
        epochs=20, batch_size=16, w_lr=1e-3, w_optimizer="adam", w_weight_decay=0.0,
        step_lr_scale=0.01, alpha_lr=3e-2, mu0=1e-2,
    )
    train = TrainConfig(
        epochs=60, batch_size=16, w_lr=1e-3, w_optimizer="adam", w_weight_decay=0.0, step_lr_scale=0.01,
    )
    return RunConfig(
        space=SearchSpaceSpec(channels=8, body_repeats=1, scale=2, bits=(4, 8), global_residual="bicubic"),
        search=search,
        train=train,
        data=DataConfig(n_train_images=128, n_test_images=16, image_hw=(32, 32), lr_patch=8, lr_stride=None),
    )

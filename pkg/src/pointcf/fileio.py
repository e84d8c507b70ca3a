"""On-disk formats for the command-line surface.

Cloud files are a fixed little-endian binary layout (float32 on disk,
float64 in memory); run configuration is line-oriented ``key = value`` text
with strict unknown-key rejection.
"""

from __future__ import annotations

import struct

import numpy as np

from .geometry import PointCloud

CLOUD_MAGIC = b"PCF1"
CLOUD_VERSION = 1


class CloudFileError(ValueError):
    """A cloud file is malformed; the message carries the byte offset."""


class ConfigError(ValueError):
    """A config file has an unknown, malformed, or missing key."""


def write_cloud(path: str, cloud: PointCloud) -> None:
    """magic, u32 version, u32 N, u32 c, u8 has_labels, then the buffers."""
    n, c = cloud.n, cloud.feature_width
    has_labels = cloud.labels is not None
    with open(path, "wb") as fh:
        fh.write(CLOUD_MAGIC)
        fh.write(struct.pack("<IIIB", CLOUD_VERSION, n, c, int(has_labels)))
        fh.write(cloud.positions.astype("<f4").tobytes())
        fh.write(cloud.features.astype("<f4").tobytes())
        if has_labels:
            fh.write(cloud.labels.astype("<u4").tobytes())


def read_cloud(path: str) -> PointCloud:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != CLOUD_MAGIC:
        raise CloudFileError(f"bad magic at byte 0: {data[:4]!r} (expected {CLOUD_MAGIC!r})")
    if len(data) < 17:
        raise CloudFileError(f"truncated header at byte {len(data)} (need 17)")
    version, n, c, has_labels = struct.unpack_from("<IIIB", data, 4)
    if version != CLOUD_VERSION:
        raise CloudFileError(f"unsupported version {version} at byte 4")
    pos = 17

    def take(count: int, dtype: str, what: str) -> np.ndarray:
        nonlocal pos
        nbytes = count * 4
        if len(data) < pos + nbytes:
            raise CloudFileError(
                f"truncated {what} at byte {len(data)} (need {pos + nbytes})")
        out = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
        pos += nbytes
        return out

    positions = take(n * 3, "<f4", "positions").reshape(n, 3).astype(np.float64)
    features = take(n * c, "<f4", "features").reshape(n, c).astype(np.float64)
    labels = None
    if has_labels:
        labels = take(n, "<u4", "labels").astype(np.int64)
    if len(data) != pos:
        raise CloudFileError(f"trailing bytes at byte {pos} (file has {len(data)})")
    return PointCloud(positions, features, labels)


# -- run configuration ---------------------------------------------------------

# key -> (parser, default); None default means the key is required
_BOOL = {"true": True, "false": False, "1": True, "0": False}


def _parse_bool(s: str) -> bool:
    if s.lower() not in _BOOL:
        raise ValueError(f"expected true/false, got {s!r}")
    return _BOOL[s.lower()]


def _parse_int_list(s: str):
    if s.lower() == "auto":
        return "auto"
    return tuple(int(v.strip()) for v in s.split(",") if v.strip())


def _parse_float_list(s: str):
    if s.lower() == "auto":
        return "auto"
    return tuple(float(v.strip()) for v in s.split(",") if v.strip())


def _parse_optional_int(s: str):
    return "auto" if s.lower() == "auto" else int(s)


CONFIG_SCHEMA: dict[str, tuple] = {
    # network
    "num_classes": (int, None),
    "feature_width": (_parse_optional_int, "auto"),
    "levels": (int, 2),
    "base_width": (int, 32),
    "base_grid": (float, 0.05),
    "blocks_per_level": (_parse_int_list, "auto"),
    "k": (int, 16),
    "variant": (str, "pcf_subtractive"),
    "heads": (int, 8),
    "c_mid": (int, 16),
    "activation": (str, "sigmoid"),
    "psi_hidden_layers": (int, 2),
    "bottleneck_ratio": (float, 0.25),
    "post_relu": (_parse_bool, True),
    "norm": (_parse_bool, True),
    "d_qk": (_parse_optional_int, "auto"),
    "disable_conv": (_parse_bool, False),
    "disable_reweight": (_parse_bool, False),
    # training
    "epochs": (int, None),
    "initial_lr": (float, 0.001),
    "decay_factor": (float, 0.5),
    "decay_every_epochs": (int, 80),
    "seed": (int, 0),
    "class_weights": (_parse_float_list, "auto"),
    "weight_decay": (float, 0.0001),
    "eval_every": (int, 1),
}


def parse_config(text: str) -> dict:
    """Parse ``key = value`` lines; unknown keys are rejected by name."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        parser, _ = CONFIG_SCHEMA[key]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    return values


def resolve_config(values: dict) -> dict:
    """Fill defaults; required keys without values raise by name."""
    out = {}
    for key, (_, default) in CONFIG_SCHEMA.items():
        if key in values:
            out[key] = values[key]
        elif default is None:
            raise ConfigError(f"missing required key {key!r}")
        else:
            out[key] = default
    return out


def format_resolved(resolved: dict) -> str:
    """The fully resolved config as config-file text (defaults included)."""
    lines = []
    for key in CONFIG_SCHEMA:
        v = resolved[key]
        if isinstance(v, bool):
            lines.append(f"{key} = {'true' if v else 'false'}")
        elif isinstance(v, tuple):
            lines.append(f"{key} = {','.join(str(x) for x in v)}")
        elif v == "auto":
            lines.append(f"{key} = auto")
        else:
            lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"

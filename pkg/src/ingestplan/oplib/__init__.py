"""Operator library: builtin ids, short aliases and layouts."""

from .operators import ALIASES, BUILTINS, COMMUTES_WITH_REPLICATE  # noqa: F401
from .layouts import CODEC_CALLS, IoStats, Layout, deserialize, serialize_rows  # noqa: F401

"""Generator chaining for adversarial PE examples.

The heavy lifting happens in the C++ core; this package wraps the bindings
and decodes the JSON the experiment verbs return.
"""

import json

from ._chainae import (
    ChainaeError,
    action_kinds,
    apply_random,
    code_fingerprint,
    compute_checksum,
    evasion_rate,
    generate_sample,
    parse,
    relative_improvement,
    round_trip,
    sha256_hex,
    validate,
)
from . import _chainae

__all__ = [
    "ChainaeError",
    "action_kinds",
    "apply_random",
    "code_fingerprint",
    "compute_checksum",
    "default_config",
    "error_code",
    "evasion_rate",
    "generate_sample",
    "parse",
    "relative_improvement",
    "round_trip",
    "run",
    "sha256_hex",
    "validate",
]


def error_code(exc):
    """Code name of a ChainaeError, e.g. "MalformedHeader"."""
    return str(exc).split(":", 1)[0]


def default_config():
    return json.loads(_chainae.default_config())


def run(verb, config=None, out="out"):
    """Runs corpus/train/baseline/matrix (decoded JSON) or report (markdown)."""
    text = _chainae.run(verb, json.dumps(config or {}), str(out))
    return text if verb == "report" else json.loads(text)

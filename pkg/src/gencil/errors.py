"""Error taxonomy shared across modules.

The CLI maps these onto exit codes: usage/input problems exit 2, missed
training gates exit 3, violated internal invariants exit 4.
"""


class GateError(RuntimeError):
    """A configured training gate (accuracy/loss threshold) was not reached."""


class FrozenParamsError(RuntimeError):
    """Weights that must stay frozen were touched, or a checksum mismatched."""


class InvariantError(RuntimeError):
    """An internal invariant broke; indicates a bug, not bad input."""

"""Exception types shared across modules (kept free of heavy imports so the
CLI can reference them before the numerics backend loads)."""


class DivergenceError(RuntimeError):
    """Training loss went non-finite; the last good checkpoint was restored
    and persisted before this was raised."""

"""Flat ``key = value`` config files shared by all subcommands.

One namespace holds the pipeline, scheduler, loss and embedder keys; each
consumer declares which keys it understands and the CLI rejects leftovers.
"""


class ConfigError(Exception):
    pass


def load_config(path) -> dict:
    """Parse a flat config file into a string->string dict.

    Blank lines and ``#`` comments are ignored; later assignments win.
    """
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def parse_floats(text: str) -> tuple:
    return tuple(float(tok) for tok in text.replace(",", " ").split())


def coerce(value: str, like):
    """Coerce a config string to the type of an existing default value."""
    if isinstance(like, bool):
        return parse_bool(value)
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return parse_floats(value)
    return value


def apply_flat(obj, flat: dict, consumed: set) -> None:
    """Overwrite dataclass fields from flat keys of the same name.

    Keys actually applied are added to ``consumed`` so the caller can
    reject unknown leftovers at the end.
    """
    for name in vars(obj):
        if name in flat:
            setattr(obj, name, coerce(flat[name], getattr(obj, name)))
            consumed.add(name)

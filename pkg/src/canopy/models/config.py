"""Model configs as human-readable ``key = value`` text."""
import ast
import dataclasses


def config_to_text(cfg):
    lines = [f"kind = {type(cfg).__name__}"]
    for f in dataclasses.fields(cfg):
        lines.append(f"{f.name} = {getattr(cfg, f.name)!r}")
    return "\n".join(lines) + "\n"


def config_from_text(text, registry):
    values = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    kind = values.pop("kind")
    cls = registry[kind]
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return cls(**{k: ast.literal_eval(v) for k, v in values.items()})

"""Built-in character morphologies, stored as JSON documents."""

from importlib import resources

from ..physics import Character, config_from_json

BUILTIN = ("biped", "quadruped")


def load_builtin(name: str) -> Character:
    if name not in BUILTIN:
        raise ValueError(f"unknown builtin character {name!r}; have {BUILTIN}")
    text = resources.files(__package__).joinpath(f"{name}.json").read_text()
    return Character(config_from_json(text))


def load_file(path) -> Character:
    with open(path) as fh:
        return Character(config_from_json(fh.read()))

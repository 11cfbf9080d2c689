"""Paths to the data files shipped inside the package."""
from importlib.resources import files


def bundled_path(name: str) -> str:
    """Absolute path of a file under arquest/data, e.g. bundled_path("kb.json")."""
    return str(files("arquest").joinpath("data", name))

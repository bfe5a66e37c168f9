"""Bundled case files and scenario profile fixtures."""

from importlib import resources


def case_path(name: str) -> str:
    """Absolute path of a bundled data file, e.g. case_path('case30.m')."""
    path = resources.files(__package__).joinpath(name)
    if not path.is_file():
        raise FileNotFoundError(f"no bundled file named {name!r}")
    return str(path)
